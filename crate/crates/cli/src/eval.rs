use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use misf::data::{generate_mask, hole_ratio, load_image, load_mask, mask_seed, save_image, Bucket, MaskSpec};
use misf::metrics::{emit_report, MetricRow, ReportFormat};

use crate::error::{CliError, CliResult};
use crate::{EvalArgs, MaskGenArgs};

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

/// Image files of `dir` keyed by file stem.
fn images_by_stem(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?
            .path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let results = images_by_stem(&a.results)?;
    if results.is_empty() {
        return Err(CliError::io(format!("no images in {}", a.results.display())));
    }
    let gt = images_by_stem(&a.gt)?;
    let masks = images_by_stem(&a.masks)?;
    let mut rows = Vec::with_capacity(results.len());
    for (stem, path) in &results {
        let missing = |what: &str, dir: &Path| CliError::io(format!("no {what} for `{stem}` in {}", dir.display()));
        let truth = load_image::<f64>(gt.get(stem).ok_or_else(|| missing("ground truth", &a.gt))?)?;
        let mask = load_mask::<f64>(masks.get(stem).ok_or_else(|| missing("mask", &a.masks))?)?;
        let result = load_image::<f64>(path)?;
        if result.shape() != truth.shape() {
            return Err(CliError::config(format!(
                "`{stem}`: result and ground truth sizes differ"
            )));
        }
        let bucket = Bucket::classify(hole_ratio(&mask));
        rows.push(MetricRow::measure(stem, bucket, &a.variant, &result, &truth)?);
    }
    let format = if a.json { ReportFormat::Json } else { ReportFormat::Csv };
    let report = emit_report(rows, &a.out, format)?;
    for agg in &report.aggregates {
        println!("{agg:?}");
    }
    Ok(())
}

pub fn mask_gen(a: MaskGenArgs) -> CliResult {
    let bucket: Bucket = a.bucket.parse()?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;
    for i in 0..a.count {
        let spec = MaskSpec::new(bucket, mask_seed(a.seed, i));
        let mask = generate_mask::<f64>(&spec, a.size, a.size)?;
        save_image(&mask, 0, a.out.join(format!("mask_{i:04}.png")))?;
        println!("mask_{i:04}.png {:.4}", hole_ratio(&mask));
    }
    Ok(())
}
