use std::path::Path;

use misf::data::{corrupt, load_image, load_mask, save_image};
use misf::metrics::{feature_similarity, FeatureSite};
use misf::model::{hole_accuracy, recurrent_filter};
use misf::mtf;
use misf::train::{load_model, CheckpointManifest};
use misf::{ForwardOptions, Graph, KernelMode, MisfModel, Precision, Scalar, Tensor};

use crate::error::{CliError, CliResult};
use crate::{FeatureSimArgs, InpaintArgs, RecurrentArgs};

fn precision(checkpoint: &Path) -> CliResult<Precision> {
    Ok(CheckpointManifest::load(checkpoint)?.precision)
}

fn mkdir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

/// Image and mask with matching sizes; the mask must fit the model.
fn inputs<T: Scalar>(image: &Path, mask: &Path) -> CliResult<(Tensor<T>, Tensor<T>)> {
    let img = load_image::<T>(image)?;
    let m = load_mask::<T>(mask)?;
    if img.height() != m.height() || img.width() != m.width() {
        return Err(CliError::config(format!(
            "image is {}x{}, mask is {}x{}",
            img.width(),
            img.height(),
            m.width(),
            m.height()
        )));
    }
    Ok((img, m))
}

/// File name for a trace entry.
fn dump_name(name: &str) -> String {
    name.replace('\'', "p").replace('^', "hat")
}

fn inpaint_with<T: Scalar>(a: &InpaintArgs) -> CliResult {
    let model: MisfModel<T> = load_model(&a.checkpoint)?;
    let (img, mask) = inputs::<T>(&a.image, &a.mask)?;
    let input = corrupt(&img, &mask)?;
    let mut g = Graph::inference();
    let x = g.constant(input);
    let m = g.constant(mask);
    let out = model.forward(&mut g, x, m, &ForwardOptions::default())?;
    save_image(g.value(out.composite), 0, &a.out)?;
    if let Some(dir) = &a.dump_kernels {
        mkdir(dir)?;
        for name in ["K3", "K"] {
            if let Some(v) = out.trace.get(name) {
                mtf::write(dir.join(format!("{name}.mtf")), g.value(v))?;
            }
        }
    }
    if let Some(dir) = &a.dump_features {
        mkdir(dir)?;
        for (name, v) in out.trace.iter().filter(|(n, _)| !matches!(*n, "K" | "K3")) {
            mtf::write(dir.join(format!("{}.mtf", dump_name(name))), g.value(v))?;
        }
    }
    Ok(())
}

pub fn inpaint(a: InpaintArgs) -> CliResult {
    match precision(&a.checkpoint)? {
        Precision::F32 => inpaint_with::<f32>(&a),
        Precision::F64 => inpaint_with::<f64>(&a),
    }
}

fn feature_sim_with<T: Scalar>(a: &FeatureSimArgs) -> CliResult {
    let model: MisfModel<T> = load_model(&a.checkpoint)?;
    let (clean, mask) = inputs::<T>(&a.image, &a.mask)?;
    let corrupted = corrupt(&clean, &mask)?;
    let pre = feature_similarity(&model, &corrupted, &clean, &mask, FeatureSite::PreFilter)?;
    let post = feature_similarity(&model, &corrupted, &clean, &mask, FeatureSite::PostFilter)?;
    if a.json {
        println!("{}", serde_json::json!({ "pre": pre, "post": post }));
    } else {
        println!("pre  {pre:.6}\npost {post:.6}");
    }
    Ok(())
}

pub fn feature_sim(a: FeatureSimArgs) -> CliResult {
    match precision(&a.checkpoint)? {
        Precision::F32 => feature_sim_with::<f32>(&a),
        Precision::F64 => feature_sim_with::<f64>(&a),
    }
}

fn recurrent_with<T: Scalar>(a: &RecurrentArgs) -> CliResult {
    let model: MisfModel<T> = load_model(&a.checkpoint)?;
    let (clean, mask) = inputs::<T>(&a.image, &a.mask)?;
    let corrupted = corrupt(&clean, &mask)?;
    let opts = ForwardOptions {
        kernels: if a.delta {
            KernelMode::Delta
        } else {
            KernelMode::Predicted
        },
        ..ForwardOptions::default()
    };
    let trace = recurrent_filter(&model, &corrupted, &mask, a.iters, &opts)?;
    mkdir(&a.out)?;
    let mut csv = String::from("frame,fill_front,hole_accuracy\n");
    for (t, frame) in trace.frames.iter().enumerate() {
        save_image(frame, 0, a.out.join(format!("frame_{t:03}.png")))?;
        let acc = hole_accuracy(frame, &clean, &mask, 0.1);
        csv.push_str(&format!("{t},{},{acc}\n", trace.fill[t]));
    }
    let path = a.out.join("fill.csv");
    std::fs::write(&path, csv).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn demo_recurrent(a: RecurrentArgs) -> CliResult {
    match precision(&a.checkpoint)? {
        Precision::F32 => recurrent_with::<f32>(&a),
        Precision::F64 => recurrent_with::<f64>(&a),
    }
}
