use std::path::Path;

use misf::config::RunConfig;
use misf::data::{Dataset, Manifest, Split};
use misf::train::{MetricsLog, Trainer};
use misf::{Precision, Preset, Scalar};

use crate::error::{CliError, CliResult};
use crate::TrainArgs;

/// Config file, then `MISF_SEED`, then flags.
pub fn resolve_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.apply_env()?;
    let mut set = |k: &str, v: Option<String>| -> CliResult {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
        Ok(())
    };
    set("preset", a.preset.clone())?;
    set("variant", a.variant.clone())?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("max_iters", a.iters.map(|v| v.to_string()))?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("precision", a.precision.clone())?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    if a.masked_l1 {
        c.masked_l1 = true;
    }
    if let Some(p) = &a.manifest {
        c.manifest = Some(p.clone());
    }
    if let Some(p) = &a.fx_weights {
        c.fx_weights = Some(p.clone());
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn dataset<T: Scalar>(c: &RunConfig) -> CliResult<Dataset<T>> {
    Ok(match &c.manifest {
        Some(p) => Dataset::from_manifest(&Manifest::load(p)?, Split::Train)?,
        None => {
            let size = match c.preset {
                Preset::MisfTiny => 64,
                Preset::Full256 => 256,
            };
            Dataset::fixtures(0..c.fixture_count, size, c.bucket, c.seed)?
        }
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn train_with<T: Scalar>(a: &TrainArgs, c: RunConfig) -> CliResult {
    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let data = dataset::<T>(&c)?;
    let until = c.max_iters;
    let every = c.checkpoint_every;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let (t, report) = Trainer::resume(c, data, dir)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("resumed at step {}", report.step);
            t
        }
        None => Trainer::new(c, data)?,
    };
    trainer.dump_dir = Some(out.join("dump"));
    let mut log = MetricsLog::open(out.join("metrics.csv"), a.resume.is_some())?;
    let quiet = a.quiet;
    let result = trainer.run(until, |t, m| {
        log.push(m)?;
        if !quiet && (m.iter % 50 == 0 || m.iter == until) {
            eprintln!(
                "iter {:>6}  total {:.5}  l1 {:.5}  psnr {:.2}",
                m.iter, m.losses.total, m.losses.l1, m.psnr_train
            );
        }
        if every > 0 && m.iter % every == 0 && m.iter != until {
            t.save_checkpoint(out.join(format!("checkpoint-{:06}", m.iter)))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        return Err(e.into());
    }
    trainer.save_checkpoint(out.join("checkpoint"))?;
    eprintln!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

pub fn run(a: TrainArgs) -> CliResult {
    let c = resolve_config(&a)?;
    eprint!("{}", c.to_text());
    eprintln!("config_hash = {}", c.hash());
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(format!("{}: {e}", a.out.display())))?;
    write_text(&a.out.join("config.txt"), &c.to_text())?;
    match c.precision {
        Precision::F32 => train_with::<f32>(&a, c),
        Precision::F64 => train_with::<f64>(&a, c),
    }
}
