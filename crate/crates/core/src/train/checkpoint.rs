//! Checkpoint directories.
//!
//! ```text
//! manifest.txt          header keys, then `param <name> <shape> <group>` lines
//! config.txt            resolved run config
//! <name>.mtf            parameter values
//! adam.m.<name>.mtf     first moments
//! adam.v.<name>.mtf     second moments
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{AdamState, Trainer};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{MisfModel, ModelConfig};
use crate::mtf;
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{shape_str, Precision, Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub precision: Precision,
    pub config_hash: String,
    pub step: usize,
    pub adam_t_gen: u64,
    pub adam_t_disc: u64,
    /// `(name, shape, group)` in store order.
    pub params: Vec<(String, [usize; 4], ParamGroup)>,
}

fn parse_shape(s: &str) -> Option<[usize; 4]> {
    let dims: Vec<usize> = s.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
    dims.try_into().ok()
}

impl CheckpointManifest {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        for (k, v) in [
            ("variant", m.variant.to_string()),
            ("preset", m.preset.to_string()),
            ("filter_size", m.filter_size.to_string()),
            ("normalize", m.normalize.to_string()),
            ("image_boundary", m.image_boundary.to_string()),
            ("feature_boundary", m.feature_boundary.to_string()),
            ("seed", m.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("config_hash", self.config_hash.clone()),
            ("step", self.step.to_string()),
            ("adam_t_gen", self.adam_t_gen.to_string()),
            ("adam_t_disc", self.adam_t_disc.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (name, shape, group) in &self.params {
            let _ = writeln!(out, "param {name} {} {}", shape_str(*shape), group.as_str());
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |r: String| Error::format(path, r);
        let mut cfg = RunConfig::default();
        let mut precision = Precision::F32;
        let (mut hash, mut step, mut tg, mut td) = (String::new(), 0, 0, 0);
        let mut params = Vec::new();
        for (n, line) in text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())) {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("param ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let (name, shape, group) = match f.as_slice() {
                    [name, shape, group] => (name, shape, group),
                    _ => return Err(bad(format!("line {n}: expected `param <name> <shape> <group>`"))),
                };
                let shape = parse_shape(shape).ok_or_else(|| bad(format!("line {n}: bad shape `{shape}`")))?;
                let group = ParamGroup::parse(group).ok_or_else(|| bad(format!("line {n}: bad group `{group}`")))?;
                params.push((name.to_string(), shape, group));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("line {n}: expected `key = value`")))?;
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| bad(format!("line {n}: {k}: bad number `{v}`")))
            };
            match k {
                "variant" | "preset" | "filter_size" | "normalize" | "image_boundary" | "feature_boundary" | "seed" => {
                    cfg.set(k, v).map_err(|e| bad(e.to_string()))?
                }
                "precision" => precision = v.parse().map_err(|e: Error| bad(e.to_string()))?,
                "config_hash" => hash = v.to_string(),
                "step" => step = num(v)? as usize,
                "adam_t_gen" => tg = num(v)?,
                "adam_t_disc" => td = num(v)?,
                _ => return Err(bad(format!("line {n}: unknown key `{k}`"))),
            }
        }
        Ok(Self {
            model: cfg.model_config(),
            precision,
            config_hash: hash,
            step,
            adam_t_gen: tg,
            adam_t_disc: td,
            params,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

/// Read a tensor, naming the parameter on any failure.
fn read_param<T: Scalar>(path: &Path, name: &str, shape: [usize; 4]) -> Result<Tensor<T>> {
    let t = mtf::read_as::<T>(path).map_err(|e| match e {
        Error::Io { source, .. } => Error::Parameter {
            name: name.into(),
            reason: format!("cannot read {}: {source}", path.display()),
        },
        other => Error::Parameter {
            name: name.into(),
            reason: other.to_string(),
        },
    })?;
    if t.shape() != shape {
        return Err(Error::Parameter {
            name: name.into(),
            reason: format!(
                "{} has shape {}, expected {}",
                path.display(),
                shape_str(t.shape()),
                shape_str(shape)
            ),
        });
    }
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter {
            name: name.into(),
            reason: format!("{} contains non-finite values", path.display()),
        });
    }
    Ok(t)
}

fn check_layout<T: Scalar>(manifest: &CheckpointManifest, store: &ParamStore<T>) -> Result<()> {
    for p in store.iter() {
        match manifest.params.iter().find(|(n, ..)| *n == p.name) {
            None => {
                return Err(Error::Parameter {
                    name: p.name.clone(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some((_, shape, _)) if *shape != p.value.shape() => {
                return Err(Error::Parameter {
                    name: p.name.clone(),
                    reason: format!(
                        "checkpoint shape {} does not match architecture {}",
                        shape_str(*shape),
                        shape_str(p.value.shape())
                    ),
                })
            }
            _ => {}
        }
    }
    if let Some((name, ..)) = manifest.params.iter().find(|(n, ..)| store.id(n).is_none()) {
        return Err(Error::Parameter {
            name: name.clone(),
            reason: "not part of the architecture".into(),
        });
    }
    Ok(())
}

fn load_values<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let names: Vec<(String, [usize; 4])> = store.iter().map(|p| (p.name.clone(), p.value.shape())).collect();
    for (name, shape) in names {
        let t = read_param(&dir.join(format!("{name}.mtf")), &name, shape)?;
        store.set_value(&name, t)?;
    }
    Ok(())
}

/// Rebuild a model from a checkpoint directory for inference.
pub fn load_model<T: Scalar>(dir: impl AsRef<Path>) -> Result<MisfModel<T>> {
    let dir = dir.as_ref();
    let manifest = CheckpointManifest::load(dir)?;
    let mut model = MisfModel::new(manifest.model)?;
    check_layout(&manifest, &model.params)?;
    load_values(dir, &mut model.params)?;
    Ok(model)
}

fn save_moments<T: Scalar>(dir: &Path, st: &AdamState<T>) -> Result<()> {
    for (i, name) in st.names.iter().enumerate() {
        mtf::write(dir.join(format!("adam.m.{name}.mtf")), &st.m[i])?;
        mtf::write(dir.join(format!("adam.v.{name}.mtf")), &st.v[i])?;
    }
    Ok(())
}

fn load_moments<T: Scalar>(dir: &Path, st: &mut AdamState<T>, t: u64) -> Result<()> {
    for (i, name) in st.names.iter().enumerate() {
        let shape = st.m[i].shape();
        st.m[i] = read_param(&dir.join(format!("adam.m.{name}.mtf")), name, shape)?;
        st.v[i] = read_param(&dir.join(format!("adam.v.{name}.mtf")), name, shape)?;
    }
    st.t = t;
    Ok(())
}

/// Outcome of a resume.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadReport {
    pub step: usize,
    pub warnings: Vec<String>,
}

impl<T: Scalar> Trainer<T> {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            model: self.model.config,
            precision: T::PRECISION,
            config_hash: self.config.hash(),
            step: self.step,
            adam_t_gen: self.gen_opt.t,
            adam_t_disc: self.disc_opt.t,
            params: self
                .model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.shape(), p.group))
                .collect(),
        }
    }

    /// Write parameters, optimizer moments and step counter to `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in self.model.params.iter() {
            mtf::write(dir.join(format!("{}.mtf", p.name)), &p.value)?;
        }
        save_moments(dir, &self.gen_opt)?;
        save_moments(dir, &self.disc_opt)?;
        let cfg = dir.join(CONFIG_FILE);
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))?;
        // Manifest last: a directory without one is an incomplete save.
        let man = dir.join(MANIFEST_FILE);
        std::fs::write(&man, self.manifest().to_text()).map_err(|e| Error::io(&man, e))
    }

    /// Restore parameters, moments and step from `dir` into this trainer.
    pub fn load_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<LoadReport> {
        let dir = dir.as_ref();
        let manifest = CheckpointManifest::load(dir)?;
        let mut warnings = Vec::new();
        if manifest.model != self.model.config {
            let ours = self.model.config;
            if manifest.model.variant != ours.variant || manifest.model.preset != ours.preset {
                return Err(Error::Config(format!(
                    "checkpoint is {} / {}, run is {} / {}",
                    manifest.model.variant, manifest.model.preset, ours.variant, ours.preset
                )));
            }
            warnings.push("checkpoint model settings differ from the run config".into());
        }
        if manifest.config_hash != self.config.hash() {
            warnings.push(format!(
                "config hash {} differs from checkpoint {}",
                self.config.hash(),
                manifest.config_hash
            ));
        }
        if manifest.precision != T::PRECISION {
            warnings.push(format!(
                "checkpoint precision {} converted to {}",
                manifest.precision,
                T::PRECISION
            ));
        }
        check_layout(&manifest, &self.model.params)?;
        let mut params = self.model.params.clone();
        load_values(dir, &mut params)?;
        let mut gen = self.gen_opt.clone();
        let mut disc = self.disc_opt.clone();
        load_moments(dir, &mut gen, manifest.adam_t_gen)?;
        load_moments(dir, &mut disc, manifest.adam_t_disc)?;
        self.model.params = params;
        self.gen_opt = gen;
        self.disc_opt = disc;
        self.step = manifest.step;
        Ok(LoadReport {
            step: manifest.step,
            warnings,
        })
    }

    /// Build a trainer and restore it from `dir`.
    pub fn resume(config: RunConfig, data: Dataset<T>, dir: impl AsRef<Path>) -> Result<(Self, LoadReport)> {
        let mut t = Self::new(config, data)?;
        let report = t.load_checkpoint(dir)?;
        Ok((t, report))
    }
}

/// Run config stored alongside a checkpoint.
pub fn checkpoint_config(dir: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::load(dir.as_ref().join(CONFIG_FILE))
}
