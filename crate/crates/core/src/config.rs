//! Run configuration: `key = value` files with flag overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::Bucket;
use crate::error::{Error, Result};
use crate::filter::{Boundary, Normalize};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Preset, Variant};
use crate::tensor::Precision;
use crate::train::adam::AdamConfig;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "MISF_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub seed: u64,
    pub precision: Precision,
    pub filter_size: usize,
    pub normalize: Normalize,
    pub image_boundary: Boundary,
    pub feature_boundary: Boundary,
    pub adam: AdamConfig,
    /// `None` picks the preset's default.
    pub batch_size: Option<usize>,
    pub max_iters: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub masked_l1: bool,
    pub flip: bool,
    pub manifest: Option<PathBuf>,
    /// Fixture images used when no manifest is given.
    pub fixture_count: usize,
    pub bucket: Bucket,
    pub fx_weights: Option<PathBuf>,
    pub fx_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::MisfTiny,
            variant: Variant::Misf,
            seed: 0,
            precision: Precision::F32,
            filter_size: 3,
            normalize: Normalize::Softmax,
            image_boundary: Boundary::Replicate,
            feature_boundary: Boundary::ZeroPad,
            adam: AdamConfig::default(),
            batch_size: None,
            max_iters: 1000,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            masked_l1: false,
            flip: false,
            manifest: None,
            fixture_count: 16,
            bucket: Bucket::B0_20,
            fx_weights: None,
            fx_seed: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "variant",
    "seed",
    "precision",
    "filter_size",
    "normalize",
    "image_boundary",
    "feature_boundary",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "max_iters",
    "checkpoint_every",
    "lambda_l1",
    "lambda_gan",
    "lambda_perc",
    "lambda_style",
    "masked_l1",
    "flip",
    "manifest",
    "fixture_count",
    "bucket",
    "fx_weights",
    "fx_seed",
];

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.preset {
            Preset::Full256 => 16,
            Preset::MisfTiny => 4,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            preset: self.preset,
            variant: self.variant,
            filter_size: self.filter_size,
            normalize: self.normalize,
            image_boundary: self.image_boundary,
            feature_boundary: self.feature_boundary,
            seed: self.seed,
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let ctx = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            other => other,
        };
        match key.trim() {
            "preset" => self.preset = v.parse().map_err(ctx)?,
            "variant" => self.variant = v.parse().map_err(ctx)?,
            "seed" => self.seed = parse_num(key, v)?,
            "precision" => {
                self.precision = v
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected f32 or f64, got `{v}`")))?
            }
            "filter_size" => self.filter_size = parse_num(key, v)?,
            "normalize" => self.normalize = v.parse().map_err(ctx)?,
            "image_boundary" => self.image_boundary = v.parse().map_err(ctx)?,
            "feature_boundary" => self.feature_boundary = v.parse().map_err(ctx)?,
            "lr" => self.adam.lr = parse_num(key, v)?,
            "beta1" => self.adam.beta1 = parse_num(key, v)?,
            "beta2" => self.adam.beta2 = parse_num(key, v)?,
            "eps" => self.adam.eps = parse_num(key, v)?,
            "batch_size" => self.batch_size = Some(parse_num(key, v)?),
            "max_iters" => self.max_iters = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "lambda_l1" => self.weights.l1 = parse_num(key, v)?,
            "lambda_gan" => self.weights.gan = parse_num(key, v)?,
            "lambda_perc" => self.weights.perceptual = parse_num(key, v)?,
            "lambda_style" => self.weights.style = parse_num(key, v)?,
            "masked_l1" => self.masked_l1 = parse_bool(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "manifest" => self.manifest = opt_path(v),
            "fixture_count" => self.fixture_count = parse_num(key, v)?,
            "bucket" => self.bucket = v.parse().map_err(ctx)?,
            "fx_weights" => self.fx_weights = opt_path(v),
            "fx_seed" => self.fx_seed = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a config file body over the defaults. Relative paths are taken
    /// relative to `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k, v)?;
        }
        if let Some(base) = base {
            for p in [&mut c.manifest, &mut c.fx_weights].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Replace the seed with `MISF_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse `{v}` as a seed")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("lr: must be > 0, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("beta1/beta2: must lie in [0, 1)".into()));
        }
        if self.batch_size() == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if self.filter_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter_size: must be odd, got {}",
                self.filter_size
            )));
        }
        self.weights.validate()
    }

    /// Canonical resolved form, one `key = value` per line in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let vals: Vec<String> = vec![
            self.preset.to_string(),
            self.variant.to_string(),
            self.seed.to_string(),
            self.precision.to_string(),
            self.filter_size.to_string(),
            self.normalize.to_string(),
            self.image_boundary.to_string(),
            self.feature_boundary.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.batch_size().to_string(),
            self.max_iters.to_string(),
            self.checkpoint_every.to_string(),
            self.weights.l1.to_string(),
            self.weights.gan.to_string(),
            self.weights.perceptual.to_string(),
            self.weights.style.to_string(),
            self.masked_l1.to_string(),
            self.flip.to_string(),
            path(&self.manifest),
            self.fixture_count.to_string(),
            self.bucket.to_string(),
            path(&self.fx_weights),
            self.fx_seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
