//! Reconstruction, adversarial, perceptual and style losses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{expand_mask, ConvLayer, Discriminator, LayerSpec};
use crate::mtf;
use crate::ops::conv::Padding;
use crate::ops::layers::Activation;
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Weights of the four objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub gan: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            gan: 0.1,
            perceptual: 0.1,
            style: 250.0,
        }
    }
}

impl LossWeights {
    pub const L1_ONLY: LossWeights = LossWeights {
        l1: 1.0,
        gan: 0.0,
        perceptual: 0.0,
        style: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l1", self.l1),
            ("lambda_gan", self.gan),
            ("lambda_perc", self.perceptual),
            ("lambda_style", self.style),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub const FX_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Frozen strided conv stack whose activations feed perceptual and style terms.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    pub params: ParamStore<T>,
    layers: Vec<ConvLayer>,
    /// Stage indices (0-based) whose outputs are compared.
    pub taps: Vec<usize>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn specs() -> Vec<LayerSpec> {
        let mut inc = 3;
        FX_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = LayerSpec::conv(&format!("fx.s{}", i + 1), 3, inc, c)
                    .stride(2)
                    .pad(Padding::same(1))
                    .act(Activation::Relu);
                inc = c;
                s
            })
            .collect()
    }

    pub fn seeded(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let layers = Self::specs()
            .into_iter()
            .map(|s| ConvLayer::new(s, ParamGroup::Frozen, seed, &mut params))
            .collect();
        Self {
            params,
            layers,
            taps: (0..FX_CHANNELS.len()).collect(),
        }
    }

    /// Load weights from a directory holding `<name>.mtf` per parameter.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut fx = Self::seeded(0);
        let names: Vec<String> = fx.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = mtf::read_as::<T>(dir.join(format!("{name}.mtf")))?;
            fx.params.set_value(&name, t)?;
        }
        Ok(fx)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in self.params.iter() {
            mtf::write(dir.join(format!("{}.mtf", p.name)), &p.value)?;
        }
        Ok(())
    }

    /// Outputs of the tapped stages.
    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::new();
        let mut h = x;
        let last = self.taps.iter().copied().max().unwrap_or(0);
        for (i, l) in self.layers.iter().enumerate().take(last + 1) {
            h = l.forward(g, &self.params, h)?;
            if self.taps.contains(&i) {
                out.push(h);
            }
        }
        Ok(out)
    }
}

/// Mean absolute error, optionally over hole pixels only.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    match mask {
        None => g.mean(a),
        Some(m) => {
            let m = expand_mask(m, g.value(pred).channels());
            let count = m.sum().as_f64();
            let mv = g.constant(m);
            let masked = g.mul(a, mv)?;
            let total = g.sum(masked)?;
            g.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 })
        }
    }
}

/// Non-saturating generator loss `mean softplus(-D(fake))`.
pub fn generator_gan_loss<T: Scalar>(
    g: &mut Graph<T>,
    disc: &Discriminator,
    store: &ParamStore<T>,
    fake: Var,
) -> Result<Var> {
    let logits = disc.forward(g, store, fake)?;
    let neg = g.neg(logits)?;
    let sp = g.softplus(neg)?;
    g.mean(sp)
}

/// `mean softplus(-D(real)) + mean softplus(D(fake))`; `fake` is detached.
pub fn discriminator_loss<T: Scalar>(
    g: &mut Graph<T>,
    disc: &Discriminator,
    store: &ParamStore<T>,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let fake = g.detach(fake);
    let lr = disc.forward(g, store, real)?;
    let nr = g.neg(lr)?;
    let sr = g.softplus(nr)?;
    let mr = g.mean(sr)?;
    let lf = disc.forward(g, store, fake)?;
    let sf = g.softplus(lf)?;
    let mf = g.mean(sf)?;
    g.add(mr, mf)
}

/// `(generator, discriminator)` adversarial losses for one batch.
pub fn adversarial_losses<T: Scalar>(
    g: &mut Graph<T>,
    disc: &Discriminator,
    store: &ParamStore<T>,
    fake: Var,
    real: Var,
) -> Result<(Var, Var)> {
    let gen = generator_gan_loss(g, disc, store, fake)?;
    let d = discriminator_loss(g, disc, store, real, fake)?;
    Ok((gen, d))
}

fn target_features<T: Scalar>(g: &mut Graph<T>, fx: &FeatureExtractor<T>, target: Var) -> Result<Vec<Var>> {
    let t = g.detach(target);
    fx.features(g, t)
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Contract("feature extractor has no taps".into()))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// Sum over taps of `mean |fx_t(pred) - fx_t(target)|`.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, fx: &FeatureExtractor<T>) -> Result<Var> {
    let fp = fx.features(g, pred)?;
    let ft = target_features(g, fx, target)?;
    let terms = fp
        .into_iter()
        .zip(ft)
        .map(|(a, b)| {
            let d = g.sub(a, b)?;
            let d = g.abs(d)?;
            g.mean(d)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_terms(g, terms)
}

/// Sum over taps of `mean |Gram(fx_t(pred)) - Gram(fx_t(target))|`.
pub fn style_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, fx: &FeatureExtractor<T>) -> Result<Var> {
    let fp = fx.features(g, pred)?;
    let ft = target_features(g, fx, target)?;
    let terms = fp
        .into_iter()
        .zip(ft)
        .map(|(a, b)| {
            let ga = g.gram(a)?;
            let gb = g.gram(b)?;
            let d = g.sub(ga, gb)?;
            let d = g.abs(d)?;
            g.mean(d)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_terms(g, terms)
}

/// Per-term values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub gan: f64,
    pub perceptual: f64,
    pub style: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.gan, self.perceptual, self.style, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Loss inputs that stay fixed across terms.
pub struct LossContext<'a, T> {
    pub weights: LossWeights,
    pub disc: &'a Discriminator,
    pub disc_params: &'a ParamStore<T>,
    pub fx: &'a FeatureExtractor<T>,
    /// Restrict L1 to holes.
    pub l1_mask: Option<&'a Tensor<T>>,
}

/// Weighted sum of the four terms. Terms with weight zero are not built.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, ctx: &LossContext<'_, T>) -> Result<TotalLoss> {
    let w = ctx.weights;
    let mut bd = LossBreakdown::default();
    let mut parts = Vec::new();
    if w.l1 > 0.0 {
        let v = l1_loss(g, pred, target, ctx.l1_mask)?;
        bd.l1 = g.scalar(v).as_f64();
        parts.push(g.scale(v, w.l1)?);
    }
    if w.gan > 0.0 {
        let v = generator_gan_loss(g, ctx.disc, ctx.disc_params, pred)?;
        bd.gan = g.scalar(v).as_f64();
        parts.push(g.scale(v, w.gan)?);
    }
    if w.perceptual > 0.0 {
        let v = perceptual_loss(g, pred, target, ctx.fx)?;
        bd.perceptual = g.scalar(v).as_f64();
        parts.push(g.scale(v, w.perceptual)?);
    }
    if w.style > 0.0 {
        let v = style_loss(g, pred, target, ctx.fx)?;
        bd.style = g.scalar(v).as_f64();
        parts.push(g.scale(v, w.style)?);
    }
    let total = match parts.is_empty() {
        true => g.constant(Tensor::scalar(T::zero())),
        false => sum_terms(g, parts)?,
    };
    bd.total = g.scalar(total).as_f64();
    Ok(TotalLoss { total, breakdown: bd })
}
