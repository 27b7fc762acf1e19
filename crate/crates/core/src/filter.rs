//! Per-pixel predictive filtering.
//!
//! Every output element is a weighted sum over the `N x N` neighborhood of the
//! same location in the input:
//!
//! ```text
//! out[b, c, p] = sum_{q in N(p)} K[b, g(c), p][q - p] * x[b, c, q]
//! ```
//!
//! Kernels are stored in a [`KernelField`] whose data tensor has shape
//! `[B, G * N^2, H, W]`: channel `g * N^2 + t` holds tap `t` of group `g`,
//! with taps ordered row-major over the offsets `(dy, dx)` from
//! `(-r, -r)` to `(r, r)`, `r = (N - 1) / 2`. With `G == C` each channel has
//! its own kernel, with `G == 1` one kernel is shared by all channels.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Normalize {
    Softmax,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Boundary {
    ZeroPad,
    Replicate,
}

impl fmt::Display for Normalize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalize::Softmax => "softmax",
            Normalize::None => "none",
        })
    }
}

impl FromStr for Normalize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalize::Softmax),
            "none" => Ok(Normalize::None),
            _ => Err(Error::Config(format!("unknown kernel normalization `{s}`"))),
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::ZeroPad => "zero",
            Boundary::Replicate => "replicate",
        })
    }
}

impl FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "zero-pad" => Ok(Boundary::ZeroPad),
            "replicate" => Ok(Boundary::Replicate),
            _ => Err(Error::Config(format!("unknown boundary mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct FilterConfig {
    /// Odd kernel side.
    pub size: usize,
    pub groups: usize,
    pub normalize: Normalize,
    pub boundary: Boundary,
}

impl FilterConfig {
    pub fn new(size: usize, groups: usize, normalize: Normalize, boundary: Boundary) -> Result<Self> {
        let cfg = Self {
            size,
            groups,
            normalize,
            boundary,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "kernel size must be odd and >= 1, got {}",
                self.size
            )));
        }
        if self.groups == 0 {
            return Err(Error::Contract("kernel group count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.size * self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn channels(&self) -> usize {
        self.groups * self.taps()
    }

    fn offset(&self, tap: usize) -> (isize, isize) {
        let r = self.radius() as isize;
        ((tap / self.size) as isize - r, (tap % self.size) as isize - r)
    }

    /// Group used by channel `c` of a `channels`-wide input.
    fn group_of(&self, c: usize) -> usize {
        if self.groups == 1 {
            0
        } else {
            c
        }
    }
}

/// Per-location kernels for one filtering site.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T> {
    pub data: Tensor<T>,
    pub config: FilterConfig,
}

impl<T: Scalar> KernelField<T> {
    pub fn new(data: Tensor<T>, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        if data.channels() != config.channels() {
            return Err(Error::shape(
                "KernelField",
                format!("{} kernel channels", config.channels()),
                data.channels(),
            ));
        }
        Ok(Self { data, config })
    }

    /// Center tap 1, all other taps 0: the identity filter.
    pub fn delta(batch: usize, height: usize, width: usize, config: FilterConfig) -> Self {
        let taps = config.taps();
        let center = taps / 2;
        let data = Tensor::from_fn([batch, config.channels(), height, width], |[_, ch, _, _]| {
            if ch % taps == center {
                T::one()
            } else {
                T::zero()
            }
        });
        Self { data, config }
    }

    pub fn uniform(batch: usize, height: usize, width: usize, config: FilterConfig) -> Self {
        let v = T::one() / T::from_f64(config.taps() as f64);
        Self {
            data: Tensor::full([batch, config.channels(), height, width], v),
            config,
        }
    }

    /// Largest deviation of any tap sum from one.
    pub fn max_sum_error(&self) -> T {
        let [b, _, h, w] = self.data.shape();
        let taps = self.config.taps();
        let mut worst = T::zero();
        for bi in 0..b {
            for g in 0..self.config.groups {
                for y in 0..h {
                    for x in 0..w {
                        let sum: T = (0..taps).map(|t| self.data.at(bi, g * taps + t, y, x)).sum();
                        worst = worst.max((sum - T::one()).abs());
                    }
                }
            }
        }
        worst
    }
}

fn check_kernel_channels<T: Scalar>(raw: &Tensor<T>, config: &FilterConfig) -> Result<()> {
    config.validate()?;
    let taps = config.taps();
    if !raw.channels().is_multiple_of(taps) || raw.channels() / taps != config.groups {
        return Err(Error::shape(
            "normalize_kernels",
            format!("{} = {} groups x {} taps", config.channels(), config.groups, taps),
            raw.channels(),
        ));
    }
    Ok(())
}

/// Softmax across the `N^2` taps of each (batch, group, location), or a
/// pass-through when normalization is disabled.
pub fn normalize_kernels<T: Scalar>(raw: &Tensor<T>, config: FilterConfig) -> Result<KernelField<T>> {
    check_kernel_channels(raw, &config)?;
    let mut data = raw.clone();
    if config.normalize == Normalize::Softmax {
        let taps = config.taps();
        let plane = raw.height() * raw.width();
        let mut buf = vec![T::zero(); taps];
        for b in 0..raw.batch() {
            let item = data.item_mut(b);
            for g in 0..config.groups {
                let block = &mut item[g * taps * plane..(g + 1) * taps * plane];
                for p in 0..plane {
                    let mut max = T::neg_infinity();
                    for t in 0..taps {
                        buf[t] = block[t * plane + p];
                        max = max.max(buf[t]);
                    }
                    let mut sum = T::zero();
                    for v in buf.iter_mut() {
                        *v = (*v - max).exp();
                        sum = sum + *v;
                    }
                    for t in 0..taps {
                        block[t * plane + p] = buf[t] / sum;
                    }
                }
            }
        }
    }
    Ok(KernelField { data, config })
}

/// Gradient of `normalize_kernels` given its output.
pub fn normalize_kernels_backward<T: Scalar>(field: &KernelField<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    if field.config.normalize == Normalize::None {
        return grad_out.clone();
    }
    let taps = field.config.taps();
    let plane = grad_out.height() * grad_out.width();
    let mut dz = grad_out.clone();
    for b in 0..grad_out.batch() {
        let sitem = field.data.item(b);
        let ditem = dz.item_mut(b);
        for g in 0..field.config.groups {
            let off = g * taps * plane;
            for p in 0..plane {
                let mut dot = T::zero();
                for t in 0..taps {
                    let i = off + t * plane + p;
                    dot = dot + sitem[i] * ditem[i];
                }
                for t in 0..taps {
                    let i = off + t * plane + p;
                    ditem[i] = sitem[i] * (ditem[i] - dot);
                }
            }
        }
    }
    dz
}

const NO_SOURCE: usize = usize::MAX;

/// Source index along one axis for every output position, per boundary mode.
fn source_map(size: usize, delta: isize, boundary: Boundary) -> Vec<usize> {
    (0..size)
        .map(|i| {
            let j = i as isize + delta;
            if (0..size as isize).contains(&j) {
                j as usize
            } else {
                match boundary {
                    Boundary::ZeroPad => NO_SOURCE,
                    Boundary::Replicate => j.clamp(0, size as isize - 1) as usize,
                }
            }
        })
        .collect()
}

fn check_filter_shapes<T: Scalar>(op: &'static str, x: &Tensor<T>, k: &KernelField<T>) -> Result<()> {
    let [b, c, h, w] = x.shape();
    let [kb, kc, kh, kw] = k.data.shape();
    if (kb, kh, kw) != (b, h, w) {
        return Err(Error::shape(
            op,
            format!("kernels over {b}x_x{h}x{w}"),
            shape_str(k.data.shape()),
        ));
    }
    if k.config.groups != 1 && k.config.groups != c {
        return Err(Error::Contract(format!(
            "{op}: kernel groups must be 1 or {c}, got {}",
            k.config.groups
        )));
    }
    if kc != k.config.channels() {
        return Err(Error::shape(op, k.config.channels(), kc));
    }
    Ok(())
}

/// Tap offsets and precomputed row/column source maps.
struct TapMaps {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

impl TapMaps {
    fn new(config: &FilterConfig, h: usize, w: usize) -> Self {
        let taps = config.taps();
        let (mut rows, mut cols) = (Vec::with_capacity(taps), Vec::with_capacity(taps));
        for t in 0..taps {
            let (dy, dx) = config.offset(t);
            rows.push(source_map(h, dy, config.boundary));
            cols.push(source_map(w, dx, config.boundary));
        }
        Self { rows, cols }
    }
}

/// Apply per-pixel kernels to `x`.
pub fn pixel_filter<T: Scalar>(x: &Tensor<T>, k: &KernelField<T>) -> Result<Tensor<T>> {
    check_filter_shapes("pixel_filter", x, k)?;
    let [b, c, h, w] = x.shape();
    let cfg = &k.config;
    let taps = cfg.taps();
    let plane = h * w;
    let maps = TapMaps::new(cfg, h, w);
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        let xitem = x.item(bi);
        let kitem = k.data.item(bi);
        let oitem = out.item_mut(bi);
        for ci in 0..c {
            let g = cfg.group_of(ci);
            let xp = &xitem[ci * plane..(ci + 1) * plane];
            let op = &mut oitem[ci * plane..(ci + 1) * plane];
            for t in 0..taps {
                let kp = &kitem[(g * taps + t) * plane..(g * taps + t + 1) * plane];
                let (rmap, cmap) = (&maps.rows[t], &maps.cols[t]);
                for y in 0..h {
                    let sy = rmap[y];
                    if sy == NO_SOURCE {
                        continue;
                    }
                    let xrow = &xp[sy * w..(sy + 1) * w];
                    let krow = &kp[y * w..(y + 1) * w];
                    let orow = &mut op[y * w..(y + 1) * w];
                    for xx in 0..w {
                        let sx = cmap[xx];
                        if sx != NO_SOURCE {
                            orow[xx] = orow[xx] + krow[xx] * xrow[sx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `pixel_filter` with respect to the input and the kernels.
pub fn pixel_filter_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &KernelField<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_kernels: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    check_filter_shapes("pixel_filter_backward", x, k)?;
    grad_out.expect_shape("pixel_filter_backward", x.shape())?;
    let [b, c, h, w] = x.shape();
    let cfg = &k.config;
    let taps = cfg.taps();
    let plane = h * w;
    let maps = TapMaps::new(cfg, h, w);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dk = need_kernels.then(|| Tensor::zeros(k.data.shape()));
    for bi in 0..b {
        let xitem = x.item(bi);
        let kitem = k.data.item(bi);
        let gitem = grad_out.item(bi);
        for ci in 0..c {
            let g = cfg.group_of(ci);
            let xp = &xitem[ci * plane..(ci + 1) * plane];
            let gp = &gitem[ci * plane..(ci + 1) * plane];
            for t in 0..taps {
                let kidx = (g * taps + t) * plane;
                let kp = &kitem[kidx..kidx + plane];
                let (rmap, cmap) = (&maps.rows[t], &maps.cols[t]);
                for y in 0..h {
                    let sy = rmap[y];
                    if sy == NO_SOURCE {
                        continue;
                    }
                    let grow = &gp[y * w..(y + 1) * w];
                    if let Some(dx) = dx.as_mut() {
                        let krow = &kp[y * w..(y + 1) * w];
                        let dxrow = &mut dx.item_mut(bi)[ci * plane + sy * w..ci * plane + (sy + 1) * w];
                        for xx in 0..w {
                            let sx = cmap[xx];
                            if sx != NO_SOURCE {
                                dxrow[sx] = dxrow[sx] + krow[xx] * grow[xx];
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let xrow = &xp[sy * w..(sy + 1) * w];
                        let dkrow = &mut dk.item_mut(bi)[kidx + y * w..kidx + (y + 1) * w];
                        for xx in 0..w {
                            let sx = cmap[xx];
                            if sx != NO_SOURCE {
                                dkrow[xx] = dkrow[xx] + grow[xx] * xrow[sx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

/// Semantic filtering on a deep feature map with per-channel kernels.
pub fn feature_filter<T: Scalar>(features: &Tensor<T>, k3: &KernelField<T>) -> Result<Tensor<T>> {
    if k3.config.groups != features.channels() {
        return Err(Error::Contract(format!(
            "feature_filter needs one kernel group per channel ({}), got {}",
            features.channels(),
            k3.config.groups
        )));
    }
    pixel_filter(features, k3)
}
