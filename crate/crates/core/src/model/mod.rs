//! The two-branch filtering network and its ablation variants.
//!
//! The filtering branch (SIFB) is an encoder, a stack of 1x1 middle blocks
//! and a decoder. Its layer-3 features are filtered with kernels `K3` and its
//! decoded image with kernels `K`, both predicted per pixel by the kernel
//! prediction branch (KPB), which reads the raw image and the pooled SIFB
//! features.

mod discriminator;
pub mod layers;
mod recurrent;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use discriminator::Discriminator;
pub use layers::{ConvLayer, LayerKind, LayerSpec};
pub use recurrent::{fill_front, hole_accuracy, recurrent_filter, RecurrentTrace};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::filter::{Boundary, FilterConfig, KernelField, Normalize};
use crate::ops::conv::Padding;
use crate::ops::layers::Activation;
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Kernel prediction only; the input image is filtered directly.
    ImgFilter,
    /// Encoder-decoder with feature-level filtering only.
    SemFilter,
    /// Feature-level and image-level filtering with interacting branches.
    Misf,
    /// Plain encoder-decoder.
    EnDecoder,
    /// Encoder-decoder followed by image-level filtering.
    EnDecoderFilter,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ImgFilter,
        Variant::SemFilter,
        Variant::Misf,
        Variant::EnDecoder,
        Variant::EnDecoderFilter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ImgFilter => "img-filter",
            Variant::SemFilter => "sem-filter",
            Variant::Misf => "misf",
            Variant::EnDecoder => "en-decoder",
            Variant::EnDecoderFilter => "en-decoder-filter",
        }
    }

    pub fn uses_sifb(self) -> bool {
        self != Variant::ImgFilter
    }

    pub fn uses_kpb(self) -> bool {
        self != Variant::EnDecoder
    }

    pub fn feature_filter(self) -> bool {
        matches!(self, Variant::Misf | Variant::SemFilter)
    }

    pub fn image_filter(self) -> bool {
        matches!(self, Variant::Misf | Variant::ImgFilter | Variant::EnDecoderFilter)
    }

    /// The KPB reads SIFB features.
    pub fn interactive(self) -> bool {
        self.uses_sifb() && self.uses_kpb()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    Full256,
    MisfTiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Full256 => "full-256",
            Preset::MisfTiny => "misf-tiny",
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            Preset::Full256 => 256,
            Preset::MisfTiny => 64,
        }
    }

    /// Encoder widths after layers 1, 2 and 3.
    pub fn channels(self) -> [usize; 3] {
        match self {
            Preset::Full256 => [64, 128, 256],
            Preset::MisfTiny => [16, 32, 64],
        }
    }

    pub fn middle_blocks(self) -> usize {
        match self {
            Preset::Full256 => 8,
            Preset::MisfTiny => 2,
        }
    }

    pub fn disc_channels(self) -> [usize; 4] {
        match self {
            Preset::Full256 => [64, 128, 256, 512],
            Preset::MisfTiny => [16, 32, 64, 128],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full-256" | "full256" | "full" => Ok(Preset::Full256),
            "misf-tiny" | "tiny" => Ok(Preset::MisfTiny),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub filter_size: usize,
    pub normalize: Normalize,
    pub image_boundary: Boundary,
    pub feature_boundary: Boundary,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(preset: Preset, variant: Variant) -> Self {
        Self {
            preset,
            variant,
            filter_size: 3,
            normalize: Normalize::Softmax,
            image_boundary: Boundary::Replicate,
            feature_boundary: Boundary::ZeroPad,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn image_filter(&self) -> Result<FilterConfig> {
        FilterConfig::new(self.filter_size, IMAGE_CHANNELS, self.normalize, self.image_boundary)
    }

    pub fn feature_filter(&self) -> Result<FilterConfig> {
        FilterConfig::new(
            self.filter_size,
            self.preset.channels()[2],
            self.normalize,
            self.feature_boundary,
        )
    }

    /// Every generator layer of the variant, in forward order.
    pub fn generator_specs(&self) -> Vec<LayerSpec> {
        let v = self.variant;
        let mut specs = Vec::new();
        if v.uses_sifb() {
            specs.extend(self.sifb_specs());
        }
        if v.uses_kpb() {
            specs.extend(self.kpb_specs());
        }
        specs
    }

    fn sifb_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.preset.channels();
        let v = self.variant;
        let mut s = encoder_specs("sifb", c1, c2, c2, c3);
        if v.feature_filter() {
            s.push(LayerSpec::filter_site("sifb.filter3", c3, self.filter_size));
        }
        s.extend(middle_specs("sifb", c3, self.preset.middle_blocks()));
        s.extend(decoder_specs("sifb", c3, c2, c1));
        s.push(
            LayerSpec::conv("sifb.out", 7, c1, IMAGE_CHANNELS)
                .pad(Padding::same(3))
                .act(Activation::Tanh),
        );
        if v.image_filter() {
            s.push(LayerSpec::filter_site(
                "sifb.filter_img",
                IMAGE_CHANNELS,
                self.filter_size,
            ));
        }
        s
    }

    fn kpb_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3] = self.preset.channels();
        let v = self.variant;
        let taps = self.filter_size * self.filter_size;
        let e3_in = if v.interactive() { 2 * c2 } else { c2 };
        let mut s = encoder_specs("kpb", c1, c2, e3_in, c3);
        if v.feature_filter() {
            s.push(LayerSpec::conv("kpb.k3", 1, c3, c3 * taps));
        }
        if v.image_filter() {
            s.extend(middle_specs("kpb", c3, self.preset.middle_blocks()));
            s.extend(decoder_specs("kpb", c3, c2, c1));
            s.push(LayerSpec::conv("kpb.k", 7, c1, IMAGE_CHANNELS * taps).pad(Padding::same(3)));
        }
        s
    }

    pub fn disc_specs(&self) -> Vec<LayerSpec> {
        let [d1, d2, d3, d4] = self.preset.disc_channels();
        let chans = [IMAGE_CHANNELS, d1, d2, d3, d4, 1];
        (0..5)
            .map(|i| {
                let s = LayerSpec::conv(&format!("disc.c{}", i + 1), 4, chans[i], chans[i + 1])
                    .stride(2)
                    .pad(Padding::same(1));
                if i < 4 {
                    s.act(Activation::LEAKY)
                } else {
                    s
                }
            })
            .collect()
    }

    pub fn generator_param_count(&self) -> usize {
        self.generator_specs().iter().map(LayerSpec::param_count).sum()
    }

    pub fn disc_param_count(&self) -> usize {
        self.disc_specs().iter().map(LayerSpec::param_count).sum()
    }
}

fn encoder_specs(branch: &str, c1: usize, c2: usize, e3_in: usize, c3: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(&format!("{branch}.enc1"), 7, IMAGE_CHANNELS, c1)
            .pad(Padding::same(3))
            .act(Activation::Relu),
        LayerSpec::conv(&format!("{branch}.enc2"), 4, c1, c2)
            .stride(2)
            .pad(Padding::same(1))
            .norm()
            .act(Activation::Relu),
        LayerSpec::avg_pool(&format!("{branch}.pool"), c2),
        LayerSpec::conv(&format!("{branch}.enc3"), 4, e3_in, c3)
            .pad(Padding::new(1, 1, 2, 2))
            .norm()
            .act(Activation::Relu),
    ]
}

fn middle_specs(branch: &str, c3: usize, n: usize) -> Vec<LayerSpec> {
    (0..n)
        .map(|i| LayerSpec::middle(&format!("{branch}.mid{}", i + 1), c3))
        .collect()
}

fn decoder_specs(branch: &str, c3: usize, c2: usize, c1: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::convt(&format!("{branch}.dec1"), 4, c3, c2)
            .stride(2)
            .pad(Padding::same(1))
            .norm()
            .act(Activation::Relu),
        LayerSpec::convt(&format!("{branch}.dec2"), 4, c2, c1)
            .stride(2)
            .pad(Padding::same(1))
            .norm()
            .act(Activation::Relu),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    #[default]
    Predicted,
    /// Every active filter site uses identity kernels.
    Delta,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub kernels: KernelMode,
    /// Run a different wiring over the same parameters.
    pub variant: Option<Variant>,
}

/// Named tensors recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    entries: Vec<(&'static str, Var)>,
}

impl Trace {
    fn push(&mut self, name: &'static str, v: Var) -> Var {
        self.entries.push((name, v));
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        self.entries.iter().copied()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Network prediction clamped to [0, 1].
    pub prediction: Var,
    /// Prediction in holes, input elsewhere.
    pub composite: Var,
    pub trace: Trace,
}

#[derive(Debug, Clone)]
struct EncoderLayers {
    enc1: ConvLayer,
    enc2: ConvLayer,
    enc3: ConvLayer,
}

#[derive(Debug, Clone)]
struct DecoderLayers {
    middle: Vec<ConvLayer>,
    dec1: ConvLayer,
    dec2: ConvLayer,
    out: ConvLayer,
}

#[derive(Debug, Clone)]
struct Sifb {
    enc: EncoderLayers,
    dec: DecoderLayers,
}

#[derive(Debug, Clone)]
struct Kpb {
    enc: EncoderLayers,
    k3_head: Option<ConvLayer>,
    image_head: Option<DecoderLayers>,
}

pub struct SifbFeatures {
    pub f1: Var,
    pub f2: Var,
    pub f2p: Var,
    pub f3: Var,
}

pub struct KpbOutput {
    pub k3: Option<Var>,
    pub k: Option<Var>,
}

/// Generator and discriminator parameters with the layer wiring.
#[derive(Debug, Clone)]
pub struct MisfModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    sifb: Option<Sifb>,
    kpb: Option<Kpb>,
    pub disc: Discriminator,
}

fn build_layers<T: Scalar>(
    specs: &[LayerSpec],
    group: ParamGroup,
    seed: u64,
    store: &mut ParamStore<T>,
) -> Vec<(String, ConvLayer)> {
    specs
        .iter()
        .filter(|s| s.has_params())
        .map(|s| (s.name.clone(), ConvLayer::new(s.clone(), group, seed, store)))
        .collect()
}

struct LayerBag(Vec<(String, ConvLayer)>);

impl LayerBag {
    fn take(&mut self, name: &str) -> Option<ConvLayer> {
        let i = self.0.iter().position(|(n, _)| n == name)?;
        Some(self.0.remove(i).1)
    }

    fn need(&mut self, name: &str) -> ConvLayer {
        self.take(name)
            .unwrap_or_else(|| panic!("layer {name} missing from specs"))
    }

    fn encoder(&mut self, branch: &str) -> EncoderLayers {
        EncoderLayers {
            enc1: self.need(&format!("{branch}.enc1")),
            enc2: self.need(&format!("{branch}.enc2")),
            enc3: self.need(&format!("{branch}.enc3")),
        }
    }

    fn decoder(&mut self, branch: &str, out: &str) -> DecoderLayers {
        let mut middle = Vec::new();
        while let Some(l) = self.take(&format!("{branch}.mid{}", middle.len() + 1)) {
            middle.push(l);
        }
        DecoderLayers {
            middle,
            dec1: self.need(&format!("{branch}.dec1")),
            dec2: self.need(&format!("{branch}.dec2")),
            out: self.need(out),
        }
    }
}

impl<T: Scalar> MisfModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.image_filter()?;
        config.feature_filter()?;
        let mut params = ParamStore::new();
        let v = config.variant;
        let sifb = v.uses_sifb().then(|| {
            let mut bag = LayerBag(build_layers(
                &config.sifb_specs(),
                ParamGroup::Sifb,
                config.seed,
                &mut params,
            ));
            Sifb {
                enc: bag.encoder("sifb"),
                dec: bag.decoder("sifb", "sifb.out"),
            }
        });
        let kpb = v.uses_kpb().then(|| {
            let mut bag = LayerBag(build_layers(
                &config.kpb_specs(),
                ParamGroup::Kpb,
                config.seed,
                &mut params,
            ));
            Kpb {
                enc: bag.encoder("kpb"),
                k3_head: bag.take("kpb.k3"),
                image_head: v.image_filter().then(|| bag.decoder("kpb", "kpb.k")),
            }
        });
        let disc = Discriminator::new(&config.disc_specs(), config.seed, &mut params);
        Ok(Self {
            config,
            params,
            sifb,
            kpb,
            disc,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self, group: Option<ParamGroup>) -> usize {
        self.params.count(group)
    }

    /// Encoder of the filtering branch: `F1, F2, F2', F3`.
    pub fn sifb_encode(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        trace: &mut Trace,
    ) -> Result<SifbFeatures> {
        let sifb = self
            .sifb
            .as_ref()
            .ok_or_else(|| missing(self.variant(), "filtering branch"))?;
        let f1 = trace.push("F1", sifb.enc.enc1.forward(g, store, image)?);
        let f2 = trace.push("F2", sifb.enc.enc2.forward(g, store, f1)?);
        let f2p = trace.push("F2'", g.avg_pool2d(f2)?);
        let f3 = trace.push("F3", sifb.enc.enc3.forward(g, store, f2p)?);
        Ok(SifbFeatures { f1, f2, f2p, f3 })
    }

    /// Kernel fields from the raw image and, when interactive, SIFB's `F2'`.
    pub fn kpb_forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        f2p: Option<Var>,
        trace: &mut Trace,
    ) -> Result<KpbOutput> {
        let kpb = self
            .kpb
            .as_ref()
            .ok_or_else(|| missing(self.variant(), "kernel branch"))?;
        let expected_in = kpb.enc.enc3.spec.in_ch;
        let e1 = trace.push("E1", kpb.enc.enc1.forward(g, store, image)?);
        let e2 = trace.push("E2", kpb.enc.enc2.forward(g, store, e1)?);
        let e2p = trace.push("E2'", g.avg_pool2d(e2)?);
        let e3_in = match f2p {
            Some(f) => g.concat_channels(f, e2p)?,
            None => e2p,
        };
        if g.value(e3_in).channels() != expected_in {
            return Err(Error::shape(
                "kpb_forward",
                format!("{expected_in} channels into E3"),
                g.value(e3_in).channels(),
            ));
        }
        let e3 = trace.push("E3", kpb.enc.enc3.forward(g, store, e3_in)?);
        let k3 = match &kpb.k3_head {
            Some(head) => {
                let raw = head.forward(g, store, e3)?;
                Some(trace.push("K3", g.normalize_kernels(raw, self.config.feature_filter()?)?))
            }
            None => None,
        };
        let k = match &kpb.image_head {
            Some(head) => {
                let e4 = trace.push("E4", self.middle_blocks_with(g, store, &head.middle, e3)?);
                let e5 = trace.push("E5", head.dec1.forward(g, store, e4)?);
                let e6 = trace.push("E6", head.dec2.forward(g, store, e5)?);
                let raw = head.out.forward(g, store, e6)?;
                Some(trace.push("K", g.normalize_kernels(raw, self.config.image_filter()?)?))
            }
            None => None,
        };
        Ok(KpbOutput { k3, k })
    }

    /// SIFB's stack of 1x1 blocks.
    pub fn middle_blocks(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let sifb = self
            .sifb
            .as_ref()
            .ok_or_else(|| missing(self.variant(), "filtering branch"))?;
        self.middle_blocks_with(g, store, &sifb.dec.middle, x)
    }

    fn middle_blocks_with(&self, g: &mut Graph<T>, store: &ParamStore<T>, blocks: &[ConvLayer], x: Var) -> Result<Var> {
        blocks.iter().try_fold(x, |x, l| l.forward(g, store, x))
    }

    pub fn discriminator_forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        self.disc.forward(g, store, image)
    }

    fn delta_kernels(&self, g: &mut Graph<T>, like: Var, config: FilterConfig) -> Var {
        let [b, _, h, w] = g.value(like).shape();
        g.constant(KernelField::delta(b, h, w, config).data)
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Var, mask: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, image, mask, opts)
    }

    /// Full generator pass over an explicit parameter store.
    ///
    /// `image` is the corrupted input `[B, 3, H, W]` and `mask` the hole
    /// mask `[B, 1, H, W]` (1 = hole), used only for compositing.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        mask: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let v = opts.variant.unwrap_or(self.variant());
        if v.uses_sifb() && self.sifb.is_none()
            || v.uses_kpb() && opts.kernels == KernelMode::Predicted && self.kpb.is_none()
        {
            return Err(Error::Contract(format!("{} model cannot run as {v}", self.variant())));
        }
        let [b, c, h, w] = g.value(image).shape();
        if c != IMAGE_CHANNELS || h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(
                "forward",
                "[B, 3, H, W] with H, W multiples of 4",
                shape_str(g.value(image).shape()),
            ));
        }
        g.value(mask).expect_shape("forward", [b, 1, h, w])?;

        let mut trace = Trace::default();
        let predicted = opts.kernels == KernelMode::Predicted;
        let sifb_feats = match v.uses_sifb() {
            true => Some(self.sifb_encode(g, store, image, &mut trace)?),
            false => None,
        };
        let kernels = match v.uses_kpb() && predicted {
            true => {
                let f2p = sifb_feats.as_ref().filter(|_| v.interactive()).map(|f| f.f2p);
                Some(self.kpb_forward(g, store, image, f2p, &mut trace)?)
            }
            false => None,
        };

        let pre_filter = match (&sifb_feats, &self.sifb) {
            (Some(feats), Some(sifb)) => {
                let fcfg = self.config.feature_filter()?;
                let f3hat = if v.feature_filter() {
                    let k3 = match kernels.as_ref().and_then(|k| k.k3) {
                        Some(k3) => k3,
                        None if predicted => return Err(missing(self.variant(), "K3 head")),
                        None => self.delta_kernels(g, feats.f3, fcfg),
                    };
                    g.pixel_filter(feats.f3, k3, fcfg)?
                } else {
                    feats.f3
                };
                trace.push("F3^", f3hat);
                let f4 = trace.push("F4", self.middle_blocks_with(g, store, &sifb.dec.middle, f3hat)?);
                let f5 = trace.push("F5", sifb.dec.dec1.forward(g, store, f4)?);
                let f6 = trace.push("F6", sifb.dec.dec2.forward(g, store, f5)?);
                let t = sifb.dec.out.forward(g, store, f6)?;
                let t = g.add_scalar(t, 1.0)?;
                trace.push("F7", g.scale(t, 0.5)?)
            }
            _ => image,
        };

        let filtered = if v.image_filter() {
            let icfg = self.config.image_filter()?;
            let k = match kernels.as_ref().and_then(|k| k.k) {
                Some(k) => k,
                None if predicted => return Err(missing(self.variant(), "image kernel head")),
                None => self.delta_kernels(g, pre_filter, icfg),
            };
            g.pixel_filter(pre_filter, k, icfg)?
        } else {
            pre_filter
        };
        let prediction = trace.push("I^", g.clamp(filtered, 0.0, 1.0)?);
        let composite = composite(g, prediction, image, mask)?;
        Ok(ForwardOutput {
            prediction,
            composite,
            trace,
        })
    }

    /// Convenience inference pass returning `(prediction, composite)`.
    pub fn infer(&self, image: &Tensor<T>, mask: &Tensor<T>, opts: &ForwardOptions) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let i = g.constant(image.clone());
        let m = g.constant(mask.clone());
        let out = self.forward(&mut g, i, m, opts)?;
        Ok((g.value(out.prediction).clone(), g.value(out.composite).clone()))
    }
}

fn missing(v: Variant, what: &str) -> Error {
    Error::Contract(format!("{v} model has no {what}"))
}

/// Repeat a single-channel mask over the image channels.
pub fn expand_mask<T: Scalar>(mask: &Tensor<T>, channels: usize) -> Tensor<T> {
    let [b, _, h, w] = mask.shape();
    Tensor::from_fn([b, channels, h, w], |[bi, _, y, x]| mask.at(bi, 0, y, x))
}

/// `mask * prediction + (1 - mask) * image` over all channels.
pub fn composite<T: Scalar>(g: &mut Graph<T>, prediction: Var, image: Var, mask: Var) -> Result<Var> {
    let c = g.value(prediction).channels();
    let m = expand_mask(g.value(mask), c);
    let keep = g.constant(m.map(|v| T::one() - v));
    let m = g.constant(m);
    let hole = g.mul(prediction, m)?;
    let known = g.mul(image, keep)?;
    g.add(hole, known)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(v: Variant) -> MisfModel<f64> {
        MisfModel::new(ModelConfig::new(Preset::MisfTiny, v).with_seed(3)).unwrap()
    }

    fn inputs(b: usize, size: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform([b, 3, size, size], 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn([b, 1, size, size], |[_, _, y, x]| {
            f64::from(u8::from(y > 20 && y < 40 && x > 8 && x < 30))
        });
        (img, mask)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!(
            "MISF_TINY".replace('_', "-").parse::<Preset>().unwrap(),
            Preset::MisfTiny
        );
    }

    #[test]
    fn store_matches_spec_counts() {
        for v in Variant::ALL {
            let m = tiny(v);
            let gen = m.param_count(Some(ParamGroup::Sifb)) + m.param_count(Some(ParamGroup::Kpb));
            assert_eq!(gen, m.config.generator_param_count(), "{v}");
            assert_eq!(m.param_count(Some(ParamGroup::Disc)), m.config.disc_param_count());
        }
    }

    #[test]
    fn all_variants_produce_image_shape() {
        let (img, mask) = inputs(1, 64);
        for v in Variant::ALL {
            let (pred, comp) = tiny(v).infer(&img, &mask, &ForwardOptions::default()).unwrap();
            assert_eq!(pred.shape(), [1, 3, 64, 64], "{v}");
            assert!(pred.min_value() >= 0.0 && pred.max_value() <= 1.0);
            assert_eq!(comp.shape(), [1, 3, 64, 64]);
        }
    }

    #[test]
    fn empty_mask_returns_input() {
        let (img, _) = inputs(1, 64);
        let mask = Tensor::zeros([1, 1, 64, 64]);
        let (_, comp) = tiny(Variant::Misf)
            .infer(&img, &mask, &ForwardOptions::default())
            .unwrap();
        assert_eq!(comp, img);
    }

    #[test]
    fn delta_misf_equals_en_decoder() {
        let m = tiny(Variant::Misf);
        let (img, mask) = inputs(2, 64);
        let delta = ForwardOptions {
            kernels: KernelMode::Delta,
            variant: None,
        };
        let plain = ForwardOptions {
            kernels: KernelMode::Predicted,
            variant: Some(Variant::EnDecoder),
        };
        let (a, _) = m.infer(&img, &mask, &delta).unwrap();
        let (b, _) = m.infer(&img, &mask, &plain).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn interaction_is_live() {
        let m = tiny(Variant::Misf);
        let (img, _) = inputs(1, 64);
        let k3 = |shift: f64| {
            let mut g = Graph::inference();
            let i = g.constant(img.clone());
            let mut trace = Trace::default();
            let f = m.sifb_encode(&mut g, &m.params, i, &mut trace).unwrap();
            let f2p = g.add_scalar(f.f2p, shift).unwrap();
            let out = m.kpb_forward(&mut g, &m.params, i, Some(f2p), &mut trace).unwrap();
            g.value(out.k3.unwrap()).clone()
        };
        assert!(k3(0.0).max_abs_diff(&k3(0.1)) > 0.0);
    }

    #[test]
    fn img_filter_cannot_run_encoder_decoder() {
        let m = tiny(Variant::ImgFilter);
        let (img, mask) = inputs(1, 64);
        let opts = ForwardOptions {
            variant: Some(Variant::EnDecoder),
            ..Default::default()
        };
        assert!(matches!(m.infer(&img, &mask, &opts), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_input_shape() {
        let m = tiny(Variant::EnDecoder);
        let img = Tensor::<f64>::zeros([1, 1, 64, 64]);
        let mask = Tensor::zeros([1, 1, 64, 64]);
        assert!(m.infer(&img, &mask, &ForwardOptions::default()).is_err());
    }
}
