use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::ops::conv::{conv_out_size, conv_transpose_out_size, Padding};
use crate::ops::layers::Activation;
use crate::param::{init_uniform, ParamGroup, ParamId, ParamStore, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvT,
    AvgPool,
    FilterSite,
    MiddleBlock,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::ConvT => "convt",
            LayerKind::AvgPool => "avgpool",
            LayerKind::FilterSite => "filter",
            LayerKind::MiddleBlock => "middle",
        })
    }
}

/// One row of the architecture: what a layer does to channel count and size.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: Padding,
    /// Instance normalization after the layer.
    pub norm: bool,
    pub act: Option<Activation>,
    pub bias: bool,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel,
            in_ch,
            out_ch,
            stride: 1,
            padding: Padding::ZERO,
            norm: false,
            act: None,
            bias: true,
        }
    }

    pub fn conv(name: &str, kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::base(name, LayerKind::Conv, kernel, in_ch, out_ch)
    }

    pub fn convt(name: &str, kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::base(name, LayerKind::ConvT, kernel, in_ch, out_ch)
    }

    pub fn middle(name: &str, ch: usize) -> Self {
        Self::base(name, LayerKind::MiddleBlock, 1, ch, ch).act(Activation::Relu)
    }

    pub fn avg_pool(name: &str, ch: usize) -> Self {
        let mut s = Self::base(name, LayerKind::AvgPool, 2, ch, ch);
        s.stride = 2;
        s.bias = false;
        s
    }

    pub fn filter_site(name: &str, ch: usize, kernel: usize) -> Self {
        let mut s = Self::base(name, LayerKind::FilterSite, kernel, ch, ch);
        s.bias = false;
        s
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// Instance norm follows; the conv bias would be cancelled so it is dropped.
    pub fn norm(mut self) -> Self {
        self.norm = true;
        self.bias = false;
        self
    }

    pub fn act(mut self, act: Activation) -> Self {
        self.act = Some(act);
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::ConvT | LayerKind::MiddleBlock)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::ConvT => [self.in_ch, self.out_ch, self.kernel, self.kernel],
            _ => [self.out_ch, self.in_ch, self.kernel, self.kernel],
        }
    }

    pub fn param_count(&self) -> usize {
        if !self.has_params() {
            return 0;
        }
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_ch } else { 0 }
    }

    /// Output spatial extent for a square input of side `size`.
    pub fn out_size(&self, size: usize) -> Option<usize> {
        match self.kind {
            LayerKind::Conv | LayerKind::MiddleBlock => {
                conv_out_size(size, self.padding.vertical(), self.kernel, self.stride)
            }
            LayerKind::ConvT => conv_transpose_out_size(size, self.padding.vertical(), self.kernel, self.stride),
            LayerKind::AvgPool => size.is_multiple_of(2).then_some(size / 2),
            LayerKind::FilterSite => Some(size),
        }
    }

    fn gain(&self) -> f64 {
        match self.act {
            Some(Activation::Relu) => 2f64.sqrt(),
            Some(Activation::LeakyRelu(a)) => (2.0 / (1.0 + a * a)).sqrt(),
            _ => 1.0,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::ConvT => (self.in_ch * self.kernel * self.kernel / (self.stride * self.stride)).max(1),
            _ => self.in_ch * self.kernel * self.kernel,
        }
    }
}

/// A parametrized layer bound to its entries in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    pub fn new<T: Scalar>(spec: LayerSpec, group: ParamGroup, seed: u64, store: &mut ParamStore<T>) -> Self {
        let wname = format!("{}.weight", spec.name);
        let w = init_uniform(spec.weight_shape(), spec.fan_in(), spec.gain(), seed, &wname);
        let weight = store.add(Parameter::new(wname, w, group));
        let bias = spec.bias.then(|| {
            store.add(Parameter::new(
                format!("{}.bias", spec.name),
                Tensor::zeros([1, 1, 1, spec.out_ch]),
                group,
            ))
        });
        Self { spec, weight, bias }
    }

    /// Convolution (or transposed convolution), then optional norm and activation.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_with(g, store, x, true)
    }

    /// As [`ConvLayer::forward`]; `activate = false` skips norm and activation.
    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        activate: bool,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let s = &self.spec;
        let mut y = match s.kind {
            LayerKind::ConvT => g.conv_transpose2d(x, w, b, s.stride, s.padding)?,
            _ => g.conv2d(x, w, b, s.stride, s.padding)?,
        };
        if activate {
            if s.norm {
                y = g.instance_norm(y)?;
            }
            if let Some(act) = s.act {
                y = g.activation(y, act)?;
            }
        }
        Ok(y)
    }
}
