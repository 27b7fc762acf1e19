//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every forward op as a node in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse, visiting each node exactly once, and leaves gradients on the leaf
//! nodes (inputs and parameters). A graph can be differentiated only once.

use crate::error::{Error, Result};
use crate::filter::{self, FilterConfig, KernelField};
use crate::ops::conv::{self, Padding};
use crate::ops::layers::{self, Activation};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
    },
    AvgPool(Var),
    Act(Var, Activation),
    InstanceNorm(Var, Vec<T>),
    Concat(Var, Var),
    NormalizeKernels(Var, FilterConfig),
    PixelFilter {
        x: Var,
        k: Var,
        config: FilterConfig,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Gram(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    trainable: Vec<ParamGroup>,
    differentiated: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Every trainable parameter group receives gradients.
    pub fn new() -> Self {
        Self::with_trainable(&[ParamGroup::Sifb, ParamGroup::Kpb, ParamGroup::Disc])
    }

    /// Only parameters of `groups` receive gradients; others act as constants.
    pub fn with_trainable(groups: &[ParamGroup]) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            trainable: groups.to_vec(),
            differentiated: false,
        }
    }

    /// No parameter receives gradients.
    pub fn inference() -> Self {
        Self::with_trainable(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.trainable && self.trainable.contains(&p.group);
        self.push(p.value.clone(), Op::Param(id), rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of a value as a new constant leaf (stops gradient flow).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_checked("conv2d", y, Op::Conv2d { x, w, b, stride, pad }, &ins)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let y = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_checked("conv_transpose2d", y, Op::ConvT2d { x, w, b, stride, pad }, &ins)
    }

    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let y = layers::avg_pool2d(self.value(x))?;
        self.push_checked("avg_pool2d", y, Op::AvgPool(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = layers::activation(self.value(x), kind);
        self.push_checked("activation", y, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (y, inv) = layers::instance_norm(self.value(x));
        self.push_checked("instance_norm", y, Op::InstanceNorm(x, inv), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = layers::concat_channels(self.value(a), self.value(b))?;
        self.push_checked("concat_channels", y, Op::Concat(a, b), &[a, b])
    }

    pub fn normalize_kernels(&mut self, raw: Var, config: FilterConfig) -> Result<Var> {
        let field = filter::normalize_kernels(self.value(raw), config)?;
        self.push_checked(
            "normalize_kernels",
            field.data,
            Op::NormalizeKernels(raw, config),
            &[raw],
        )
    }

    /// `x` filtered by the kernel field held in node `k`.
    pub fn pixel_filter(&mut self, x: Var, k: Var, config: FilterConfig) -> Result<Var> {
        let field = KernelField::new(self.value(k).clone(), config)?;
        let y = filter::pixel_filter(self.value(x), &field)?;
        self.push_checked("pixel_filter", y, Op::PixelFilter { x, k, config }, &[x, k])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), f).map_err(|_| {
            Error::shape(
                name,
                crate::tensor::shape_str(self.value(a).shape()),
                crate::tensor::shape_str(self.value(b).shape()),
            )
        })?;
        self.push_checked(name, y, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c: T = s(c);
        let y = self.value(a).map(|v| v * c);
        self.push_checked("scale", y, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c: T = s(c);
        let y = self.value(a).map(|v| v + c);
        self.push_checked("add_scalar", y, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| v.abs());
        self.push_checked("abs", y, Op::Abs(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(softplus);
        self.push_checked("softplus", y, Op::Softplus(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi): (T, T) = (s(lo), s(hi));
        let y = self.value(a).map(|v| v.max(lo).min(hi));
        self.push_checked("clamp", y, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum", y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).mean());
        self.push_checked("mean", y, Op::Mean(a), &[a])
    }

    /// Per-item Gram matrix `F F^T / (C H W)`, shaped `[B, 1, C, C]`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let y = gram(self.value(a));
        self.push_checked("gram", y, Op::Gram(a), &[a])
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Run reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".into()));
        }
        self.differentiated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let grads = conv::conv2d_backward(self.value(x), self.value(w), g, stride, pad, self.need(x))?;
                if let Some(dx) = grads.input {
                    out.push((x, dx));
                }
                out.push((w, grads.weight));
                if let Some(b) = b {
                    out.push((b, grads.bias.reshape(self.value(b).shape())?));
                }
            }
            &Op::ConvT2d { x, w, b, stride, pad } => {
                let grads =
                    conv::conv_transpose2d_backward(self.value(x), self.value(w), g, stride, pad, self.need(x))?;
                if let Some(dx) = grads.input {
                    out.push((x, dx));
                }
                out.push((w, grads.weight));
                if let Some(b) = b {
                    out.push((b, grads.bias.reshape(self.value(b).shape())?));
                }
            }
            &Op::AvgPool(x) => out.push((x, layers::avg_pool2d_backward(g))),
            &Op::Act(x, kind) => {
                let xv = self.value(x);
                let dx = Tensor::from_vec(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&a, &y), &d)| d * kind.derivative(a, y))
                        .collect(),
                )?;
                out.push((x, dx));
            }
            Op::InstanceNorm(x, inv) => {
                out.push((*x, layers::instance_norm_backward(&node.value, inv, g)));
            }
            &Op::Concat(a, b) => {
                let (ga, gb) = layers::split_channels(g, self.value(a).channels());
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::NormalizeKernels(raw, config) => {
                let field = KernelField {
                    data: node.value.clone(),
                    config,
                };
                out.push((raw, filter::normalize_kernels_backward(&field, g)));
            }
            &Op::PixelFilter { x, k, config } => {
                let field = KernelField {
                    data: self.value(k).clone(),
                    config,
                };
                let (dx, dk) = filter::pixel_filter_backward(self.value(x), &field, g, self.need(x), self.need(k))?;
                out.extend(dx.map(|d| (x, d)));
                out.extend(dk.map(|d| (k, d)));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.map(|v| -v)));
            }
            &Op::Mul(a, b) => {
                if self.need(a) {
                    out.push((a, g.zip_map(self.value(b), |d, y| d * y)?));
                }
                if self.need(b) {
                    out.push((b, g.zip_map(self.value(a), |d, x| d * x)?));
                }
            }
            &Op::Scale(a, c) => out.push((a, g.map(|v| v * c))),
            &Op::AddScalar(a) => out.push((a, g.clone())),
            &Op::Abs(a) => {
                let dx = g.zip_map(self.value(a), |d, x| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                })?;
                out.push((a, dx));
            }
            &Op::Softplus(a) => {
                let dx = g.zip_map(self.value(a), |d, x| d * sigmoid(x))?;
                out.push((a, dx));
            }
            &Op::Clamp(a, lo, hi) => {
                let dx = g.zip_map(self.value(a), |d, x| if x < lo || x > hi { T::zero() } else { d })?;
                out.push((a, dx));
            }
            &Op::Sum(a) => out.push((a, Tensor::full(self.value(a).shape(), g.data()[0]))),
            &Op::Mean(a) => {
                let xv = self.value(a);
                let n: T = s(xv.len().max(1) as f64);
                out.push((a, Tensor::full(xv.shape(), g.data()[0] / n)));
            }
            &Op::Gram(a) => out.push((a, gram_backward(self.value(a), g))),
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
        Ok(())
    }

    /// Gradient left on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add leaf gradients of parameter nodes into the store's `grad` buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        if !self.differentiated {
            return Err(Error::Contract("parameter gradients requested before backward".into()));
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g), true) = (&node.op, grad, node.requires_grad) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gram<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = f.shape();
    let norm = T::one() / s::<T>((c * h * w).max(1) as f64);
    let mut out = Tensor::zeros([b, 1, c, c]);
    for bi in 0..b {
        T::gemm(
            false,
            true,
            c,
            c,
            h * w,
            norm,
            f.item(bi),
            f.item(bi),
            T::zero(),
            out.item_mut(bi),
        );
    }
    out
}

fn gram_backward<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = f.shape();
    let norm = T::one() / s::<T>((c * h * w).max(1) as f64);
    let mut dx = Tensor::zeros(f.shape());
    let mut sym = vec![T::zero(); c * c];
    for bi in 0..b {
        let gi = g.item(bi);
        for r in 0..c {
            for q in 0..c {
                sym[r * c + q] = gi[r * c + q] + gi[q * c + r];
            }
        }
        T::gemm(
            false,
            false,
            c,
            h * w,
            c,
            norm,
            &sym,
            f.item(bi),
            T::zero(),
            dx.item_mut(bi),
        );
    }
    dx
}
