//! Named gradient checks covering every differentiable op, both filters,
//! each loss term and a whole tiny model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, grad_check_params, random_input, GradCheckOptions, GradCheckReport};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::filter::{Boundary, FilterConfig, Normalize};
use crate::losses::{
    discriminator_loss, generator_gan_loss, l1_loss, perceptual_loss, style_loss, total_loss, FeatureExtractor,
    LossContext, LossWeights,
};
use crate::model::{ForwardOptions, MisfModel, ModelConfig, Preset, Variant};
use crate::ops::conv::Padding;
use crate::ops::layers::Activation;
use crate::param::ParamGroup;
use crate::tensor::Tensor;

type Check = fn(&GradCheckOptions) -> Result<GradCheckReport>;

pub struct Case {
    pub name: &'static str,
    check: Check,
}

impl Case {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        (self.check)(opts)
    }
}

fn rng(opts: &GradCheckOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(31).wrapping_add(salt))
}

/// Check `f` w.r.t. a random input of `shape`.
fn unary(
    opts: &GradCheckOptions,
    salt: u64,
    shape: [usize; 4],
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let x = random_input(shape, &mut rng(opts, salt));
    grad_check(f, &x, opts)
}

/// Random tensors for the non-checked operands.
fn operand(opts: &GradCheckOptions, salt: u64, shape: [usize; 4]) -> Tensor<f64> {
    random_input(shape, &mut rng(opts, salt ^ 0xabcd))
}

/// Values in [0.05, 0.95], away from the clamp edges.
fn image(opts: &GradCheckOptions, salt: u64, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::uniform(shape, 0.05, 0.95, &mut rng(opts, salt ^ 0x1234))
}

const CONV_X: [usize; 4] = [2, 3, 6, 6];
const CONV_W: [usize; 4] = [4, 3, 3, 3];

fn conv_case(opts: &GradCheckOptions, wrt: usize, transpose: bool) -> Result<GradCheckReport> {
    let (wshape, bias) = if transpose {
        ([3, 4, 4, 4], [1, 1, 1, 4])
    } else {
        (CONV_W, [1, 1, 1, 4])
    };
    let shapes = [CONV_X, wshape, bias];
    let fixed: Vec<_> = (0..3).map(|i| operand(opts, 10 + i as u64, shapes[i])).collect();
    let f = move |g: &mut Graph<f64>, v: Var| {
        let vars: Vec<Var> = (0..3)
            .map(|i| if i == wrt { v } else { g.constant(fixed[i].clone()) })
            .collect();
        if transpose {
            g.conv_transpose2d(vars[0], vars[1], Some(vars[2]), 2, Padding::same(1))
        } else {
            g.conv2d(vars[0], vars[1], Some(vars[2]), 2, Padding::new(1, 1, 2, 0))
        }
    };
    unary(opts, 20 + wrt as u64, shapes[wrt], f)
}

fn filter_config(groups: usize, boundary: Boundary) -> FilterConfig {
    FilterConfig::new(3, groups, Normalize::Softmax, boundary).expect("valid filter config")
}

/// Filter w.r.t. input (`wrt_kernel = false`) or raw pre-softmax kernels.
fn filter_case(
    opts: &GradCheckOptions,
    channels: usize,
    groups: usize,
    boundary: Boundary,
    wrt_kernel: bool,
) -> Result<GradCheckReport> {
    let cfg = filter_config(groups, boundary);
    let xs = [2, channels, 5, 5];
    let ks = [2, groups * 9, 5, 5];
    let x0 = operand(opts, 30, xs);
    let k0 = operand(opts, 31, ks);
    let f = move |g: &mut Graph<f64>, v: Var| {
        let (x, raw) = if wrt_kernel {
            (g.constant(x0.clone()), v)
        } else {
            (v, g.constant(k0.clone()))
        };
        let k = g.normalize_kernels(raw, cfg)?;
        g.pixel_filter(x, k, cfg)
    };
    unary(opts, 32 + wrt_kernel as u64, if wrt_kernel { ks } else { xs }, f)
}

const PAIR: [usize; 4] = [1, 3, 32, 32];

fn loss_case(
    opts: &GradCheckOptions,
    salt: u64,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let target = image(opts, salt, PAIR);
    let pred = image(opts, salt + 1, PAIR);
    grad_check(
        |g, x| {
            let t = g.constant(target.clone());
            f(g, x, t)
        },
        &pred,
        opts,
    )
}

fn tiny_model(seed: u64) -> Result<MisfModel<f64>> {
    MisfModel::new(ModelConfig::new(Preset::MisfTiny, Variant::Misf).with_seed(seed))
}

fn misf_tiny(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = tiny_model(opts.seed)?;
    let fx = FeatureExtractor::<f64>::seeded(opts.seed + 1);
    let shape = [1, 3, 64, 64];
    let clean = image(opts, 50, shape);
    let mask = crate::data::generate_mask(
        &crate::data::MaskSpec::new(crate::data::Bucket::B20_40, opts.seed),
        64,
        64,
    )?;
    let corrupted = crate::data::corrupt(&clean, &mask)?;
    grad_check_params(
        &model.params,
        &ParamGroup::GENERATOR,
        |g, store| {
            let x = g.constant(corrupted.clone());
            let m = g.constant(mask.clone());
            let t = g.constant(clean.clone());
            let out = model.forward_with(g, store, x, m, &ForwardOptions::default())?;
            let ctx = LossContext {
                weights: LossWeights::default(),
                disc: &model.disc,
                disc_params: store,
                fx: &fx,
                l1_mask: None,
            };
            Ok(total_loss(g, out.prediction, t, &ctx)?.total)
        },
        opts,
    )
}

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $f:expr) => {
            Case {
                name: $name,
                check: $f,
            }
        };
    }
    vec![
        case!("conv2d.input", |o| conv_case(o, 0, false)),
        case!("conv2d.weight", |o| conv_case(o, 1, false)),
        case!("conv2d.bias", |o| conv_case(o, 2, false)),
        case!("conv_transpose2d.input", |o| conv_case(o, 0, true)),
        case!("conv_transpose2d.weight", |o| conv_case(o, 1, true)),
        case!("conv_transpose2d.bias", |o| conv_case(o, 2, true)),
        case!("avg_pool2d", |o| unary(o, 1, [2, 3, 6, 8], |g, x| g.avg_pool2d(x))),
        case!("relu", |o| unary(o, 2, [1, 2, 4, 4], |g, x| g.relu(x))),
        case!("leaky_relu", |o| unary(o, 3, [1, 2, 4, 4], |g, x| g
            .activation(x, Activation::LEAKY))),
        case!("tanh", |o| unary(o, 4, [1, 2, 4, 4], |g, x| g
            .activation(x, Activation::Tanh))),
        case!("sigmoid", |o| unary(o, 5, [1, 2, 4, 4], |g, x| g
            .activation(x, Activation::Sigmoid))),
        case!("instance_norm", |o| unary(o, 6, [2, 3, 4, 5], |g, x| g
            .instance_norm(x))),
        case!("concat_channels", |o| {
            let b = operand(o, 7, [2, 1, 3, 3]);
            unary(o, 7, [2, 2, 3, 3], move |g, x| {
                let b = g.constant(b.clone());
                let c = g.concat_channels(b, x)?;
                g.concat_channels(c, x)
            })
        }),
        case!("add_sub_mul", |o| {
            let b = operand(o, 8, [1, 2, 3, 3]);
            unary(o, 8, [1, 2, 3, 3], move |g, x| {
                let b = g.constant(b.clone());
                let s = g.add(x, b)?;
                let d = g.sub(x, s)?;
                let p = g.mul(s, x)?;
                let q = g.scale(p, -1.5)?;
                let q = g.add_scalar(q, 0.25)?;
                let n = g.neg(d)?;
                g.mul(q, n)
            })
        }),
        case!("abs", |o| unary(o, 9, [1, 2, 4, 4], |g, x| g.abs(x))),
        case!("softplus", |o| unary(o, 10, [1, 2, 4, 4], |g, x| g.softplus(x))),
        case!("clamp", |o| unary(o, 11, [1, 2, 4, 4], |g, x| g.clamp(x, -0.5, 0.5))),
        case!("sum", |o| unary(o, 12, [2, 2, 3, 3], |g, x| g.sum(x))),
        case!("mean", |o| unary(o, 13, [2, 2, 3, 3], |g, x| g.mean(x))),
        case!("gram", |o| unary(o, 14, [2, 3, 4, 4], |g, x| g.gram(x))),
        case!("normalize_kernels", |o| {
            let cfg = filter_config(2, Boundary::ZeroPad);
            unary(o, 15, [1, 18, 3, 3], move |g, x| g.normalize_kernels(x, cfg))
        }),
        case!("pixel_filter.input", |o| filter_case(
            o,
            3,
            3,
            Boundary::Replicate,
            false
        )),
        case!("pixel_filter.kernel", |o| filter_case(
            o,
            3,
            3,
            Boundary::Replicate,
            true
        )),
        case!("feature_filter.input", |o| filter_case(
            o,
            4,
            4,
            Boundary::ZeroPad,
            false
        )),
        case!("feature_filter.kernel", |o| filter_case(
            o,
            4,
            4,
            Boundary::ZeroPad,
            true
        )),
        case!("loss.l1", |o| loss_case(o, 40, |g, p, t| l1_loss(g, p, t, None))),
        case!("loss.l1_masked", |o| {
            let mask = Tensor::from_fn(
                [1, 1, 32, 32],
                |[_, _, y, x]| if (8..20).contains(&y) && x > 10 { 1.0 } else { 0.0 },
            );
            loss_case(o, 41, move |g, p, t| l1_loss(g, p, t, Some(&mask)))
        }),
        case!("loss.gan_generator", |o| {
            let m = tiny_model(o.seed)?;
            loss_case(o, 42, |g, p, _| generator_gan_loss(g, &m.disc, &m.params, p))
        }),
        case!("loss.gan_discriminator", |o| {
            let m = tiny_model(o.seed)?;
            let fake = image(o, 43, PAIR);
            loss_case(o, 43, |g, p, _| {
                let f = g.constant(fake.clone());
                discriminator_loss(g, &m.disc, &m.params, p, f)
            })
        }),
        case!("loss.gan_discriminator.params", |o| {
            let m = tiny_model(o.seed)?;
            let (real, fake) = (image(o, 44, PAIR), image(o, 45, PAIR));
            grad_check_params(
                &m.params,
                &[ParamGroup::Disc],
                |g, store| {
                    let r = g.constant(real.clone());
                    let f = g.constant(fake.clone());
                    discriminator_loss(g, &m.disc, store, r, f)
                },
                o,
            )
        }),
        case!("loss.perceptual", |o| {
            let fx = FeatureExtractor::seeded(o.seed + 1);
            loss_case(o, 46, |g, p, t| perceptual_loss(g, p, t, &fx))
        }),
        case!("loss.style", |o| {
            let fx = FeatureExtractor::seeded(o.seed + 1);
            loss_case(o, 47, |g, p, t| style_loss(g, p, t, &fx))
        }),
        case!("misf_tiny.total_loss", misf_tiny),
    ]
}

/// Run every case whose name contains `filter`.
pub fn run_suite(opts: &GradCheckOptions, filter: Option<&str>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| Ok((c.name, c.run(opts)?)))
        .collect()
}
