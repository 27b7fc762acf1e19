//! Central finite-difference verification of tape gradients (64-bit only).

pub mod suite;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Smallest denominator used for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check a random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Perturbations whose loss was not finite.
    pub non_finite: usize,
    /// Coordinates skipped because the one-sided slopes disagree, i.e. the
    /// perturbation crossed a ReLU/abs/clamp kink.
    pub kinks: usize,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Most coordinates a passing check may skip as kinks, as a fraction.
pub const MAX_KINK_FRACTION: f64 = 0.25;

struct Accum {
    max_rel: f64,
    max_abs: f64,
    checked: usize,
    non_finite: usize,
    kinks: usize,
}

impl Accum {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            max_abs: 0.0,
            checked: 0,
            non_finite: 0,
            kinks: 0,
        }
    }

    fn push(&mut self, analytic: f64, at: f64, plus: Option<f64>, minus: Option<f64>, eps: f64, tol: f64) {
        self.checked += 1;
        match (plus, minus) {
            (Some(p), Some(m)) if p.is_finite() && m.is_finite() => {
                let (fwd, bwd) = ((p - at) / eps, (at - m) / eps);
                if relative_error(fwd, bwd) > tol {
                    self.kinks += 1;
                    return;
                }
                let numeric = (p - m) / (2.0 * eps);
                self.max_rel = self.max_rel.max(relative_error(analytic, numeric));
                self.max_abs = self.max_abs.max((analytic - numeric).abs());
            }
            _ => self.non_finite += 1,
        }
    }

    fn report(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            pass: self.non_finite == 0
                && self.max_rel < tol
                && (self.kinks as f64) <= MAX_KINK_FRACTION * self.checked as f64,
            max_rel_err: self.max_rel,
            max_abs_err: self.max_abs,
            checked: self.checked,
            non_finite: self.non_finite,
            kinks: self.kinks,
        }
    }
}

fn pick_coords(n: usize, opts: &GradCheckOptions) -> Vec<usize> {
    match opts.max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Reduce a tensor output to a scalar through a fixed random projection.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn eval_loss<F>(f: &F, x: &Tensor<f64>, seed: u64) -> Option<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv).ok()?;
    let loss = scalarize(&mut g, out, seed).ok()?;
    Some(g.scalar(loss))
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// Non-scalar outputs are reduced by a fixed random projection. Failures of
/// the perturbed evaluations (non-finite values) are counted in the report.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let loss = scalarize(&mut g, out, opts.seed)?;
    let at = g.scalar(loss);
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut acc = Accum::new();
    let mut probe = x.clone();
    for i in pick_coords(x.len(), opts) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.eps;
        let plus = eval_loss(&f, &probe, opts.seed);
        probe.data_mut()[i] = orig - opts.eps;
        let minus = eval_loss(&f, &probe, opts.seed);
        probe.data_mut()[i] = orig;
        acc.push(analytic.data()[i], at, plus, minus, opts.eps, opts.tol);
    }
    Ok(acc.report(opts.tol))
}

/// Finite-difference check of parameter gradients.
///
/// `build` constructs a scalar loss from the store on the given graph. Only
/// parameters of `groups` are checked; coordinates are sampled uniformly over
/// all their scalars.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    groups: &[ParamGroup],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad(groups);
    let mut g = Graph::with_trainable(groups);
    let loss = build(&mut g, &work)?;
    let at = g.scalar(loss);
    g.backward(loss)?;
    g.accumulate_param_grads(&mut work)?;

    let ids: Vec<_> = work
        .ids()
        .filter(|&id| groups.contains(&work.get(id).group) && work.get(id).trainable)
        .collect();
    let total: usize = ids.iter().map(|&id| work.get(id).value.len()).sum();
    let coords = pick_coords(total, opts);

    let eval = |s: &ParamStore<f64>| -> Option<f64> {
        let mut g = Graph::inference();
        let l = build(&mut g, s).ok()?;
        Some(g.scalar(l))
    };

    let mut acc = Accum::new();
    let mut probe = store.clone();
    // map flat coordinate -> (param, offset)
    let mut starts = Vec::with_capacity(ids.len());
    let mut off = 0;
    for &id in &ids {
        starts.push(off);
        off += work.get(id).value.len();
    }
    for c in coords {
        let pi = starts.partition_point(|&s| s <= c) - 1;
        let id = ids[pi];
        let j = c - starts[pi];
        let analytic = work.get(id).grad.data()[j];
        let orig = probe.get(id).value.data()[j];
        probe.get_mut(id).value.data_mut()[j] = orig + opts.eps;
        let plus = eval(&probe);
        probe.get_mut(id).value.data_mut()[j] = orig - opts.eps;
        let minus = eval(&probe);
        probe.get_mut(id).value.data_mut()[j] = orig;
        acc.push(analytic, at, plus, minus, opts.eps, opts.tol);
    }
    Ok(acc.report(opts.tol))
}

/// Random input in `[-1, 1)` for gradient checks.
pub fn random_input(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}
