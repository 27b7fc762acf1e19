//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.
//! Failures are reported, not fatal; `ACCEPTANCE_STRICT=1` makes any FAIL
//! exit nonzero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misf::config::RunConfig;
use misf::data::{fixture_image, generate_mask, hole_ratio, mask_seed, Bucket, Dataset, MaskSpec, FIXTURE_SIZE};
use misf::filter::{feature_filter, normalize_kernels, pixel_filter};
use misf::gradcheck::suite::run_suite;
use misf::gradcheck::GradCheckOptions;
use misf::losses::LossWeights;
use misf::metrics::{feature_similarity, l1_pct, psnr, ssim, FeatureSite};
use misf::train::{overfit_harness, MetricsLog, OverfitReport, Trainer};
use misf::{
    Boundary, FilterConfig, ForwardOptions, Graph, KernelMode, MisfModel, ModelConfig, Normalize, Preset, Tensor,
    Variant,
};

type Outcome = misf::Result<(bool, String)>;
type Check = Box<dyn FnMut(&mut Runs) -> Outcome>;
type Run = (Variant, u64, OverfitReport, Option<MisfModel<f32>>);

const OVERFIT_ITERS: usize = 2000;
const OVERFIT_PSNR: f64 = 30.0;
const OVERFIT_L1_PCT: f64 = 2.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_TOLERANCE: f64 = 0.3;
const HELD_OUT_PAIRS: usize = 20;
const HELD_OUT_FRACTION: f64 = 0.8;

/// Trained overfit runs shared by criteria 5, 6 and 7.
#[derive(Default)]
struct Runs {
    done: Vec<Run>,
}

impl Runs {
    fn get(&mut self, variant: Variant, seed: u64) -> misf::Result<&Run> {
        if let Some(i) = self.done.iter().position(|r| r.0 == variant && r.1 == seed) {
            return Ok(&self.done[i]);
        }
        let config = RunConfig {
            variant,
            seed,
            weights: LossWeights::L1_ONLY,
            ..RunConfig::default()
        };
        let data = Dataset::<f32>::fixtures(0..16, FIXTURE_SIZE, Bucket::B0_20, seed)?;
        let mut trainer = Trainer::new(config, data)?;
        let start = Instant::now();
        let report = overfit_harness(&mut trainer, OVERFIT_ITERS, 500)?;
        eprintln!(
            "  trained {variant} seed {seed}: psnr {:.3} ssim {:.4} l1% {:.3} ({:.0}s)",
            report.last.psnr,
            report.last.ssim,
            report.last.l1_pct,
            start.elapsed().as_secs_f64()
        );
        let keep = (variant == Variant::Misf && seed == 0).then_some(trainer.model);
        self.done.push((variant, seed, report, keep));
        Ok(self.done.last().unwrap())
    }
}

/// Five nested loops over the neighborhood.
fn oracle_filter(x: &Tensor<f64>, k: &Tensor<f64>, n: usize, groups: usize, boundary: Boundary) -> Tensor<f64> {
    let [b, c, h, w] = x.shape();
    let r = (n / 2) as isize;
    let mut out = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let g = if groups == 1 { 0 } else { ci };
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sy, sx) = (y as isize + dy, xx as isize + dx);
                            let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                            let v = match (inside, boundary) {
                                (true, _) => x.at(bi, ci, sy as usize, sx as usize),
                                (false, Boundary::ZeroPad) => 0.0,
                                (false, Boundary::Replicate) => x.at(
                                    bi,
                                    ci,
                                    sy.clamp(0, h as isize - 1) as usize,
                                    sx.clamp(0, w as isize - 1) as usize,
                                ),
                            };
                            let tap = ((dy + r) * n as isize + dx + r) as usize;
                            acc += k.at(bi, g * n * n + tap, y, xx) * v;
                        }
                    }
                    out.set(bi, ci, y, xx, acc);
                }
            }
        }
    }
    out
}

fn filtering_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut pixel_cases, mut feature_cases, mut worst) = (0, 0, 0.0f64);
    for i in 0..480 {
        let b = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let n = [1, 3, 5][rng.gen_range(0..3)];
        let boundary = if i % 2 == 0 {
            Boundary::ZeroPad
        } else {
            Boundary::Replicate
        };
        let normalize = if rng.gen_bool(0.8) {
            Normalize::Softmax
        } else {
            Normalize::None
        };
        let feature = i % 4 >= 2;
        let groups = if feature || rng.gen_bool(0.5) { c } else { 1 };
        let cfg = FilterConfig::new(n, groups, normalize, boundary)?;
        let x = Tensor::<f64>::uniform([b, c, h, w], -1.0, 1.0, &mut rng);
        let raw = Tensor::<f64>::uniform([b, groups * n * n, h, w], -3.0, 3.0, &mut rng);
        let k = normalize_kernels(&raw, cfg)?;
        let got = if feature {
            feature_cases += 1;
            feature_filter(&x, &k)?
        } else {
            pixel_cases += 1;
            pixel_filter(&x, &k)?
        };
        worst = worst.max(got.max_abs_diff(&oracle_filter(&x, &k.data, n, groups, boundary)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-12 && secs < 10.0 && pixel_cases >= 200 && feature_cases >= 200,
        format!("{pixel_cases} pixel + {feature_cases} feature cases, max diff {worst:.2e}, {secs:.2}s"),
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        eps: 1e-5,
        tol: 1e-4,
        ..GradCheckOptions::default()
    };
    let reports = run_suite(&opts, None)?;
    let failed: Vec<_> = reports.iter().filter(|(_, r)| !r.pass).map(|(n, _)| *n).collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, max rel err {worst:.2e}, failed {failed:?}, {secs:.1}s",
            reports.len()
        ),
    ))
}

fn shape_contract() -> Outcome {
    let m = MisfModel::<f32>::new(ModelConfig::new(Preset::Full256, Variant::Misf))?;
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([1, 3, 256, 256]));
    let mask = g.constant(Tensor::zeros([1, 1, 256, 256]));
    let out = m.forward(&mut g, x, mask, &ForwardOptions::default())?;
    let expected: &[(&str, [usize; 4])] = &[
        ("F1", [1, 64, 256, 256]),
        ("F2", [1, 128, 128, 128]),
        ("F2'", [1, 128, 64, 64]),
        ("F3", [1, 256, 64, 64]),
        ("E1", [1, 64, 256, 256]),
        ("E2", [1, 128, 128, 128]),
        ("E2'", [1, 128, 64, 64]),
        ("E3", [1, 256, 64, 64]),
        ("K3", [1, 256 * 9, 64, 64]),
        ("E4", [1, 256, 64, 64]),
        ("E5", [1, 128, 128, 128]),
        ("E6", [1, 64, 256, 256]),
        ("K", [1, 3 * 9, 256, 256]),
        ("F3^", [1, 256, 64, 64]),
        ("F4", [1, 256, 64, 64]),
        ("F5", [1, 128, 128, 128]),
        ("F6", [1, 64, 256, 256]),
        ("F7", [1, 3, 256, 256]),
        ("I^", [1, 3, 256, 256]),
    ];
    let mut wrong = Vec::new();
    for (name, shape) in expected {
        match out.trace.get(name) {
            Some(v) if g.value(v).shape() == *shape => {}
            Some(v) => wrong.push(format!("{name} {:?}", g.value(v).shape())),
            None => wrong.push(format!("{name} missing")),
        }
    }
    let extra = out.trace.iter().count() != expected.len();
    let composite = g.value(out.composite).shape() == [1, 3, 256, 256];
    Ok((
        wrong.is_empty() && !extra && composite,
        format!("{} shapes checked, mismatches {wrong:?}", expected.len()),
    ))
}

fn delta_reduction() -> Outcome {
    let delta = ForwardOptions {
        kernels: KernelMode::Delta,
        variant: None,
    };
    let plain = ForwardOptions {
        kernels: KernelMode::Predicted,
        variant: Some(Variant::EnDecoder),
    };
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let m = MisfModel::<f64>::new(ModelConfig::new(Preset::MisfTiny, Variant::Misf).with_seed(seed))?;
        let data = Dataset::<f64>::fixtures(0..2, 64, Bucket::B20_40, seed)?;
        let img = Tensor::stack(&data.samples.iter().map(|s| s.clean.clone()).collect::<Vec<_>>())?;
        let mask = Tensor::stack(&data.samples.iter().map(|s| s.mask.clone()).collect::<Vec<_>>())?;
        let input = misf::data::corrupt(&img, &mask)?;
        let (a, _) = m.infer(&input, &mask, &delta)?;
        let (b, _) = m.infer(&input, &mask, &plain)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    let m = MisfModel::<f32>::new(ModelConfig::new(Preset::Full256, Variant::Misf))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::<f32>::uniform([1, 3, 256, 256], 0.0, 1.0, &mut rng);
    let mask = generate_mask::<f32>(&MaskSpec::new(Bucket::B20_40, 4), 256, 256)?;
    let (a, _) = m.infer(&img, &mask, &delta)?;
    let (b, _) = m.infer(&img, &mask, &plain)?;
    worst = worst.max(a.max_abs_diff(&b) as f64);
    Ok((
        worst == 0.0,
        format!("tiny x3 seeds and full-256, max abs diff {worst:e}"),
    ))
}

fn overfit(runs: &mut Runs) -> Outcome {
    let last = runs.get(Variant::Misf, 0)?.2.last;
    Ok((
        last.psnr > OVERFIT_PSNR && last.l1_pct < OVERFIT_L1_PCT,
        format!(
            "{OVERFIT_ITERS} iters: psnr {:.3} dB (> {OVERFIT_PSNR}), l1 {:.3}% (< {OVERFIT_L1_PCT}), ssim {:.4}",
            last.psnr, last.l1_pct, last.ssim
        ),
    ))
}

fn ablation(runs: &mut Runs) -> Outcome {
    let order = [Variant::Misf, Variant::SemFilter, Variant::EnDecoder];
    let mut held = [0usize; 2];
    let mut table = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut p = [0.0; 3];
        for (slot, v) in p.iter_mut().zip(order) {
            *slot = runs.get(v, seed)?.2.last.psnr;
        }
        for i in 0..2 {
            if p[i] + ABLATION_TOLERANCE >= p[i + 1] {
                held[i] += 1;
            }
        }
        table.push(format!("seed {seed}: {:.2}/{:.2}/{:.2}", p[0], p[1], p[2]));
    }
    let majority = ABLATION_SEEDS.len() / 2 + 1;
    Ok((
        held.iter().all(|&h| h >= majority),
        format!(
            "misf/sem_filter/en_decoder psnr {}; misf>=sem {}/3, sem>=enc {}/3",
            table.join(", "),
            held[0],
            held[1]
        ),
    ))
}

fn feature_direction(runs: &mut Runs) -> Outcome {
    let model = runs.get(Variant::Misf, 0)?.3.as_ref().expect("seed 0 model kept");
    let mut closer = 0;
    let mut gains = Vec::with_capacity(HELD_OUT_PAIRS);
    for i in 0..HELD_OUT_PAIRS {
        let clean = fixture_image::<f32>(16 + i % 16, FIXTURE_SIZE, 0);
        let mask = generate_mask::<f32>(
            &MaskSpec::new(Bucket::B0_20, mask_seed(1, i)),
            FIXTURE_SIZE,
            FIXTURE_SIZE,
        )?;
        let corrupted = misf::data::corrupt(&clean, &mask)?;
        let pre = feature_similarity(model, &corrupted, &clean, &mask, FeatureSite::PreFilter)?;
        let post = feature_similarity(model, &corrupted, &clean, &mask, FeatureSite::PostFilter)?;
        if post >= pre {
            closer += 1;
        }
        gains.push(post - pre);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let need = (HELD_OUT_FRACTION * HELD_OUT_PAIRS as f64).ceil() as usize;
    Ok((
        closer >= need,
        format!("post >= pre on {closer}/{HELD_OUT_PAIRS} (need {need}), mean gain {mean_gain:+.4}"),
    ))
}

fn mask_generator() -> Outcome {
    let mut out_of_band = Vec::new();
    let mut ranges = Vec::new();
    for bucket in Bucket::ALL {
        let (lo, hi) = bucket.range();
        let (mut min, mut max) = (1.0f64, 0.0f64);
        for seed in 0..100 {
            let spec = MaskSpec::new(bucket, seed);
            let m = generate_mask::<f64>(&spec, 256, 256)?;
            let r = hole_ratio(&m);
            min = min.min(r);
            max = max.max(r);
            if r < lo - 0.02 || r > hi + 0.02 {
                out_of_band.push(format!("{bucket} seed {seed}: {r:.4}"));
            }
            let again = generate_mask::<f64>(&spec, 256, 256)?;
            let bytes = |t: &Tensor<f64>| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
            if bytes(&m) != bytes(&again) {
                out_of_band.push(format!("{bucket} seed {seed}: not reproducible"));
            }
        }
        ranges.push(format!("{bucket} [{min:.3}, {max:.3}]"));
    }
    Ok((
        out_of_band.is_empty(),
        format!("300 masks, ratios {}; violations {out_of_band:?}", ranges.join(" ")),
    ))
}

/// Direct 2-D window sums over every valid 11x11 placement.
fn oracle_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, c, h, w] = a.shape();
    let gray = |t: &Tensor<f64>, i: usize, y: usize, x: usize| {
        if c == 1 {
            t.at(i, 0, y, x)
        } else {
            0.299 * t.at(i, 0, y, x) + 0.587 * t.at(i, 1, y, x) + 0.114 * t.at(i, 2, y, x)
        }
    };
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g1[dy] * g1[dx] / norm;
                        let (p, q) = (gray(a, i, y0 + dy, x0 + dx), gray(b, i, y0 + dy, x0 + dx));
                        ma += k * p;
                        mb += k * q;
                        aa += k * p * p;
                        bb += k * q * q;
                        ab += k * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += sum / ((h - 10) * (w - 10)) as f64;
    }
    total / n as f64
}

fn metric_units() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 0.9, &mut rng);
    let shifted = x.map(|v| v + 0.1);
    let p = psnr(&x, &shifted)?;
    let self_ssim = ssim(&x, &x)?;
    let l1 = l1_pct(&Tensor::<f64>::zeros([1, 3, 8, 8]), &Tensor::full([1, 3, 8, 8], 1.0))?;

    let mut ssim_err = 0.0f64;
    let y = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    ssim_err = ssim_err.max((ssim(&x, &y)? - oracle_ssim(&x, &y)).abs());
    let clean = fixture_image::<f64>(3, 64, 0);
    let noisy = clean.zip_map(&Tensor::uniform([1, 3, 64, 64], -0.1, 0.1, &mut rng), |a, b| {
        (a + b).clamp(0.0, 1.0)
    })?;
    ssim_err = ssim_err.max((ssim(&clean, &noisy)? - oracle_ssim(&clean, &noisy)).abs());
    let gray_a = Tensor::<f64>::uniform([1, 1, 20, 27], 0.0, 1.0, &mut rng);
    let gray_b = gray_a.map(|v| 0.5 * v + 0.2);
    ssim_err = ssim_err.max((ssim(&gray_a, &gray_b)? - oracle_ssim(&gray_a, &gray_b)).abs());

    let pass =
        (p - 20.0).abs() <= 1e-9 && (self_ssim - 1.0).abs() <= 1e-12 && (l1 - 100.0).abs() <= 1e-12 && ssim_err <= 1e-8;
    Ok((
        pass,
        format!("psnr {p:.12} dB, ssim(x,x) {self_ssim}, l1% {l1}, ssim vs oracle {ssim_err:.2e}"),
    ))
}

fn determinism_and_resume() -> Outcome {
    let config = RunConfig {
        batch_size: Some(2),
        seed: 5,
        flip: true,
        ..RunConfig::default()
    };
    let data = || Dataset::<f64>::fixtures(0..4, 64, Bucket::B20_40, 5);
    let dir = tempfile::tempdir().map_err(|e| io_err(std::env::temp_dir(), e))?;
    let mut csvs = Vec::new();
    let mut finals = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("metrics{run}.csv"));
        let mut log = MetricsLog::open(&path, false)?;
        let mut t = Trainer::new(config.clone(), data()?)?;
        while t.step < 6 {
            log.push(&t.train_step()?)?;
        }
        drop(log);
        csvs.push(std::fs::read(&path).map_err(|e| io_err(&path, e))?);
        finals.push(
            t.model
                .params
                .iter()
                .map(|p| p.value.data().to_vec())
                .collect::<Vec<_>>(),
        );
    }
    let ckpt = dir.path().join("ckpt");
    let mut first = Trainer::new(config.clone(), data()?)?;
    first.run(3, |_, _| Ok(()))?;
    first.save_checkpoint(&ckpt)?;
    drop(first);
    let (mut resumed, _) = Trainer::resume(config, data()?, &ckpt)?;
    resumed.run(6, |_, _| Ok(()))?;
    let resumed_params: Vec<_> = resumed.model.params.iter().map(|p| p.value.data().to_vec()).collect();
    let same_csv = csvs[0] == csvs[1];
    let same_resume = resumed_params == finals[0];
    Ok((
        same_csv && same_resume && finals[0] == finals[1],
        format!(
            "metrics csv identical: {same_csv} ({} bytes), resumed params identical: {same_resume}",
            csvs[0].len()
        ),
    ))
}

fn io_err(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> misf::Error {
    misf::Error::Io {
        path: path.into(),
        source,
    }
}

fn selected() -> Option<Vec<usize>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let mut runs = Runs::default();
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "filtering oracle", Box::new(|_| filtering_oracle())),
        (2, "gradient suite", Box::new(|_| gradient_suite())),
        (3, "shape contract", Box::new(|_| shape_contract())),
        (4, "delta-kernel reduction", Box::new(|_| delta_reduction())),
        (5, "overfit", Box::new(overfit)),
        (6, "ablation direction", Box::new(ablation)),
        (7, "feature similarity direction", Box::new(feature_direction)),
        (8, "mask generator", Box::new(|_| mask_generator())),
        (9, "metric units", Box::new(|_| metric_units())),
        (10, "determinism and resume", Box::new(|_| determinism_and_resume())),
    ];
    let mut failures = 0;
    for (id, name, mut check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut runs)));
        let (pass, detail) = match result {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{failures} criteria failed");
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
