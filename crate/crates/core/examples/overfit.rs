//! Overfit a tiny model on the fixture set and print the training curve.
//!
//! `cargo run --release --example overfit -- [variant] [iters] [seed]`

use misf::config::RunConfig;
use misf::data::{Bucket, Dataset, FIXTURE_SIZE};
use misf::losses::LossWeights;
use misf::train::{overfit_harness, Trainer};

fn main() -> misf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().map_or(Ok(misf::Variant::Misf), |v| v.parse())?;
    let iters = args.get(1).map_or(2000, |v| v.parse().expect("iters"));
    let seed = args.get(2).map_or(0, |v| v.parse().expect("seed"));
    let config = RunConfig {
        variant,
        seed,
        weights: LossWeights::L1_ONLY,
        ..RunConfig::default()
    };
    let data = Dataset::<f32>::fixtures(0..16, FIXTURE_SIZE, Bucket::B0_20, seed)?;
    let mut trainer = Trainer::new(config, data)?;
    let start = std::time::Instant::now();
    let report = overfit_harness(&mut trainer, iters, 100)?;
    for p in &report.curve {
        println!(
            "{:>5} psnr {:.3} ssim {:.4} l1% {:.3}",
            p.iter, p.psnr, p.ssim, p.l1_pct
        );
    }
    println!("{variant} seed {seed}: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
