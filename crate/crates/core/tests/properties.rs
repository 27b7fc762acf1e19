use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use misf::config::RunConfig;
use misf::data::{generate_mask, hole_ratio, Bucket, MaskSpec};
use misf::filter::{normalize_kernels, pixel_filter};
use misf::metrics::{psnr, ssim};
use misf::{Boundary, FilterConfig, Normalize, Tensor};

#[derive(Debug, Clone)]
struct Instance {
    shape: [usize; 4],
    n: usize,
    per_channel: bool,
    boundary: Boundary,
    seed: u64,
}

fn instance() -> impl Strategy<Value = Instance> {
    (
        1usize..=2,
        1usize..=4,
        1usize..=7,
        1usize..=7,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(b, c, h, w, n, per_channel, zero, seed)| Instance {
            shape: [b, c, h, w],
            n,
            per_channel,
            boundary: if zero { Boundary::ZeroPad } else { Boundary::Replicate },
            seed,
        })
}

fn setup(i: &Instance, normalize: Normalize) -> (Tensor<f64>, Tensor<f64>, misf::KernelField<f64>) {
    let [b, c, h, w] = i.shape;
    let groups = if i.per_channel { c } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(i.seed);
    let x = Tensor::uniform(i.shape, -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(i.shape, -1.0, 1.0, &mut rng);
    let raw = Tensor::uniform([b, groups * i.n * i.n, h, w], -4.0, 4.0, &mut rng);
    let cfg = FilterConfig::new(i.n, groups, normalize, i.boundary).unwrap();
    (x, y, normalize_kernels(&raw, cfg).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_is_linear_in_the_input(i in instance(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (x, y, k) = setup(&i, Normalize::None);
        let mixed = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = pixel_filter(&mixed, &k).unwrap();
        let fx = pixel_filter(&x, &k).unwrap();
        let fy = pixel_filter(&y, &k).unwrap();
        let rhs = fx.zip_map(&fy, |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn softmax_replicate_output_stays_in_input_range(mut i in instance()) {
        i.boundary = Boundary::Replicate;
        let (x, _, k) = setup(&i, Normalize::Softmax);
        let out = pixel_filter(&x, &k).unwrap();
        prop_assert!(out.min_value() >= x.min_value() - 1e-12);
        prop_assert!(out.max_value() <= x.max_value() + 1e-12);
    }

    #[test]
    fn softmax_taps_are_a_distribution(i in instance()) {
        let (_, _, k) = setup(&i, Normalize::Softmax);
        prop_assert!(k.max_sum_error() <= 1e-12);
        prop_assert!(k.data.min_value() >= 0.0);
    }

    #[test]
    fn single_tap_softmax_is_identity(mut i in instance()) {
        i.n = 1;
        let (x, _, k) = setup(&i, Normalize::Softmax);
        prop_assert_eq!(pixel_filter(&x, &k).unwrap(), x);
    }

    #[test]
    fn masks_are_reproducible_and_in_bucket(seed in any::<u64>(), b in 0usize..3) {
        let spec = MaskSpec::new(Bucket::ALL[b], seed);
        let m = generate_mask::<f64>(&spec, 64, 64).unwrap();
        prop_assert_eq!(&m, &generate_mask::<f64>(&spec, 64, 64).unwrap());
        prop_assert!(Bucket::ALL[b].accepts(hole_ratio(&m)));
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..1e-2, l1 in 0.0f64..2.0, masked in any::<bool>()) {
        let mut c = RunConfig {
            seed,
            masked_l1: masked,
            ..RunConfig::default()
        };
        c.adam.lr = lr;
        c.weights.l1 = l1;
        let back = RunConfig::parse(&c.to_text(), None).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back.to_text(), c.to_text());
    }
}
