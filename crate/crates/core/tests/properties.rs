//! Property tests for the invariants of sampling, losses, metrics, noise and inference.

use proptest::prelude::*;
use rand::SeedableRng;

use sdap::denoiser::{IdentityDenoiser, ZeroDenoiser};
use sdap::image::ImageGrid;
use sdap::inference;
use sdap::losses::{self, LossSpec, LossVariant, Sampler};
use sdap::metrics::{psnr, ssim, SsimMode};
use sdap::noise::{add_noise, NoiseSpec, SeedMode};
use sdap::sampling::{self, SamplingPlan};
use sdap::seed::Stream;

/// An image whose sides are multiples of `stride`, with its stride.
fn divisible_image() -> impl Strategy<Value = (ImageGrid, usize)> {
    (prop::sample::select(vec![1usize, 2, 3, 5]), 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(s, gr, gc, c)| {
            let n = gr * s * gc * s * c;
            (prop::collection::vec(-0.5f32..1.5, n), Just((s, gr * s, gc * s, c)))
        })
        .prop_map(|(data, (s, h, w, c))| (ImageGrid::from_planar(h, w, c, data).unwrap(), s))
}

fn any_image(max_side: usize) -> impl Strategy<Value = ImageGrid> {
    (1..=max_side, 1..=max_side, prop::sample::select(vec![1usize, 3]))
        .prop_flat_map(|(h, w, c)| (prop::collection::vec(0f32..1.0, h * w * c), Just((h, w, c))))
        .prop_map(|(data, (h, w, c))| ImageGrid::from_planar(h, w, c, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rsg_round_trip_is_bit_exact((img, s) in divisible_image(), seed in any::<u64>()) {
        let grid = sampling::grid_shape_for(&img, s).unwrap();
        let plan = sampling::make_rsg_plan(s, grid, &mut Stream::seed_from_u64(seed)).unwrap();
        let stack = sampling::rsg_split(&img, &plan).unwrap();
        prop_assert_eq!(sampling::rsg_merge(&stack).unwrap(), img);
    }

    #[test]
    fn identity_plan_is_pd((img, s) in divisible_image()) {
        let grid = sampling::grid_shape_for(&img, s).unwrap();
        let rsg = sampling::rsg_split(&img, &SamplingPlan::identity(s, grid).unwrap()).unwrap();
        let pd = sampling::pd_split(&img, s).unwrap();
        prop_assert_eq!(&rsg.subs, &pd.subs);
        prop_assert_eq!(sampling::pd_merge(&pd).unwrap(), img);
    }

    #[test]
    fn cells_are_permuted_not_altered((img, s) in divisible_image(), seed in any::<u64>()) {
        let grid = sampling::grid_shape_for(&img, s).unwrap();
        let plan = sampling::make_rsg_plan(s, grid, &mut Stream::seed_from_u64(seed)).unwrap();
        let stack = sampling::rsg_split(&img, &plan).unwrap();
        for c in 0..img.channels() {
            for u in 0..grid.0 {
                for v in 0..grid.1 {
                    let mut from_subs: Vec<u32> = stack.subs.iter().map(|sub| sub.get(u, v, c).to_bits()).collect();
                    let mut from_cell: Vec<u32> = (0..s * s).map(|k| img.get(u * s + k / s, v * s + k % s, c).to_bits()).collect();
                    from_subs.sort_unstable();
                    from_cell.sort_unstable();
                    prop_assert_eq!(from_subs, from_cell);
                }
            }
        }
    }

    #[test]
    fn pad_then_crop_restores(img in any_image(9), s in 1usize..5) {
        let (padded, crop) = sampling::pad_to_multiple(&img, s).unwrap();
        prop_assert_eq!(padded.height() % s, 0);
        prop_assert_eq!(padded.width() % s, 0);
        prop_assert_eq!(crop.apply(&padded).unwrap(), img);
    }

    #[test]
    fn losses_are_nonnegative_and_zero_on_exact_fit(
        (img, s) in divisible_image(),
        variant in prop::sample::select(LossVariant::ALL.to_vec()),
        rsg in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let sampler = if rsg { Sampler::Rsg } else { Sampler::Pd };
        let spec = LossSpec::new(variant, s, sampler).with_sigma_eps(7.0);
        let problem = losses::prepare(std::slice::from_ref(&img), &spec, &mut Stream::seed_from_u64(seed)).unwrap();
        prop_assert!(losses::value::<f64, _>(&ZeroDenoiser, &problem).unwrap() >= 0.0);
        let fitted = losses::LossProblem { targets: problem.inputs.clone(), ..problem };
        prop_assert_eq!(losses::value::<f64, _>(&IdentityDenoiser, &fitted).unwrap(), 0.0);
    }

    #[test]
    fn csdbsn_at_stride_one_is_apbsn(img in any_image(6), seed in any::<u64>()) {
        let a = losses::prepare(std::slice::from_ref(&img), &LossSpec::new(LossVariant::Csdbsn, 1, Sampler::Rsg), &mut Stream::seed_from_u64(seed)).unwrap();
        let b = losses::prepare(std::slice::from_ref(&img), &LossSpec::new(LossVariant::Apbsn, 1, Sampler::Rsg), &mut Stream::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_symmetric_and_bounded(a in any_image(16), seed in any::<u64>()) {
        let mut rng = Stream::seed_from_u64(seed);
        let b = add_noise(&a, &NoiseSpec::awgn(30.0, SeedMode::Fixed), 0, 0, rand::Rng::random(&mut rng)).unwrap();
        let p = psnr(&a, &b).unwrap();
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!((0.0..=100.0).contains(&p));
        if a.height() >= 11 && a.width() >= 11 {
            let s1 = ssim(&a, &b, SsimMode::ChannelMean).unwrap();
            let s2 = ssim(&b, &a, SsimMode::ChannelMean).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn fixed_noise_is_a_pure_function(img in any_image(8), index in 0u64..100, e1 in 0u64..50, e2 in 0u64..50, seed in any::<u64>()) {
        let spec = NoiseSpec::correlated(15.0, 2, SeedMode::Fixed);
        prop_assert_eq!(add_noise(&img, &spec, index, e1, seed).unwrap(), add_noise(&img, &spec, index, e2, seed).unwrap());
    }

    #[test]
    fn pipelines_preserve_shape_and_range(img in any_image(12), s in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let y = img.map(|v| v * 1.6 - 0.3);
        let out = inference::denoise_nrsg(&IdentityDenoiser, &y, s, n, &mut Stream::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.shape(), y.shape());
        prop_assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(inference::denoise_pd(&IdentityDenoiser, &y, s).unwrap(), y.clipped());
    }
}

#[test]
fn psnr_decreases_with_noise_level() {
    let clean = sdap::dataset::synthetic_scene(48, 48, 1, 0, 0);
    for seed in 0..5u64 {
        let mut last = f64::INFINITY;
        for sigma in [2.0, 5.0, 10.0, 20.0, 40.0] {
            let noisy = add_noise(&clean, &NoiseSpec::awgn(sigma, SeedMode::Fixed), 0, 0, seed).unwrap();
            let p = psnr(&clean, &noisy).unwrap();
            assert!(p < last, "sigma {sigma}: {p} >= {last}");
            last = p;
        }
    }
}

#[test]
fn rsg_difference_sign_is_not_fixed() {
    // A smooth ramp: under PD the difference of two sub-samples has one sign
    // everywhere; under RSG it varies from plan to plan.
    let img = ImageGrid::from_fn(16, 16, 1, |y, x, _| (y * 16 + x) as f32 / 255.0);
    let pd = sampling::pd_split(&img, 2).unwrap();
    let diff_sign = |a: &ImageGrid, b: &ImageGrid| -> Vec<bool> { a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x > y).collect() };
    let pd_signs = diff_sign(&pd.subs[0], &pd.subs[1]);
    assert!(pd_signs.iter().all(|&s| s == pd_signs[0]));

    let mut rng = Stream::seed_from_u64(1);
    let signs: Vec<Vec<bool>> = (0..20)
        .map(|_| {
            let plan = sampling::make_rsg_plan(2, (8, 8), &mut rng).unwrap();
            let st = sampling::rsg_split(&img, &plan).unwrap();
            diff_sign(&st.subs[0], &st.subs[1])
        })
        .collect();
    let varying = (0..64).filter(|&p| signs.iter().any(|s| s[p] != signs[0][p])).count();
    assert!(varying > 0);
}
