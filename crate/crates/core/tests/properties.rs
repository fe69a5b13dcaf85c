use dslic_core::image::CHANNELS;
use dslic_core::slic::run_slic_features;
use dslic_core::{apply_vjp, factors_from, mse_loss, reconstruct, run_slic, tv_loss, Gradient, Image, SlicConfig, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image_strategy(max_side: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0..=1.0f64, h * w * CHANNELS).prop_map(move |d| Image::new(h, w, d).unwrap())
    })
}

/// An image, a valid K for it, and ω.
fn clustering_case() -> impl Strategy<Value = (Image, usize, f64)> {
    image_strategy(10).prop_flat_map(|img| {
        let n = img.pixel_count();
        (Just(img), 1..=n, prop_oneof![Just(0.0), 0.01..10.0f64])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vjp_is_a_symmetric_projection(((img, k, omega), seed) in (clustering_case(), any::<u64>())) {
        let (h, w) = img.dims();
        let state = run_slic(&img, &SlicConfig::new(k, omega)).unwrap();
        let f = factors_from(&state).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Gradient::new(h, w, (0..h * w * CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (g, q) = (draw(), draw());

        let pg = apply_vjp(&f, &g).unwrap();
        prop_assert!(apply_vjp(&f, &pg).unwrap().max_abs_diff(&pg) <= 1e-12);
        let pq = apply_vjp(&f, &q).unwrap();
        prop_assert!((pg.dot(&q) - g.dot(&pq)).abs() <= 1e-12);
        prop_assert!(apply_vjp(&f, &Gradient::filled(h, w, 1.0)).unwrap().max_abs_diff(&Gradient::filled(h, w, 1.0)) <= 1e-12);
        prop_assert!((pg.sum() - g.sum()).abs() <= 1e-9);
        let forward = apply_vjp(&f, &img.to_gradient()).unwrap();
        prop_assert!(forward.max_abs_diff(&reconstruct(&img, &state).unwrap().to_gradient()) <= 1e-12);
    }

    #[test]
    fn slic_objective_is_monotone((img, k, omega) in clustering_case()) {
        let cfg = SlicConfig { max_iters: 20, tol: 0.0, ..SlicConfig::new(k, omega) };
        let (state, trace) = run_slic_features(&img.to_features(), &cfg).unwrap();
        for pair in trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "{:?}", trace);
        }
        prop_assert_eq!(state.sizes().iter().sum::<usize>(), img.pixel_count());
        prop_assert!(state.sizes().iter().all(|&s| s > 0));
        prop_assert_eq!(state.k(), k);
    }

    #[test]
    fn reconstruct_is_constant_per_cluster((img, k, omega) in clustering_case()) {
        let state = run_slic(&img, &SlicConfig::new(k, omega)).unwrap();
        let out = reconstruct(&img, &state).unwrap();
        let colors = state.colors();
        for (i, &c) in state.assignment().iter().enumerate() {
            prop_assert_eq!(&out.data()[i * CHANNELS..(i + 1) * CHANNELS], &colors[c][..]);
        }
        // reclustering the clustered image with the same partition changes nothing
        let again = apply_vjp(&factors_from(&state).unwrap(), &out.to_gradient()).unwrap();
        prop_assert!(again.max_abs_diff(&out.to_gradient()) <= 1e-12);
    }

    #[test]
    fn tv_nonnegative_and_mse_symmetric(a in image_strategy(8), seed in any::<u64>()) {
        let tv = tv_loss(&a);
        prop_assert!(tv.value >= 0.0);
        let (h, w) = a.dims();
        let b = Image::new(h, w, a.data().iter().enumerate().map(|(i, v)| {
            let t = (seed.wrapping_add(i as u64) % 1000) as f64 / 999.0;
            (v + t) / 2.0
        }).collect()).unwrap();
        let ab = mse_loss(&a, &b).unwrap().value;
        let ba = mse_loss(&b, &a).unwrap().value;
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn config_text_round_trips(k in 1usize..4096, omega in 0.0..10.0f64, alpha in 0.0..5.0f64, seed in any::<u64>(), warm in any::<bool>()) {
        let mut cfg = TrainConfig { alpha, seed, warm_start: warm, ..TrainConfig::default() };
        cfg.slic.k = k;
        cfg.slic.omega = omega;
        prop_assert_eq!(TrainConfig::from_flat_text(&cfg.to_flat_text()).unwrap(), cfg);
    }
}
