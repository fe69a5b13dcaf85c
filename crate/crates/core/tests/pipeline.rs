use dslic_core::fixtures::desk_scenes;
use dslic_core::image::CHANNELS;
use dslic_core::losses::objectness_loss;
use dslic_core::pipeline::{draws_for, evaluate_step, objectness_and_grad, random_patch, train_patch, train_patch_from, Draw};
use dslic_core::transforms::{apply_patch, TransformInstance};
use dslic_core::{run_slic, EotParams, Image, SceneSpec, SlicConfig, SurrogateDetector, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        slic: SlicConfig::new(32, 1.0),
        patch_height: 16,
        patch_width: 16,
        epochs: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn identity_clustering_reduces_to_plain_pipeline() {
    let scenes = desk_scenes()[..1].to_vec();
    let cfg = TrainConfig {
        slic: SlicConfig::new(16 * 16, 0.1),
        alpha: 0.0,
        eot: EotParams::identity(),
        epochs: 1,
        ..small_config()
    };
    let det = SurrogateDetector::new(cfg.victim_seed);
    let patch = random_patch(16, 16, 4);
    let draws = vec![Draw { scene: 0, transforms: vec![TransformInstance::identity()] }];
    let step = evaluate_step(&patch, &scenes, &draws, &cfg, &det, None).unwrap();
    let (value, grad) = objectness_and_grad(&det, &scenes[0], &patch, &draws[0].transforms, cfg.eot.patch_scale).unwrap();
    assert_eq!(step.clustered, patch);
    assert_eq!(step.total, value);
    assert_eq!(step.grad, grad);
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let cfg = TrainConfig { lr: 0.0, eot_frozen: true, ..small_config() };
    let start = random_patch(16, 16, 9);
    let report = train_patch_from(&desk_scenes(), &cfg, start.clone()).unwrap();
    assert_eq!(report.raw_patch, start);
    let first = &report.epochs[0];
    assert!(report.epochs.iter().all(|e| e.loss == first.loss && e.l_obj == first.l_obj));
}

#[test]
fn reruns_are_identical() {
    let cfg = small_config();
    let a = train_patch(&desk_scenes(), &cfg).unwrap();
    let b = train_patch(&desk_scenes(), &cfg).unwrap();
    assert_eq!(a.trace_csv(), b.trace_csv());
    assert_eq!(a.clustered_patch, b.clustered_patch);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn report_invariants() {
    let cfg = TrainConfig { epochs: 8, ..small_config() };
    let r = train_patch(&desk_scenes(), &cfg).unwrap();
    assert_eq!(r.epochs.len(), 8);
    assert!(r.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(r.optimizer.lr >= cfg.scheduler.min_lr);
    // the published patch is constant on each final superpixel
    let colors = r.final_clusters.colors();
    for (i, &c) in r.final_clusters.assignment().iter().enumerate() {
        assert_eq!(&r.clustered_patch.data()[i * CHANNELS..(i + 1) * CHANNELS], &colors[c][..]);
    }
    assert!(r.raw_patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn warm_start_runs_and_differs_from_cold() {
    let cfg = TrainConfig { epochs: 6, ..small_config() };
    let cold = train_patch(&desk_scenes(), &cfg).unwrap();
    let warm = train_patch(&desk_scenes(), &TrainConfig { warm_start: true, ..cfg }).unwrap();
    assert_eq!(cold.epochs[0], warm.epochs[0]);
    assert_eq!(warm.epochs.len(), 6);
}

#[test]
fn rejects_bad_inputs() {
    assert!(train_patch(&[], &small_config()).is_err());
    let scene = SceneSpec::new(Image::filled(32, 32, [0.5; 3]).unwrap(), vec![]).unwrap();
    assert!(train_patch(&[scene], &small_config()).is_err());
    let bad = TrainConfig { batch: 0, ..small_config() };
    assert!(train_patch(&desk_scenes(), &bad).is_err());
    assert!(train_patch_from(&desk_scenes(), &small_config(), random_patch(8, 8, 0)).is_err());
}

#[test]
fn median_loss_decreases_over_seeds() {
    let mut initial = vec![];
    let mut last = vec![];
    for seed in 0..5 {
        let cfg = TrainConfig { seed, epochs: 30, ..small_config() };
        let r = train_patch(&desk_scenes(), &cfg).unwrap();
        initial.push(r.epochs[0].loss);
        last.push(r.last().loss);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&mut last) < median(&mut initial));
}

/// Central differences of the whole step loss with respect to raw patch
/// pixels. Probes whose perturbation changes a SLIC assignment or the winning
/// score cell are skipped, as are probes touching a clamp.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let scenes = desk_scenes();
    let cfg = TrainConfig {
        slic: SlicConfig::new(24, 1.0),
        alpha: 0.01,
        ..small_config()
    };
    let det = SurrogateDetector::new(cfg.victim_seed);
    let patch = Image::from_clamped(16, 16, random_patch(16, 16, 2).data().iter().map(|v| 0.2 + 0.6 * v).collect()).unwrap();
    let draws = draws_for(&cfg, &scenes, &[0, 1], 0);
    let base = evaluate_step(&patch, &scenes, &draws, &cfg, &det, None).unwrap();
    let argmaxes = |p: &Image| -> Vec<usize> {
        let clustered = dslic_core::reconstruct(p, &run_slic(p, &cfg.slic).unwrap()).unwrap();
        draws
            .iter()
            .map(|d| {
                let applied = apply_patch(&scenes[d.scene], &clustered, &d.transforms, cfg.eot.patch_scale).unwrap();
                objectness_loss(&det.score_map(&applied.composited).scores).unwrap().argmax
            })
            .collect()
    };
    let base_argmax = argmaxes(&patch);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eps = 1e-6;
    let (mut kept, mut passed) = (0, 0);
    for _ in 0..60 {
        let k = rng.gen_range(0..patch.data().len());
        let shifted = |s: f64| {
            let mut d = patch.data().to_vec();
            d[k] += s;
            Image::new(16, 16, d).unwrap()
        };
        let (hi, lo) = (shifted(eps), shifted(-eps));
        let eh = evaluate_step(&hi, &scenes, &draws, &cfg, &det, None).unwrap();
        let el = evaluate_step(&lo, &scenes, &draws, &cfg, &det, None).unwrap();
        let flipped = eh.clusters.assignment() != base.clusters.assignment()
            || el.clusters.assignment() != base.clusters.assignment()
            || argmaxes(&hi) != base_argmax
            || argmaxes(&lo) != base_argmax;
        if flipped {
            continue;
        }
        kept += 1;
        let numeric = (eh.total - el.total) / (2.0 * eps);
        let analytic = base.grad.data()[k];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel <= 1e-3 {
            passed += 1;
        }
    }
    assert!(kept >= 30, "only {kept} probes kept");
    assert!(passed as f64 >= 0.95 * kept as f64, "{passed}/{kept}");
}
