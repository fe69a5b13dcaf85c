//! Patch training: recluster, place, score, backpropagate through the
//! placement and through SLIC, then take an AMSGrad step.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::factors_from;
use crate::error::{Error, Result};
use crate::image::{Gradient, Image, CHANNELS};
use crate::losses::{objectness_loss, total_loss, tv_loss, LossValue};
use crate::slic::{reconstruct, run_slic_features, run_slic_warm, ClusterState, SlicConfig};
use crate::surrogate::{ScoreGrid, SurrogateDetector};
use crate::transforms::{apply_patch, backward_to_patch, sample_transforms, EotParams, SceneSpec, TransformInstance};

#[derive(Debug, Clone, PartialEq)]
pub struct AmsGradConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Reduce-on-plateau in minimization mode with an absolute threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 50,
            threshold: 1e-4,
            min_lr: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub slic: SlicConfig,
    /// Weight on the total-variation term.
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub eot: EotParams,
    pub scheduler: SchedulerConfig,
    pub amsgrad: AmsGradConfig,
    pub patch_height: usize,
    pub patch_width: usize,
    pub seed: u64,
    pub victim_seed: u64,
    /// Start each step's clustering from the previous step's centroids.
    pub warm_start: bool,
    /// Reuse the same transform draws every epoch.
    pub eot_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            slic: SlicConfig::new(256, 0.1),
            alpha: 2.5,
            lr: 0.03,
            epochs: 200,
            batch: 2,
            eot: EotParams::default(),
            scheduler: SchedulerConfig::default(),
            amsgrad: AmsGradConfig::default(),
            patch_height: 64,
            patch_width: 64,
            seed: 0,
            victim_seed: 0,
            warm_start: false,
            eot_frozen: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.patch_height == 0 || self.patch_width == 0 {
            return bad("patch size must be positive");
        }
        self.slic.validate(self.patch_height * self.patch_width)?;
        self.eot.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        let s = &self.scheduler;
        if s.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(s.factor > 0.0 && s.factor < 1.0) {
            return bad("scheduler factor must lie in (0, 1)");
        }
        if !(s.min_lr >= 0.0 && s.threshold >= 0.0) {
            return bad("min_lr and threshold must be nonnegative");
        }
        let a = &self.amsgrad;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("amsgrad needs beta1, beta2 in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

/// AMSGrad moments plus plateau-scheduler bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub best: f64,
    pub stall: usize,
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"DSLIC1";

impl OptimizerState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            v_hat: vec![0.0; len],
            step: 0,
            lr,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// `DSLIC1`, then little-endian `u64 len, u64 step, f64 lr, f64 best,
    /// u64 stall`, then `m`, `v`, `v_hat` as `len` f64 each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend((self.m.len() as u64).to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.lr.to_le_bytes());
        out.extend(self.best.to_le_bytes());
        out.extend((self.stall as u64).to_le_bytes());
        for v in self.m.iter().chain(&self.v).chain(&self.v_hat) {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::BadCheckpoint("missing DSLIC1 header".into()))?;
        let mut words = body.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).unwrap());
        let mut next = || words.next().ok_or_else(|| Error::BadCheckpoint("truncated".into()));
        let len = u64::from_le_bytes(next()?) as usize;
        let step = u64::from_le_bytes(next()?);
        let lr = f64::from_le_bytes(next()?);
        let best = f64::from_le_bytes(next()?);
        let stall = u64::from_le_bytes(next()?) as usize;
        if body.len() != 8 * (5 + 3 * len) {
            return Err(Error::BadCheckpoint(format!(
                "expected {} bytes of state, found {}",
                8 * (5 + 3 * len),
                body.len()
            )));
        }
        let mut vec = || -> Result<Vec<f64>> { (0..len).map(|_| next().map(f64::from_le_bytes)).collect() };
        let (m, v, v_hat) = (vec()?, vec()?, vec()?);
        Ok(Self { m, v, v_hat, step, lr, best, stall })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One AMSGrad update, in place. The first moment is bias corrected, the
/// running maximum of the second moment is not.
pub fn amsgrad_step(state: &mut OptimizerState, cfg: &AmsGradConfig, grad: &[f64], params: &mut [f64]) -> Result<()> {
    if grad.len() != params.len() || grad.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", state.m.len()),
            got: format!("{} gradients / {} parameters", grad.len(), params.len()),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    state.step += 1;
    let correction = 1.0 - cfg.beta1.powi(state.step as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.v_hat[i] = state.v_hat[i].max(state.v[i]);
        let m_hat = state.m[i] / correction;
        params[i] -= state.lr * m_hat / (state.v_hat[i].sqrt() + cfg.eps);
    }
    Ok(())
}

/// Feeds one epoch loss to the plateau scheduler. Returns whether the
/// learning rate was reduced.
pub fn scheduler_update(state: &mut OptimizerState, cfg: &SchedulerConfig, epoch_loss: f64) -> bool {
    if epoch_loss < state.best - cfg.threshold {
        state.best = epoch_loss;
        state.stall = 0;
        return false;
    }
    state.stall += 1;
    if state.stall > cfg.patience {
        state.lr = (state.lr * cfg.factor).max(cfg.min_lr);
        state.stall = 0;
        return true;
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_obj: f64,
    pub l_tv: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub raw_patch: Image,
    /// The deliverable: `raw_patch` clustered with its final superpixels.
    pub clustered_patch: Image,
    pub final_clusters: ClusterState,
    /// Mean objectness of the clustered initial patch on the held evaluation draws.
    pub initial_obj: f64,
    /// Same evaluation for the clustered final patch.
    pub final_obj: f64,
    pub optimizer: OptimizerState,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,loss,l_obj,l_tv,lr\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.l_obj, r.l_tv, r.lr);
        }
        s
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Per-pair transform draws: for each scene in the batch and each EOT
/// sample, one transform per box.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub scene: usize,
    pub transforms: Vec<TransformInstance>,
}

fn mix(mut h: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the parts
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

const EVAL_TAG: u64 = u64::MAX;

/// Deterministic transform draws for the given scenes at `epoch`.
pub fn draws_for(cfg: &TrainConfig, scenes: &[SceneSpec], indices: &[usize], epoch: u64) -> Vec<Draw> {
    let epoch = if cfg.eot_frozen { 0 } else { epoch };
    let mut out = Vec::with_capacity(indices.len() * cfg.eot.samples_per_scene);
    for &s in indices {
        for sample in 0..cfg.eot.samples_per_scene {
            let seed = mix(cfg.seed, &[cfg.eot.seed, epoch, s as u64, sample as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.push(Draw {
                scene: s,
                transforms: sample_transforms(&cfg.eot, scenes[s].boxes.len(), &mut rng),
            });
        }
    }
    out
}

/// Max objectness of one composited scene and its gradient with respect to
/// the (clustered) patch.
pub fn objectness_and_grad(
    det: &SurrogateDetector,
    scene: &SceneSpec,
    patch: &Image,
    transforms: &[TransformInstance],
    patch_scale: f64,
) -> Result<(f64, Gradient)> {
    let applied = apply_patch(scene, patch, transforms, patch_scale)?;
    let grid = det.score_map(&applied.composited);
    let obj = objectness_loss(&grid.scores)?;
    let up = ScoreGrid { scores: obj.grad, ..grid };
    let g_scene = det.backward(&applied.composited, &up)?;
    Ok((obj.value, backward_to_patch(&applied, &g_scene)?))
}

/// Loss terms and gradient with respect to the raw patch for one step.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub total: f64,
    pub l_obj: f64,
    pub l_tv: f64,
    pub grad: Gradient,
    pub clustered: Image,
    pub clusters: ClusterState,
}

/// Clusters `patch`, composites the clustered patch for every draw, and
/// backpropagates `alpha·L_TV + mean L_obj` to the raw patch through SLIC.
pub fn evaluate_step(
    patch: &Image,
    scenes: &[SceneSpec],
    draws: &[Draw],
    cfg: &TrainConfig,
    det: &SurrogateDetector,
    warm: Option<&[[f64; 5]]>,
) -> Result<StepEval> {
    let features = patch.to_features();
    let (clusters, _) = match warm {
        Some(c) => run_slic_warm(&features, c, &cfg.slic)?,
        None => run_slic_features(&features, &cfg.slic)?,
    };
    let clustered = reconstruct(patch, &clusters)?;
    let (h, w) = patch.dims();

    let pairs: Vec<(f64, Gradient)> = draws
        .par_iter()
        .map(|d| objectness_and_grad(det, &scenes[d.scene], &clustered, &d.transforms, cfg.eot.patch_scale))
        .collect::<Result<_>>()?;
    let inv = 1.0 / pairs.len() as f64;
    let mut obj_grad = vec![0.0; h * w * CHANNELS];
    let mut l_obj = 0.0;
    for (v, g) in &pairs {
        l_obj += v;
        for (acc, x) in obj_grad.iter_mut().zip(g.data()) {
            *acc += x;
        }
    }
    obj_grad.iter_mut().for_each(|g| *g *= inv);
    let obj = LossValue {
        value: l_obj * inv,
        grad: Gradient::new(h, w, obj_grad)?,
    };
    let tv = tv_loss(&clustered);
    let total = total_loss(&clustered, &tv, &obj, cfg.alpha)?;
    let grad = crate::autodiff::apply_vjp(&factors_from(&clusters)?, &total.grad)?;
    Ok(StepEval {
        total: total.value,
        l_obj: obj.value,
        l_tv: tv.value,
        grad,
        clustered,
        clusters,
    })
}

/// Mean objectness of an already clustered patch over the held-out
/// evaluation draws (one per scene and EOT sample, independent of epoch).
pub fn evaluate_objectness(clustered: &Image, scenes: &[SceneSpec], cfg: &TrainConfig, det: &SurrogateDetector) -> Result<f64> {
    let indices: Vec<usize> = (0..scenes.len()).collect();
    let draws = draws_for(cfg, scenes, &indices, EVAL_TAG);
    let values: Vec<f64> = draws
        .par_iter()
        .map(|d| {
            let applied = apply_patch(&scenes[d.scene], clustered, &d.transforms, cfg.eot.patch_scale)?;
            Ok(objectness_loss(&det.score_map(&applied.composited).scores)?.value)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Uniform noise in `[0, 1)` drawn from `seed`.
pub fn random_patch(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(height, width, (0..height * width * CHANNELS).map(|_| rng.gen()).collect())
        .expect("uniform draws lie in [0, 1)")
}

pub fn train_patch(scenes: &[SceneSpec], cfg: &TrainConfig) -> Result<TrainReport> {
    train_patch_from(scenes, cfg, random_patch(cfg.patch_height, cfg.patch_width, cfg.seed))
}

/// Trains starting from a given raw patch.
pub fn train_patch_from(scenes: &[SceneSpec], cfg: &TrainConfig, start: Image) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("at least one scene is required".into()));
    }
    if start.dims() != (cfg.patch_height, cfg.patch_width) {
        return Err(Error::shape((cfg.patch_height, cfg.patch_width), start.dims()));
    }
    if let Some(i) = scenes.iter().position(|s| s.boxes.is_empty()) {
        return Err(Error::InvalidConfig(format!("scene {i} has no boxes")));
    }
    let clock = Instant::now();
    let det = SurrogateDetector::new(cfg.victim_seed);
    let (h, w) = start.dims();

    let initial_clusters = run_slic_features(&start.to_features(), &cfg.slic)?.0;
    let initial_obj = evaluate_objectness(&reconstruct(&start, &initial_clusters)?, scenes, cfg, &det)?;

    let mut params = start.into_data();
    let mut opt = OptimizerState::new(params.len(), cfg.lr);
    let mut warm: Option<Vec<[f64; 5]>> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    let indices: Vec<usize> = (0..scenes.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = opt.lr;
        let (mut sum_total, mut sum_obj, mut sum_tv, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for batch in indices.chunks(cfg.batch) {
            let patch = Image::new(h, w, params.clone())?;
            let draws = draws_for(cfg, scenes, batch, epoch as u64);
            let eval = evaluate_step(&patch, scenes, &draws, cfg, &det, warm.as_deref())?;
            if cfg.warm_start {
                warm = Some(eval.clusters.centroids().to_vec());
            }
            sum_total += eval.total;
            sum_obj += eval.l_obj;
            sum_tv += eval.l_tv;
            steps += 1;
            amsgrad_step(&mut opt, &cfg.amsgrad, eval.grad.data(), &mut params)?;
            params.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        }
        let n = steps as f64;
        let loss = sum_total / n;
        records.push(EpochRecord {
            epoch,
            loss,
            l_obj: sum_obj / n,
            l_tv: sum_tv / n,
            lr,
        });
        scheduler_update(&mut opt, &cfg.scheduler, loss);
    }

    let raw_patch = Image::new(h, w, params)?;
    let features = raw_patch.to_features();
    let final_clusters = match &warm {
        Some(c) => run_slic_warm(&features, c, &cfg.slic)?.0,
        None => run_slic_features(&features, &cfg.slic)?.0,
    };
    let clustered_patch = reconstruct(&raw_patch, &final_clusters)?;
    let final_obj = evaluate_objectness(&clustered_patch, scenes, cfg, &det)?;
    Ok(TrainReport {
        epochs: records,
        raw_patch,
        clustered_patch,
        final_clusters,
        initial_obj,
        final_obj,
        optimizer: opt,
        wall_clock_s: clock.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = OptimizerState::new(3, 0.03);
        let mut p = vec![0.1, 0.2, 0.3];
        amsgrad_step(&mut s, &AmsGradConfig::default(), &[0.0; 3], &mut p).unwrap();
        assert_eq!(p, vec![0.1, 0.2, 0.3]);
        assert_eq!(s.v_hat, vec![0.0; 3]);
    }

    #[test]
    fn first_step_by_hand() {
        // m1 = 0.1, m̂1 = 0.1/(1−0.9) = 1, v1 = v̂1 = 0.001
        let mut s = OptimizerState::new(1, 0.03);
        let mut p = vec![0.0];
        amsgrad_step(&mut s, &AmsGradConfig::default(), &[1.0], &mut p).unwrap();
        let expected = -0.03 * 1.0 / (0.001f64.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{}", p[0]);
        assert!((p[0] + 0.948_683_0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut s = OptimizerState::new(2, 0.03);
        let mut p = vec![0.0; 2];
        assert!(matches!(
            amsgrad_step(&mut s, &AmsGradConfig::default(), &[0.0, f64::NAN], &mut p),
            Err(Error::NonFiniteGradient(1))
        ));
    }

    #[test]
    fn v_hat_is_monotone() {
        let mut s = OptimizerState::new(1, 0.01);
        let mut p = vec![0.0];
        let mut prev = 0.0;
        for g in [5.0, 0.1, 0.0, 3.0, 0.01, 0.01] {
            amsgrad_step(&mut s, &AmsGradConfig::default(), &[g], &mut p).unwrap();
            assert!(s.v_hat[0] >= prev);
            prev = s.v_hat[0];
        }
    }

    #[test]
    fn scheduler_plateau() {
        let cfg = SchedulerConfig::default();
        let mut s = OptimizerState::new(0, 0.03);
        let mut reduced_at = vec![];
        for epoch in 1..=52 {
            if scheduler_update(&mut s, &cfg, 1.0) {
                reduced_at.push(epoch);
            }
        }
        assert_eq!(reduced_at, vec![52]);
        assert_eq!(s.lr, 0.015);
    }

    #[test]
    fn scheduler_improving() {
        let cfg = SchedulerConfig::default();
        let mut s = OptimizerState::new(0, 0.03);
        for epoch in 0..300 {
            assert!(!scheduler_update(&mut s, &cfg, 10.0 - epoch as f64 * 0.01));
        }
        // improvement every 10 epochs only
        let mut s = OptimizerState::new(0, 0.03);
        for epoch in 0..300 {
            let loss = 10.0 - (epoch / 10) as f64;
            assert!(!scheduler_update(&mut s, &cfg, loss));
        }
        assert_eq!(s.lr, 0.03);
    }

    #[test]
    fn scheduler_respects_min_lr() {
        let cfg = SchedulerConfig { patience: 1, ..SchedulerConfig::default() };
        let mut s = OptimizerState::new(0, 2e-5);
        for _ in 0..10 {
            scheduler_update(&mut s, &cfg, 1.0);
        }
        assert_eq!(s.lr, cfg.min_lr);
    }

    #[test]
    fn checkpoint_round_trip_and_header() {
        let mut s = OptimizerState::new(4, 0.03);
        let mut p = vec![0.5; 4];
        amsgrad_step(&mut s, &AmsGradConfig::default(), &[0.1, -0.2, 0.3, 0.0], &mut p).unwrap();
        scheduler_update(&mut s, &SchedulerConfig::default(), 3.0);
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..6], b"DSLIC1");
        assert_eq!(OptimizerState::from_bytes(&bytes).unwrap(), s);
        assert!(OptimizerState::from_bytes(b"DSLIC0").is_err());
        assert!(OptimizerState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.scheduler.factor = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.slic.k = 64 * 64 + 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frozen_draws_ignore_epoch() {
        let scenes = crate::fixtures::desk_scenes();
        let cfg = TrainConfig { eot_frozen: true, ..TrainConfig::default() };
        assert_eq!(draws_for(&cfg, &scenes, &[0, 1], 0), draws_for(&cfg, &scenes, &[0, 1], 7));
        let cfg = TrainConfig::default();
        assert_ne!(draws_for(&cfg, &scenes, &[0, 1], 0), draws_for(&cfg, &scenes, &[0, 1], 7));
    }
}
