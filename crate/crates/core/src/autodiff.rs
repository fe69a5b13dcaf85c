//! Backward pass through SLIC.
//!
//! At a converged clustering the centroids satisfy the stationarity
//! condition `Σ_i a_ij (x_i − μ_j) = 0`, i.e. each centroid is the mean of its
//! members. Differentiating that condition with the assignment held fixed
//! gives `∂M/∂X = Γ Aᵀ ⊗ I₅`, and chaining through `Ĉ = A Φ` gives the
//! per-channel Jacobian `A Γ Aᵀ`. That matrix is symmetric and idempotent,
//! so its vector-Jacobian product is the same within-cluster mean that
//! produced the forward reconstruction.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{FeatureMatrix, Gradient, Image, CHANNELS};
use crate::losses::mse_loss;
use crate::slic::{reconstruct, reconstruct_raw, run_slic, run_slic_features, ClusterState, SlicConfig};

/// Dense encoding of `A` together with the diagonal of `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFactors {
    assignment: Vec<usize>,
    inv_sizes: Vec<f64>,
}

impl JacobianFactors {
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn inv_sizes(&self) -> &[f64] {
        &self.inv_sizes
    }

    pub fn pixel_count(&self) -> usize {
        self.assignment.len()
    }

    /// Within-cluster mean of each channel of a flat interleaved buffer.
    pub(crate) fn pool(&self, upstream: &[f64]) -> Vec<f64> {
        let mut sums = vec![[0.0f64; CHANNELS]; self.inv_sizes.len()];
        for (g, &a) in upstream.chunks_exact(CHANNELS).zip(&self.assignment) {
            for d in 0..CHANNELS {
                sums[a][d] += g[d];
            }
        }
        for (s, inv) in sums.iter_mut().zip(&self.inv_sizes) {
            for v in s.iter_mut() {
                *v *= inv;
            }
        }
        let mut out = Vec::with_capacity(upstream.len());
        for &a in &self.assignment {
            out.extend_from_slice(&sums[a]);
        }
        out
    }
}

pub fn factors_from(state: &ClusterState) -> Result<JacobianFactors> {
    let inv_sizes = state
        .sizes()
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            if n == 0 {
                Err(Error::EmptyCluster(j))
            } else {
                Ok(1.0 / n as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JacobianFactors {
        assignment: state.assignment().to_vec(),
        inv_sizes,
    })
}

/// Applies `A Γ Aᵀ` to every channel of `upstream` without forming the
/// `N × N` matrix.
pub fn apply_vjp(factors: &JacobianFactors, upstream: &Gradient) -> Result<Gradient> {
    let n = upstream.height() * upstream.width();
    if n != factors.pixel_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", factors.pixel_count()),
            got: format!("{n} pixels"),
        });
    }
    Gradient::new(upstream.height(), upstream.width(), factors.pool(upstream.data()))
}

/// Scalar functional of the clustered image used by [`grad_check`].
#[derive(Debug, Clone)]
pub enum Functional {
    /// `s(Ĉ) = Σ Ĉ`.
    Sum,
    /// `s(Ĉ) = (1/N)‖Ĉ − T‖²`.
    PixelMse(Image),
}

impl Functional {
    fn upstream(&self, clustered: &Image) -> Result<Gradient> {
        match self {
            Functional::Sum => Ok(Gradient::filled(clustered.height(), clustered.width(), 1.0)),
            Functional::PixelMse(target) => Ok(mse_loss(clustered, target)?.grad),
        }
    }

    /// `s(a) − s(b)` accumulated element by element, which keeps the
    /// cancellation error of a central difference at the level of the few
    /// entries that actually changed.
    fn difference(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Functional::Sum => a.iter().zip(b).map(|(x, y)| x - y).sum(),
            Functional::PixelMse(t) => {
                let n = (t.pixel_count()) as f64;
                a.iter()
                    .zip(b)
                    .zip(t.data())
                    .map(|((x, y), t)| ((x - t) * (x - t) - (y - t) * (y - t)) / n)
                    .sum()
            }
        }
    }
}

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub pixel: usize,
    pub channel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn evaluated(&self) -> usize {
        self.probes.len() - self.excluded
    }

    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.probes.len() as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "probes={} excluded={} max_abs_err={:e} max_rel_err={:e}",
            self.probes.len(),
            self.excluded,
            self.max_abs_err,
            self.max_rel_err
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe_pixel,channel,analytic,numeric,abs_err,rel_err,excluded\n");
        for p in &self.probes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.pixel,
                p.channel,
                p.analytic,
                p.numeric,
                p.abs_err,
                p.rel_err,
                u8::from(p.excluded)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Compares the analytic gradient of `s(Ĉ)` with central finite differences
/// at randomly chosen `(pixel, channel)` entries.
///
/// Each probe reruns the full forward SLIC at `C ± eps·e_k`. If either run
/// lands on a different assignment the probe is excluded; otherwise the
/// rerun equals the frozen-assignment forward and the difference quotient is
/// compared against the analytic derivative. Probe positions come from
/// `cfg.seed`.
pub fn grad_check(
    img: &Image,
    cfg: &SlicConfig,
    probes: usize,
    eps: f64,
    functional: &Functional,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    if probes == 0 {
        return Err(Error::InvalidConfig("at least one probe is required".into()));
    }
    if let Functional::PixelMse(t) = functional {
        if t.dims() != img.dims() {
            return Err(Error::shape(img.dims(), t.dims()));
        }
    }
    let (h, w) = img.dims();
    let (state, _) = run_slic_features(&img.to_features(), cfg)?;
    let clustered = reconstruct(img, &state)?;
    let analytic = apply_vjp(&factors_from(&state)?, &functional.upstream(&clustered)?)?;

    let total = img.data().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = index::sample(&mut rng, total, probes.min(total));

    let mut results = Vec::with_capacity(picks.len());
    let mut data = img.data().to_vec();
    for k in picks.iter() {
        let orig = data[k];
        data[k] = orig + eps;
        let plus = run_slic_features(&FeatureMatrix::from_raw(h, w, &data), cfg)?.0;
        data[k] = orig - eps;
        let minus = run_slic_features(&FeatureMatrix::from_raw(h, w, &data), cfg)?.0;
        data[k] = orig;

        let a = analytic.data()[k];
        let excluded =
            plus.assignment() != state.assignment() || minus.assignment() != state.assignment();
        let numeric = if excluded {
            f64::NAN
        } else {
            functional.difference(&reconstruct_raw(&plus), &reconstruct_raw(&minus)) / (2.0 * eps)
        };
        let abs_err = (a - numeric).abs();
        let rel_err = abs_err / a.abs().max(numeric.abs()).max(REL_FLOOR);
        results.push(ProbeResult {
            pixel: k / CHANNELS,
            channel: k % CHANNELS,
            analytic: a,
            numeric,
            abs_err,
            rel_err,
            excluded,
        });
    }

    let excluded = results.iter().filter(|p| p.excluded).count();
    if excluded == results.len() {
        return Err(Error::AllProbesExcluded(excluded));
    }
    let kept = results.iter().filter(|p| !p.excluded);
    let max_abs_err = kept.clone().map(|p| p.abs_err).fold(0.0, f64::max);
    let max_rel_err = kept.map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes: results,
        max_abs_err,
        max_rel_err,
        excluded,
    })
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    /// Raw optimized image `C`.
    pub image: Image,
    /// `C` clustered with the final assignment.
    pub clustered: Image,
    /// `L_pixel` before each step, followed by the value after the last step.
    pub trace: Vec<f64>,
}

/// Gradient descent on `C` so that its clustering matches `target`,
/// reclustering from scratch at every step.
pub fn toy_optimize(start: &Image, target: &Image, cfg: &SlicConfig, steps: usize, lr: f64) -> Result<ToyRun> {
    toy_optimize_with(start, target, cfg, steps, lr, |_, _, _| Ok(()))
}

/// [`toy_optimize`] with a callback invoked before every step and once at the
/// end with `(step, C, Ĉ)`.
pub fn toy_optimize_with<F>(
    start: &Image,
    target: &Image,
    cfg: &SlicConfig,
    steps: usize,
    lr: f64,
    mut observe: F,
) -> Result<ToyRun>
where
    F: FnMut(usize, &Image, &Image) -> Result<()>,
{
    if start.dims() != target.dims() {
        return Err(Error::shape(start.dims(), target.dims()));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be at least 1".into()));
    }
    let (h, w) = start.dims();
    let mut image = start.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let state = run_slic(&image, cfg)?;
        let clustered = reconstruct(&image, &state)?;
        let loss = mse_loss(&clustered, target)?;
        trace.push(loss.value);
        observe(step, &image, &clustered)?;
        if step == steps {
            return Ok(ToyRun {
                image,
                clustered,
                trace,
            });
        }
        let grad = factors_from(&state)?.pool(loss.grad.data());
        let next = image.data().iter().zip(&grad).map(|(c, g)| c - lr * g).collect();
        image = Image::from_clamped(h, w, next)?;
    }
    unreachable!()
}
