//! Forward SLIC over joint `[x, y, r, g, b]` features.
//!
//! Distances are the weighted squared norm `‖w ⊙ (x_i − μ_j)‖²` with
//! `w = [ω, ω, 1, 1, 1]`, and every pixel is compared against every centroid
//! (no search window). The same objective is what the backward pass in
//! [`crate::autodiff`] differentiates, so the two must stay consistent.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{FeatureMatrix, Image, CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct SlicConfig {
    pub k: usize,
    /// Spatial sensitivity. Applied to coordinate differences before squaring.
    pub omega: f64,
    pub max_iters: usize,
    /// Stop once the objective drops by less than this between assignments.
    pub tol: f64,
    /// Carried through for callers that derive probe or training streams from
    /// the clustering config; the forward pass itself draws no randomness.
    pub seed: u64,
    /// Merge disconnected fragments of a cluster into a neighbour after
    /// convergence. Off by default: it moves pixels outside the objective.
    pub enforce_connectivity: bool,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 256,
            omega: 0.1,
            max_iters: 10,
            tol: 1e-6,
            seed: 0,
            enforce_connectivity: false,
        }
    }
}

impl SlicConfig {
    pub fn new(k: usize, omega: f64) -> Self {
        Self {
            k,
            omega,
            ..Self::default()
        }
    }

    pub fn validate(&self, pixel_count: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.k > pixel_count {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds the pixel count {pixel_count}",
                self.k
            )));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "omega must be finite and nonnegative, got {}",
                self.omega
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be nonnegative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

fn squared_weights(omega: f64) -> [f64; 5] {
    let s = omega * omega;
    [s, s, 1.0, 1.0, 1.0]
}

#[inline]
fn weighted_dist(w2: &[f64; 5], x: &[f64; 5], mu: &[f64; 5]) -> f64 {
    let mut d = 0.0;
    for q in 0..5 {
        let t = x[q] - mu[q];
        d += w2[q] * t * t;
    }
    d
}

/// Centroids, hard assignment and cluster sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    centroids: Vec<[f64; 5]>,
    assignment: Vec<usize>,
    sizes: Vec<usize>,
    objective: f64,
    omega: f64,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[[f64; 5]] {
        &self.centroids
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Weighted within-cluster sum of squares at the current centroids.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Mean color of each cluster, the `K × 3` block of the centroids.
    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.centroids.iter().map(|m| [m[2], m[3], m[4]]).collect()
    }

    pub fn write_assignment_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.assignment_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_centroids_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.centroids_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn assignment_csv(&self) -> String {
        let mut s = String::from("pixel_index,cluster_index\n");
        for (i, a) in self.assignment.iter().enumerate() {
            let _ = writeln!(s, "{i},{a}");
        }
        s
    }

    pub fn centroids_csv(&self) -> String {
        let mut s = String::from("cluster,px,py,r,g,b\n");
        for (j, m) in self.centroids.iter().enumerate() {
            let _ = writeln!(s, "{j},{},{},{},{},{}", m[0], m[1], m[2], m[3], m[4]);
        }
        s
    }
}

/// Evaluates `Σ_i ‖w ⊙ (x_i − μ_{a_i})‖²` for an arbitrary assignment.
pub fn objective(features: &FeatureMatrix, centroids: &[[f64; 5]], assignment: &[usize], omega: f64) -> f64 {
    let w2 = squared_weights(omega);
    features
        .rows()
        .iter()
        .zip(assignment)
        .map(|(x, &a)| weighted_dist(&w2, x, &centroids[a]))
        .sum()
}

/// Grid seeding: `K` centroids spread over rows of a regular lattice with
/// spacing about `√(N/K)`, each taking the color of its nearest pixel.
/// The returned state has already been through one [`assign`] pass.
pub fn init_centroids(features: &FeatureMatrix, cfg: &SlicConfig) -> Result<ClusterState> {
    let (height, width) = features.dims();
    let n = features.len();
    cfg.validate(n)?;
    let k = cfg.k;

    let spacing = (n as f64 / k as f64).sqrt();
    let min_rows = k.div_ceil(width);
    let grid_rows = ((height as f64 / spacing).round() as usize).clamp(min_rows, height.min(k));

    let mut centroids = Vec::with_capacity(k);
    for r in 0..grid_rows {
        let in_row = (r + 1) * k / grid_rows - r * k / grid_rows;
        let y = (r as f64 + 0.5) * height as f64 / grid_rows as f64 - 0.5;
        for c in 0..in_row {
            let x = (c as f64 + 0.5) * width as f64 / in_row as f64 - 0.5;
            let px = ((x + 0.5).floor() as usize).min(width - 1);
            let py = ((y + 0.5).floor() as usize).min(height - 1);
            let color = &features.rows()[py * width + px][2..];
            centroids.push([x, y, color[0], color[1], color[2]]);
        }
    }
    debug_assert_eq!(centroids.len(), k);

    let state = ClusterState {
        centroids,
        assignment: vec![0; n],
        sizes: vec![0; k],
        objective: f64::INFINITY,
        omega: cfg.omega,
    };
    Ok(assign(features, state, cfg))
}

/// Assigns every pixel to its nearest centroid (lowest index on ties), then
/// repairs empty clusters.
///
/// An empty cluster is reseeded at the pixel farthest from its own centroid
/// (among pixels whose cluster can spare one) and that pixel is moved into
/// it. The moved pixel sits at distance zero, so the objective never rises.
pub fn assign(features: &FeatureMatrix, mut state: ClusterState, cfg: &SlicConfig) -> ClusterState {
    let w2 = squared_weights(cfg.omega);
    let centroids = &state.centroids;
    let (mut assignment, mut dist): (Vec<usize>, Vec<f64>) = features
        .rows()
        .par_iter()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, mu) in centroids.iter().enumerate() {
                let d = weighted_dist(&w2, x, mu);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip();

    let mut sizes = vec![0usize; state.centroids.len()];
    for &a in &assignment {
        sizes[a] += 1;
    }

    for j in 0..sizes.len() {
        if sizes[j] > 0 {
            continue;
        }
        let donor = (0..assignment.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n guarantees a cluster with a spare pixel");
        sizes[assignment[donor]] -= 1;
        assignment[donor] = j;
        sizes[j] = 1;
        state.centroids[j] = features.rows()[donor];
        dist[donor] = 0.0;
    }

    state.objective = dist.iter().sum();
    state.assignment = assignment;
    state.sizes = sizes;
    state.omega = cfg.omega;
    state
}

/// Moves every centroid to the mean of its members, the stationary point of
/// the objective for a fixed assignment.
pub fn update_centroids(features: &FeatureMatrix, mut state: ClusterState) -> ClusterState {
    let k = state.centroids.len();
    let mut sums = vec![[0.0f64; 5]; k];
    let mut sizes = vec![0usize; k];
    for (x, &a) in features.rows().iter().zip(&state.assignment) {
        for q in 0..5 {
            sums[a][q] += x[q];
        }
        sizes[a] += 1;
    }
    for (j, (sum, &size)) in sums.iter().zip(&sizes).enumerate() {
        // assign() never leaves a cluster empty; keep the old centroid if a
        // hand-built state does
        if size > 0 {
            let inv = size as f64;
            state.centroids[j] = sum.map(|s| s / inv);
        }
    }
    state.sizes = sizes;
    state.objective = objective(features, &state.centroids, &state.assignment, state.omega);
    state
}

/// Runs SLIC on an image.
pub fn run_slic(img: &Image, cfg: &SlicConfig) -> Result<ClusterState> {
    run_slic_features(&img.to_features(), cfg).map(|(s, _)| s)
}

/// Runs SLIC from grid seeds and returns the state together with the
/// objective after every assign and update step.
///
/// The returned centroids are always the exact means of the returned
/// assignment.
pub fn run_slic_features(features: &FeatureMatrix, cfg: &SlicConfig) -> Result<(ClusterState, Vec<f64>)> {
    let state = init_centroids(features, cfg)?;
    Ok(iterate(features, state, cfg))
}

/// Like [`run_slic_features`] but starts from the given centroids instead of
/// grid seeds.
pub fn run_slic_warm(
    features: &FeatureMatrix,
    centroids: &[[f64; 5]],
    cfg: &SlicConfig,
) -> Result<(ClusterState, Vec<f64>)> {
    cfg.validate(features.len())?;
    if centroids.len() != cfg.k {
        return Err(Error::InvalidConfig(format!(
            "warm start has {} centroids, config asks for {}",
            centroids.len(),
            cfg.k
        )));
    }
    let state = ClusterState {
        centroids: centroids.to_vec(),
        assignment: vec![0; features.len()],
        sizes: vec![0; cfg.k],
        objective: f64::INFINITY,
        omega: cfg.omega,
    };
    Ok(iterate(features, assign(features, state, cfg), cfg))
}

fn iterate(features: &FeatureMatrix, mut state: ClusterState, cfg: &SlicConfig) -> (ClusterState, Vec<f64>) {
    let mut trace = vec![state.objective];
    for _ in 0..cfg.max_iters {
        let before = state.objective;
        state = update_centroids(features, state);
        trace.push(state.objective);
        state = assign(features, state, cfg);
        trace.push(state.objective);
        if before - state.objective < cfg.tol {
            break;
        }
    }
    state = update_centroids(features, state);
    trace.push(state.objective);
    if cfg.enforce_connectivity {
        state = merge_fragments(features, state);
        state = update_centroids(features, state);
    }
    (state, trace)
}

/// Keeps the largest 4-connected component of every cluster and hands each
/// remaining fragment to the cluster of its first neighbour in scan order.
fn merge_fragments(features: &FeatureMatrix, mut state: ClusterState) -> ClusterState {
    let (height, width) = features.dims();
    let n = height * width;
    let labels = &mut state.assignment;
    let mut component = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if component[seed] != usize::MAX {
            continue;
        }
        let id = members.len();
        let mut pixels = vec![seed];
        component[seed] = id;
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for q in neighbours(p, width, height) {
                if component[q] == usize::MAX && labels[q] == labels[seed] {
                    component[q] = id;
                    pixels.push(q);
                    queue.push_back(q);
                }
            }
        }
        members.push(pixels);
    }

    let mut largest = vec![usize::MAX; state.centroids.len()];
    for (id, pixels) in members.iter().enumerate() {
        let label = labels[pixels[0]];
        if largest[label] == usize::MAX || members[largest[label]].len() < pixels.len() {
            largest[label] = id;
        }
    }
    for (id, pixels) in members.iter().enumerate() {
        let label = labels[pixels[0]];
        if largest[label] == id {
            continue;
        }
        let target = pixels
            .iter()
            .flat_map(|&p| neighbours(p, width, height))
            .find(|&q| component[q] != id)
            .map(|q| labels[q]);
        if let Some(t) = target {
            for &p in pixels {
                labels[p] = t;
            }
        }
    }
    state
}

fn neighbours(p: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % width, p / width);
    [
        (x > 0).then(|| p - 1),
        (y > 0).then(|| p - width),
        (x + 1 < width).then(|| p + 1),
        (y + 1 < height).then(|| p + width),
    ]
    .into_iter()
    .flatten()
}

/// Clustered image: every pixel takes the mean color of its cluster.
pub fn reconstruct(img: &Image, state: &ClusterState) -> Result<Image> {
    if state.assignment.len() != img.pixel_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", img.pixel_count()),
            got: format!("{} assignments", state.assignment.len()),
        });
    }
    Image::new(img.height(), img.width(), reconstruct_raw(state))
}

pub(crate) fn reconstruct_raw(state: &ClusterState) -> Vec<f64> {
    let mut out = Vec::with_capacity(state.assignment.len() * CHANNELS);
    for &a in &state.assignment {
        out.extend_from_slice(&state.centroids[a][2..]);
    }
    out
}
