//! Grid sweeps over (K, ω, α, seed).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::{train_patch, TrainConfig};
use crate::transforms::SceneSpec;

pub const RESULTS_HEADER: &str = "k,omega,alpha,seed,final_obj,final_tv,final_total,epochs,wall_s";
pub const TABLE_HEADER: &str = "k,omega,alpha,runs,mean_final_obj";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub k_values: Vec<usize>,
    pub omega_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k_values: (500..=4000).step_by(100).collect(),
            omega_values: vec![0.1, 1.0, 10.0],
            alpha_values: vec![0.0, 2.5],
            base: TrainConfig::default(),
            seeds: vec![0],
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub k: usize,
    pub omega: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.omega_values.is_empty() || self.alpha_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep lists must be nonempty".into()));
        }
        let n = self.base.patch_height * self.base.patch_width;
        if let Some(k) = self.k_values.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::InvalidConfig(format!("k={k} is outside 1..={n} for this patch size")));
        }
        self.base.validate()
    }

    /// Grid points with K outermost and seed innermost.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &k in &self.k_values {
            for &omega in &self.omega_values {
                for &alpha in &self.alpha_values {
                    for &seed in &self.seeds {
                        out.push(SweepPoint { k, omega, alpha, seed });
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, p: &SweepPoint) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.slic.k = p.k;
        cfg.slic.omega = p.omega;
        cfg.alpha = p.alpha;
        cfg.seed = p.seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub final_obj: f64,
    pub final_tv: f64,
    pub final_total: f64,
    pub epochs: usize,
    pub wall_s: f64,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let p = &self.point;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            p.k, p.omega, p.alpha, p.seed, self.final_obj, self.final_tv, self.final_total, self.epochs, self.wall_s
        )
    }
}

pub fn run_point(spec: &SweepSpec, scenes: &[SceneSpec], p: &SweepPoint) -> Result<SweepRow> {
    let report = train_patch(scenes, &spec.config_for(p))?;
    let last = report.last();
    Ok(SweepRow {
        point: *p,
        final_obj: last.l_obj,
        final_tv: last.l_tv,
        final_total: last.loss,
        epochs: report.epochs.len(),
        wall_s: report.wall_clock_s,
    })
}

/// Runs the grid `chunk` points at a time in parallel and hands rows to
/// `sink` in grid order after each chunk completes. An error stops the
/// sweep after the rows already delivered.
pub fn run_sweep(
    spec: &SweepSpec,
    scenes: &[SceneSpec],
    chunk: usize,
    mut sink: impl FnMut(&SweepRow) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let points = spec.points();
    let mut rows = Vec::with_capacity(points.len());
    for group in points.chunks(chunk.max(1)) {
        let done: Vec<Result<SweepRow>> = group.par_iter().map(|p| run_point(spec, scenes, p)).collect();
        for r in done {
            let row = r?;
            sink(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean final objectness per (K, ω, α), averaged over seeds, in first-seen order.
pub fn objectness_table(rows: &[SweepRow]) -> String {
    let mut groups: Vec<((usize, f64, f64), Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.point.k, r.point.omega, r.point.alpha);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.final_obj),
            None => groups.push((key, vec![r.final_obj])),
        }
    }
    let mut s = format!("{TABLE_HEADER}\n");
    for ((k, omega, alpha), v) in groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let _ = writeln!(s, "{k},{omega},{alpha},{},{mean}", v.len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let spec = SweepSpec::default();
        assert_eq!(spec.k_values.len(), 36);
        assert_eq!((spec.k_values[0], spec.k_values[35]), (500, 4000));
        assert_eq!(spec.points().len(), 36 * 3 * 2);
    }

    #[test]
    fn points_in_grid_order() {
        let spec = SweepSpec {
            k_values: vec![4, 9],
            omega_values: vec![0.1],
            alpha_values: vec![0.0, 2.5],
            seeds: vec![1, 2],
            ..SweepSpec::default()
        };
        let p = spec.points();
        assert_eq!(p.len(), 8);
        assert_eq!((p[0].k, p[0].alpha, p[0].seed), (4, 0.0, 1));
        assert_eq!((p[1].k, p[1].alpha, p[1].seed), (4, 0.0, 2));
        assert_eq!((p[2].k, p[2].alpha, p[2].seed), (4, 2.5, 1));
        assert_eq!(p[4].k, 9);
    }

    #[test]
    fn rejects_bad_specs() {
        let empty = SweepSpec { seeds: vec![], ..SweepSpec::default() };
        assert!(empty.validate().is_err());
        let big = SweepSpec { k_values: vec![64 * 64 + 1], ..SweepSpec::default() };
        assert!(big.validate().is_err());
    }

    #[test]
    fn table_averages_seeds() {
        let row = |seed, obj| SweepRow {
            point: SweepPoint { k: 4, omega: 0.1, alpha: 0.0, seed },
            final_obj: obj,
            final_tv: 0.0,
            final_total: obj,
            epochs: 1,
            wall_s: 0.0,
        };
        let t = objectness_table(&[row(0, 0.2), row(1, 0.4)]);
        assert_eq!(t, format!("{TABLE_HEADER}\n4,0.1,0,2,0.30000000000000004\n"));
    }
}
