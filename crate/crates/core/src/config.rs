//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Recognized keys:
//!
//! | key | field |
//! |-----|-------|
//! | `k`, `omega`, `max_iters`, `tol`, `connectivity` | SLIC |
//! | `alpha`, `lr`, `epochs`, `batch`, `patch_size` (`HxW`) | training |
//! | `seed`, `victim_seed`, `warm_start`, `eot_frozen` | training |
//! | `rot_deg`, `scale_lo`, `scale_hi`, `bright`, `contrast_lo`, `contrast_hi`, `noise`, `samples`, `patch_scale`, `eot_seed` | EOT |
//! | `sched_factor`, `patience`, `threshold`, `min_lr` | scheduler |
//! | `beta1`, `beta2`, `adam_eps` | AMSGrad |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::transforms::Interval;

/// Splits `text` into `(line number, key, value)` triples.
pub fn parse_flat(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value, found {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("bad boolean {v:?} for {key}"),
        }),
    }
}

/// Parses `HxW`.
pub fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

impl TrainConfig {
    /// Overrides one field. `line` is only used in error messages.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let f = |v: &str| parse_value::<f64>(line, key, v);
        let u = |v: &str| parse_value::<usize>(line, key, v);
        let s = |v: &str| parse_value::<u64>(line, key, v);
        match key {
            "k" => self.slic.k = u(v)?,
            "omega" => self.slic.omega = f(v)?,
            "max_iters" => self.slic.max_iters = u(v)?,
            "tol" => self.slic.tol = f(v)?,
            "connectivity" => self.slic.enforce_connectivity = parse_bool(line, key, v)?,
            "alpha" => self.alpha = f(v)?,
            "lr" => self.lr = f(v)?,
            "epochs" => self.epochs = u(v)?,
            "batch" => self.batch = u(v)?,
            "patch_size" => {
                let (h, w) = parse_size(v).ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("patch_size must look like 64x64, found {v:?}"),
                })?;
                self.patch_height = h;
                self.patch_width = w;
            }
            "seed" => self.seed = s(v)?,
            "victim_seed" => self.victim_seed = s(v)?,
            "warm_start" => self.warm_start = parse_bool(line, key, v)?,
            "eot_frozen" => self.eot_frozen = parse_bool(line, key, v)?,
            "rot_deg" => self.eot.rotation_deg = Interval::symmetric(f(v)?),
            "scale_lo" => self.eot.scale.lo = f(v)?,
            "scale_hi" => self.eot.scale.hi = f(v)?,
            "bright" => self.eot.brightness = Interval::symmetric(f(v)?),
            "contrast_lo" => self.eot.contrast.lo = f(v)?,
            "contrast_hi" => self.eot.contrast.hi = f(v)?,
            "noise" => self.eot.noise = f(v)?,
            "samples" => self.eot.samples_per_scene = u(v)?,
            "patch_scale" => self.eot.patch_scale = f(v)?,
            "eot_seed" => self.eot.seed = s(v)?,
            "sched_factor" => self.scheduler.factor = f(v)?,
            "patience" => self.scheduler.patience = u(v)?,
            "threshold" => self.scheduler.threshold = f(v)?,
            "min_lr" => self.scheduler.min_lr = f(v)?,
            "beta1" => self.amsgrad.beta1 = f(v)?,
            "beta2" => self.amsgrad.beta2 = f(v)?,
            "adam_eps" => self.amsgrad.eps = f(v)?,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Defaults overridden by every key in `text`, then validated.
    pub fn from_flat_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_flat(text)? {
            cfg.set(line, &k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_flat_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key, in a form [`TrainConfig::from_flat_text`] reads back.
    /// Asymmetric rotation and brightness ranges are written by half-width.
    pub fn to_flat_text(&self) -> String {
        let e = &self.eot;
        let entries: [(&str, String); 31] = [
            ("k", self.slic.k.to_string()),
            ("omega", self.slic.omega.to_string()),
            ("max_iters", self.slic.max_iters.to_string()),
            ("tol", self.slic.tol.to_string()),
            ("connectivity", self.slic.enforce_connectivity.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("patch_size", format!("{}x{}", self.patch_height, self.patch_width)),
            ("seed", self.seed.to_string()),
            ("victim_seed", self.victim_seed.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("eot_frozen", self.eot_frozen.to_string()),
            ("rot_deg", e.rotation_deg.hi.to_string()),
            ("scale_lo", e.scale.lo.to_string()),
            ("scale_hi", e.scale.hi.to_string()),
            ("bright", e.brightness.hi.to_string()),
            ("contrast_lo", e.contrast.lo.to_string()),
            ("contrast_hi", e.contrast.hi.to_string()),
            ("noise", e.noise.to_string()),
            ("samples", e.samples_per_scene.to_string()),
            ("patch_scale", e.patch_scale.to_string()),
            ("eot_seed", e.seed.to_string()),
            ("sched_factor", self.scheduler.factor.to_string()),
            ("patience", self.scheduler.patience.to_string()),
            ("threshold", self.scheduler.threshold.to_string()),
            ("min_lr", self.scheduler.min_lr.to_string()),
            ("beta1", self.amsgrad.beta1.to_string()),
            ("beta2", self.amsgrad.beta2.to_string()),
            ("adam_eps", self.amsgrad.eps.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
