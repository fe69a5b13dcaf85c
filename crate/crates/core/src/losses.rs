//! Loss terms and their analytic gradients.

use crate::error::{Error, Result};
use crate::image::{Gradient, Image, CHANNELS};

/// Default smoothing inside the total-variation square root.
pub const TV_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Gradient,
}

/// Total variation with the default smoothing [`TV_EPS`].
pub fn tv_loss(patch: &Image) -> LossValue {
    tv_loss_with_eps(patch, TV_EPS)
}

/// `Σ √((p − p_right)² + (p − p_down)² + eps)` per channel, summed over every
/// position that has both a right and a down neighbour. With `eps = 0` the
/// gradient at a flat position is taken as zero.
pub fn tv_loss_with_eps(patch: &Image, eps: f64) -> LossValue {
    let (h, w) = patch.dims();
    let p = patch.data();
    let mut grad = Gradient::zeros(h, w);
    let g = grad.data_mut();
    let mut value = 0.0;
    let at = |x: usize, y: usize, d: usize| (y * w + x) * CHANNELS + d;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            for d in 0..CHANNELS {
                let (c, r, b) = (at(x, y, d), at(x + 1, y, d), at(x, y + 1, d));
                let dx = p[c] - p[r];
                let dy = p[c] - p[b];
                let t = (dx * dx + dy * dy + eps).sqrt();
                value += t;
                if t > 0.0 {
                    g[c] += (dx + dy) / t;
                    g[r] -= dx / t;
                    g[b] -= dy / t;
                }
            }
        }
    }
    LossValue { value, grad }
}

/// Maximum over a score grid, with its one-hot subgradient in score space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub argmax: usize,
    pub grad: Vec<f64>,
}

/// Max objectness. Ties resolve to the first occurrence.
pub fn objectness_loss(scores: &[f64]) -> Result<ScoreLoss> {
    let (argmax, &value) = scores
        .iter()
        .enumerate()
        .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })
        .ok_or(Error::EmptyScores)?;
    let mut grad = vec![0.0; scores.len()];
    grad[argmax] = 1.0;
    Ok(ScoreLoss { value, argmax, grad })
}

/// `alpha · tv + obj`, both already expressed with respect to `patch`.
pub fn total_loss(patch: &Image, tv: &LossValue, obj: &LossValue, alpha: f64) -> Result<LossValue> {
    tv.grad.check_dims(patch.dims())?;
    obj.grad.check_dims(patch.dims())?;
    let data = tv
        .grad
        .data()
        .iter()
        .zip(obj.grad.data())
        .map(|(t, o)| alpha * t + o)
        .collect();
    Ok(LossValue {
        value: alpha * tv.value + obj.value,
        grad: Gradient::new(patch.height(), patch.width(), data)?,
    })
}

/// `(1/N) Σ (Ĉ − T)²` over all pixels and channels, `N` the pixel count.
pub fn mse_loss(clustered: &Image, target: &Image) -> Result<LossValue> {
    if clustered.dims() != target.dims() {
        return Err(Error::shape(clustered.dims(), target.dims()));
    }
    let n = clustered.pixel_count() as f64;
    let mut value = 0.0;
    let grad = clustered
        .data()
        .iter()
        .zip(target.data())
        .map(|(c, t)| {
            let r = c - t;
            value += r * r;
            2.0 * r / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        grad: Gradient::new(clustered.height(), clustered.width(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    /// Literal enumeration of the TV sum for one channel.
    fn tv_oracle(img: &Image, d: usize) -> f64 {
        let (h, w) = img.dims();
        let p = |x: usize, y: usize| img.data()[(y * w + x) * 3 + d];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w && y + 1 < h {
                    total += ((p(x, y) - p(x + 1, y)).powi(2) + (p(x, y) - p(x, y + 1)).powi(2)).sqrt();
                }
            }
        }
        total
    }

    #[test]
    fn tv_constant_and_single_pixel() {
        let c = Image::filled(5, 6, [0.2, 0.5, 0.7]).unwrap();
        assert_eq!(tv_loss_with_eps(&c, 0.0).value, 0.0);
        let smoothed = tv_loss(&c).value;
        assert!((smoothed - 4.0 * 5.0 * 3.0 * TV_EPS.sqrt()).abs() < 1e-15);
        let one = Image::filled(1, 1, [0.9; 3]).unwrap();
        assert_eq!(tv_loss_with_eps(&one, 0.0).value, 0.0);
        assert_eq!(tv_loss(&one).value, 0.0);
    }

    #[test]
    fn tv_two_by_two_enumeration() {
        // single active channel [[0, 1], [0, 1]]; only the top-left position
        // has both neighbours: √((0−1)² + (0−0)²) = 1
        let data = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let img = Image::new(2, 2, data).unwrap();
        assert_eq!(tv_oracle(&img, 0), 1.0);
        assert_eq!(tv_loss_with_eps(&img, 0.0).value, 1.0);
    }

    #[test]
    fn tv_matches_enumeration_on_random() {
        let img = random_image(7, 5, 3);
        let expected: f64 = (0..3).map(|d| tv_oracle(&img, d)).sum();
        assert!((tv_loss_with_eps(&img, 0.0).value - expected).abs() < 1e-12);
    }

    #[test]
    fn tv_shift_invariant() {
        let img = random_image(6, 6, 4);
        let shifted: Vec<f64> = img.data().iter().map(|v| v * 0.5 + 0.25).collect();
        let half: Vec<f64> = img.data().iter().map(|v| v * 0.5).collect();
        let a = tv_loss(&Image::new(6, 6, shifted).unwrap()).value;
        let b = tv_loss(&Image::new(6, 6, half).unwrap()).value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn objectness_picks_first_max() {
        let l = objectness_loss(&[0.1, 0.9, 0.3]).unwrap();
        assert_eq!((l.value, l.argmax), (0.9, 1));
        assert_eq!(l.grad, vec![0.0, 1.0, 0.0]);
        let l = objectness_loss(&[0.5, 0.5]).unwrap();
        assert_eq!((l.value, l.argmax), (0.5, 0));
        assert!(matches!(objectness_loss(&[]), Err(Error::EmptyScores)));
    }

    #[test]
    fn objectness_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..13 * 13 * 5).map(|_| rng.gen()).collect();
        let mut best = f64::NEG_INFINITY;
        for &s in &scores {
            if s > best {
                best = s;
            }
        }
        assert_eq!(objectness_loss(&scores).unwrap().value, best);
    }

    #[test]
    fn total_loss_combines_linearly() {
        let img = random_image(4, 4, 5);
        let tv = LossValue { value: 0.2, grad: Gradient::filled(4, 4, 0.4) };
        let obj = LossValue { value: 0.7, grad: Gradient::filled(4, 4, -1.0) };
        let l = total_loss(&img, &tv, &obj, 2.5).unwrap();
        assert!((l.value - 1.2).abs() < 1e-15);
        assert!(l.grad.data().iter().all(|&g| g == 2.5 * 0.4 - 1.0));
        let l0 = total_loss(&img, &tv, &obj, 0.0).unwrap();
        assert_eq!(l0.value, 0.7);
        let bad = LossValue { value: 0.0, grad: Gradient::zeros(3, 4) };
        assert!(total_loss(&img, &bad, &obj, 1.0).is_err());
    }

    #[test]
    fn mse_cases() {
        let a = random_image(3, 3, 1);
        assert_eq!(mse_loss(&a, &a).unwrap().value, 0.0);
        let x = Image::new(1, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let y = Image::new(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mse_loss(&x, &y).unwrap().value, 1.0);
        assert!(mse_loss(&x, &a).is_err());
    }

    #[test]
    fn mse_matches_naive_loop() {
        let a = random_image(8, 8, 2);
        let b = random_image(8, 8, 3);
        let mut sum = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                for d in 0..3 {
                    sum += (p[d] - q[d]).powi(2);
                }
            }
        }
        assert!((mse_loss(&a, &b).unwrap().value - sum / 64.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let img = random_image(6, 7, 10);
        let target = random_image(6, 7, 11);
        let tv = tv_loss(&img);
        let mse = mse_loss(&img, &target).unwrap();
        let eps = 1e-6;
        for k in (0..img.data().len()).step_by(5) {
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[k] += eps;
            minus[k] -= eps;
            // stay inside [0,1]: random values are well away from the edges
            let plus = Image::from_clamped(6, 7, plus).unwrap();
            let minus = Image::from_clamped(6, 7, minus).unwrap();
            let fd = (tv_loss(&plus).value - tv_loss(&minus).value) / (2.0 * eps);
            let a = tv.grad.data()[k];
            assert!((fd - a).abs() / a.abs().max(1e-8) < 1e-4, "tv {k}: {fd} vs {a}");
            let fd = (mse_loss(&plus, &target).unwrap().value - mse_loss(&minus, &target).unwrap().value)
                / (2.0 * eps);
            let a = mse.grad.data()[k];
            assert!((fd - a).abs() / a.abs().max(1e-8) < 1e-4, "mse {k}: {fd} vs {a}");
        }
    }
}
