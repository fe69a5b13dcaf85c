//! A small fixed-weight convolutional scorer standing in for a real object
//! detector's objectness head.
//!
//! Three 3×3 stride-2 convolutions with softplus activations, then a 1×1
//! head squashed by a logistic, giving one score in `(0, 1)` per 8×8 input
//! cell. Weights are drawn from a ChaCha stream seeded by the caller.
//!
//! First stage filters are centered (zero sum per input channel), so flat
//! color produces no response there. Later stages and the head mix their
//! inputs with nonnegative weights that sum to a fixed gain, with biases set
//! so a flat input maps back to the same baseline at every stage. Because
//! softplus is convex, local contrast raises the score and flat color sits at
//! `sigmoid(HEAD_BIAS)`. Convolutions replicate the border pixel instead of
//! padding with zeros. This is not a model of any real detector; it exists so
//! the training loop has something smooth and deterministic to attack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Gradient, Image, CHANNELS};

const WIDTHS: [usize; 4] = [CHANNELS, 8, 8, 8];
pub const TOTAL_STRIDE: usize = 8;
/// Logit of a flat input; places its score well below one half.
const HEAD_BIAS: f64 = -2.0;
/// Gain of the centered first-stage filters.
const EDGE_GAIN: f64 = 6.0;
/// Sum of the nonnegative mixing weights in later stages and the head.
const MIX_GAIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[o][i][ky][kx]` flattened.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv {
    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.cin + i) * 3 + ky) * 3 + kx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDetector {
    seed: u64,
    convs: Vec<Conv>,
    head_weights: Vec<f64>,
    head_bias: f64,
}

/// Row-major grid of objectness scores, one per output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

/// Channels-last activation map.
#[derive(Debug, Clone)]
struct Tensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl SurrogateDetector {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // uniform on [-√3, √3] has unit variance
        let mut unit = move || 3f64.sqrt() * (2.0 * rng.gen::<f64>() - 1.0);
        let baseline = softplus(0.0);
        let mut convs = Vec::new();
        for (stage, pair) in WIDTHS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let mut weights: Vec<f64> = (0..cout * cin * 9).map(|_| unit()).collect();
            let mut bias: Vec<f64> = (0..cout).map(|_| 0.1 * unit()).collect();
            if stage == 0 {
                let scale = EDGE_GAIN / ((cin * 9) as f64).sqrt();
                for kernel in weights.chunks_exact_mut(9) {
                    let mean = kernel.iter().sum::<f64>() / 9.0;
                    kernel.iter_mut().for_each(|v| *v = (*v - mean) * scale);
                }
            } else {
                for (kernel, b) in weights.chunks_exact_mut(cin * 9).zip(&mut bias) {
                    normalize_mix(kernel);
                    *b -= MIX_GAIN * baseline;
                }
            }
            convs.push(Conv { cin, cout, weights, bias });
        }
        let mut head_weights: Vec<f64> = (0..*WIDTHS.last().unwrap()).map(|_| unit()).collect();
        normalize_mix(&mut head_weights);
        Self {
            seed,
            convs,
            head_weights,
            head_bias: HEAD_BIAS - MIX_GAIN * baseline,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output grid size for an input of the given size (after padding to a
    /// multiple of the total stride).
    pub fn grid_dims(height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(TOTAL_STRIDE), width.div_ceil(TOTAL_STRIDE))
    }

    pub fn score_map(&self, img: &Image) -> ScoreGrid {
        let acts = self.forward(img);
        let (rows, cols) = Self::grid_dims(img.height(), img.width());
        let scores = head_scores(acts.last().unwrap(), &self.head_weights, self.head_bias);
        ScoreGrid { rows, cols, scores }
    }

    /// Pre-activations of every stage (the input first, zero padded).
    fn forward(&self, img: &Image) -> Vec<Tensor> {
        let (h, w) = img.dims();
        let (ph, pw) = (h.next_multiple_of(TOTAL_STRIDE), w.next_multiple_of(TOTAL_STRIDE));
        let mut input = Tensor::zeros(ph, pw, CHANNELS);
        for y in 0..h {
            let src = &img.data()[y * w * CHANNELS..(y + 1) * w * CHANNELS];
            input.data[y * pw * CHANNELS..y * pw * CHANNELS + src.len()].copy_from_slice(src);
        }
        let mut acts = vec![input];
        for (s, conv) in self.convs.iter().enumerate() {
            let prev = acts.last().unwrap();
            // stage 0 consumes raw pixels, later stages the softplus of the
            // previous pre-activation
            let x = if s == 0 { prev.clone() } else { map(prev, softplus) };
            acts.push(conv_forward(conv, &x));
        }
        acts
    }

    /// Vector-Jacobian product of [`score_map`](Self::score_map) at `img`.
    pub fn backward(&self, img: &Image, upstream: &ScoreGrid) -> Result<Gradient> {
        let (rows, cols) = Self::grid_dims(img.height(), img.width());
        if (upstream.rows, upstream.cols) != (rows, cols) || upstream.scores.len() != rows * cols {
            return Err(Error::shape((rows, cols), (upstream.rows, upstream.cols)));
        }
        let acts = self.forward(img);
        let top = acts.last().unwrap();
        let scores = head_scores(top, &self.head_weights, self.head_bias);

        // through the head: d/dh = g · s(1−s) · w_head
        let mut grad = Tensor::zeros(top.h, top.w, top.c);
        for (cell, (&g, &s)) in upstream.scores.iter().zip(&scores).enumerate() {
            let dz = g * s * (1.0 - s);
            for c in 0..top.c {
                grad.data[cell * top.c + c] = dz * self.head_weights[c];
            }
        }
        for s in (0..self.convs.len()).rev() {
            // grad holds d/d(activation of stage s); turn it into d/d(pre-activation)
            let pre = &acts[s + 1];
            for (g, &z) in grad.data.iter_mut().zip(&pre.data) {
                *g *= sigmoid(z);
            }
            grad = conv_backward(&self.convs[s], &grad, &acts[s]);
        }

        let (h, w) = img.dims();
        let mut out = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            out.extend_from_slice(&grad.data[y * grad.w * CHANNELS..(y * grad.w + w) * CHANNELS]);
        }
        Gradient::new(h, w, out)
    }
}

/// Folds draws to nonnegative weights summing to [`MIX_GAIN`].
fn normalize_mix(w: &mut [f64]) {
    w.iter_mut().for_each(|v| *v = v.abs());
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v *= MIX_GAIN / total);
}

#[inline]
fn clamp_index(i: usize, k: usize, len: usize) -> usize {
    (2 * i + k).saturating_sub(1).min(len - 1)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { data: t.data.iter().map(|&v| f(v)).collect(), ..*t }
}

fn head_scores(top: &Tensor, weights: &[f64], bias: f64) -> Vec<f64> {
    top.data
        .chunks_exact(top.c)
        .map(|z| {
            let logit = bias + z.iter().zip(weights).map(|(&z, w)| softplus(z) * w).sum::<f64>();
            sigmoid(logit)
        })
        .collect()
}

/// 3×3 convolution, stride 2, border pixels replicated.
fn conv_forward(conv: &Conv, x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(oh, ow, conv.cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * conv.cout;
            out.data[base..base + conv.cout].copy_from_slice(&conv.bias);
            for ky in 0..3 {
                let iy = clamp_index(oy, ky, x.h);
                for kx in 0..3 {
                    let ix = clamp_index(ox, kx, x.w);
                    let src = (iy * x.w + ix) * x.c;
                    for o in 0..conv.cout {
                        let mut acc = 0.0;
                        for i in 0..conv.cin {
                            acc += conv.w(o, i, ky, kx) * x.data[src + i];
                        }
                        out.data[base + o] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the stage input, given the gradient with respect
/// to its pre-activation output. `input_pre` is the stage input before its
/// nonlinearity (raw pixels for the first stage).
fn conv_backward(conv: &Conv, dz: &Tensor, input_pre: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_pre.h, input_pre.w, input_pre.c);
    for oy in 0..dz.h {
        for ox in 0..dz.w {
            let base = (oy * dz.w + ox) * conv.cout;
            for ky in 0..3 {
                let iy = clamp_index(oy, ky, dx.h);
                for kx in 0..3 {
                    let ix = clamp_index(ox, kx, dx.w);
                    let dst = (iy * dx.w + ix) * dx.c;
                    for i in 0..conv.cin {
                        let mut acc = 0.0;
                        for o in 0..conv.cout {
                            acc += conv.w(o, i, ky, kx) * dz.data[base + o];
                        }
                        dx.data[dst + i] += acc;
                    }
                }
            }
        }
    }
    dx
}
