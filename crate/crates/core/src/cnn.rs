//! Lightweight 1D CNN predicting per-band combination weights from a raw
//! noise frame: min-max preprocessing, a broad-receptive-field entry
//! convolution, two strided residual blocks, global average pooling and a
//! sigmoid multi-label head, trained with binary cross entropy.
//!
//! Everything is implemented from scratch in f64 with hand-derived
//! reverse-mode gradients (finite-difference-checked in the tests); weights
//! are stored on disk as little-endian float32 inside a small versioned
//! container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{binarize, BinaryLabel, WeightVector};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{axpy, dot};
use crate::rng::Rng;
use crate::signal::Signal;

/// On-disk container version of a saved model.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Container magic ("active noise control network").
const MODEL_MAGIC: [u8; 4] = *b"ANCN";

/// Clamp bound keeping `ln` finite in the loss.
const BCE_CLAMP: f64 = 1e-7;

/// Batch-norm variance guard.
const BN_EPS: f64 = 1e-5;

/// Running-statistics update rate.
const BN_MOMENTUM: f64 = 0.1;

// Architecture constants: a broad receptive field up front, narrow kernels in
// the residual blocks, channel doubling at each downsampling stage.
const CONV1_KERNEL: usize = 31;
const CONV1_CHANNELS: usize = 16;
const CONV1_STRIDE: usize = 8;
const CONV1_PADDING: usize = 15;
const POOL_WIDTH: usize = 4;
const BLOCK1_CHANNELS: usize = 32;
const BLOCK2_CHANNELS: usize = 64;
const BLOCK_KERNEL: usize = 3;

// ---------------------------------------------------------------------------
// Batched activations
// ---------------------------------------------------------------------------

/// A batch of 1D feature maps, laid out `(sample, channel, position)`.
#[derive(Debug, Clone)]
struct Feat {
    n: usize,
    ch: usize,
    len: usize,
    data: Vec<f64>,
}

impl Feat {
    fn zeros(n: usize, ch: usize, len: usize) -> Self {
        Feat {
            n,
            ch,
            len,
            data: vec![0.0; n * ch * len],
        }
    }

    #[inline]
    fn row(&self, i: usize, c: usize) -> &[f64] {
        let start = (i * self.ch + c) * self.len;
        &self.data[start..start + self.len]
    }

    #[inline]
    fn row_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let start = (i * self.ch + c) * self.len;
        &mut self.data[start..start + self.len]
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 1D convolution; weights laid out `(out_channel, in_channel, tap)`.
#[derive(Debug, Clone, PartialEq)]
struct Conv1d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv1d {
    fn new(rng: &mut Rng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: (0..out_ch * in_ch * kernel)
                .map(|_| bound * rng.uniform_signed())
                .collect(),
            bias: (0..out_ch).map(|_| bound * rng.uniform_signed()).collect(),
        }
    }

    fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Clipped kernel extent at output position `t`: the base input index and
    /// the `[k_lo, k_hi)` tap range that stays inside the input.
    #[inline]
    fn extent(&self, t: usize, in_len: usize) -> (isize, usize, usize) {
        let j0 = (t * self.stride) as isize - self.padding as isize;
        let k_lo = (-j0).max(0) as usize;
        let k_hi = (self.kernel as isize).min(in_len as isize - j0).max(0) as usize;
        (j0, k_lo, k_hi)
    }

    fn forward(&self, x: &Feat) -> Feat {
        let out_len = self.out_len(x.len);
        let mut y = Feat::zeros(x.n, self.out_ch, out_len);
        for i in 0..x.n {
            for o in 0..self.out_ch {
                y.row_mut(i, o).fill(self.bias[o]);
                for c in 0..self.in_ch {
                    let xrow = x.row(i, c);
                    let wrow = &self.weight[(o * self.in_ch + c) * self.kernel..][..self.kernel];
                    let yrow = y.row_mut(i, o);
                    for t in 0..out_len {
                        let (j0, k_lo, k_hi) = self.extent(t, x.len);
                        if k_lo < k_hi {
                            let x_lo = (j0 + k_lo as isize) as usize;
                            yrow[t] += dot(&wrow[k_lo..k_hi], &xrow[x_lo..x_lo + (k_hi - k_lo)]);
                        }
                    }
                }
            }
        }
        y
    }

    /// Gradients for one upstream signal `dy`; accumulates into `dw`/`db` and
    /// returns the gradient with respect to the input.
    fn backward(&self, x: &Feat, dy: &Feat, dw: &mut [f64], db: &mut [f64]) -> Feat {
        let mut dx = Feat::zeros(x.n, self.in_ch, x.len);
        for i in 0..x.n {
            for o in 0..self.out_ch {
                let dyrow = dy.row(i, o);
                db[o] += dyrow.iter().sum::<f64>();
                for c in 0..self.in_ch {
                    let xrow = x.row(i, c);
                    let wrow = &self.weight[(o * self.in_ch + c) * self.kernel..][..self.kernel];
                    let dwrow = &mut dw[(o * self.in_ch + c) * self.kernel..][..self.kernel];
                    let dxrow = dx.row_mut(i, c);
                    for t in 0..dy.len {
                        let g = dyrow[t];
                        if g == 0.0 {
                            continue;
                        }
                        let (j0, k_lo, k_hi) = self.extent(t, x.len);
                        if k_lo < k_hi {
                            let x_lo = (j0 + k_lo as isize) as usize;
                            let span = k_hi - k_lo;
                            axpy(&mut dwrow[k_lo..k_hi], g, &xrow[x_lo..x_lo + span]);
                            axpy(&mut dxrow[x_lo..x_lo + span], g, &wrow[k_lo..k_hi]);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization over `(sample, position)`.
///
/// Both normalization and the running statistics use the biased (1/N)
/// variance, so a model evaluated right after one huge batch reproduces that
/// batch's train-mode outputs; the two conventions never mix.
#[derive(Debug, Clone, PartialEq)]
struct BatchNorm1d {
    ch: usize,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Train-mode forward cache: normalized activations and batch statistics.
struct BnCache {
    xhat: Feat,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm1d {
    fn new(ch: usize) -> Self {
        BatchNorm1d {
            ch,
            gamma: vec![1.0; ch],
            beta: vec![0.0; ch],
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
        }
    }

    fn forward_train(&self, x: &Feat) -> (Feat, BnCache) {
        let count = (x.n * x.len) as f64;
        let mut y = Feat::zeros(x.n, x.ch, x.len);
        let mut xhat = Feat::zeros(x.n, x.ch, x.len);
        let mut inv_std = vec![0.0; self.ch];
        let mut mean = vec![0.0; self.ch];
        let mut var = vec![0.0; self.ch];
        for c in 0..self.ch {
            let mut sum = 0.0;
            for i in 0..x.n {
                sum += x.row(i, c).iter().sum::<f64>();
            }
            let m = sum / count;
            let mut sq = 0.0;
            for i in 0..x.n {
                sq += x.row(i, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            let v = sq / count;
            let istd = 1.0 / (v + BN_EPS).sqrt();
            mean[c] = m;
            var[c] = v;
            inv_std[c] = istd;
            for i in 0..x.n {
                let xr = x.row(i, c);
                let hr = xhat.row_mut(i, c);
                for (h, &xv) in hr.iter_mut().zip(xr) {
                    *h = (xv - m) * istd;
                }
            }
            for i in 0..x.n {
                let hr = xhat.row(i, c).to_vec();
                let yr = y.row_mut(i, c);
                for (yv, h) in yr.iter_mut().zip(hr) {
                    *yv = self.gamma[c] * h + self.beta[c];
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    fn forward_eval(&self, x: &Feat) -> Feat {
        let mut y = Feat::zeros(x.n, x.ch, x.len);
        for c in 0..self.ch {
            let istd = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let (g, b, m) = (self.gamma[c], self.beta[c], self.running_mean[c]);
            for i in 0..x.n {
                let xr = x.row(i, c);
                let yr = y.row_mut(i, c);
                for (yv, &xv) in yr.iter_mut().zip(xr) {
                    *yv = g * (xv - m) * istd + b;
                }
            }
        }
        y
    }

    fn absorb_batch_stats(&mut self, cache: &BnCache) {
        for c in 0..self.ch {
            self.running_mean[c] += BN_MOMENTUM * (cache.mean[c] - self.running_mean[c]);
            self.running_var[c] += BN_MOMENTUM * (cache.var[c] - self.running_var[c]);
        }
    }

    fn backward(
        &self,
        cache: &BnCache,
        dy: &Feat,
        dgamma: &mut [f64],
        dbeta: &mut [f64],
    ) -> Feat {
        let count = (dy.n * dy.len) as f64;
        let mut dx = Feat::zeros(dy.n, dy.ch, dy.len);
        for c in 0..self.ch {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..dy.n {
                let dyr = dy.row(i, c);
                let hr = cache.xhat.row(i, c);
                sum_dy += dyr.iter().sum::<f64>();
                sum_dy_xhat += dot(dyr, hr);
            }
            dgamma[c] += sum_dy_xhat;
            dbeta[c] += sum_dy;
            let scale = self.gamma[c] * cache.inv_std[c];
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            for i in 0..dy.n {
                let dyr = dy.row(i, c).to_vec();
                let hr = cache.xhat.row(i, c).to_vec();
                let dxr = dx.row_mut(i, c);
                for ((d, dyv), h) in dxr.iter_mut().zip(dyr).zip(hr) {
                    *d = scale * (dyv - mean_dy - h * mean_dy_xhat);
                }
            }
        }
        dx
    }
}

/// Fully connected output layer; weights laid out `(output, input)`.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn new(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Dense {
            in_dim,
            out_dim,
            weight: (0..out_dim * in_dim)
                .map(|_| bound * rng.uniform_signed())
                .collect(),
            bias: (0..out_dim).map(|_| bound * rng.uniform_signed()).collect(),
        }
    }
}

fn relu_forward(x: &Feat) -> Feat {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient gate using the forward *output* (zero exactly where clipped).
fn relu_backward(y: &Feat, dy: &Feat) -> Feat {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Non-overlapping max pooling; ties keep the earliest position.
fn maxpool_forward(x: &Feat, width: usize) -> (Feat, Vec<u32>) {
    let out_len = x.len / width;
    let mut y = Feat::zeros(x.n, x.ch, out_len);
    let mut argmax = vec![0u32; x.n * x.ch * out_len];
    for i in 0..x.n {
        for c in 0..x.ch {
            let xr = x.row(i, c);
            let base = (i * x.ch + c) * out_len;
            let yr = y.row_mut(i, c);
            for t in 0..out_len {
                let window = &xr[t * width..(t + 1) * width];
                let mut best = 0;
                for (k, &v) in window.iter().enumerate() {
                    if v > window[best] {
                        best = k;
                    }
                }
                yr[t] = window[best];
                argmax[base + t] = (t * width + best) as u32;
            }
        }
    }
    (y, argmax)
}

fn maxpool_backward(dy: &Feat, argmax: &[u32], in_len: usize) -> Feat {
    let mut dx = Feat::zeros(dy.n, dy.ch, in_len);
    for i in 0..dy.n {
        for c in 0..dy.ch {
            let dyr = dy.row(i, c).to_vec();
            let base = (i * dy.ch + c) * dy.len;
            let dxr = dx.row_mut(i, c);
            for (t, g) in dyr.into_iter().enumerate() {
                dxr[argmax[base + t] as usize] += g;
            }
        }
    }
    dx
}

/// Mean over positions per channel: `(n, ch, len)` → flat `(n, ch)`.
fn gap_forward(x: &Feat) -> Vec<f64> {
    let mut out = vec![0.0; x.n * x.ch];
    for i in 0..x.n {
        for c in 0..x.ch {
            out[i * x.ch + c] = x.row(i, c).iter().sum::<f64>() / x.len as f64;
        }
    }
    out
}

fn gap_backward(dout: &[f64], n: usize, ch: usize, len: usize) -> Feat {
    let mut dx = Feat::zeros(n, ch, len);
    for i in 0..n {
        for c in 0..ch {
            dx.row_mut(i, c).fill(dout[i * ch + c] / len as f64);
        }
    }
    dx
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

/// conv/BN/ReLU → conv/BN, plus a strided 1×1 conv/BN shortcut, joined by an
/// output ReLU. Halves the length and changes the channel count.
#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    conv_a: Conv1d,
    bn_a: BatchNorm1d,
    conv_b: Conv1d,
    bn_b: BatchNorm1d,
    conv_sc: Conv1d,
    bn_sc: BatchNorm1d,
}

struct BlockTape {
    x_in: Feat,
    bn_a: BnCache,
    ra: Feat,
    bn_b: BnCache,
    bn_sc: BnCache,
    out: Feat,
}

impl ResBlock {
    fn new(rng: &mut Rng, in_ch: usize, out_ch: usize) -> Self {
        ResBlock {
            conv_a: Conv1d::new(rng, in_ch, out_ch, BLOCK_KERNEL, 2, 1),
            bn_a: BatchNorm1d::new(out_ch),
            conv_b: Conv1d::new(rng, out_ch, out_ch, BLOCK_KERNEL, 1, 1),
            bn_b: BatchNorm1d::new(out_ch),
            conv_sc: Conv1d::new(rng, in_ch, out_ch, 1, 2, 0),
            bn_sc: BatchNorm1d::new(out_ch),
        }
    }

    fn forward_train(&self, x: Feat) -> (Feat, BlockTape) {
        let (ya, bn_a) = self.bn_a.forward_train(&self.conv_a.forward(&x));
        let ra = relu_forward(&ya);
        let (yb, bn_b) = self.bn_b.forward_train(&self.conv_b.forward(&ra));
        let (ysc, bn_sc) = self.bn_sc.forward_train(&self.conv_sc.forward(&x));
        let mut sum = yb;
        for (a, b) in sum.data.iter_mut().zip(&ysc.data) {
            *a += b;
        }
        let out = relu_forward(&sum);
        let tape = BlockTape {
            x_in: x,
            bn_a,
            ra,
            bn_b,
            bn_sc,
            out: out.clone(),
        };
        (out, tape)
    }

    fn forward_eval(&self, x: &Feat) -> Feat {
        let ra = relu_forward(&self.bn_a.forward_eval(&self.conv_a.forward(x)));
        let yb = self.bn_b.forward_eval(&self.conv_b.forward(&ra));
        let ysc = self.bn_sc.forward_eval(&self.conv_sc.forward(x));
        let mut sum = yb;
        for (a, b) in sum.data.iter_mut().zip(&ysc.data) {
            *a += b;
        }
        relu_forward(&sum)
    }

    fn backward(&self, tape: &BlockTape, d_out: &Feat, grads: &mut BlockGrads) -> Feat {
        let d_sum = relu_backward(&tape.out, d_out);
        let d_zb = self
            .bn_b
            .backward(&tape.bn_b, &d_sum, &mut grads.bn_b_gamma, &mut grads.bn_b_beta);
        let d_ra = self
            .conv_b
            .backward(&tape.ra, &d_zb, &mut grads.conv_b_w, &mut grads.conv_b_b);
        let d_ya = relu_backward(&tape.ra, &d_ra);
        let d_za = self
            .bn_a
            .backward(&tape.bn_a, &d_ya, &mut grads.bn_a_gamma, &mut grads.bn_a_beta);
        let mut dx = self
            .conv_a
            .backward(&tape.x_in, &d_za, &mut grads.conv_a_w, &mut grads.conv_a_b);
        let d_zsc = self.bn_sc.backward(
            &tape.bn_sc,
            &d_sum,
            &mut grads.bn_sc_gamma,
            &mut grads.bn_sc_beta,
        );
        let dx_sc = self
            .conv_sc
            .backward(&tape.x_in, &d_zsc, &mut grads.conv_sc_w, &mut grads.conv_sc_b);
        for (a, b) in dx.data.iter_mut().zip(&dx_sc.data) {
            *a += b;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The full weight-prediction network. Output width equals the number of
/// sub bands; input length is free (the head pools over positions).
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    n_labels: usize,
    conv1: Conv1d,
    bn1: BatchNorm1d,
    block1: ResBlock,
    block2: ResBlock,
    dense: Dense,
}

/// Forward/eval switch; train mode normalizes with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Tape {
    x0: Feat,
    bn1: BnCache,
    r1: Feat,
    pool_argmax: Vec<u32>,
    r1_len: usize,
    b1: BlockTape,
    b2: BlockTape,
    b2_shape: (usize, usize, usize),
    gap: Vec<f64>,
    probs: Vec<f64>,
}

impl CnnModel {
    pub fn new(seed: u64, n_labels: usize) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::invalid("model needs at least one output label"));
        }
        let mut rng = Rng::new(Rng::derive(seed, 0x636e_6e31));
        Ok(CnnModel {
            n_labels,
            conv1: Conv1d::new(
                &mut rng,
                1,
                CONV1_CHANNELS,
                CONV1_KERNEL,
                CONV1_STRIDE,
                CONV1_PADDING,
            ),
            bn1: BatchNorm1d::new(CONV1_CHANNELS),
            block1: ResBlock::new(&mut rng, CONV1_CHANNELS, BLOCK1_CHANNELS),
            block2: ResBlock::new(&mut rng, BLOCK1_CHANNELS, BLOCK2_CHANNELS),
            dense: Dense::new(&mut rng, BLOCK2_CHANNELS, n_labels),
        })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Shortest input the stack can reduce without a zero-length stage.
    fn min_input_len(&self) -> usize {
        // conv1 stride 8 then pool 4 then two stride-2 blocks: 128 samples
        // leave one position at the head.
        CONV1_STRIDE * POOL_WIDTH * 4
    }

    fn validate_input(&self, len: usize) -> Result<()> {
        if len < self.min_input_len() {
            return Err(Error::invalid(format!(
                "input of {len} samples is shorter than the receptive stack ({})",
                self.min_input_len()
            )));
        }
        Ok(())
    }

    /// Probabilities for one preprocessed frame. Train mode normalizes with
    /// this call's own statistics (it does not touch the running estimates),
    /// eval mode uses the stored running statistics.
    pub fn forward(&self, input: &[f64], mode: Mode) -> Result<Vec<f64>> {
        self.validate_input(input.len())?;
        let mut x0 = Feat::zeros(1, 1, input.len());
        x0.row_mut(0, 0).copy_from_slice(input);
        match mode {
            Mode::Eval => Ok(self.forward_eval_batch(&x0)),
            Mode::Train => Ok(self.forward_train_batch(x0).1.probs),
        }
    }

    fn forward_eval_batch(&self, x0: &Feat) -> Vec<f64> {
        let r1 = relu_forward(&self.bn1.forward_eval(&self.conv1.forward(x0)));
        let (p1, _) = maxpool_forward(&r1, POOL_WIDTH);
        let b1 = self.block1.forward_eval(&p1);
        let b2 = self.block2.forward_eval(&b1);
        let gap = gap_forward(&b2);
        self.head(&gap, x0.n)
    }

    fn forward_train_batch(&self, x0: Feat) -> (Vec<f64>, Tape) {
        let (y1, bn1) = self.bn1.forward_train(&self.conv1.forward(&x0));
        let r1 = relu_forward(&y1);
        let (p1, pool_argmax) = maxpool_forward(&r1, POOL_WIDTH);
        let (b1_out, b1) = self.block1.forward_train(p1);
        let (b2_out, b2) = self.block2.forward_train(b1_out);
        let b2_shape = (b2_out.n, b2_out.ch, b2_out.len);
        let gap = gap_forward(&b2_out);
        let probs = self.head(&gap, x0.n);
        let tape = Tape {
            r1_len: r1.len,
            x0,
            bn1,
            r1,
            pool_argmax,
            b1,
            b2,
            b2_shape,
            gap,
            probs: probs.clone(),
        };
        (probs, tape)
    }

    fn head(&self, gap: &[f64], n: usize) -> Vec<f64> {
        let mut probs = vec![0.0; n * self.n_labels];
        for i in 0..n {
            let g = &gap[i * BLOCK2_CHANNELS..(i + 1) * BLOCK2_CHANNELS];
            for o in 0..self.n_labels {
                let z = self.dense.bias[o]
                    + dot(&self.dense.weight[o * self.dense.in_dim..][..self.dense.in_dim], g);
                probs[i * self.n_labels + o] = sigmoid(z);
            }
        }
        probs
    }

    /// Gradient of the mean BCE loss over the batch on `tape`, with respect
    /// to every trainable parameter.
    fn backward_batch(&self, tape: &Tape, labels: &[&BinaryLabel]) -> Grads {
        let n = tape.x0.n;
        let m = self.n_labels;
        let mut grads = Grads::zeros_like(self);

        // Sigmoid + BCE collapse to (p - t), averaged over labels and batch.
        let mut dgap = vec![0.0; n * BLOCK2_CHANNELS];
        for i in 0..n {
            let g = &tape.gap[i * BLOCK2_CHANNELS..(i + 1) * BLOCK2_CHANNELS];
            for o in 0..m {
                let dlogit = (tape.probs[i * m + o] - f64::from(labels[i].t()[o]))
                    / (m as f64 * n as f64);
                grads.dense_b[o] += dlogit;
                axpy(
                    &mut grads.dense_w[o * BLOCK2_CHANNELS..][..BLOCK2_CHANNELS],
                    dlogit,
                    g,
                );
                axpy(
                    &mut dgap[i * BLOCK2_CHANNELS..][..BLOCK2_CHANNELS],
                    dlogit,
                    &self.dense.weight[o * BLOCK2_CHANNELS..][..BLOCK2_CHANNELS],
                );
            }
        }

        let (bn, bch, blen) = tape.b2_shape;
        let d_b2 = gap_backward(&dgap, bn, bch, blen);
        let d_b1 = self.block2.backward(&tape.b2, &d_b2, &mut grads.block2);
        let d_p1 = self.block1.backward(&tape.b1, &d_b1, &mut grads.block1);
        let d_r1 = maxpool_backward(&d_p1, &tape.pool_argmax, tape.r1_len);
        let d_y1 = relu_backward(&tape.r1, &d_r1);
        let d_z1 = self
            .bn1
            .backward(&tape.bn1, &d_y1, &mut grads.bn1_gamma, &mut grads.bn1_beta);
        self.conv1
            .backward(&tape.x0, &d_z1, &mut grads.conv1_w, &mut grads.conv1_b);
        grads
    }

    fn absorb_batch_stats(&mut self, tape: &Tape) {
        self.bn1.absorb_batch_stats(&tape.bn1);
        self.block1.bn_a.absorb_batch_stats(&tape.b1.bn_a);
        self.block1.bn_b.absorb_batch_stats(&tape.b1.bn_b);
        self.block1.bn_sc.absorb_batch_stats(&tape.b1.bn_sc);
        self.block2.bn_a.absorb_batch_stats(&tape.b2.bn_a);
        self.block2.bn_b.absorb_batch_stats(&tape.b2.bn_b);
        self.block2.bn_sc.absorb_batch_stats(&tape.b2.bn_sc);
    }

    /// Trainable tensors in a fixed order (excludes running statistics).
    fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut list: Vec<&mut Vec<f64>> = vec![&mut self.conv1.weight, &mut self.conv1.bias];
        list.push(&mut self.bn1.gamma);
        list.push(&mut self.bn1.beta);
        for block in [&mut self.block1, &mut self.block2] {
            list.push(&mut block.conv_a.weight);
            list.push(&mut block.conv_a.bias);
            list.push(&mut block.bn_a.gamma);
            list.push(&mut block.bn_a.beta);
            list.push(&mut block.conv_b.weight);
            list.push(&mut block.conv_b.bias);
            list.push(&mut block.bn_b.gamma);
            list.push(&mut block.bn_b.beta);
            list.push(&mut block.conv_sc.weight);
            list.push(&mut block.conv_sc.bias);
            list.push(&mut block.bn_sc.gamma);
            list.push(&mut block.bn_sc.beta);
        }
        list.push(&mut self.dense.weight);
        list.push(&mut self.dense.bias);
        list
    }

    /// All persistent tensors (parameters + running statistics) with stable
    /// names, in serialization order.
    fn state_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut list: Vec<(String, &Vec<f64>)> = vec![
            ("conv1.weight".into(), &self.conv1.weight),
            ("conv1.bias".into(), &self.conv1.bias),
            ("bn1.gamma".into(), &self.bn1.gamma),
            ("bn1.beta".into(), &self.bn1.beta),
            ("bn1.running_mean".into(), &self.bn1.running_mean),
            ("bn1.running_var".into(), &self.bn1.running_var),
        ];
        for (tag, block) in [("block1", &self.block1), ("block2", &self.block2)] {
            for (part, conv, bn) in [
                ("a", &block.conv_a, &block.bn_a),
                ("b", &block.conv_b, &block.bn_b),
                ("sc", &block.conv_sc, &block.bn_sc),
            ] {
                list.push((format!("{tag}.conv_{part}.weight"), &conv.weight));
                list.push((format!("{tag}.conv_{part}.bias"), &conv.bias));
                list.push((format!("{tag}.bn_{part}.gamma"), &bn.gamma));
                list.push((format!("{tag}.bn_{part}.beta"), &bn.beta));
                list.push((format!("{tag}.bn_{part}.running_mean"), &bn.running_mean));
                list.push((format!("{tag}.bn_{part}.running_var"), &bn.running_var));
            }
        }
        list.push(("dense.weight".into(), &self.dense.weight));
        list.push(("dense.bias".into(), &self.dense.bias));
        list
    }

    fn state_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut list: Vec<&mut Vec<f64>> = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.bn1.running_mean,
            &mut self.bn1.running_var,
        ];
        for block in [&mut self.block1, &mut self.block2] {
            list.push(&mut block.conv_a.weight);
            list.push(&mut block.conv_a.bias);
            list.push(&mut block.bn_a.gamma);
            list.push(&mut block.bn_a.beta);
            list.push(&mut block.bn_a.running_mean);
            list.push(&mut block.bn_a.running_var);
            list.push(&mut block.conv_b.weight);
            list.push(&mut block.conv_b.bias);
            list.push(&mut block.bn_b.gamma);
            list.push(&mut block.bn_b.beta);
            list.push(&mut block.bn_b.running_mean);
            list.push(&mut block.bn_b.running_var);
            list.push(&mut block.conv_sc.weight);
            list.push(&mut block.conv_sc.bias);
            list.push(&mut block.bn_sc.gamma);
            list.push(&mut block.bn_sc.beta);
            list.push(&mut block.bn_sc.running_mean);
            list.push(&mut block.bn_sc.running_var);
        }
        list.push(&mut self.dense.weight);
        list.push(&mut self.dense.bias);
        list
    }
}

/// Exact count of trainable scalars (running statistics excluded).
pub fn param_count(model: &CnnModel) -> usize {
    let mut m = model.clone();
    m.param_tensors_mut().iter().map(|t| t.len()).sum()
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BlockGrads {
    conv_a_w: Vec<f64>,
    conv_a_b: Vec<f64>,
    bn_a_gamma: Vec<f64>,
    bn_a_beta: Vec<f64>,
    conv_b_w: Vec<f64>,
    conv_b_b: Vec<f64>,
    bn_b_gamma: Vec<f64>,
    bn_b_beta: Vec<f64>,
    conv_sc_w: Vec<f64>,
    conv_sc_b: Vec<f64>,
    bn_sc_gamma: Vec<f64>,
    bn_sc_beta: Vec<f64>,
}

impl BlockGrads {
    fn zeros_like(block: &ResBlock) -> Self {
        BlockGrads {
            conv_a_w: vec![0.0; block.conv_a.weight.len()],
            conv_a_b: vec![0.0; block.conv_a.bias.len()],
            bn_a_gamma: vec![0.0; block.bn_a.gamma.len()],
            bn_a_beta: vec![0.0; block.bn_a.beta.len()],
            conv_b_w: vec![0.0; block.conv_b.weight.len()],
            conv_b_b: vec![0.0; block.conv_b.bias.len()],
            bn_b_gamma: vec![0.0; block.bn_b.gamma.len()],
            bn_b_beta: vec![0.0; block.bn_b.beta.len()],
            conv_sc_w: vec![0.0; block.conv_sc.weight.len()],
            conv_sc_b: vec![0.0; block.conv_sc.bias.len()],
            bn_sc_gamma: vec![0.0; block.bn_sc.gamma.len()],
            bn_sc_beta: vec![0.0; block.bn_sc.beta.len()],
        }
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        vec![
            &self.conv_a_w,
            &self.conv_a_b,
            &self.bn_a_gamma,
            &self.bn_a_beta,
            &self.conv_b_w,
            &self.conv_b_b,
            &self.bn_b_gamma,
            &self.bn_b_beta,
            &self.conv_sc_w,
            &self.conv_sc_b,
            &self.bn_sc_gamma,
            &self.bn_sc_beta,
        ]
    }
}

/// Gradients of every trainable tensor, ordered like
/// [`CnnModel::param_tensors_mut`].
#[derive(Debug, Clone)]
struct Grads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    bn1_gamma: Vec<f64>,
    bn1_beta: Vec<f64>,
    block1: BlockGrads,
    block2: BlockGrads,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
}

impl Grads {
    fn zeros_like(model: &CnnModel) -> Self {
        Grads {
            conv1_w: vec![0.0; model.conv1.weight.len()],
            conv1_b: vec![0.0; model.conv1.bias.len()],
            bn1_gamma: vec![0.0; model.bn1.gamma.len()],
            bn1_beta: vec![0.0; model.bn1.beta.len()],
            block1: BlockGrads::zeros_like(&model.block1),
            block2: BlockGrads::zeros_like(&model.block2),
            dense_w: vec![0.0; model.dense.weight.len()],
            dense_b: vec![0.0; model.dense.bias.len()],
        }
    }

    fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut list = vec![&self.conv1_w, &self.conv1_b, &self.bn1_gamma, &self.bn1_beta];
        list.extend(self.block1.tensors());
        list.extend(self.block2.tensors());
        list.push(&self.dense_w);
        list.push(&self.dense_b);
        list
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean binary cross entropy over the label vector, with probabilities
/// clamped away from 0 and 1 before the logs.
pub fn bce_loss(probs: &[f64], label: &BinaryLabel) -> Result<f64> {
    if probs.len() != label.t().len() {
        return Err(Error::invalid(format!(
            "{} probabilities against {} label bits",
            probs.len(),
            label.t().len()
        )));
    }
    let mut sum = 0.0;
    for (&p, &t) in probs.iter().zip(label.t()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= if t == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / probs.len() as f64)
}

/// Reverse-mode gradients of `bce_loss(forward(x, Train), label)` for one
/// example, flattened in [`CnnModel::param_tensors_mut`] order. Exposed for
/// gradient verification; training uses the batched path internally.
pub fn backward(model: &CnnModel, input: &[f64], label: &BinaryLabel) -> Result<Vec<Vec<f64>>> {
    model.validate_input(input.len())?;
    if label.t().len() != model.n_labels {
        return Err(Error::invalid("label width does not match the model"));
    }
    let mut x0 = Feat::zeros(1, 1, input.len());
    x0.row_mut(0, 0).copy_from_slice(input);
    let (_, tape) = model.forward_train_batch(x0);
    let grads = model.backward_batch(&tape, &[label]);
    Ok(grads.tensors().into_iter().cloned().collect())
}

/// Compares reverse-mode gradients against central finite differences
/// (step 1e-4) on `n_samples` randomly chosen parameters and returns the
/// worst relative disagreement. Relative means against the larger magnitude,
/// floored at 1e-6 so matching near-zero pairs compare as equal.
pub fn finite_difference_check(
    model: &CnnModel,
    input: &[f64],
    label: &BinaryLabel,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let grads = backward(model, input, label)?;
    let flat: Vec<f64> = grads.concat();
    let total = flat.len();

    let mut rng = Rng::new(seed);
    let mut picks: Vec<usize> = (0..n_samples).map(|_| rng.below(total)).collect();
    picks.sort_unstable();
    picks.dedup();

    let h = 1e-4;
    let mut worst = 0.0;
    for &flat_idx in &picks {
        let loss_at = |delta: f64| -> Result<f64> {
            let mut shifted = model.clone();
            let mut remaining = flat_idx;
            for tensor in shifted.param_tensors_mut() {
                if remaining < tensor.len() {
                    tensor[remaining] += delta;
                    break;
                }
                remaining -= tensor.len();
            }
            bce_loss(&shifted.forward(input, Mode::Train)?, label)
        };
        let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        let analytic = flat[flat_idx];
        worst = f64::max(
            worst,
            (fd - analytic).abs() / f64::max(1e-6, fd.abs().max(analytic.abs())),
        );
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Preprocessing and prediction
// ---------------------------------------------------------------------------

/// Scales a frame by its peak-to-peak range; a constant frame becomes zeros.
/// When the input spans both signs, every output lies strictly inside
/// (−1, 1).
pub fn preprocess_minmax(x: &Signal) -> Vec<f64> {
    let max = x.samples().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.samples().iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range == 0.0 {
        return vec![0.0; x.len()];
    }
    x.samples().iter().map(|&v| v / range).collect()
}

/// End-to-end frame → binary label path used by the controller.
pub fn predict_weights(model: &CnnModel, x: &Signal) -> Result<BinaryLabel> {
    let probs = model.forward(&preprocess_minmax(x), Mode::Eval)?;
    binarize(&WeightVector(probs))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Preprocessed examples ready for the trainer.
#[derive(Debug, Clone)]
pub struct LabelledSet {
    inputs: Vec<Vec<f64>>,
    labels: Vec<BinaryLabel>,
}

impl LabelledSet {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<BinaryLabel>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs against {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let width = labels[0].t().len();
        if labels.iter().any(|l| l.t().len() != width) {
            return Err(Error::invalid("labels have mixed widths"));
        }
        Ok(LabelledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn labels(&self) -> &[BinaryLabel] {
        &self.labels
    }
}

/// Loads one dataset split and applies the min-max preprocessing.
pub fn load_split(
    dir: impl AsRef<Path>,
    manifest: &crate::dataset::DatasetManifest,
    split: crate::dataset::Split,
) -> Result<LabelledSet> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in manifest.split(split) {
        let x = crate::dataset::load_track(&dir, record)?;
        inputs.push(preprocess_minmax(&x));
        labels.push(record.label.clone());
    }
    LabelledSet::new(inputs, labels)
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First/second moment decay of the adaptive optimizer.
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Early-stop once validation per-label accuracy reaches this value.
    pub val_target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            val_target: Some(0.995),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment coefficients must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bit_accuracy: f64,
    pub val_exact_match: f64,
}

/// Result of [`train`]: the best-validation snapshot and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    fn new(model: &CnnModel) -> Self {
        let shapes: Vec<usize> = Grads::zeros_like(model).tensors().iter().map(|t| t.len()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut CnnModel, grads: &Grads, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in model
            .param_tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..param.len() {
                let g = grad[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                param[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Per-label accuracy and exact-match rate of eval-mode predictions.
pub fn evaluate(model: &CnnModel, set: &LabelledSet) -> Result<(f64, f64)> {
    let mut bit_hits = 0usize;
    let mut exact_hits = 0usize;
    let m = model.n_labels;
    for (input, label) in set.inputs.iter().zip(&set.labels) {
        let probs = model.forward(input, Mode::Eval)?;
        let mut all = true;
        for (o, &p) in probs.iter().enumerate() {
            let bit = u8::from(p >= 0.5);
            if bit == label.t()[o] {
                bit_hits += 1;
            } else {
                all = false;
            }
        }
        if all {
            exact_hits += 1;
        }
    }
    Ok((
        bit_hits as f64 / (set.len() * m) as f64,
        exact_hits as f64 / set.len() as f64,
    ))
}

/// Mini-batch training with adaptive moments. Keeps the epoch with the best
/// validation per-label accuracy and returns that snapshot (reloaded from its
/// serialized bytes, so the returned model equals its on-disk form exactly).
pub fn train(
    model: CnnModel,
    train_set: &LabelledSet,
    val_set: &LabelledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.labels[0].t().len() != model.n_labels
        || val_set.labels[0].t().len() != model.n_labels
    {
        return Err(Error::invalid("dataset label width does not match the model"));
    }
    let mut model = model;
    let mut adam = Adam::new(&model);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(Rng::derive(cfg.seed, 0x6570_0000 + epoch as u64)).shuffle(&mut order);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let len = train_set.inputs[chunk[0]].len();
            let mut x0 = Feat::zeros(chunk.len(), 1, len);
            for (slot, &idx) in chunk.iter().enumerate() {
                if train_set.inputs[idx].len() != len {
                    return Err(Error::invalid("training inputs have mixed lengths"));
                }
                x0.row_mut(slot, 0).copy_from_slice(&train_set.inputs[idx]);
            }
            let labels: Vec<&BinaryLabel> = chunk.iter().map(|&i| &train_set.labels[i]).collect();

            let (probs, tape) = model.forward_train_batch(x0);
            let mut batch_loss = 0.0;
            for (slot, label) in labels.iter().enumerate() {
                batch_loss +=
                    bce_loss(&probs[slot * model.n_labels..][..model.n_labels], label)?;
            }
            batch_loss /= labels.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} (batch of {})",
                    labels.len()
                )));
            }
            loss_sum += batch_loss * labels.len() as f64;

            let grads = model.backward_batch(&tape, &labels);
            model.absorb_batch_stats(&tape);
            adam.apply(&mut model, &grads, cfg);
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let (val_bit_accuracy, val_exact_match) = evaluate(&model, val_set)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_bit_accuracy,
            val_exact_match,
        });

        if best.as_ref().is_none_or(|(acc, _, _)| val_bit_accuracy > *acc) {
            best = Some((val_bit_accuracy, epoch, model_to_bytes(&model)));
        }
        if cfg.val_target.is_some_and(|t| val_bit_accuracy >= t) {
            break;
        }
    }

    let (_, best_epoch, bytes) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: model_from_bytes(&bytes)?,
        metrics,
        best_epoch,
    })
}

/// Writes the training log as CSV.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    io::write_csv(
        path,
        &["epoch", "train_loss", "val_bit_accuracy", "val_exact_match"],
        metrics.iter().map(|m| {
            vec![
                m.epoch.to_string(),
                format!("{:.6}", m.train_loss),
                format!("{:.6}", m.val_bit_accuracy),
                format!("{:.6}", m.val_exact_match),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelDescriptor {
    format_version: u32,
    n_labels: usize,
    tensors: Vec<TensorEntry>,
}

/// Serializes the model: magic, version, JSON descriptor, then every tensor
/// as little-endian float32 in descriptor order.
pub fn model_to_bytes(model: &CnnModel) -> Vec<u8> {
    let tensors = model.state_tensors();
    let descriptor = ModelDescriptor {
        format_version: MODEL_FORMAT_VERSION,
        n_labels: model.n_labels,
        tensors: tensors
            .iter()
            .map(|(name, values)| TensorEntry {
                name: name.clone(),
                len: values.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&descriptor).expect("descriptor serializes");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, values) in tensors {
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Inverse of [`model_to_bytes`], validating magic, version and shapes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<CnnModel> {
    let fail = |detail: &str| Error::format("model container", detail);
    if bytes.len() < 16 || bytes[..4] != MODEL_MAGIC {
        return Err(fail("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            "model container",
            format!("unsupported version {version}"),
        ));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("descriptor overruns the file"))?;
    let descriptor: ModelDescriptor = serde_json::from_slice(&bytes[16..json_end])?;

    let mut model = CnnModel::new(0, descriptor.n_labels)?;
    let expected: Vec<(String, usize)> = model
        .state_tensors()
        .into_iter()
        .map(|(name, values)| (name, values.len()))
        .collect();
    if descriptor.tensors.len() != expected.len()
        || descriptor
            .tensors
            .iter()
            .zip(&expected)
            .any(|(got, want)| got.name != want.0 || got.len != want.1)
    {
        return Err(fail("tensor list does not match the architecture"));
    }

    let mut offset = json_end;
    for tensor in model.state_tensors_mut() {
        for value in tensor.iter_mut() {
            let end = offset + 4;
            if end > bytes.len() {
                return Err(fail("tensor data truncated"));
            }
            *value = f64::from(f32::from_le_bytes(bytes[offset..end].try_into().unwrap()));
            offset = end;
        }
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after tensor data"));
    }
    Ok(model)
}

/// Saves a model container to disk atomically.
pub fn save_model(path: impl AsRef<Path>, model: &CnnModel) -> Result<()> {
    io::write_atomic(path, &model_to_bytes(model))
}

/// Loads a model container from disk.
pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::white_noise;

    /// Relative disagreement with both magnitudes in the denominator.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1e-6, a.abs().max(b.abs()))
    }

    fn random_input(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..len).map(|_| 0.5 * rng.uniform_signed()).collect()
    }

    fn random_label(seed: u64, m: usize) -> BinaryLabel {
        let mut rng = Rng::new(seed);
        BinaryLabel((0..m).map(|_| rng.below(2) as u8).collect())
    }

    #[test]
    fn preprocess_scales_by_peak_to_peak_range() {
        let x = Signal::new(vec![2.0, -2.0, 1.0, -1.0], 16_000).unwrap();
        assert_eq!(preprocess_minmax(&x), vec![0.5, -0.5, 0.25, -0.25]);

        let constant = Signal::new(vec![3.0; 5], 16_000).unwrap();
        assert_eq!(preprocess_minmax(&constant), vec![0.0; 5]);

        let x = white_noise(3, 1_000, 16_000).unwrap();
        assert!(preprocess_minmax(&x).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = Rng::new(9);
        for (in_ch, out_ch, kernel, stride, padding, len) in
            [(1, 3, 5, 2, 2, 17), (4, 2, 3, 1, 1, 8), (2, 2, 1, 2, 0, 9)]
        {
            let conv = Conv1d::new(&mut rng, in_ch, out_ch, kernel, stride, padding);
            let mut x = Feat::zeros(2, in_ch, len);
            for v in &mut x.data {
                *v = rng.uniform_signed();
            }
            let y = conv.forward(&x);

            // Direct definition, no slicing tricks.
            for i in 0..2 {
                for o in 0..out_ch {
                    for t in 0..y.len {
                        let mut want = conv.bias[o];
                        for c in 0..in_ch {
                            for k in 0..kernel {
                                let j = (t * stride + k) as isize - padding as isize;
                                if j >= 0 && (j as usize) < len {
                                    want += conv.weight[(o * in_ch + c) * kernel + k]
                                        * x.row(i, c)[j as usize];
                                }
                            }
                        }
                        assert!(
                            (y.row(i, o)[t] - want).abs() < 1e-12,
                            "sample {i} ch {o} pos {t}"
                        );
                    }
                }
            }
        }
    }

    /// Finite-difference check of a scalar-loss gradient for any layer baked
    /// into a closure: loss(params) with params injected by the caller.
    fn check_fd(
        mut loss: impl FnMut(&[f64]) -> f64,
        params: &[f64],
        grad: &[f64],
        tol: f64,
        what: &str,
    ) {
        let h = 1e-4;
        let mut worst = 0.0;
        for k in 0..params.len() {
            let mut plus = params.to_vec();
            plus[k] += h;
            let mut minus = params.to_vec();
            minus[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = f64::max(worst, rel_err(fd, grad[k]));
        }
        assert!(worst < tol, "{what}: worst relative error {worst:.3e}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let conv = Conv1d::new(&mut rng, 2, 3, 3, 2, 1);
        let mut x = Feat::zeros(2, 2, 9);
        for v in &mut x.data {
            *v = rng.uniform_signed();
        }
        // Scalar loss: sum of squares of the output.
        let forward_loss = |c: &Conv1d, x: &Feat| -> f64 {
            c.forward(x).data.iter().map(|v| v * v).sum::<f64>()
        };
        let y = conv.forward(&x);
        let mut dy = y.clone();
        for (d, &v) in dy.data.iter_mut().zip(&y.data) {
            *d = 2.0 * v;
        }
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; conv.bias.len()];
        let dx = conv.backward(&x, &dy, &mut dw, &mut db);

        check_fd(
            |w| {
                let mut c = conv.clone();
                c.weight = w.to_vec();
                forward_loss(&c, &x)
            },
            &conv.weight,
            &dw,
            1e-5,
            "conv weights",
        );
        check_fd(
            |b| {
                let mut c = conv.clone();
                c.bias = b.to_vec();
                forward_loss(&c, &x)
            },
            &conv.bias,
            &db,
            1e-5,
            "conv bias",
        );
        check_fd(
            |xv| {
                let mut x2 = x.clone();
                x2.data = xv.to_vec();
                forward_loss(&conv, &x2)
            },
            &x.data,
            &dx.data,
            1e-5,
            "conv input",
        );
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        let mut bn = BatchNorm1d::new(3);
        for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()) {
            *v = 1.0 + 0.3 * rng.uniform_signed();
        }
        let mut x = Feat::zeros(2, 3, 5);
        for v in &mut x.data {
            *v = rng.uniform_signed();
        }
        let loss = |bn: &BatchNorm1d, x: &Feat| -> f64 {
            bn.forward_train(x).0.data.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = bn.forward_train(&x);
        let mut dy = y.clone();
        for (d, &v) in dy.data.iter_mut().zip(&y.data) {
            *d = 2.0 * v;
        }
        let mut dgamma = vec![0.0; 3];
        let mut dbeta = vec![0.0; 3];
        let dx = bn.backward(&cache, &dy, &mut dgamma, &mut dbeta);

        check_fd(
            |g| {
                let mut b2 = bn.clone();
                b2.gamma = g.to_vec();
                loss(&b2, &x)
            },
            &bn.gamma,
            &dgamma,
            1e-5,
            "bn gamma",
        );
        check_fd(
            |b| {
                let mut b2 = bn.clone();
                b2.beta = b.to_vec();
                loss(&b2, &x)
            },
            &bn.beta,
            &dbeta,
            1e-5,
            "bn beta",
        );
        check_fd(
            |xv| {
                let mut x2 = x.clone();
                x2.data = xv.to_vec();
                loss(&bn, &x2)
            },
            &x.data,
            &dx.data,
            1e-4,
            "bn input",
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_first_maximum() {
        let mut x = Feat::zeros(1, 1, 8);
        x.row_mut(0, 0).copy_from_slice(&[1.0, 3.0, 3.0, 0.0, -1.0, -5.0, -1.0, -2.0]);
        let (y, argmax) = maxpool_forward(&x, 4);
        assert_eq!(y.row(0, 0), &[3.0, -1.0]);
        assert_eq!(argmax, vec![1, 4]); // earliest of the tied maxima

        let mut dy = Feat::zeros(1, 1, 2);
        dy.row_mut(0, 0).copy_from_slice(&[5.0, 7.0]);
        let dx = maxpool_backward(&dy, &argmax, 8);
        assert_eq!(dx.row(0, 0), &[0.0, 5.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 384 samples keep the sweep cheap while leaving every feature map
        // at least two positions long; a length-1 map would be normalized to
        // exactly zero, parking the output ReLUs on their kinks where
        // one-sided finite differences disagree with the (zero) gradient.
        let model = CnnModel::new(5, 4).unwrap();
        let input = random_input(6, 384);
        let label = random_label(7, 4);

        let grads = backward(&model, &input, &label).unwrap();
        let total: usize = grads.iter().map(|g| g.len()).sum();
        assert_eq!(total, param_count(&model));

        let worst = finite_difference_check(&model, &input, &label, 200, 8).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst:.3e}");
    }

    #[test]
    fn bce_matches_direct_formula() {
        let label = BinaryLabel(vec![1, 0, 1]);
        let probs = [0.5, 0.5, 0.5];
        assert!((bce_loss(&probs, &label).unwrap() - 2f64.ln()).abs() < 1e-12);

        let perfect = [1.0, 0.0, 1.0];
        assert!(bce_loss(&perfect, &label).unwrap() <= 1e-6);

        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let m = 1 + rng.below(6);
            let label = BinaryLabel((0..m).map(|_| rng.below(2) as u8).collect());
            let probs: Vec<f64> = (0..m).map(|_| rng.next_f64()).collect();
            let direct = -probs
                .iter()
                .zip(label.t())
                .map(|(&p, &t)| {
                    let p = p.clamp(1e-7, 1.0 - 1e-7);
                    if t == 1 {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum::<f64>()
                / m as f64;
            let got = bce_loss(&probs, &label).unwrap();
            assert!((got - direct).abs() < 1e-12);
            assert!(got >= 0.0);
        }

        assert!(bce_loss(&[0.5], &BinaryLabel(vec![0, 1])).is_err());
    }

    #[test]
    fn zero_parameters_predict_one_half_everywhere() {
        let mut model = CnnModel::new(1, 15).unwrap();
        for tensor in model.param_tensors_mut() {
            tensor.fill(0.0);
        }
        let input = random_input(2, 256);
        for mode in [Mode::Eval, Mode::Train] {
            let probs = model.forward(&input, mode).unwrap();
            assert!(probs.iter().all(|&p| p == 0.5), "{mode:?}: {probs:?}");
        }
    }

    #[test]
    fn eval_outputs_lie_strictly_inside_unit_interval() {
        let model = CnnModel::new(3, 15).unwrap();
        let input = random_input(4, 512);
        let probs = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(probs.len(), 15);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn eval_is_deterministic_and_batch_invariant() {
        let model = CnnModel::new(4, 6).unwrap();
        let inputs: Vec<Vec<f64>> = (0..3).map(|i| random_input(20 + i, 384)).collect();

        let single: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| model.forward(x, Mode::Eval).unwrap())
            .collect();
        let again: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| model.forward(x, Mode::Eval).unwrap())
            .collect();
        assert_eq!(single, again);

        let mut batch = Feat::zeros(3, 1, 384);
        for (i, x) in inputs.iter().enumerate() {
            batch.row_mut(i, 0).copy_from_slice(x);
        }
        let batched = model.forward_eval_batch(&batch);
        for (i, one) in single.iter().enumerate() {
            assert_eq!(&batched[i * 6..(i + 1) * 6], one.as_slice());
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let model = CnnModel::new(4, 6).unwrap();
        assert!(matches!(
            model.forward(&[0.0; 64], Mode::Eval),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn parameter_counts_match_hand_computation() {
        // dense 10 -> 5 with bias.
        let mut rng = Rng::new(1);
        let dense = Dense::new(&mut rng, 10, 5);
        assert_eq!(dense.weight.len() + dense.bias.len(), 55);

        // conv k=3, 4 -> 8 channels with bias.
        let conv = Conv1d::new(&mut rng, 4, 8, 3, 1, 1);
        assert_eq!(conv.weight.len() + conv.bias.len(), 104);

        let model = CnnModel::new(0, 15).unwrap();
        assert_eq!(param_count(&model), 27_983);
        assert!(param_count(&model) <= 250_000);
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let model = CnnModel::new(7, 15).unwrap();
        let bytes = model_to_bytes(&model);
        let loaded = model_from_bytes(&bytes).unwrap();

        // Model values are f32-quantized by the container; after one round
        // trip the representation is stable, so bytes must match exactly.
        assert_eq!(model_to_bytes(&loaded), bytes);

        let input = random_input(9, 256);
        let quantized = {
            let mut m = model.clone();
            for tensor in m.state_tensors_mut() {
                for v in tensor.iter_mut() {
                    *v = f64::from(*v as f32);
                }
            }
            m
        };
        let a = quantized.forward(&input, Mode::Eval).unwrap();
        let b = loaded.forward(&input, Mode::Eval).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &loaded).unwrap();
        let from_disk = load_model(&path).unwrap();
        assert_eq!(model_to_bytes(&from_disk), bytes);
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let model = CnnModel::new(7, 4).unwrap();
        let bytes = model_to_bytes(&model);

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(model_from_bytes(&wrong_magic).is_err());

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        assert!(model_from_bytes(&wrong_version).is_err());

        assert!(model_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0; 4]);
        assert!(model_from_bytes(&trailing).is_err());
    }

    fn tiny_sets(m: usize) -> (LabelledSet, LabelledSet) {
        let train = LabelledSet::new(
            (0..10).map(|i| random_input(100 + i, 256)).collect(),
            (0..10).map(|i| random_label(200 + i, m)).collect(),
        )
        .unwrap();
        let val = LabelledSet::new(
            (0..4).map(|i| random_input(300 + i, 256)).collect(),
            (0..4).map(|i| random_label(400 + i, m)).collect(),
        )
        .unwrap();
        (train, val)
    }

    #[test]
    fn training_reduces_loss_below_the_coin_flip_baseline() {
        // A fresh model scores ~ln 2 per label; overfitting ten examples
        // must push the running training loss clearly below that.
        let (train_set, val_set) = tiny_sets(5);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 5,
            val_target: None,
            ..TrainConfig::default()
        };
        let outcome = train(CnnModel::new(1, 5).unwrap(), &train_set, &val_set, &cfg).unwrap();
        assert_eq!(outcome.metrics.len(), 30);
        let first = outcome.metrics[0].train_loss;
        let last = outcome.metrics.last().unwrap().train_loss;
        assert!((first - 2f64.ln()).abs() < 0.15, "baseline was {first:.4}");
        assert!(last < 0.6, "loss only got down to {last:.4}");
        assert!((1..=30).contains(&outcome.best_epoch));
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let (train_set, val_set) = tiny_sets(5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            val_target: None,
            ..TrainConfig::default()
        };
        let a = train(CnnModel::new(1, 5).unwrap(), &train_set, &val_set, &cfg).unwrap();
        let b = train(CnnModel::new(1, 5).unwrap(), &train_set, &val_set, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(model_to_bytes(&a.model), model_to_bytes(&b.model));
    }

    #[test]
    fn predict_weights_is_binarized_forward() {
        let model = CnnModel::new(6, 15).unwrap();
        let x = white_noise(31, 16_000, 16_000).unwrap();
        let probs = model.forward(&preprocess_minmax(&x), Mode::Eval).unwrap();
        let want: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
        assert_eq!(predict_weights(&model, &x).unwrap().t(), want.as_slice());
    }

    #[test]
    fn metrics_csv_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let metrics = vec![
            EpochMetrics {
                epoch: 1,
                train_loss: 0.662345,
                val_bit_accuracy: 0.71,
                val_exact_match: 0.20,
            },
            EpochMetrics {
                epoch: 2,
                train_loss: 0.401,
                val_bit_accuracy: 0.85,
                val_exact_match: 0.44,
            },
        ];
        write_metrics_csv(&path, &metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_bit_accuracy,val_exact_match");
        assert!(lines[1].starts_with("1,0.662345,"));
    }
}
