//! Layer primitives recorded on a [`Tape`]: convolution, batch
//! normalization, pooling, dense, dropout, softmax and flatten.
//!
//! All image tensors are NHWC. Convolution lowers each sample to a patch
//! matrix and multiplies it with the kernel viewed as `[kh*kw*c_in, c_out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::BackwardRule;
use crate::tensor::gemm;
use crate::{Error, Mode, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

/// One layer of a sequential model, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    /// 2x2 window, stride 2.
    MaxPool,
    GlobalAvgPool,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
        l2: f64,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel: [kh, kw],
                stride,
                ..
            } => {
                if filters == 0 || stride == 0 {
                    return Err(Error::invalid("conv filters and stride must be positive"));
                }
                if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid(format!(
                        "conv kernel {kh}x{kw} must have odd positive extents"
                    )));
                }
            }
            LayerSpec::BatchNorm { momentum, epsilon } => {
                if !(0.0..=1.0).contains(&momentum) || !(epsilon > 0.0) {
                    return Err(Error::invalid("batchnorm needs momentum in [0,1] and epsilon > 0"));
                }
            }
            LayerSpec::Dropout { rate } => check_rate(rate)?,
            LayerSpec::Dense { units, l2, .. } => {
                if units == 0 || !(l2 >= 0.0) {
                    return Err(Error::invalid("dense needs units > 0 and l2 >= 0"));
                }
            }
            LayerSpec::MaxPool | LayerSpec::GlobalAvgPool | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")))
    }
}

fn image_dims(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => Err(Error::shape(format!("{what} expects [N,H,W,C], got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input: [usize; 4], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [_, h, w, c_in] = input;
        let [kh, kw, kc, c_out] = match *kernel {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::shape(format!("conv kernel must be rank 4, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(format!("kernel {kh}x{kw} larger than input {h}x{w}")));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::shape("kernel larger than padded input"));
                }
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(Self {
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside
    /// the unpadded input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (c, k) = (self.c_in, self.patch_len());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * c..][..c];
                        match self.source(oy, ox, ky, kx) {
                            Some(p) => dst.copy_from_slice(&sample[p * c..][..c]),
                            None => dst.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], sample_grad: &mut [f64]) {
        let (c, k) = (self.c_in, self.patch_len());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * k..][..k];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(p) = self.source(oy, ox, ky, kx) {
                            let src = &row[(ky * self.kw + kx) * c..][..c];
                            for (d, s) in sample_grad[p * c..][..c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) with bias. `input` is
/// `[N,H,W,C_in]`, `kernel` is `[kh,kw,C_in,C_out]`, `bias` is `[C_out]`.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let x = tape.value(input);
    let dims = image_dims(x, "conv2d")?;
    let geo = ConvGeometry::new(dims, tape.value(kernel).shape(), stride, padding)?;
    if tape.value(bias).shape() != [geo.c_out] {
        return Err(Error::shape(format!(
            "conv bias must be [{}], got {:?}",
            geo.c_out,
            tape.value(bias).shape()
        )));
    }
    let n = dims[0];
    let (k, pixels) = (geo.patch_len(), geo.out_pixels());
    let in_len = geo.h * geo.w * geo.c_in;
    let out_len = pixels * geo.c_out;
    let w = tape.value(kernel).data();
    let b = tape.value(bias).data();
    let mut out = vec![0.0; n * out_len];
    let mut cols = vec![0.0; pixels * k];
    for s in 0..n {
        geo.im2col(&x.data()[s * in_len..][..in_len], &mut cols);
        let y = &mut out[s * out_len..][..out_len];
        for row in y.chunks_exact_mut(geo.c_out) {
            row.copy_from_slice(b);
        }
        gemm(pixels, k, geo.c_out, 1.0, &cols, false, w, false, 1.0, y);
    }
    let out = Tensor::new(&[n, geo.out_h, geo.out_w, geo.c_out], out)?;
    Ok(tape.record(&[input, kernel, bias], out, Conv2dRule { geo, n }))
}

struct Conv2dRule {
    geo: ConvGeometry,
    n: usize,
}

impl BackwardRule for Conv2dRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geo;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (k, pixels) = (geo.patch_len(), geo.out_pixels());
        let in_len = geo.h * geo.w * geo.c_in;
        let out_len = pixels * geo.c_out;
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; geo.c_out];
            for row in g.chunks_exact(geo.c_out) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            gb
        });
        let mut cols = vec![0.0; pixels * k];
        for s in 0..self.n {
            let gy = &g[s * out_len..][..out_len];
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&x[s * in_len..][..in_len], &mut cols);
                // dW += cols^T dY
                gemm(k, pixels, geo.c_out, 1.0, &cols, true, gy, false, 1.0, gw);
            }
            if let Some(gx) = gx.as_mut() {
                // dcols = dY W^T
                gemm(pixels, geo.c_out, k, 1.0, gy, false, w, true, 0.0, &mut cols);
                geo.col2im_add(&cols, &mut gx[s * in_len..][..in_len]);
            }
        }
        vec![gx, gw, gb]
    }
}

// ---------------------------------------------------------------------------
// batch normalization

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPSILON: f64 = 1e-3;

    /// Identity-initialized state: gamma 1, beta 0, moving mean 0, moving var 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::ones(&[channels]),
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Records gamma and beta as trainable leaves, applies [`batchnorm`] and,
    /// in train mode, folds the batch statistics into the running ones.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<(Var, Var, Var)> {
        let gamma = tape.leaf(self.gamma.clone(), true);
        let beta = tape.leaf(self.beta.clone(), true);
        let out = batchnorm(
            tape,
            input,
            gamma,
            beta,
            RunningStats {
                mean: self.moving_mean.data_mut(),
                var: self.moving_var.data_mut(),
            },
            self.momentum,
            self.epsilon,
            mode,
        )?;
        Ok((out, gamma, beta))
    }
}

/// Mutable views of a batch-norm layer's running mean and variance.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f64],
    pub var: &'a mut [f64],
}

/// Batch normalization over every axis except the last (channel) axis.
///
/// Train mode normalizes with the biased batch variance and updates
/// `running` as `momentum * running + (1 - momentum) * batch`. Infer mode
/// uses `running` only and leaves it untouched.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    running: RunningStats<'_>,
    momentum: f64,
    epsilon: f64,
    mode: Mode,
) -> Result<Var> {
    let x = tape.value(input);
    let shape = x.shape().to_vec();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::shape(format!("batchnorm expects [N,C] or [N,H,W,C], got {shape:?}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid("batchnorm epsilon must be positive"));
    }
    let c = *shape.last().expect("rank >= 2");
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.value(v).shape() != [c] {
            return Err(Error::shape(format!("batchnorm {what} must be [{c}]")));
        }
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape(format!("batchnorm running stats must have {c} channels")));
    }
    let rows = x.len() / c;
    let data = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            if shape[0] < 2 {
                return Err(Error::invalid("batchnorm train mode needs a batch of at least 2"));
            }
            let mut mean = vec![0.0; c];
            for row in data.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in data.chunks_exact(c) {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            for ch in 0..c {
                running.mean[ch] = momentum * running.mean[ch] + (1.0 - momentum) * mean[ch];
                running.var[ch] = momentum * running.var[ch] + (1.0 - momentum) * var[ch];
            }
            (mean, var)
        }
        Mode::Infer => (running.mean.to_vec(), running.var.to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let (gm, bt) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for ((row, xh), o) in data
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for ch in 0..c {
            xh[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            o[ch] = gm[ch] * xh[ch] + bt[ch];
        }
    }
    let out = Tensor::new(&shape, out)?;
    let rule = BatchNormRule {
        mode,
        xhat,
        inv_std,
        channels: c,
    };
    Ok(tape.record(&[input, gamma, beta], out, rule))
}

struct BatchNormRule {
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
}

impl BackwardRule for BatchNormRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let rows = (g.len() / c) as f64;
        let gamma = inputs[1].data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (gr, xr) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += gr[ch];
                sum_gx[ch] += gr[ch] * xr[ch];
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; g.len()];
            for ((o, gr), xr) in gx
                .chunks_exact_mut(c)
                .zip(g.chunks_exact(c))
                .zip(self.xhat.chunks_exact(c))
            {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch];
                    o[ch] = match self.mode {
                        Mode::Train => {
                            scale * (gr[ch] - sum_g[ch] / rows - xr[ch] * sum_gx[ch] / rows)
                        }
                        Mode::Infer => scale * gr[ch],
                    };
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

// ---------------------------------------------------------------------------
// pooling

/// 2x2 max pooling with stride 2. A trailing odd row or column is dropped.
/// The gradient goes to the first maximum of each window in row-major order.
pub fn maxpool2d(tape: &mut Tape, input: Var) -> Result<Var> {
    let x = tape.value(input);
    let [n, h, w, c] = image_dims(x, "maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("maxpool2d needs H, W >= 2, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if arg == usize::MAX || data[i] > best {
                            best = data[i];
                            arg = i;
                        }
                    }
                    out.push(best);
                    argmax.push(arg);
                }
            }
        }
    }
    let out = Tensor::new(&[n, oh, ow, c], out)?;
    let in_len = x.len();
    Ok(tape.record(&[input], out, ScatterRule { argmax, in_len }))
}

struct ScatterRule {
    argmax: Vec<usize>,
    in_len: usize,
}

impl BackwardRule for ScatterRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = vec![0.0; self.in_len];
        for (&i, &gi) in self.argmax.iter().zip(g) {
            gx[i] += gi;
        }
        vec![Some(gx)]
    }

    fn branches(&self, _: &[&Tensor], _: &Tensor, out: &mut Vec<u64>) {
        out.extend(self.argmax.iter().map(|&i| i as u64));
    }
}

/// Per-channel spatial mean: `[N,H,W,C] -> [N,C]`.
pub fn global_avg_pool(tape: &mut Tape, input: Var) -> Result<Var> {
    let x = tape.value(input);
    let [n, h, w, c] = image_dims(x, "global_avg_pool")?;
    let area = (h * w) as f64;
    let mut out = vec![0.0; n * c];
    for (s, sample) in x.data().chunks_exact(h * w * c).enumerate() {
        let o = &mut out[s * c..][..c];
        for px in sample.chunks_exact(c) {
            o.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        o.iter_mut().for_each(|v| *v /= area);
    }
    let out = Tensor::new(&[n, c], out)?;
    Ok(tape.record(&[input], out, GapRule { h, w, c }))
}

struct GapRule {
    h: usize,
    w: usize,
    c: usize,
}

impl BackwardRule for GapRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let area = self.h * self.w;
        let inv = 1.0 / area as f64;
        let mut gx = Vec::with_capacity(g.len() * area);
        for row in g.chunks_exact(self.c) {
            for _ in 0..area {
                gx.extend(row.iter().map(|v| v * inv));
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------
// dense, dropout, softmax, flatten

/// Fully connected layer: returns `input . weight + bias` and the penalty
/// `l2 * sum(weight^2)` (bias excluded).
pub fn dense(tape: &mut Tape, input: Var, weight: Var, bias: Var, l2: f64) -> Result<(Var, Var)> {
    let (xs, ws, bs) = (
        tape.value(input).shape(),
        tape.value(weight).shape(),
        tape.value(bias).shape(),
    );
    match (xs, ws, bs) {
        ([_, d_in], [w_in, d_out], [b_out]) if d_in == w_in && d_out == b_out => {}
        _ => {
            return Err(Error::shape(format!(
                "dense input {xs:?}, weight {ws:?}, bias {bs:?}"
            )))
        }
    }
    let product = tape.matmul(input, weight)?;
    let out = tape.add(product, bias)?;
    let sq = tape.mul(weight, weight)?;
    let total = tape.sum_all(sq);
    let penalty = tape.scale(total, l2);
    Ok((out, penalty))
}

/// Inverted dropout. Identity in infer mode; in train mode each element is
/// zeroed with probability `rate` and survivors are scaled by `1/(1-rate)`.
pub fn dropout(tape: &mut Tape, input: Var, rate: f64, mode: Mode, rng_seed: u64) -> Result<Var> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let keep = 1.0 / (1.0 - rate);
    let x = tape.value(input);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = Tensor::new(
        x.shape(),
        x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
    )?;
    Ok(tape.record(&[input], out, MaskRule(mask)))
}

struct MaskRule(Vec<f64>);

impl BackwardRule for MaskRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.0).map(|(g, m)| g * m).collect())]
    }
}

/// Row-wise softmax of `[N,K]` logits, max-subtracted for stability.
pub fn softmax(tape: &mut Tape, input: Var) -> Result<Var> {
    let x = tape.value(input);
    let k = match *x.shape() {
        [_, k] if k >= 2 => k,
        ref s => return Err(Error::shape(format!("softmax expects [N,K>=2], got {s:?}"))),
    };
    let out = Tensor::new(x.shape(), softmax_rows(x.data(), k))?;
    Ok(tape.record(&[input], out, SoftmaxRule { k }))
}

pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let sum: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

struct SoftmaxRule {
    k: usize,
}

impl BackwardRule for SoftmaxRule {
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut gx = Vec::with_capacity(g.len());
        for (yr, gr) in y.data().chunks_exact(self.k).zip(g.chunks_exact(self.k)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
        }
        vec![Some(gx)]
    }
}

/// `[N, ...] -> [N, prod(...)]`
pub fn flatten(tape: &mut Tape, input: Var) -> Result<Var> {
    let shape = tape.value(input).shape();
    if shape.is_empty() {
        return Err(Error::shape("flatten needs a batch axis"));
    }
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(input, &[n, rest])
}
