//! Layer kernels with analytic backward passes.
//!
//! Image tensors are NHWC. Every layer is a plain struct holding its
//! parameters; `forward` returns the output together with whatever the
//! backward pass needs, and `backward` maps an upstream gradient to the
//! input gradient plus parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

fn nhwc(x: &Tensor, op: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects an NHWC tensor, got shape {:?}",
            x.shape()
        ))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
    t
}

pub fn xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
    t
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Stride-1, zero "same"-padded, dilated 2-D cross-correlation.
///
/// Weights are laid out `[k, k, c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let conv = Self {
            weight,
            bias,
            dilation,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn zeros(kernel: usize, dilation: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[kernel, kernel, c_in, c_out]),
            Tensor::zeros(&[c_out]),
            dilation,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        match *self.weight.shape() {
            [k, k2, _, c_out] if k == k2 && k % 2 == 1 => {
                if self.bias.shape() != [c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: self.weight.shape().to_vec(),
                        right: self.bias.shape().to_vec(),
                    });
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!(
                "conv weight must be [k, k, c_in, c_out] with odd k, got {:?}",
                self.weight.shape()
            ))),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    /// Zero padding per side: `(d * (k - 1) + 1 - 1) / 2`.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size() - 1) / 2
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<[usize; 4]> {
        self.validate()?;
        let dims = nhwc(x, "conv2d")?;
        if dims[3] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(dims)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [n, h, w, cin] = self.check_input(x)?;
        let (k, d, pad, cout) = (
            self.kernel_size(),
            self.dilation,
            self.padding() as isize,
            self.out_channels(),
        );
        let xd = x.data();
        let wd = self.weight.data();
        let mut out = vec![0.0; n * h * w * cout];
        for b in 0..n {
            for oh in 0..h {
                for ow in 0..w {
                    let o = &mut out[((b * h + oh) * w + ow) * cout..][..cout];
                    o.copy_from_slice(self.bias.data());
                    for i in 0..k {
                        let ih = oh as isize + (i * d) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let iw = ow as isize + (j * d) as isize - pad;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xs = &xd[((b * h + ih as usize) * w + iw as usize) * cin..][..cin];
                            let tap = &wd[(i * k + j) * cin * cout..][..cin * cout];
                            for (c, &xv) in xs.iter().enumerate() {
                                let row = &tap[c * cout..][..cout];
                                for (ov, &wv) in o.iter_mut().zip(row) {
                                    *ov += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, h, w, cout], out)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let [n, h, w, cin] = self.check_input(x)?;
        let cout = self.out_channels();
        if grad_out.shape() != [n, h, w, cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: vec![n, h, w, cout],
                right: grad_out.shape().to_vec(),
            });
        }
        let (k, d, pad) = (self.kernel_size(), self.dilation, self.padding() as isize);
        let xd = x.data();
        let gd = grad_out.data();
        let wd = self.weight.data();

        // input gradient, gathered per input pixel
        let mut gx = vec![0.0; n * h * w * cin];
        for b in 0..n {
            for p in 0..h {
                for q in 0..w {
                    let gxs = &mut gx[((b * h + p) * w + q) * cin..][..cin];
                    for i in 0..k {
                        let oh = p as isize + pad - (i * d) as isize;
                        if oh < 0 || oh >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let ow = q as isize + pad - (j * d) as isize;
                            if ow < 0 || ow >= w as isize {
                                continue;
                            }
                            let g = &gd[((b * h + oh as usize) * w + ow as usize) * cout..][..cout];
                            let tap = &wd[(i * k + j) * cin * cout..][..cin * cout];
                            for (c, gv) in gxs.iter_mut().enumerate() {
                                let row = &tap[c * cout..][..cout];
                                *gv += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }

        // weight gradient, one tap at a time
        let mut gw = vec![0.0; k * k * cin * cout];
        for i in 0..k {
            for j in 0..k {
                let tap = &mut gw[(i * k + j) * cin * cout..][..cin * cout];
                for b in 0..n {
                    for oh in 0..h {
                        let ih = oh as isize + (i * d) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for ow in 0..w {
                            let iw = ow as isize + (j * d) as isize - pad;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xs = &xd[((b * h + ih as usize) * w + iw as usize) * cin..][..cin];
                            let g = &gd[((b * h + oh) * w + ow) * cout..][..cout];
                            for (c, &xv) in xs.iter().enumerate() {
                                let row = &mut tap[c * cout..][..cout];
                                for (r, &gv) in row.iter_mut().zip(g) {
                                    *r += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut gb = vec![0.0; cout];
        for g in gd.chunks_exact(cout) {
            for (a, &v) in gb.iter_mut().zip(g) {
                *a += v;
            }
        }

        Ok(ConvGrads {
            input: Tensor::new(vec![n, h, w, cin], gx)?,
            weight: Tensor::new(self.weight.shape().to_vec(), gw)?,
            bias: Tensor::new(vec![cout], gb)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: Mode,
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let [n, h, w, c] = nhwc(x, "batchnorm2d")?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d channels",
                left: x.shape().to_vec(),
                right: self.gamma.shape().to_vec(),
            });
        }
        let rows = n * h * w;
        let xd = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "train-mode batchnorm needs at least 2 values per channel, got N*H*W = {rows}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (g, bta) = (self.gamma.data(), self.beta.data());
        for ((xr, hr), or) in xd
            .chunks_exact(c)
            .zip(x_hat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                or[ch] = g[ch] * hr[ch] + bta[ch];
            }
        }
        let shape = x.shape().to_vec();
        Ok((
            Tensor::new(shape.clone(), out)?,
            BnCache {
                mode,
                x_hat: Tensor::new(shape, x_hat)?,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
        same_shape("batchnorm2d backward", &cache.x_hat, grad_out)?;
        let c = self.channels();
        let gd = grad_out.data();
        let hd = cache.x_hat.data();
        let rows = gd.len() / c;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (gr, hr) in gd.chunks_exact(c).zip(hd.chunks_exact(c)) {
            for ch in 0..c {
                dbeta[ch] += gr[ch];
                dgamma[ch] += gr[ch] * hr[ch];
            }
        }
        let gamma = self.gamma.data();
        let mut dx = vec![0.0; gd.len()];
        match cache.mode {
            Mode::Train => {
                // dx = gamma * inv_std / M * (M*dy - sum(dy) - x_hat * sum(dy * x_hat))
                let m = rows as f64;
                for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(hd.chunks_exact(c)) {
                    for ch in 0..c {
                        dr[ch] = gamma[ch] * cache.inv_std[ch] / m
                            * (m * gr[ch] - dbeta[ch] - hr[ch] * dgamma[ch]);
                    }
                }
            }
            Mode::Eval => {
                for (dr, gr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                    for ch in 0..c {
                        dr[ch] = gamma[ch] * cache.inv_std[ch] * gr[ch];
                    }
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::new(grad_out.shape().to_vec(), dx)?,
            gamma: Tensor::new(vec![c], dgamma)?,
            beta: Tensor::new(vec![c], dbeta)?,
        })
    }

    /// Folds a train-mode batch's statistics into the running estimates:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    /// Flat input index of each output's window maximum.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. A trailing odd row/column is dropped.
/// Ties go to the first maximum in row-major window order.
pub fn maxpool2d(x: &Tensor) -> Result<(Tensor, PoolCache)> {
    let [n, h, w, c] = nhwc(x, "maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2d needs spatial dims >= 2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * i) * w + 2 * j) * c + ch;
                    let mut best = xd[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![n, oh, ow, c], out)?,
        PoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::InvalidArgument(format!(
            "maxpool backward: gradient has {} elements, cache has {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let gxd = gx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        gxd[idx] += g;
    }
    Ok(gx)
}

/// Mean over H and W: `[N, H, W, C] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = nhwc(x, "global_avg_pool")?;
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    for (b, sample) in x.data().chunks_exact(hw * c).enumerate() {
        let o = &mut out[b * c..(b + 1) * c];
        for row in sample.chunks_exact(c) {
            for (a, &v) in o.iter_mut().zip(row) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= hw as f64);
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = match *input_shape {
        [n, h, w, c] => [n, h, w, c],
        _ => return Err(Error::InvalidArgument("GAP backward needs an NHWC shape".into())),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool backward",
            left: vec![n, c],
            right: grad_out.shape().to_vec(),
        });
    }
    let scale = 1.0 / (h * w) as f64;
    let mut gx = Vec::with_capacity(n * h * w * c);
    for g in grad_out.data().chunks_exact(c) {
        for _ in 0..h * w {
            gx.extend(g.iter().map(|v| v * scale));
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match *weight.shape() {
            [_, out] if bias.shape() == [out] => Ok(Self { weight, bias }),
            _ => Err(Error::ShapeMismatch {
                op: "dense params",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            }),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.inputs() {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
        if grad_out.rank() != 2 || grad_out.shape() != [x.shape()[0], self.outputs()] {
            return Err(Error::ShapeMismatch {
                op: "dense backward",
                left: vec![x.shape()[0], self.outputs()],
                right: grad_out.shape().to_vec(),
            });
        }
        Ok(DenseGrads {
            input: grad_out.matmul(&self.weight.transpose()?)?,
            weight: x.transpose()?.matmul(grad_out)?,
            bias: grad_out.reduce(crate::tensor::ReduceOp::Sum, &[0], false)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Largest f64 below 1.0; sigmoid outputs are clamped to
/// `[f64::MIN_POSITIVE, SIGMOID_MAX]` so they stay strictly inside (0, 1).
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => x.map(sigmoid_scalar),
        }
    }

    /// `input` and `output` are the forward pass's input and output.
    /// ReLU's derivative at exactly 0 is taken as 0.
    pub fn backward(self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        same_shape("activation backward", input, grad_out)?;
        same_shape("activation backward", output, grad_out)?;
        let data = match self {
            Activation::Relu => input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Sigmoid => output
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect(),
        };
        Tensor::new(grad_out.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time,
/// eval mode is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

/// Per-element multipliers applied in the forward pass (0 or `1/(1-rate)`).
/// `None` means the layer acted as the identity.
#[derive(Debug, Clone)]
pub struct DropoutMask(pub Option<Vec<f64>>);

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> (Tensor, DropoutMask) {
        if mode == Mode::Eval || self.rate == 0.0 {
            return (x.clone(), DropoutMask(None));
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.uniform() < self.rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        (
            Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            DropoutMask(Some(mask)),
        )
    }

    pub fn backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
        match &mask.0 {
            None => Ok(grad_out.clone()),
            Some(m) if m.len() == grad_out.len() => {
                let data = grad_out.data().iter().zip(m).map(|(g, m)| g * m).collect();
                Tensor::new(grad_out.shape().to_vec(), data)
            }
            Some(m) => Err(Error::InvalidArgument(format!(
                "dropout mask has {} elements, gradient has {}",
                m.len(),
                grad_out.len()
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax expects [N, K], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn validate_one_hot(labels: &Tensor) -> Result<()> {
    let k = labels.shape()[1];
    for (r, row) in labels.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::InvalidArgument(format!(
                "label row {r} is not one-hot: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy over the batch. Returns `(loss, probs)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("softmax_cross_entropy", logits, labels)?;
    validate_one_hot(labels)?;
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (lrow, yrow) in logits.data().chunks_exact(k).zip(labels.data().chunks_exact(k)) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t = yrow.iter().position(|&v| v == 1.0).expect("validated one-hot");
        loss += lse - lrow[t];
    }
    Ok((loss / n as f64, probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(probs - labels) / N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let n = probs.shape()[0] as f64;
    Ok(probs.sub(labels)?.scale(1.0 / n))
}
