//! Small CPU conv-net engine used behind the backbone provider
//! interface: forward, backward and Adam, nothing more.
//!
//! Feature maps are NHWC `Array4<f32>`. Convolutions run as im2col plus
//! one matrix multiply per batch; the per-sample gather/scatter loops
//! are data-parallel while every cross-sample reduction is a single
//! sequential GEMM or ordered sum, so results do not depend on the
//! thread count.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::par;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, kh, kw, in_channels) — matches im2col column order.
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().3
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim().1, self.weight.dim().2)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Channel-wise affine normalization. Running statistics are always
/// used (inference-mode normalization), also while fine-tuning; only
/// the scale and shift receive gradients when the unit is trainable.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn inv_std(&self) -> Array1<f32> {
        self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { size: usize, stride: usize },
}

impl Layer {
    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.parameter_count(),
            Layer::BatchNorm(b) => b.parameter_count(),
            _ => 0,
        }
    }
}

/// Per-layer parameter gradients produced by [`Network::backward`].
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Conv2d { dweight: Array4<f32>, dbias: Array1<f32> },
    BatchNorm { dgamma: Array1<f32>, dbeta: Array1<f32> },
}

/// A feature extractor: an ordered stack of layers mapping NHWC to NHWC.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    /// Indices of the weight-bearing (convolution) layers, bottom to top.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv2d(_)).then_some(i))
            .collect()
    }

    /// Freezable unit count: one unit per convolution.
    pub fn unit_count(&self) -> usize {
        self.conv_layer_indices().len()
    }

    /// Layer indices making up unit `u`: the convolution plus any
    /// normalization layers attached above it (before the next conv).
    pub fn unit_layers(&self, unit: usize) -> Vec<usize> {
        let convs = self.conv_layer_indices();
        let start = convs[unit];
        let end = convs.get(unit + 1).copied().unwrap_or(self.layers.len());
        (start..end)
            .filter(|&i| matches!(self.layers[i], Layer::Conv2d(_) | Layer::BatchNorm(_)))
            .collect()
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, input: &Array4<f32>) -> Array4<f32> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = forward_layer(layer, &x);
        }
        x
    }

    /// Forward pass retaining every activation (index 0 = input, index
    /// `i + 1` = output of layer `i`) for a later backward pass.
    pub fn forward_cached(&self, input: &Array4<f32>) -> Vec<Array4<f32>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let next = forward_layer(layer, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    /// Backpropagate `d_out` through the stack, producing parameter
    /// gradients for the layers flagged in `needs_grad`. Propagation
    /// stops below the lowest flagged layer.
    pub fn backward(
        &self,
        activations: &[Array4<f32>],
        d_out: Array4<f32>,
        needs_grad: &[bool],
    ) -> HashMap<usize, LayerGrad> {
        assert_eq!(needs_grad.len(), self.layers.len());
        let lowest = match needs_grad.iter().position(|&g| g) {
            Some(i) => i,
            None => return HashMap::new(),
        };
        let mut grads = HashMap::new();
        let mut delta = d_out;
        for i in (lowest..self.layers.len()).rev() {
            let x = &activations[i];
            let want_dx = i > lowest;
            match &self.layers[i] {
                Layer::Conv2d(conv) => {
                    let (grad, dx) = conv_backward(conv, x, &delta, want_dx);
                    if needs_grad[i] {
                        grads.insert(i, grad);
                    }
                    if let Some(dx) = dx {
                        delta = dx;
                    } else {
                        break;
                    }
                }
                Layer::BatchNorm(bn) => {
                    let (grad, dx) = batchnorm_backward(bn, x, &delta);
                    if needs_grad[i] {
                        grads.insert(i, grad);
                    }
                    delta = dx;
                }
                Layer::Relu => {
                    delta = relu_backward(x, &delta);
                }
                Layer::MaxPool { size, stride } => {
                    delta = maxpool_backward(x, &delta, *size, *stride);
                }
            }
        }
        grads
    }

    /// Channel count after the final layer for the given input depth.
    pub fn output_channels(&self, input_channels: usize) -> usize {
        let mut c = input_channels;
        for layer in &self.layers {
            if let Layer::Conv2d(conv) = layer {
                c = conv.out_channels();
            }
        }
        c
    }
}

fn forward_layer(layer: &Layer, x: &Array4<f32>) -> Array4<f32> {
    match layer {
        Layer::Conv2d(conv) => conv_forward(conv, x),
        Layer::BatchNorm(bn) => batchnorm_forward(bn, x),
        Layer::Relu => x.mapv(|v| v.max(0.0)),
        Layer::MaxPool { size, stride } => maxpool_forward(x, *size, *stride),
    }
}

fn conv_out_side(side: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (side + 2 * padding - kernel) / stride + 1
}

/// Gather convolution windows: one row per output position, columns
/// ordered (ky, kx, channel). Rows for sample `n` occupy a contiguous
/// block, so samples fill in parallel.
fn im2col(x: &Array4<f32>, kernel: (usize, usize), stride: usize, padding: usize) -> Array2<f32> {
    let (n, h, w, c) = x.dim();
    let (kh, kw) = kernel;
    let oh = conv_out_side(h, kh, stride, padding);
    let ow = conv_out_side(w, kw, stride, padding);
    let k = kh * kw * c;
    let out_len = oh * ow;
    let mut cols = vec![0f32; n * out_len * k];
    let xs = x
        .as_slice()
        .expect("activations are standard layout");
    par::for_each_chunk_mut(&mut cols, out_len * k, |sample, chunk| {
        let base = sample * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row_off = (oy * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = base + ((iy as usize) * w + ix as usize) * c;
                        let dst = row_off + (ky * kw + kx) * c;
                        chunk[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((n * out_len, k), cols).unwrap()
}

/// Scatter-add im2col-layout gradients back to input positions.
fn col2im(
    dcols: &Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Array4<f32> {
    let (n, h, w, c) = input_dim;
    let (kh, kw) = kernel;
    let oh = conv_out_side(h, kh, stride, padding);
    let ow = conv_out_side(w, kw, stride, padding);
    let k = kh * kw * c;
    let out_len = oh * ow;
    let dcol_slice = dcols.as_slice().expect("gemm output is standard layout");
    let mut dx = vec![0f32; n * h * w * c];
    par::for_each_chunk_mut(&mut dx, h * w * c, |sample, chunk| {
        let rows_base = sample * out_len;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (rows_base + oy * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * kw + kx) * c;
                        for ch in 0..c {
                            chunk[dst + ch] += dcol_slice[src + ch];
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((n, h, w, c), dx).unwrap()
}

fn weight_matrix(conv: &Conv2d) -> ArrayView2<'_, f32> {
    let (oc, kh, kw, ic) = conv.weight.dim();
    conv.weight
        .view()
        .into_shape_with_order((oc, kh * kw * ic))
        .expect("conv weight is standard layout")
}

fn conv_forward(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
    let (n, h, w, _) = x.dim();
    let (kh, kw) = conv.kernel();
    let oh = conv_out_side(h, kh, conv.stride, conv.padding);
    let ow = conv_out_side(w, kw, conv.stride, conv.padding);
    let cols = im2col(x, (kh, kw), conv.stride, conv.padding);
    let mut out = cols.dot(&weight_matrix(conv).t());
    out += &conv.bias;
    let oc = conv.out_channels();
    out.into_shape_with_order((n, oh, ow, oc))
        .expect("gemm output is standard layout")
        .to_owned()
}

fn conv_backward(
    conv: &Conv2d,
    x: &Array4<f32>,
    d_out: &Array4<f32>,
    want_dx: bool,
) -> (LayerGrad, Option<Array4<f32>>) {
    let (n, oh, ow, oc) = d_out.dim();
    let d_mat = d_out
        .view()
        .into_shape_with_order((n * oh * ow, oc))
        .expect("standard layout");
    let cols = im2col(x, conv.kernel(), conv.stride, conv.padding);
    let dw_mat = d_mat.t().dot(&cols);
    let (occ, kh, kw, ic) = conv.weight.dim();
    let dweight = dw_mat
        .into_shape_with_order((occ, kh, kw, ic))
        .expect("standard layout")
        .to_owned();
    let dbias = d_mat.sum_axis(Axis(0));
    let dx = want_dx.then(|| {
        let dcols = d_mat.dot(&weight_matrix(conv));
        col2im(&dcols, x.dim(), conv.kernel(), conv.stride, conv.padding)
    });
    (LayerGrad::Conv2d { dweight, dbias }, dx)
}

fn batchnorm_forward(bn: &BatchNorm, x: &Array4<f32>) -> Array4<f32> {
    let inv = bn.inv_std();
    let c = bn.gamma.len();
    let mut out = x.clone();
    let slice = out.as_slice_mut().expect("standard layout");
    for lane in slice.chunks_exact_mut(c) {
        for ci in 0..c {
            lane[ci] = (lane[ci] - bn.running_mean[ci]) * inv[ci] * bn.gamma[ci] + bn.beta[ci];
        }
    }
    out
}

fn batchnorm_backward(
    bn: &BatchNorm,
    x: &Array4<f32>,
    d_out: &Array4<f32>,
) -> (LayerGrad, Array4<f32>) {
    let c = bn.gamma.len();
    let inv = bn.inv_std();
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    let xs = x.as_slice().expect("standard layout");
    let ds = d_out.as_slice().expect("standard layout");
    for (xv, dv) in xs.chunks_exact(c).zip(ds.chunks_exact(c)) {
        for ci in 0..c {
            let normalized = (xv[ci] - bn.running_mean[ci]) * inv[ci];
            dgamma[ci] += dv[ci] * normalized;
            dbeta[ci] += dv[ci];
        }
    }
    let mut dx = d_out.clone();
    let dxs = dx.as_slice_mut().expect("standard layout");
    for lane in dxs.chunks_exact_mut(c) {
        for ci in 0..c {
            lane[ci] *= bn.gamma[ci] * inv[ci];
        }
    }
    (LayerGrad::BatchNorm { dgamma, dbeta }, dx)
}

fn relu_backward(x: &Array4<f32>, d_out: &Array4<f32>) -> Array4<f32> {
    let mut dx = d_out.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

fn maxpool_forward(x: &Array4<f32>, size: usize, stride: usize) -> Array4<f32> {
    let (n, h, w, c) = x.dim();
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![f32::NEG_INFINITY; n * oh * ow * c];
    par::for_each_chunk_mut(&mut out, oh * ow * c, |sample, chunk| {
        let base = sample * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = (oy * ow + ox) * c;
                for ky in 0..size {
                    for kx in 0..size {
                        let src = base + ((oy * stride + ky) * w + ox * stride + kx) * c;
                        for ci in 0..c {
                            if xs[src + ci] > chunk[dst + ci] {
                                chunk[dst + ci] = xs[src + ci];
                            }
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((n, oh, ow, c), out).unwrap()
}

/// Routes each gradient to the first maximum in window scan order,
/// mirroring the forward tie rule.
fn maxpool_backward(x: &Array4<f32>, d_out: &Array4<f32>, size: usize, stride: usize) -> Array4<f32> {
    let (n, h, w, c) = x.dim();
    let (_, oh, ow, _) = d_out.dim();
    let xs = x.as_slice().expect("standard layout");
    let ds = d_out.as_slice().expect("standard layout");
    let mut dx = vec![0f32; n * h * w * c];
    par::for_each_chunk_mut(&mut dx, h * w * c, |sample, chunk| {
        let base = sample * h * w * c;
        let dbase = sample * oh * ow * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let dsrc = dbase + (oy * ow + ox) * c;
                for ci in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_off = 0usize;
                    for ky in 0..size {
                        for kx in 0..size {
                            let off = ((oy * stride + ky) * w + ox * stride + kx) * c + ci;
                            if xs[base + off] > best {
                                best = xs[base + off];
                                best_off = off;
                            }
                        }
                    }
                    chunk[best_off] += ds[dsrc + ci];
                }
            }
        }
    });
    Array4::from_shape_vec((n, h, w, c), dx).unwrap()
}

/// Fully-connected layer, `weight` is (out_features, in_features).
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    /// Glorot-uniform initialization from a seeded generator.
    pub fn glorot(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_features + out_features) as f32).sqrt();
        let weight = Array2::from_shape_fn((out_features, in_features), |_| {
            rng.gen_range(-limit..=limit)
        });
        Dense {
            weight,
            bias: Array1::zeros(out_features),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.dot(&self.weight.t());
        out += &self.bias;
        out
    }

    /// Returns (dweight, dbias, dx).
    pub fn backward(
        &self,
        x: &Array2<f32>,
        d_out: &Array2<f32>,
    ) -> (Array2<f32>, Array1<f32>, Array2<f32>) {
        let dweight = d_out.t().dot(x);
        let dbias = d_out.sum_axis(Axis(0));
        let dx = d_out.dot(&self.weight);
        (dweight, dbias, dx)
    }
}

/// Mean over the spatial axes: (N, H, W, C) -> (N, C).
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, h, w, c) = x.dim();
    let mut out = Array2::<f32>::zeros((n, c));
    let xs = x.as_slice().expect("standard layout");
    let scale = 1.0 / (h * w) as f32;
    for sample in 0..n {
        let base = sample * h * w * c;
        for pos in 0..h * w {
            for ci in 0..c {
                out[(sample, ci)] += xs[base + pos * c + ci];
            }
        }
        for ci in 0..c {
            out[(sample, ci)] *= scale;
        }
    }
    out
}

/// Backward of [`global_avg_pool`]: spread each channel gradient evenly.
pub fn global_avg_pool_backward(
    d_out: &Array2<f32>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, h, w, c) = input_dim;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, h, w, c));
    for sample in 0..n {
        for ci in 0..c {
            let g = d_out[(sample, ci)] * scale;
            dx.slice_mut(ndarray::s![sample, .., .., ci]).fill(g);
        }
    }
    dx
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy on logits.
/// Returns (mean loss, per-sample dL/dz scaled by 1/n).
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f32, Vec<f32>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f32;
    let mut loss = 0.0f32;
    let mut dz = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        loss += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        dz.push((sigmoid(z) - y) / n);
    }
    (loss / n, dz)
}

/// He-normal conv weight initialization from a seeded generator.
pub fn conv_he_init(
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    rng: &mut ChaCha8Rng,
) -> Conv2d {
    let fan_in = (in_channels * kernel * kernel) as f32;
    let std = (2.0 / fan_in).sqrt();
    // Box-Muller over the seeded stream keeps archives reproducible.
    let gauss = move |rng: &mut ChaCha8Rng| -> f32 {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    };
    let weight = Array4::from_shape_fn((out_channels, kernel, kernel, in_channels), |_| {
        gauss(rng) * std
    });
    Conv2d {
        weight,
        bias: Array1::zeros(out_channels),
        stride,
        padding,
    }
}

/// Identity of one parameter tensor for optimizer state: the layer
/// index (or [`HEAD_LAYER_ID`]) and a slot within the layer.
pub type ParamId = (usize, usize);

/// Pseudo layer index addressing the classifier head.
pub const HEAD_LAYER_ID: usize = usize::MAX;

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// Adam with per-tensor state. Tensors unfrozen mid-run simply start
/// with fresh moments; existing tensors keep theirs across a learning
/// rate change, so a rate-only phase switch does not perturb training.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    states: HashMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, id: ParamId, lr: f32, param: &mut [f32], grad: &[f32]) {
        assert_eq!(param.len(), grad.len());
        let state = self.states.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for i in 0..param.len() {
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * grad[i];
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn tiny_net(rng: &mut ChaCha8Rng) -> Network {
        Network {
            layers: vec![
                Layer::Conv2d(conv_he_init(4, 3, 3, 1, 1, rng)),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                Layer::MaxPool { size: 2, stride: 2 },
                Layer::Conv2d(conv_he_init(6, 4, 3, 1, 1, rng)),
                Layer::Relu,
            ],
        }
    }

    /// No pooling: finite differences would cross argmax kinks there.
    /// Max-pool routing gets its own exact oracle below.
    fn smooth_net(rng: &mut ChaCha8Rng) -> Network {
        Network {
            layers: vec![
                Layer::Conv2d(conv_he_init(4, 3, 3, 1, 1, rng)),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                Layer::Conv2d(conv_he_init(6, 4, 3, 1, 1, rng)),
                Layer::Relu,
            ],
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, side: usize, c: usize) -> Array4<f32> {
        Array4::from_shape_fn((n, side, side, c), |_| rng.gen_range(-1.0..1.0f32))
    }

    /// Scalar loss for the finite-difference oracle: weighted sum of
    /// the pooled features, with fixed pseudo-random weights.
    fn probe_loss(net: &Network, x: &Array4<f32>) -> f32 {
        let out = net.forward(x);
        let pooled = global_avg_pool(&out);
        pooled
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ((i % 7) as f32 - 3.0))
            .sum()
    }

    fn probe_dout(net: &Network, x: &Array4<f32>) -> Array4<f32> {
        let out = net.forward(x);
        let (n, h, w, c) = out.dim();
        let mut d_pooled = Array2::<f32>::zeros((n, c));
        for sample in 0..n {
            for ci in 0..c {
                d_pooled[(sample, ci)] = ((sample * c + ci) % 7) as f32 - 3.0;
            }
        }
        global_avg_pool_backward(&d_pooled, (n, h, w, c))
    }

    fn param_slice_mut(layer: &mut Layer, slot: usize) -> &mut [f32] {
        match (layer, slot) {
            (Layer::Conv2d(c), 0) => c.weight.as_slice_mut().unwrap(),
            (Layer::Conv2d(c), 1) => c.bias.as_slice_mut().unwrap(),
            (Layer::BatchNorm(b), 0) => b.gamma.as_slice_mut().unwrap(),
            (Layer::BatchNorm(b), 1) => b.beta.as_slice_mut().unwrap(),
            _ => panic!("no such parameter"),
        }
    }

    /// Central-difference gradient check against backprop, the
    /// independent oracle for the backward implementations.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = smooth_net(&mut rng);
        let x = random_input(&mut rng, 2, 8, 3);

        let needs: Vec<bool> = net
            .layers
            .iter()
            .map(|l| l.parameter_count() > 0)
            .collect();
        let acts = net.forward_cached(&x);
        let grads = net.backward(&acts, probe_dout(&net, &x), &needs);

        let h = 1e-2f32;
        // Probe a few parameters of every weight-bearing layer.
        for (layer_idx, layer) in net.layers.clone().iter().enumerate() {
            let slots: Vec<(usize, usize)> = match layer {
                Layer::Conv2d(c) => vec![(0, c.weight.len()), (1, c.bias.len())],
                Layer::BatchNorm(b) => vec![(0, b.gamma.len()), (1, b.beta.len())],
                _ => continue,
            };
            for (slot, len) in slots {
                for probe in [0, len / 2, len - 1] {
                    let analytic = match &grads[&layer_idx] {
                        LayerGrad::Conv2d { dweight, dbias } => {
                            if slot == 0 {
                                dweight.as_slice().unwrap()[probe]
                            } else {
                                dbias[probe]
                            }
                        }
                        LayerGrad::BatchNorm { dgamma, dbeta } => {
                            if slot == 0 {
                                dgamma[probe]
                            } else {
                                dbeta[probe]
                            }
                        }
                    };
                    let orig = param_slice_mut(&mut net.layers[layer_idx], slot)[probe];
                    param_slice_mut(&mut net.layers[layer_idx], slot)[probe] = orig + h;
                    let plus = probe_loss(&net, &x);
                    param_slice_mut(&mut net.layers[layer_idx], slot)[probe] = orig - h;
                    let minus = probe_loss(&net, &x);
                    param_slice_mut(&mut net.layers[layer_idx], slot)[probe] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let tol = 1e-3 + 2e-2 * numeric.abs().max(analytic.abs());
                    assert!(
                        (numeric - analytic).abs() < tol,
                        "layer {layer_idx} slot {slot} idx {probe}: numeric {numeric} vs analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_forward_matches_direct_convolution() {
        // Direct nested-loop convolution as an independent oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = conv_he_init(2, 3, 3, 1, 1, &mut rng);
        let x = random_input(&mut rng, 1, 5, 3);
        let out = conv_forward(&conv, &x);
        let (_, oh, ow, oc) = out.dim();
        assert_eq!((oh, ow, oc), (5, 5, 2));
        let mut direct = Array3::<f32>::zeros((5, 5, 2));
        for oy in 0..5i64 {
            for ox in 0..5i64 {
                for o in 0..2 {
                    let mut acc = conv.bias[o];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy + ky - 1;
                            let ix = ox + kx - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..3 {
                                acc += conv.weight[(o, ky as usize, kx as usize, ci)]
                                    * x[(0, iy as usize, ix as usize, ci)];
                            }
                        }
                    }
                    direct[(oy as usize, ox as usize, o)] = acc;
                }
            }
        }
        for oy in 0..5 {
            for ox in 0..5 {
                for o in 0..2 {
                    let got = out[(0, oy, ox, o)];
                    let want = direct[(oy, ox, o)];
                    assert!((got - want).abs() < 1e-4, "({oy},{ox},{o}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn maxpool_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 2, 8, 3);
        let out = maxpool_forward(&x, 2, 2);
        assert_eq!(out.dim(), (2, 4, 4, 3));
        assert!(out[(0, 0, 0, 0)] >= x[(0, 0, 0, 0)]);
    }

    /// Exact oracle for pooled gradient routing: with unique window
    /// maxima and a gradient of ones, backward must deposit exactly 1.0
    /// at each argmax found by an independent scan, 0 elsewhere.
    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Distinct values guarantee unique maxima.
        let mut values: Vec<f32> = (0..2 * 6 * 6 * 2).map(|i| i as f32 * 0.37).collect();
        use rand::seq::SliceRandom;
        values.shuffle(&mut rng);
        let x = Array4::from_shape_vec((2, 6, 6, 2), values).unwrap();
        let out = maxpool_forward(&x, 2, 2);
        let d_out = Array4::<f32>::ones(out.dim());
        let dx = maxpool_backward(&x, &d_out, 2, 2);
        for n in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    for c in 0..2 {
                        // Independent argmax scan of the window.
                        let mut best = f32::NEG_INFINITY;
                        let mut arg = (0, 0);
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let v = x[(n, oy * 2 + ky, ox * 2 + kx, c)];
                                if v > best {
                                    best = v;
                                    arg = (oy * 2 + ky, ox * 2 + kx);
                                }
                            }
                        }
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let pos = (oy * 2 + ky, ox * 2 + kx);
                                let want = if pos == arg { 1.0 } else { 0.0 };
                                assert_eq!(dx[(n, pos.0, pos.1, c)], want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_batch_consistent() {
        // Per-sample results must not depend on batch composition.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = tiny_net(&mut rng);
        let batch = random_input(&mut rng, 3, 8, 3);
        let full = net.forward(&batch);
        for i in 0..3 {
            let single = batch.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
            let one = net.forward(&single);
            let diff = (&one.index_axis(Axis(0), 0) - &full.index_axis(Axis(0), i))
                .mapv(f32::abs)
                .iter()
                .fold(0f32, |a, &b| a.max(b));
            assert!(diff <= 1e-6, "sample {i} differs by {diff}");
        }
    }

    #[test]
    fn bce_loss_and_gradient_are_stable() {
        let (loss, dz) = bce_with_logits(&[0.0, 100.0, -100.0], &[1.0, 1.0, 0.0]);
        assert!(loss.is_finite() && loss >= 0.0);
        assert!((dz[0] - (-0.5 / 3.0)).abs() < 1e-6);
        assert!(dz[1].abs() < 1e-6);
        assert!(dz[2].abs() < 1e-6);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut adam = Adam::default();
        let mut param = vec![5.0f32, -3.0];
        for _ in 0..500 {
            let grad: Vec<f32> = param.iter().map(|p| 2.0 * p).collect();
            adam.step((0, 0), 0.05, &mut param, &grad);
        }
        assert!(param.iter().all(|p| p.abs() < 0.05), "{param:?}");
    }
}
