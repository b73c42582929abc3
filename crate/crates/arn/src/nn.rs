//! Differentiable layer primitives: convolution, dense, dropout, nearest
//! resize, tanh, softmax, and row normalization, all in `f64` on the CPU.
//!
//! Every layer exposes a `forward` that returns the output plus a cache, and
//! a `backward` that consumes the cache and the output gradient, accumulates
//! parameter gradients, and returns the input gradient. Convolutions go
//! through im2col so the inner loops are matrix products.

use crate::error::{ArnError, Result};
use ndarray::{Array2, Array4, ArrayD, ArrayView2, IxDyn};
use rand::Rng;

/// Numerical floor for norm and probability guards.
pub const EPS: f64 = 1e-12;

/// One trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    velocity: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            velocity,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// One SGD step. With `momentum == 0` this is plain gradient descent.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        if momentum == 0.0 {
            self.value.zip_mut_with(&self.grad, |v, g| *v -= lr * g);
        } else {
            self.velocity
                .zip_mut_with(&self.grad, |v, g| *v = momentum * *v + g);
            self.value.zip_mut_with(&self.velocity, |v, m| *v -= lr * m);
        }
    }
}

/// Xavier-uniform initialization for a conv or dense weight.
fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2D convolution over `[n, c, h, w]` batches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_c, in_c, k, k]`
    pub weight: Param,
    /// `[out_c]`
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Cache of the forward pass: the im2col patch matrix and the input geometry.
pub struct ConvCache {
    patches: Array2<f64>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let weight = Param::new(xavier(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            fan_out,
            rng,
        ));
        let bias = Param::new(ArrayD::zeros(IxDyn(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, in_size: usize) -> usize {
        (in_size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let oc = self.out_channels;
        let cols = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((oc, cols))
            .expect("conv weight is contiguous")
    }

    /// im2col: rows indexed by `(n, oy, ox)`, columns by `(c, ky, kx)`.
    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize)) {
        let (n, ic, ih, iw) = x.dim();
        debug_assert_eq!(ic, self.in_channels);
        let oh = self.out_size(ih);
        let ow = self.out_size(iw);
        let k = self.kernel;
        let cols = ic * k * k;
        let mut patches = Array2::<f64>::zeros((n * oh * ow, cols));
        let xs = x.as_slice().expect("input is standard layout");
        let ps = patches.as_slice_mut().unwrap();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for c in 0..ic {
                        let x_base = (b * ic + c) * ih * iw;
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.padding as isize;
                            if y < 0 || y >= ih as isize {
                                continue;
                            }
                            let x_row = x_base + y as usize * iw;
                            let p_row = row + (c * k + ky) * k;
                            for kx in 0..k {
                                let xx = (ox * self.stride + kx) as isize - self.padding as isize;
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                ps[p_row + kx] = xs[x_row + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        (patches, (oh, ow))
    }

    /// Scatter-add of patch gradients back onto the input grid.
    fn col2im(&self, gpatches: &Array2<f64>, in_shape: [usize; 4], out_hw: (usize, usize)) -> Array4<f64> {
        let [n, ic, ih, iw] = in_shape;
        let (oh, ow) = out_hw;
        let k = self.kernel;
        let cols = ic * k * k;
        let mut gx = Array4::<f64>::zeros((n, ic, ih, iw));
        let gs = gx.as_slice_mut().unwrap();
        let gp = gpatches.as_slice().expect("gradient patches are contiguous");
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for c in 0..ic {
                        let x_base = (b * ic + c) * ih * iw;
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.padding as isize;
                            if y < 0 || y >= ih as isize {
                                continue;
                            }
                            let x_row = x_base + y as usize * iw;
                            let p_row = row + (c * k + ky) * k;
                            for kx in 0..k {
                                let xx = (ox * self.stride + kx) as isize - self.padding as isize;
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                gs[x_row + xx as usize] += gp[p_row + kx];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, _, ih, iw) = x.dim();
        let (patches, (oh, ow)) = self.im2col(x);
        // [n*oh*ow, oc]
        let mut y_mat = patches.dot(&self.weight_matrix().t());
        let bias = self.bias.value.view().into_shape_with_order(self.out_channels).unwrap();
        for mut row in y_mat.rows_mut() {
            row += &bias;
        }
        let y = y_mat
            .into_shape_with_order((n, oh, ow, self.out_channels))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                patches,
                in_shape: [n, self.in_channels, ih, iw],
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, oc, oh, ow) = gy.dim();
        debug_assert_eq!((oh, ow), cache.out_hw);
        let gy_mat = gy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((n * oh * ow, oc))
            .unwrap()
            .to_owned();
        // Parameter gradients.
        let gw = gy_mat.t().dot(&cache.patches); // [oc, ic*k*k]
        let gw = gw
            .into_shape_with_order((oc, self.in_channels, self.kernel, self.kernel))
            .unwrap();
        self.weight
            .grad
            .zip_mut_with(&gw.into_dyn(), |a, b| *a += b);
        let gb = gy_mat.sum_axis(ndarray::Axis(0));
        self.bias.grad.zip_mut_with(&gb.into_dyn(), |a, b| *a += b);
        // Input gradient.
        let gpatches = gy_mat.dot(&self.weight_matrix());
        self.col2im(&gpatches, cache.in_shape, cache.out_hw)
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor resize
// ---------------------------------------------------------------------------

fn nearest_index(dst: usize, in_size: usize, out_size: usize) -> usize {
    dst * in_size / out_size
}

/// Nearest-neighbor spatial resize of a `[n, c, h, w]` batch.
pub fn resize_nearest(x: &Array4<f64>, oh: usize, ow: usize) -> Array4<f64> {
    let (n, c, ih, iw) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..oh {
                let sy = nearest_index(dy, ih, oh);
                for dx in 0..ow {
                    let sx = nearest_index(dx, iw, ow);
                    y[[b, ch, dy, dx]] = x[[b, ch, sy, sx]];
                }
            }
        }
    }
    y
}

/// Gradient of [`resize_nearest`]: scatter-add back to source pixels.
pub fn resize_nearest_backward(gy: &Array4<f64>, ih: usize, iw: usize) -> Array4<f64> {
    let (n, c, oh, ow) = gy.dim();
    let mut gx = Array4::<f64>::zeros((n, c, ih, iw));
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..oh {
                let sy = nearest_index(dy, ih, oh);
                for dx in 0..ow {
                    let sx = nearest_index(dx, iw, ow);
                    gx[[b, ch, sy, sx]] += gy[[b, ch, dy, dx]];
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Per-element nonlinearity. Tanh is smooth everywhere, which keeps
/// finite-difference gradient checks clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn forward(self, x: &mut ArrayD<f64>) {
        if self == Activation::Tanh {
            x.mapv_inplace(f64::tanh);
        }
    }

    /// `gy * act'(..)` expressed through the activation output `y`.
    pub fn backward(self, y: &ArrayD<f64>, gy: &mut ArrayD<f64>) {
        if self == Activation::Tanh {
            gy.zip_mut_with(y, |g, &v| *g *= 1.0 - v * v);
        }
    }
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W^T + b` over `[n, in]` batches.
#[derive(Debug, Clone)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

pub struct DenseCache {
    input: Array2<f64>,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let weight = Param::new(xavier(&[out_features, in_features], in_features, out_features, rng));
        let bias = Param::new(ArrayD::zeros(IxDyn(&[out_features])));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .unwrap()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let mut y = x.dot(&self.weight_matrix().t());
        let bias = self.bias.value.view().into_shape_with_order(self.out_features).unwrap();
        for mut row in y.rows_mut() {
            row += &bias;
        }
        (y, DenseCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &DenseCache, gy: &Array2<f64>) -> Array2<f64> {
        let gw = gy.t().dot(&cache.input);
        self.weight
            .grad
            .zip_mut_with(&gw.into_dyn(), |a, b| *a += b);
        let gb = gy.sum_axis(ndarray::Axis(0));
        self.bias.grad.zip_mut_with(&gb.into_dyn(), |a, b| *a += b);
        gy.dot(&self.weight_matrix())
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Array2<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return Array2::ones((rows, cols));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            0.0
        }
    })
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of row-wise softmax: `g_z = p .* (g_p - (g_p . p))` per row.
pub fn softmax_backward(probs: &Array2<f64>, gprobs: &Array2<f64>) -> Array2<f64> {
    let mut gz = probs * gprobs;
    for (mut gr, pr) in gz.rows_mut().into_iter().zip(probs.rows()) {
        let dot: f64 = gr.sum(); // sum of p_i * g_i, already multiplied
        gr.zip_mut_with(&pr, |g, &p| *g -= p * dot);
    }
    gz
}

// ---------------------------------------------------------------------------
// Row L2 normalization
// ---------------------------------------------------------------------------

/// Row-wise L2 normalization. Rows with norm below [`EPS`] are divided by
/// `EPS` instead (effectively left near zero).
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(EPS);
        row.mapv_inplace(|v| v / denom);
        norms.push(norm);
    }
    (y, norms)
}

/// Gradient of [`normalize_rows`] expressed through the normalized output.
pub fn normalize_rows_backward(
    y: &Array2<f64>,
    norms: &[f64],
    gy: &Array2<f64>,
) -> Array2<f64> {
    let mut gx = gy.clone();
    for ((mut grow, yrow), &norm) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
        if norm > EPS {
            let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, v)| g * v).sum();
            grow.zip_mut_with(&yrow, |g, &v| *g = (*g - v * dot) / norm);
        } else {
            grow.mapv_inplace(|g| g / EPS);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// ConvNet: a sequence of (resize, conv, activation) blocks
// ---------------------------------------------------------------------------

/// One stage of a convolutional stack. `resize_to` upsamples before the
/// convolution (used by the decoder).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub resize_to: Option<(usize, usize)>,
    pub conv: Conv2d,
    pub act: Activation,
}

pub struct BlockCache {
    input_hw: (usize, usize),
    conv: ConvCache,
    /// Activation output, needed for the tanh derivative.
    output: Array4<f64>,
}

/// A plain sequence of [`ConvBlock`]s.
#[derive(Debug, Clone, Default)]
pub struct ConvNet {
    pub blocks: Vec<ConvBlock>,
}

pub struct NetCache {
    blocks: Vec<BlockCache>,
}

impl ConvNet {
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, NetCache) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input_hw = (cur.dim().2, cur.dim().3);
            if let Some((h, w)) = block.resize_to {
                cur = resize_nearest(&cur, h, w);
            }
            let (mut y, conv_cache) = block.conv.forward(&cur);
            {
                let mut dynview = y.view_mut().into_dyn();
                if block.act == Activation::Tanh {
                    dynview.mapv_inplace(f64::tanh);
                }
            }
            caches.push(BlockCache {
                input_hw,
                conv: conv_cache,
                output: y.clone(),
            });
            cur = y;
        }
        (cur, NetCache { blocks: caches })
    }

    /// Forward pass without keeping caches.
    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &NetCache, gy: &Array4<f64>) -> Array4<f64> {
        let mut grad = gy.clone();
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            if block.act == Activation::Tanh {
                grad.zip_mut_with(&bc.output, |g, &v| *g *= 1.0 - v * v);
            }
            let mut gin = block.conv.backward(&bc.conv, &grad);
            if block.resize_to.is_some() {
                gin = resize_nearest_backward(&gin, bc.input_hw.0, bc.input_hw.1);
            }
            grad = gin;
        }
        grad
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.conv.weight, &b.conv.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.conv.weight, &mut b.conv.bias])
            .collect()
    }
}

/// Assert every element of an array is finite; names `what` on failure.
pub fn ensure_finite(values: &ArrayD<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ArnError::Numeric(format!("{what} contains non-finite values")))
    }
}
