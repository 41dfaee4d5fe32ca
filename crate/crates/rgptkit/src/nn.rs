//! Small shared numeric kernels: activations, linear and layer-norm layers
//! with hand-written backward passes, stable softmax, parameter visiting,
//! and checksums. Everything operates on `f64` ndarray views.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity used by the connector and the decoder MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// d apply / d x, as a function of the pre-activation input.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x.powi(3));
                let t = u.tanh();
                let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "gelu" => Some(Activation::Gelu),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// y = x W^T + b for x of shape (n, in) and w of shape (out, in).
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

/// Gradients of [`linear`]: returns (dx, dw, db) given upstream dy (n, out).
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Row-wise layer normalization with learned scale and shift.
///
/// Returns (y, mean, rstd); mean and rstd are cached per row for backward.
pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut means = Array1::zeros(n);
    let mut rstds = Array1::zeros(n);
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma[j] + beta[j];
        }
        means[i] = mean;
        rstds[i] = rstd;
    }
    (y, means, rstds)
}

/// Gradients of [`layer_norm`]: returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    means: &Array1<f64>,
    rstds: &Array1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = x.ncols();
    let df = d as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgamma = Array1::zeros(d);
    let mut dbeta = Array1::zeros(d);
    for i in 0..x.nrows() {
        let mean = means[i];
        let rstd = rstds[i];
        // xhat_j = (x_j - mean) * rstd; dxhat_j = dy_j * gamma_j
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (x[[i, j]] - mean) * rstd;
            let dxhat = dy[[i, j]] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += dy[[i, j]] * xhat;
            dbeta[j] += dy[[i, j]];
        }
        for j in 0..d {
            let xhat = (x[[i, j]] - mean) * rstd;
            let dxhat = dy[[i, j]] * gamma[j];
            dx[[i, j]] = rstd * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
        }
    }
    (dx, dgamma, dbeta)
}

/// log(sum(exp(row))) computed around the row maximum.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// In-place stable softmax over a slice. Entries of -inf stay exactly zero.
pub fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Fill a slice with N(0, std) draws from the given stream.
pub fn fill_normal<R: Rng>(values: &mut [f64], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    for v in values.iter_mut() {
        *v = dist.sample(rng);
    }
}

/// One named view over a parameter tensor and its gradient accumulator.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Modules with trainable tensors expose them through this visitor so the
/// optimizer, checksummer, and checkpoint writer never need to know layouts.
pub trait Parameterized {
    /// Visit every parameter in a stable, deterministic order.
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamSlot<'_>));

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |slot| slot.grad.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |slot| n += slot.value.len());
        n
    }
}

/// Bilinear resize of an (h, w, c) grid using half-pixel centers and edge
/// clamping. When the output size equals the input size this is an exact
/// identity (interpolation weights collapse to 1 and 0).
pub fn resize_bilinear(src: &ndarray::Array3<f64>, oh: usize, ow: usize) -> ndarray::Array3<f64> {
    let (ih, iw, c) = src.dim();
    let mut out = ndarray::Array3::zeros((oh, ow, c));
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    for i in 0..oh {
        let fy = (i as f64 + 0.5) * sy - 0.5;
        let y0f = fy.floor();
        let t = fy - y0f;
        let y0 = (y0f as isize).clamp(0, ih as isize - 1) as usize;
        let y1 = ((y0f as isize) + 1).clamp(0, ih as isize - 1) as usize;
        for j in 0..ow {
            let fx = (j as f64 + 0.5) * sx - 0.5;
            let x0f = fx.floor();
            let u = fx - x0f;
            let x0 = (x0f as isize).clamp(0, iw as isize - 1) as usize;
            let x1 = ((x0f as isize) + 1).clamp(0, iw as isize - 1) as usize;
            for k in 0..c {
                let top = (1.0 - u) * src[[y0, x0, k]] + u * src[[y0, x1, k]];
                let bot = (1.0 - u) * src[[y1, x0, k]] + u * src[[y1, x1, k]];
                out[[i, j, k]] = (1.0 - t) * top + t * bot;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatter upstream gradients back to the
/// source grid with the same interpolation weights.
pub fn resize_bilinear_backward(
    dy: &ndarray::Array3<f64>,
    ih: usize,
    iw: usize,
) -> ndarray::Array3<f64> {
    let (oh, ow, c) = dy.dim();
    let mut dx = ndarray::Array3::zeros((ih, iw, c));
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    for i in 0..oh {
        let fy = (i as f64 + 0.5) * sy - 0.5;
        let y0f = fy.floor();
        let t = fy - y0f;
        let y0 = (y0f as isize).clamp(0, ih as isize - 1) as usize;
        let y1 = ((y0f as isize) + 1).clamp(0, ih as isize - 1) as usize;
        for j in 0..ow {
            let fx = (j as f64 + 0.5) * sx - 0.5;
            let x0f = fx.floor();
            let u = fx - x0f;
            let x0 = (x0f as isize).clamp(0, iw as isize - 1) as usize;
            let x1 = ((x0f as isize) + 1).clamp(0, iw as isize - 1) as usize;
            for k in 0..c {
                let g = dy[[i, j, k]];
                dx[[y0, x0, k]] += (1.0 - t) * (1.0 - u) * g;
                dx[[y0, x1, k]] += (1.0 - t) * u * g;
                dx[[y1, x0, k]] += t * (1.0 - u) * g;
                dx[[y1, x1, k]] += t * u * g;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize of an (h, w, c) grid, half-pixel centers.
pub fn resize_nearest(src: &ndarray::Array3<f64>, oh: usize, ow: usize) -> ndarray::Array3<f64> {
    let (ih, iw, c) = src.dim();
    let mut out = ndarray::Array3::zeros((oh, ow, c));
    let sy = ih as f64 / oh as f64;
    let sx = iw as f64 / ow as f64;
    for i in 0..oh {
        let y = (((i as f64 + 0.5) * sy).floor() as isize).clamp(0, ih as isize - 1) as usize;
        for j in 0..ow {
            let x = (((j as f64 + 0.5) * sx).floor() as isize).clamp(0, iw as isize - 1) as usize;
            for k in 0..c {
                out[[i, j, k]] = src[[y, x, k]];
            }
        }
    }
    out
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over the little-endian bytes of a value stream. Bit-identical
/// tensors produce identical checksums; any single-bit flip changes it.
pub fn checksum_f64<I: IntoIterator<Item = f64>>(values: I) -> u64 {
    let mut acc = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            acc ^= b as u64;
            acc = acc.wrapping_mul(FNV_PRIME);
        }
    }
    acc
}

/// Checksum of every parameter tensor in visit order, prefixed by its name.
pub fn param_checksum<P: Parameterized + ?Sized>(module: &mut P) -> u64 {
    let mut acc = FNV_OFFSET;
    module.for_each_param(&mut |slot| {
        for b in slot.name.as_bytes() {
            acc ^= *b as u64;
            acc = acc.wrapping_mul(FNV_PRIME);
        }
        for v in slot.value.iter() {
            for b in v.to_le_bytes() {
                acc ^= b as u64;
                acc = acc.wrapping_mul(FNV_PRIME);
            }
        }
    });
    acc
}
