//! Dense row-major `f32` tensors and the eager versions of the numeric
//! primitives used by the predictor heads.
//!
//! Storage is 32-bit. All arithmetic runs through the `f64` kernels in
//! [`kernels`], which the autodiff graph shares, so eager results and
//! graph forward values agree up to the final rounding to `f32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default epsilon for both normalization kinds.
pub const NORM_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub(crate) fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
}

/// `out[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = match weight.shape() {
        [m, n] => (*m, *n),
        other => return Err(Error::dim("linear", x.shape(), other)),
    };
    if x.rank() == 0 || x.last_dim() != m {
        return Err(Error::dim("linear", x.shape(), weight.shape()));
    }
    if bias.shape() != [n] {
        return Err(Error::dim("linear", weight.shape(), bias.shape()));
    }
    let rows = x.len() / m;
    let out = kernels::linear(&x.to_f64(), rows, m, &weight.to_f64(), n, Some(&bias.to_f64()));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_f64(shape, &out))
}

/// Layer or RMS normalization along the trailing axis.
pub fn normalize(
    x: &Tensor,
    kind: NormKind,
    gain: &Tensor,
    shift: Option<&Tensor>,
    epsilon: f64,
) -> Result<Tensor> {
    let m = x.last_dim();
    if m == 0 || x.is_empty() {
        return Err(Error::EmptyAxis { op: "normalize" });
    }
    if epsilon <= 0.0 {
        return Err(Error::Input(format!("normalize epsilon must be positive, got {epsilon}")));
    }
    if gain.shape() != [m] {
        return Err(Error::dim("normalize", x.shape(), gain.shape()));
    }
    if let Some(s) = shift {
        if s.shape() != [m] {
            return Err(Error::dim("normalize", x.shape(), s.shape()));
        }
    }
    let shift = shift.map(Tensor::to_f64);
    let (out, _) = kernels::normalize(
        &x.to_f64(),
        x.len() / m,
        m,
        kind,
        &gain.to_f64(),
        shift.as_deref(),
        epsilon,
    );
    Ok(Tensor::from_f64(x.shape().to_vec(), &out))
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    let out: Vec<f64> = x.to_f64().into_iter().map(|v| kernels::activate(v, kind)).collect();
    Tensor::from_f64(x.shape().to_vec(), &out)
}

/// Softmax along the trailing axis, stabilized by max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if c == 0 || x.is_empty() {
        return Err(Error::EmptyAxis { op: "softmax" });
    }
    let out = kernels::softmax(&x.to_f64(), c);
    Ok(Tensor::from_f64(x.shape().to_vec(), &out))
}

/// Mean negative log-likelihood of `labels` under the rows of `probs`,
/// accumulated in 64-bit with probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = probs.last_dim();
    let rows = if probs.rank() <= 1 { 1 } else { probs.len() / c };
    if rows != labels.len() {
        return Err(Error::dim("cross_entropy_loss", probs.shape(), &[labels.len()]));
    }
    for &label in labels {
        if label >= c {
            return Err(Error::Index {
                what: "class labels",
                index: label,
                len: c,
            });
        }
    }
    Ok(kernels::cross_entropy(&probs.to_f64(), c, labels))
}

/// Row-major `f64` kernels shared by the eager ops and the autodiff graph.
pub(crate) mod kernels {
    use super::{Activation, NormKind, PROB_FLOOR};

    pub fn linear(
        x: &[f64],
        rows: usize,
        m: usize,
        w: &[f64],
        n: usize,
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &x[r * m..(r + 1) * m];
            let orow = &mut out[r * n..(r + 1) * n];
            if let Some(b) = bias {
                orow.copy_from_slice(b);
            }
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wr = &w[i * n..(i + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
        }
        out
    }

    /// Returns the normalized output and, per row, the inverse scale used.
    pub fn normalize(
        x: &[f64],
        rows: usize,
        m: usize,
        kind: NormKind,
        gain: &[f64],
        shift: Option<&[f64]>,
        eps: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; rows * m];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * m..(r + 1) * m];
            let mean = match kind {
                NormKind::LayerNorm => xr.iter().sum::<f64>() / m as f64,
                NormKind::RmsNorm => 0.0,
            };
            let second = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let scale = 1.0 / (second + eps).sqrt();
            inv[r] = scale;
            let orow = &mut out[r * m..(r + 1) * m];
            for j in 0..m {
                let mut v = (xr[j] - mean) * scale * gain[j];
                if let Some(s) = shift {
                    v += s[j];
                }
                orow[j] = v;
            }
        }
        (out, inv)
    }

    pub fn sigmoid(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    }

    pub fn activate(v: f64, kind: Activation) -> f64 {
        match kind {
            Activation::Relu => v.max(0.0),
            Activation::Swish => v * sigmoid(v),
        }
    }

    pub fn activate_grad(v: f64, kind: Activation) -> f64 {
        match kind {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(v);
                s + v * s * (1.0 - s)
            }
        }
    }

    pub fn softmax(x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (xr, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(xr) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        out
    }

    pub fn cross_entropy(probs: &[f64], c: usize, labels: &[usize]) -> f64 {
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| -probs[i * c + label].max(PROB_FLOOR).ln())
            .sum();
        total / labels.len() as f64
    }
}
