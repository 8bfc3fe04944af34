use crate::error::{Error, Result};

/// Dense row-major f64 array with an optional gradient buffer of the same
/// shape. All model math runs in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::validation("tensor shape has a zero extent"));
        }
        if numel != data.len() {
            return Err(Error::validation(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::validation(format!("{op}: non-finite input value")))
        }
    }
}

/// Fourier feature embedding: each input feature x expands to
/// sin(2^b * pi * x) for b = 0..bands-1 followed by the matching cos terms,
/// so the last axis grows from f to 2*bands*f.
pub fn fourier_embed(x: &Tensor, bands: usize) -> Result<Tensor> {
    if bands == 0 {
        return Err(Error::validation("fourier_embed: bands must be >= 1"));
    }
    x.ensure_finite("fourier_embed")?;
    let f = *x.shape.last().ok_or_else(|| Error::validation("fourier_embed: empty shape"))?;
    let rows = x.numel() / f;
    let out_cols = 2 * bands * f;
    let mut out = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let src = &x.data[r * f..(r + 1) * f];
        let dst = &mut out[r * out_cols..(r + 1) * out_cols];
        for (j, &v) in src.iter().enumerate() {
            for b in 0..bands {
                let arg = (1u64 << b) as f64 * std::f64::consts::PI * v;
                dst[j * bands + b] = arg.sin();
                dst[bands * f + j * bands + b] = arg.cos();
            }
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_cols;
    Tensor::new(shape, out)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::validation(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    x.ensure_finite("softmax")?;
    let axis_len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * axis_len * inner + j * inner + i;
            let max = (0..axis_len).map(|j| x.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..axis_len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..axis_len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization over the last axis with epsilon inside the square
/// root, then elementwise gain and bias.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    x.ensure_finite("layer_norm")?;
    let d = *x.shape.last().ok_or_else(|| Error::validation("layer_norm: empty shape"))?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::validation(format!(
            "layer_norm: gain/bias length must equal last extent {d}"
        )));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let src = &x.data[r * d..(r + 1) * d];
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::autodiff::LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            out[r * d + j] = (src[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Smoothed L1 regression loss over a trajectory: per-coordinate Huber
/// residual (0.5 e^2 below 1, |e| - 0.5 above), summed over the two
/// coordinates and averaged over timesteps.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::validation(format!(
            "smooth_l1: shape mismatch {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    pred.ensure_finite("smooth_l1")?;
    gt.ensure_finite("smooth_l1")?;
    let t = pred.shape[0];
    let mut total = 0.0;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        let e = (p - g).abs();
        total += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
    }
    Ok(total / t as f64)
}

pub const LOG_CLAMP: f64 = 1e-12;

/// Cross entropy between a predicted probability vector and a target
/// probability vector, with the log clamped at `LOG_CLAMP`.
pub fn cross_entropy(pred_probs: &[f64], target: &[f64]) -> Result<f64> {
    if pred_probs.len() != target.len() {
        return Err(Error::validation("cross_entropy: length mismatch"));
    }
    let check = |v: &[f64], name: &str| -> Result<()> {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::validation(format!("cross_entropy: {name} is not a probability vector")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "cross_entropy: {name} sums to {s}, expected 1 within 1e-6"
            )));
        }
        Ok(())
    };
    check(pred_probs, "prediction")?;
    check(target, "target")?;
    Ok(pred_probs
        .iter()
        .zip(target)
        .map(|(p, t)| -t * p.max(LOG_CLAMP).ln())
        .sum())
}
