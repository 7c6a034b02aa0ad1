use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient passes where the forward *input* was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), upstream.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Takes the forward *output* `s`; `ds = s (1 − s) · g`.
pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if output.shape() != upstream.shape() {
        return Err(Error::shape(
            "sigmoid_backward",
            format!("{:?} vs {:?}", output.shape(), upstream.shape()),
        ));
    }
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| s * (1.0 - s) * g)
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Per-pixel softmax across channels, stabilised by subtracting the pixel max.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (k, h, w) = x.dims3()?;
    let plane = h * w;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(src[c * plane + p]);
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (src[c * plane + p] - m).exp();
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Takes the forward *output* `y`; `dx_k = y_k (g_k − Σ_j y_j g_j)`.
pub fn softmax_channels_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (k, h, w) = output.dims3()?;
    if output.shape() != upstream.shape() {
        return Err(Error::shape(
            "softmax_channels_backward",
            format!("{:?} vs {:?}", output.shape(), upstream.shape()),
        ));
    }
    let plane = h * w;
    let (y, g) = (output.data(), upstream.data());
    let mut dx = vec![0.0; y.len()];
    for p in 0..plane {
        let dot: f64 = (0..k).map(|c| y[c * plane + p] * g[c * plane + p]).sum();
        for c in 0..k {
            let i = c * plane + p;
            dx[i] = y[i] * (g[i] - dot);
        }
    }
    Tensor::from_vec(output.shape(), dx)
}
