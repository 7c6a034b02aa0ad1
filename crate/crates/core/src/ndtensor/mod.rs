//! Dense `f64` tensors and the differentiable layers used by the network.
//!
//! Every layer is a pair of free functions: a forward pass that is a pure
//! function of its inputs, and a backward pass that takes the same inputs plus
//! the upstream gradient. There is no tape; the model module threads the
//! intermediate values through by hand.

mod activation;
mod conv;
mod dense;
pub mod gradcheck;
mod io;
mod pool;

use std::collections::BTreeMap;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_channels,
    softmax_channels_backward,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_output_size, upsample_deconv, upsample_deconv_backward,
    Padding,
};
pub use dense::{
    concat_channels, dense, dense_backward, gap, gap_backward, scale_channels,
    scale_channels_backward, split_channels, Activation,
};
pub use io::{read_ndt, read_ndt_from, write_ndt, write_ndt_to, NDT_MAGIC};
pub use pool::{maxpool2d, maxpool2d_backward, PoolIndices};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Images and feature maps are rank 3 (`channels × height × width`);
/// convolution kernels are rank 4 and dense weights rank 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Rank-3 `channels × height × width` tensor.
pub type ImageTensor = Tensor;

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// `channels × height × width` zero image.
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Tensor::zeros(&[channels, height, width])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected rank 3, got {:?}", self.shape),
            )),
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Element of a rank-3 tensor.
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Gradients produced by one layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub input_grad: Tensor,
    /// Keyed by the parameter's local name (`"weight"`, `"bias"`); shapes
    /// equal the parameter shapes.
    pub param_grads: BTreeMap<String, Tensor>,
}

impl LayerGrad {
    pub fn param(&self, name: &str) -> &Tensor {
        &self.param_grads[name]
    }

    /// `[input_grad, weight, bias]`.
    pub fn into_input_weight_bias(mut self) -> Vec<Tensor> {
        let w = self.param_grads.remove("weight").expect("weight gradient");
        let b = self.param_grads.remove("bias").expect("bias gradient");
        vec![self.input_grad, w, b]
    }
}

/// `C = op(A) · op(B)` with row-major operands, `op` optionally transposing.
///
/// `a` is `m × k` (or `k × m` when `trans_a`), `b` is `k × n` (or `n × k`),
/// `c` is `m × n`. When `accumulate` is set the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe exactly the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
