use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{gemm, LayerGrad, Tensor};
use crate::error::{Error, Result};

/// Border handling for [`conv2d_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    SameZero,
    Valid,
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::SameZero => kernel / 2,
            Padding::Valid => 0,
        }
    }
}

/// Output side length of a square-kernel convolution along one axis.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    let pad = padding.amount(kernel);
    if input + 2 * pad < kernel {
        return 0;
    }
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let (c, h, w) = input.dims3()?;
    let [out_c, in_c, kh, kw] = weights.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be rank 4, got {:?}", weights.shape()),
        ));
    };
    if in_c != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {in_c}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square and odd, got {kh}×{kw}"),
        ));
    }
    if bias.len() != out_c {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != {out_c}", bias.len()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    let oh = conv2d_output_size(h, kh, stride, padding);
    let ow = conv2d_output_size(w, kw, stride, padding);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("{h}×{w} input too small for {kh}×{kw} kernel"),
        ));
    }
    Ok(ConvGeom {
        c,
        h,
        w,
        out_c,
        k: kh,
        stride,
        pad: padding.amount(kh),
        oh,
        ow,
    })
}

impl ConvGeom {
    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.pad)
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .min(self.ow);
        (lo.min(hi), hi)
    }
}

thread_local! {
    /// Per-thread column buffers reused across layer calls.
    static SCRATCH: RefCell<[Vec<f64>; 2]> = const { RefCell::new([Vec::new(), Vec::new()]) };
}

/// Runs `f` with this thread's two scratch buffers.
fn with_scratch<R>(f: impl FnOnce(&mut Vec<f64>, &mut Vec<f64>) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let [a, b] = &mut *s;
        f(a, b)
    })
}

/// Unfolds `input` into a `(C·k·k) × (OH·OW)` column matrix held in `cols`.
fn im2col(input: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    cols.clear();
    cols.reserve(g.c * g.k * g.k * g.oh * g.ow);
    for ch in 0..g.c {
        let plane = &input[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        cols.resize(cols.len() + g.ow, 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.resize(cols.len() + lo, 0.0);
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        cols.extend_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    } else {
                        cols.extend((0..hi - lo).map(|i| src_row[ix0 + i * g.stride]));
                    }
                    cols.resize(cols.len() + g.ow - hi, 0.0);
                }
            }
        }
    }
}

/// Folds a column-gradient matrix back onto the input grid (adjoint of [`im2col`]).
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_w = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for ch in 0..g.c {
        let plane = &mut out[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst_row[ix0..ix0 + (hi - lo)].iter_mut().zip(src_row) {
                            *d += s;
                        }
                    } else {
                        for (i, s) in src_row.iter().enumerate() {
                            dst_row[ix0 + i * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of a `C × H × W` input with an `O × C × k × k` kernel.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geom(input, weights, bias, stride, padding)?;
    let n = g.oh * g.ow;
    let kdim = g.c * g.k * g.k;
    let mut out = Vec::with_capacity(g.out_c * n);
    for &b in bias {
        out.resize(out.len() + n, b);
    }
    with_scratch(|cols, _| {
        im2col(input.data(), &g, cols);
        gemm(
            g.out_c,
            kdim,
            n,
            weights.data(),
            false,
            cols,
            false,
            &mut out,
            true,
        );
    });
    Tensor::from_vec(&[g.out_c, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, `"weight"` and `"bias"`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: Padding,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let out_c = weights.shape().first().copied().unwrap_or(0);
    let bias = vec![0.0; out_c];
    let g = conv_geom(input, weights, &bias, stride, padding)?;
    if upstream.shape() != [g.out_c, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream {:?}, forward output {:?}",
                upstream.shape(),
                [g.out_c, g.oh, g.ow]
            ),
        ));
    }
    let n = g.oh * g.ow;
    let kdim = g.c * g.k * g.k;
    let mut dw = vec![0.0; g.out_c * kdim];
    let db: Vec<f64> = upstream.data().chunks(n).map(|r| r.iter().sum()).collect();
    let dx = with_scratch(|cols, dcols| {
        im2col(input.data(), &g, cols);
        gemm(
            g.out_c,
            n,
            kdim,
            upstream.data(),
            false,
            cols,
            true,
            &mut dw,
            false,
        );
        // beta = 0, so the stale contents of the buffer are never read
        dcols.resize(kdim * n, 0.0);
        gemm(
            kdim,
            g.out_c,
            n,
            weights.data(),
            true,
            upstream.data(),
            false,
            dcols,
            false,
        );
        col2im(dcols, &g)
    });

    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight".to_string(), Tensor::from_vec(weights.shape(), dw)?);
    param_grads.insert("bias".to_string(), Tensor::from_vec(&[g.out_c], db)?);
    Ok(LayerGrad {
        input_grad: Tensor::from_vec(input.shape(), dx)?,
        param_grads,
    })
}

struct DeconvGeom {
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

fn deconv_geom(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
) -> Result<DeconvGeom> {
    let (c, h, w) = input.dims3()?;
    let [in_c, out_c, kh, kw] = weights.shape()[..] else {
        return Err(Error::shape(
            "upsample_deconv",
            format!("kernel must be rank 4, got {:?}", weights.shape()),
        ));
    };
    if in_c != c {
        return Err(Error::shape(
            "upsample_deconv",
            format!("input has {c} channels, kernel expects {in_c}"),
        ));
    }
    if kh != kw || kh == 0 || stride == 0 {
        return Err(Error::shape(
            "upsample_deconv",
            format!("bad kernel {kh}×{kw} / stride {stride}"),
        ));
    }
    if bias.len() != out_c {
        return Err(Error::shape(
            "upsample_deconv",
            format!("bias length {} != {out_c}", bias.len()),
        ));
    }
    let oh = if h == 0 { 0 } else { (h - 1) * stride + kh };
    let ow = if w == 0 { 0 } else { (w - 1) * stride + kw };
    Ok(DeconvGeom {
        c,
        h,
        w,
        out_c,
        k: kh,
        stride,
        oh,
        ow,
    })
}

/// Transposed convolution without padding; kernel `C_in × C_out × k × k`.
///
/// Output side is `(n - 1)·stride + k`, so `k = stride = 2` doubles it.
pub fn upsample_deconv(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
) -> Result<Tensor> {
    let g = deconv_geom(input, weights, bias, stride)?;
    let hw = g.h * g.w;
    let okk = g.out_c * g.k * g.k;
    let mut out = vec![0.0; g.out_c * g.oh * g.ow];
    with_scratch(|cols, _| {
        cols.resize(okk * hw, 0.0);
        gemm(
            okk,
            g.c,
            hw,
            weights.data(),
            true,
            input.data(),
            false,
            cols,
            false,
        );
        for o in 0..g.out_c {
            let plane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            plane.fill(bias[o]);
            for a in 0..g.k {
                for b in 0..g.k {
                    let src = &cols[((o * g.k + a) * g.k + b) * hw..][..hw];
                    for i in 0..g.h {
                        let oy = i * g.stride + a;
                        for j in 0..g.w {
                            plane[oy * g.ow + j * g.stride + b] += src[i * g.w + j];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[g.out_c, g.oh, g.ow], out)
}

/// Gradients of [`upsample_deconv`] w.r.t. input, `"weight"` and `"bias"`.
pub fn upsample_deconv_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let out_c = weights.shape().get(1).copied().unwrap_or(0);
    let g = deconv_geom(input, weights, &vec![0.0; out_c], stride)?;
    if upstream.shape() != [g.out_c, g.oh, g.ow] {
        return Err(Error::shape(
            "upsample_deconv_backward",
            format!(
                "upstream {:?}, forward output {:?}",
                upstream.shape(),
                [g.out_c, g.oh, g.ow]
            ),
        ));
    }
    let hw = g.h * g.w;
    let okk = g.out_c * g.k * g.k;
    let up = upstream.data();
    let mut dx = vec![0.0; g.c * hw];
    let mut dw = vec![0.0; g.c * okk];
    with_scratch(|dcols, _| {
        dcols.resize(okk * hw, 0.0);
        for o in 0..g.out_c {
            let plane = &up[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            for a in 0..g.k {
                for b in 0..g.k {
                    let dst = &mut dcols[((o * g.k + a) * g.k + b) * hw..][..hw];
                    for i in 0..g.h {
                        let oy = i * g.stride + a;
                        for j in 0..g.w {
                            dst[i * g.w + j] = plane[oy * g.ow + j * g.stride + b];
                        }
                    }
                }
            }
        }
        gemm(
            g.c,
            okk,
            hw,
            weights.data(),
            false,
            dcols,
            false,
            &mut dx,
            false,
        );
        gemm(
            g.c,
            hw,
            okk,
            input.data(),
            false,
            dcols,
            true,
            &mut dw,
            false,
        );
    });
    let db: Vec<f64> = up.chunks(g.oh * g.ow).map(|r| r.iter().sum()).collect();

    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight".to_string(), Tensor::from_vec(weights.shape(), dw)?);
    param_grads.insert("bias".to_string(), Tensor::from_vec(&[g.out_c], db)?);
    Ok(LayerGrad {
        input_grad: Tensor::from_vec(input.shape(), dx)?,
        param_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck::{check_layer, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, wt: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let (o, k) = (wt.shape()[0], wt.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::image(o, oh, ow);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at(ic, iy as usize, ix as usize)
                                        * wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.set(oc, oy, ox, s);
                }
            }
        }
        out
    }

    fn naive_deconv(x: &Tensor, wt: &Tensor, b: &[f64], s: usize) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let (o, k) = (wt.shape()[1], wt.shape()[2]);
        let mut out = Tensor::image(o, (h - 1) * s + k, (w - 1) * s + k);
        for oc in 0..o {
            for y in 0..out.shape()[1] {
                for xx in 0..out.shape()[2] {
                    out.set(oc, y, xx, b[oc]);
                }
            }
        }
        for ic in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for oc in 0..o {
                        for a in 0..k {
                            for bb in 0..k {
                                let v = out.at(oc, i * s + a, j * s + bb)
                                    + x.at(ic, i, j) * wt.data()[((ic * o + oc) * k + a) * k + bb];
                                out.set(oc, i * s + a, j * s + bb, v);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_zero_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wt = random_tensor(&[2, 1, 3, 3], &mut rng);
        let y = conv2d_forward(
            &Tensor::image(1, 3, 3),
            &wt,
            &[0.0, 0.0],
            1,
            Padding::SameZero,
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[1, 5, 4], &mut rng);
        let wt = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &wt, &[0.0], 1, Padding::SameZero).unwrap();
        assert_eq!(y, x);
        let g = random_tensor(&[1, 5, 4], &mut rng);
        let grad = conv2d_backward(&x, &wt, 1, Padding::SameZero, &g).unwrap();
        assert_eq!(grad.input_grad, g);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, padding, pad) in &[
            (1, Padding::SameZero, 1),
            (1, Padding::Valid, 0),
            (2, Padding::SameZero, 1),
        ] {
            let x = random_tensor(&[2, 5, 5], &mut rng);
            let wt = random_tensor(&[3, 2, 3, 3], &mut rng);
            let b = random_tensor(&[3], &mut rng).into_data();
            let fast = conv2d_forward(&x, &wt, &b, stride, padding).unwrap();
            let slow = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::image(2, 4, 4);
        let wt = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &wt, &[0.0], 1, Padding::SameZero),
            Err(Error::Shape { .. })
        ));
        let wt_even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &wt_even, &[0.0], 1, Padding::SameZero).is_err());
    }

    #[test]
    fn backward_rejects_wrong_upstream() {
        let x = Tensor::image(1, 4, 4);
        let wt = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &wt, 1, Padding::SameZero, &Tensor::image(1, 3, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 4, 4], &mut rng);
        let wt = random_tensor(&[2, 2, 3, 3], &mut rng);
        let g = conv2d_backward(&x, &wt, 1, Padding::SameZero, &Tensor::image(2, 4, 4)).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
        assert!(g
            .param_grads
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random_tensor(&[1, 4, 4], &mut rng);
            let wt = random_tensor(&[2, 1, 3, 3], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            let report = check_layer(
                &[x, wt, b],
                |p| conv2d_forward(&p[0], &p[1], p[2].data(), 1, Padding::SameZero).unwrap(),
                |p, up| {
                    let g = conv2d_backward(&p[0], &p[1], 1, Padding::SameZero, up).unwrap();
                    g.into_input_weight_bias()
                },
                &mut rng,
            );
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn deconv_of_ones_replicates() {
        let x = Tensor::full(&[1, 1, 1], 2.5);
        let wt = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = upsample_deconv(&x, &wt, &[0.0], 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.5; 4]);
        let z = upsample_deconv(&Tensor::image(1, 3, 3), &wt, &[0.0], 2).unwrap();
        assert_eq!(z.shape(), &[1, 6, 6]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s) in &[(2, 2), (3, 2), (3, 1)] {
            let x = random_tensor(&[3, 4, 3], &mut rng);
            let wt = random_tensor(&[3, 2, k, k], &mut rng);
            let b = random_tensor(&[2], &mut rng).into_data();
            let fast = upsample_deconv(&x, &wt, &b, s).unwrap();
            let slow = naive_deconv(&x, &wt, &b, s);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random_tensor(&[2, 3, 3], &mut rng);
            let wt = random_tensor(&[2, 2, 2, 2], &mut rng);
            let b = random_tensor(&[2], &mut rng);
            let report = check_layer(
                &[x, wt, b],
                |p| upsample_deconv(&p[0], &p[1], p[2].data(), 2).unwrap(),
                |p, up| {
                    let g = upsample_deconv_backward(&p[0], &p[1], 2, up).unwrap();
                    g.into_input_weight_bias()
                },
                &mut rng,
            );
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
        }
    }
}
