use super::Tensor;
use crate::error::{Error, Result};

/// Argmax positions recorded by [`maxpool2d`], flat indices into the input.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping max pooling with a square window (stride = window).
///
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("{h}×{w} is not divisible by the {window}×{window} window"),
        ));
    }
    let (oh, ow) = (h / window, w / window);
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream value to the input position that won the max.
pub fn maxpool2d_backward(indices: &PoolIndices, upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "upstream has {} values, pool recorded {}",
                upstream.len(),
                indices.argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&i, &u) in indices.argmax.iter().zip(upstream.data()) {
        g[i] += u;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck::{check_layer, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_window() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn constant_input_routes_to_first_argmax() {
        let x = Tensor::full(&[1, 4, 4], 7.0);
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let g = maxpool2d_backward(&idx, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.sum(), 4.0);
        // one nonzero per window, at the window's first element
        assert_eq!(g.at(0, 0, 0), 1.0);
        assert_eq!(g.at(0, 0, 1), 0.0);
        assert_eq!(g.at(0, 2, 2), 1.0);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            maxpool2d(&Tensor::image(1, 3, 4), 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn matches_naive_windowed_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[1, 8, 8], &mut rng);
        let (y, _) = maxpool2d(&x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| x.at(0, 2 * oy + a, 2 * ox + b))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.at(0, oy, ox), m);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = random_tensor(&[2, 4, 4], &mut rng);
            let report = check_layer(
                &[x],
                |p| maxpool2d(&p[0], 2).unwrap().0,
                |p, up| {
                    let (_, idx) = maxpool2d(&p[0], 2).unwrap();
                    vec![maxpool2d_backward(&idx, up).unwrap()]
                },
                &mut rng,
            );
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }
}
