use std::collections::BTreeMap;

use super::{LayerGrad, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

/// Global average pooling: one spatial mean per channel.
pub fn gap(input: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f64;
    Ok((0..c)
        .map(|ch| input.channel(ch).iter().sum::<f64>() / n)
        .collect())
}

pub fn gap_backward(input_shape: &[usize], upstream: &[f64]) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape(
            "gap_backward",
            format!("expected rank 3, got {input_shape:?}"),
        ));
    };
    if upstream.len() != c {
        return Err(Error::shape(
            "gap_backward",
            format!("{} gradients for {c} channels", upstream.len()),
        ));
    }
    let mut g = Tensor::image(c, h, w);
    let n = (h * w) as f64;
    for (ch, &u) in upstream.iter().enumerate() {
        g.channel_mut(ch).fill(u / n);
    }
    Ok(g)
}

/// `act(W·x + b)` with `W` shaped `out × in`.
pub fn dense(input: &[f64], weights: &Tensor, bias: &[f64], act: Activation) -> Result<Vec<f64>> {
    let [out, fan_in] = weights.shape()[..] else {
        return Err(Error::shape(
            "dense",
            format!("weights must be rank 2, got {:?}", weights.shape()),
        ));
    };
    if fan_in != input.len() || bias.len() != out {
        return Err(Error::shape(
            "dense",
            format!(
                "input {} / bias {} against weights {out}×{fan_in}",
                input.len(),
                bias.len()
            ),
        ));
    }
    let w = weights.data();
    Ok((0..out)
        .map(|o| {
            let z = bias[o]
                + w[o * fan_in..(o + 1) * fan_in]
                    .iter()
                    .zip(input)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            match act {
                Activation::None => z,
                Activation::Relu => z.max(0.0),
                Activation::Sigmoid => super::sigmoid_scalar(z),
            }
        })
        .collect())
}

/// Backward of [`dense`]; `output` is the post-activation forward result.
pub fn dense_backward(
    input: &[f64],
    weights: &Tensor,
    output: &[f64],
    act: Activation,
    upstream: &[f64],
) -> Result<LayerGrad> {
    let [out, fan_in] = weights.shape()[..] else {
        return Err(Error::shape(
            "dense_backward",
            format!("weights must be rank 2, got {:?}", weights.shape()),
        ));
    };
    if fan_in != input.len() || output.len() != out || upstream.len() != out {
        return Err(Error::shape(
            "dense_backward",
            "input/output/upstream lengths disagree with weights",
        ));
    }
    let dz: Vec<f64> = upstream
        .iter()
        .zip(output)
        .map(|(&g, &y)| match act {
            Activation::None => g,
            Activation::Relu => {
                if y > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => g * y * (1.0 - y),
        })
        .collect();
    let w = weights.data();
    let mut dw = vec![0.0; out * fan_in];
    let mut dx = vec![0.0; fan_in];
    for o in 0..out {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        let drow = &mut dw[o * fan_in..(o + 1) * fan_in];
        for i in 0..fan_in {
            drow[i] = dz[o] * input[i];
            dx[i] += dz[o] * row[i];
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("weight".to_string(), Tensor::from_vec(&[out, fan_in], dw)?);
    param_grads.insert("bias".to_string(), Tensor::from_vec(&[out], dz)?);
    Ok(LayerGrad {
        input_grad: Tensor::from_vec(&[fan_in], dx)?,
        param_grads,
    })
}

/// Concatenates rank-3 tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_channels", "nothing to concatenate"));
    };
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial {ph}×{pw} vs {h}×{w}"),
            ));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.dims3()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            format!("{sizes:?} does not sum to {c}"),
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let data = x.data()[start * h * w..(start + s) * h * w].to_vec();
        out.push(Tensor::from_vec(&[s, h, w], data)?);
        start += s;
    }
    Ok(out)
}

/// Hadamard product of `x` with per-channel gates broadcast over space.
pub fn scale_channels(x: &Tensor, gates: &[f64]) -> Result<Tensor> {
    let (c, _, _) = x.dims3()?;
    if gates.len() != c {
        return Err(Error::shape(
            "scale_channels",
            format!("{} gates for {c} channels", gates.len()),
        ));
    }
    let mut out = x.clone();
    for (ch, &g) in gates.iter().enumerate() {
        for v in out.channel_mut(ch) {
            *v *= g;
        }
    }
    Ok(out)
}

/// Returns `(∂/∂x, ∂/∂gates)`.
pub fn scale_channels_backward(
    x: &Tensor,
    gates: &[f64],
    upstream: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "scale_channels_backward",
            format!("{:?} vs {:?}", x.shape(), upstream.shape()),
        ));
    }
    let dx = scale_channels(upstream, gates)?;
    let dg = (0..gates.len())
        .map(|ch| {
            x.channel(ch)
                .iter()
                .zip(upstream.channel(ch))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok((dx, dg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck::{check_layer, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gap_examples() {
        assert_eq!(gap(&Tensor::full(&[2, 3, 3], 4.5)).unwrap(), vec![4.5, 4.5]);
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(gap(&x).unwrap(), vec![3.0]);
        assert_eq!(gap(&Tensor::image(3, 2, 2)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dense_identity_and_sigmoid() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 2.0];
        assert_eq!(
            dense(&x, &eye, &[0.0; 3], Activation::None).unwrap(),
            x.to_vec()
        );
        let z = dense(&[0.0], &Tensor::zeros(&[1, 1]), &[0.0], Activation::Sigmoid).unwrap();
        assert_eq!(z, vec![0.5]);
        assert!(dense(&[1.0, 2.0], &eye, &[0.0; 3], Activation::None).is_err());
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_tensor(&[2, 3, 3], &mut rng);
        let b = random_tensor(&[1, 3, 3], &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3, 3]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::image(1, 2, 3)]).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            for act in [Activation::None, Activation::Relu, Activation::Sigmoid] {
                let x = random_tensor(&[4], &mut rng);
                let wt = random_tensor(&[3, 4], &mut rng);
                let b = random_tensor(&[3], &mut rng);
                let r = check_layer(
                    &[x, wt, b],
                    |p| {
                        let y = dense(p[0].data(), &p[1], p[2].data(), act).unwrap();
                        Tensor::from_vec(&[3], y).unwrap()
                    },
                    |p, up| {
                        let y = dense(p[0].data(), &p[1], p[2].data(), act).unwrap();
                        let g = dense_backward(p[0].data(), &p[1], &y, act, up.data()).unwrap();
                        g.into_input_weight_bias()
                    },
                    &mut rng,
                );
                assert!(r.passed(), "dense {act:?} seed {seed}: {r:?}");
            }

            let x = random_tensor(&[3, 2, 4], &mut rng);
            let r = check_layer(
                std::slice::from_ref(&x),
                |p| Tensor::from_vec(&[3], gap(&p[0]).unwrap()).unwrap(),
                |p, up| vec![gap_backward(p[0].shape(), up.data()).unwrap()],
                &mut rng,
            );
            assert!(r.passed(), "gap seed {seed}: {r:?}");

            let gates = random_tensor(&[3], &mut rng);
            let r = check_layer(
                &[x, gates],
                |p| scale_channels(&p[0], p[1].data()).unwrap(),
                |p, up| {
                    let (dx, dg) = scale_channels_backward(&p[0], p[1].data(), up).unwrap();
                    vec![dx, Tensor::from_vec(&[3], dg).unwrap()]
                },
                &mut rng,
            );
            assert!(r.passed(), "scale seed {seed}: {r:?}");
        }
    }
}
