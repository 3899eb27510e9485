use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` through wherever the cached forward input was positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.ensure_same_shape(grad_out, "relu grad_out")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Softmax across the channel axis of an `(N, C, H, W)` tensor.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if c < 2 {
        return Err(Error::invalid("softmax needs at least two channels"));
    }
    let hw = h * w;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = x[base + p];
            for ch in 1..c {
                max = max.max(x[base + ch * hw + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - max).exp();
                o[base + ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                o[base + ch * hw + p] = o[base + ch * hw + p] / sum;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_channels`] given its output probabilities:
/// `dx_c = p_c * (g_c - sum_k p_k g_k)`.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    probs.ensure_same_shape(grad_out, "softmax grad_out")?;
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let (p, g) = (probs.data(), grad_out.data());
    let mut out = Tensor::zeros(probs.shape());
    let o = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let dot: T = (0..c).map(|ch| p[base + ch * hw + i] * g[base + ch * hw + i]).sum();
            for ch in 0..c {
                let j = base + ch * hw + i;
                o[j] = p[j] * (g[j] - dot);
            }
        }
    }
    Ok(out)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} must lie in [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    if p == 0.0 {
        return Ok(Tensor::filled(shape, T::one()));
    }
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}
