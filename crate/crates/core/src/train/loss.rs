use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smoothing term added to numerator and denominator of every class Dice.
pub const DICE_SMOOTHING: f64 = 1e-5;

/// Multi-class soft Dice loss.
///
/// For class `c`, `D_c = (2 Σ p g + s) / (Σ p² + Σ g² + s)` over every batch
/// position, with `g` the one-hot labels. The loss is `1 - mean_c D_c` over all
/// classes including background. Returns the loss and its gradient with
/// respect to `probs`.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::invalid(format!(
            "labels hold {} entries, probabilities cover {}",
            labels.len(),
            n * hw
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let p = probs.data();
    let s = T::from_f64(DICE_SMOOTHING);
    let two = T::from_f64(2.0);
    let mut inter = vec![T::zero(); c];
    let mut psq = vec![T::zero(); c];
    let mut gsum = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let v = p[base + i];
                psq[ch] += v * v;
                if labels[b * hw + i] as usize == ch {
                    inter[ch] += v;
                    gsum[ch] += T::one();
                }
            }
        }
    }

    let cf = T::from_f64(c as f64);
    let mut mean_dice = T::zero();
    let mut num = vec![T::zero(); c];
    let mut den = vec![T::zero(); c];
    for ch in 0..c {
        num[ch] = two * inter[ch] + s;
        den[ch] = psq[ch] + gsum[ch] + s;
        mean_dice += num[ch] / den[ch];
    }
    mean_dice = mean_dice / cf;
    let loss = T::one() - mean_dice;

    // dD/dp = (2 g den - num 2 p) / den², loss gradient = -dD/dp / C
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let inv = T::one() / (den[ch] * den[ch] * cf);
            for i in 0..hw {
                let onehot = if labels[b * hw + i] as usize == ch { T::one() } else { T::zero() };
                g[base + i] = -(two * onehot * den[ch] - two * num[ch] * p[base + i]) * inv;
            }
        }
    }
    Ok((loss, grad))
}
