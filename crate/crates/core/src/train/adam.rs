use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Bias-corrected Adam moments for a list of parameter buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments shaped like `sizes`, beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(sizes: &[usize], learning_rate: f64) -> Self {
        Self {
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update. Gradients are checked for finiteness before any
/// parameter or moment is touched.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::invalid("parameter, gradient and optimizer buffer counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::invalid(format!("buffer {i}: parameter and gradient sizes differ")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient buffer {i} entry {j} is {}", g[j])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = T::from_f64(state.learning_rate);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (c1t, c2t, eps) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(state.epsilon));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..p.len() {
            m[j] = b1t * m[j] + one_b1 * g[j];
            v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
            let mhat = m[j] / c1t;
            let vhat = v[j] / c2t;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
