use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight kept by the running statistics at each update.
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum: T::from_f64(BN_MOMENTUM),
            epsilon: T::from_f64(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::invalid(format!("batch-norm {name} must have {c} entries")));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("batch-norm running variance must be non-negative"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::invalid("batch-norm epsilon must be positive"));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::invalid("batch-norm momentum must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// State kept by [`batch_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    mode: NormMode,
    /// Normalized pre-affine activations.
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

impl<T: Scalar> BatchNormCache<T> {
    pub fn normalized(&self) -> &Tensor<T> {
        &self.xhat
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn channel_offsets(n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |b| {
        let start = (b * c + ch) * hw;
        start..start + hw
    })
}

/// Batch normalization over the (N, H, W) axes of an `(N, C, H, W)` tensor.
///
/// Train mode normalizes with batch statistics and folds them into the running
/// statistics (`running = momentum * running + (1 - momentum) * batch`). Infer
/// mode normalizes with the running statistics and leaves them untouched.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    if c != params.channels() {
        return Err(Error::invalid(format!(
            "input has {c} channels, batch norm expects {}",
            params.channels()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let m = T::from_f64(count as f64);
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = vec![T::zero(); c];
    let x = input.data();

    for ch in 0..c {
        let (mean, var) = match mode {
            NormMode::Train => {
                let mean = channel_offsets(n, c, hw, ch)
                    .map(|r| x[r].iter().copied().sum::<T>())
                    .sum::<T>()
                    / m;
                let var = channel_offsets(n, c, hw, ch)
                    .map(|r| x[r].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                    .sum::<T>()
                    / m;
                let mom = params.momentum;
                let rm = &mut params.running_mean.data_mut()[ch];
                *rm = mom * *rm + (T::one() - mom) * mean;
                let rv = &mut params.running_var.data_mut()[ch];
                *rv = mom * *rv + (T::one() - mom) * var;
                (mean, var)
            }
            NormMode::Infer => (params.running_mean.data()[ch], params.running_var.data()[ch]),
        };
        let is = T::one() / (var + params.epsilon).sqrt();
        inv_std[ch] = is;
        let (g, b) = (params.gamma.data()[ch], params.beta.data()[ch]);
        for r in channel_offsets(n, c, hw, ch) {
            for i in r {
                let v = (x[i] - mean) * is;
                xhat.data_mut()[i] = v;
                out.data_mut()[i] = g * v + b;
            }
        }
    }

    let cache = BatchNormCache {
        mode,
        xhat,
        inv_std,
        gamma: params.gamma.data().to_vec(),
    };
    Ok((out, cache))
}

/// Analytic gradients of train-mode [`batch_norm`].
pub fn batch_norm_grad<T: Scalar>(cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
    if cache.mode != NormMode::Train {
        return Err(Error::invalid("batch-norm backward needs a train-mode cache"));
    }
    cache.xhat.ensure_same_shape(grad_out, "batch-norm grad_out")?;
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let dy = grad_out.data();
    let xh = cache.xhat.data();

    let mut gin = Tensor::zeros(grad_out.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for r in channel_offsets(n, c, hw, ch) {
            for i in r {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        gbeta.data_mut()[ch] = sum_dy;
        ggamma.data_mut()[ch] = sum_dy_xh;
        let scale = cache.gamma[ch] * cache.inv_std[ch] / m;
        for r in channel_offsets(n, c, hw, ch) {
            for i in r {
                gin.data_mut()[i] = scale * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    Ok(BatchNormGrads {
        input: gin,
        gamma: ggamma,
        beta: gbeta,
    })
}
