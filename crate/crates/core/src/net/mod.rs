//! The dilated fully-convolutional classification network.
//!
//! The canonical network has ten layers: eight 3x3 convolutions with dilations
//! `[1, 1, 2, 4, 8, 16, 32, 1]` and 32 filters each, then two 1x1 convolutions
//! acting as fully connected layers. Every layer is a valid convolution, so a
//! `H x W` input yields a `(H - 130) x (W - 130)` map of class probabilities.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm, batch_norm_grad, conv2d_dilated, conv2d_dilated_grad, dropout_mask, relu, relu_backward,
    softmax_channels, softmax_channels_backward, BatchNormCache, BatchNormParams, ConvParams, NormMode, Scalar,
    Tensor,
};

pub const CANONICAL_WIDTH: usize = 32;
pub const CANONICAL_DILATIONS: [usize; 8] = [1, 1, 2, 4, 8, 16, 32, 1];
pub const CANONICAL_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
}

impl LayerKind {
    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub batch_norm: bool,
    /// Dropout probability applied to this layer's input during training.
    pub dropout_before: f64,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            in_channels,
            out_channels,
            dilation,
            batch_norm: false,
            dropout_before: 0.0,
            activation: Activation::Relu,
        }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Conv1x1,
            in_channels,
            out_channels,
            dilation: 1,
            batch_norm: false,
            dropout_before: 0.0,
            activation: Activation::Relu,
        }
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_before = p;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn parameter_count(&self) -> usize {
        let k = self.kind.kernel();
        let conv = k * k * self.in_channels * self.out_channels + self.out_channels;
        let norm = if self.batch_norm { 2 * self.out_channels } else { 0 };
        conv + norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// The ten-layer network with `num_classes` output units (2 or 4).
    pub fn canonical(num_classes: usize) -> Result<Self> {
        if num_classes != 2 && num_classes != 4 {
            return Err(Error::invalid(format!(
                "unsupported class count {num_classes}; expected 2 or 4"
            )));
        }
        let mut layers = Vec::with_capacity(10);
        let mut in_channels = 1;
        for d in CANONICAL_DILATIONS {
            layers.push(LayerSpec::conv3x3(in_channels, CANONICAL_WIDTH, d));
            in_channels = CANONICAL_WIDTH;
        }
        layers.push(
            LayerSpec::conv1x1(CANONICAL_WIDTH, CANONICAL_WIDTH)
                .with_batch_norm()
                .with_dropout(CANONICAL_DROPOUT),
        );
        layers.push(
            LayerSpec::conv1x1(CANONICAL_WIDTH, num_classes)
                .with_dropout(CANONICAL_DROPOUT)
                .with_activation(Activation::Softmax),
        );
        let spec = Self { layers, num_classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 && self.num_classes != 4 {
            return Err(Error::invalid(format!(
                "num_classes must be 2 or 4, got {}",
                self.num_classes
            )));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::invalid("network has no layers"));
        };
        if self.layers[0].in_channels != 1 {
            return Err(Error::invalid("the first layer must take a single intensity channel"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 || l.dilation == 0 {
                return Err(Error::invalid(format!("layer {i}: channels and dilation must be positive")));
            }
            if l.kind == LayerKind::Conv1x1 && l.dilation != 1 {
                return Err(Error::invalid(format!("layer {i}: 1x1 layers must use dilation 1")));
            }
            if !(0.0..1.0).contains(&l.dropout_before) {
                return Err(Error::invalid(format!("layer {i}: dropout must lie in [0, 1)")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} channels, previous layer produces {}",
                    l.in_channels,
                    self.layers[i - 1].out_channels
                )));
            }
            let is_last = i + 1 == self.layers.len();
            if (l.activation == Activation::Softmax) != is_last {
                return Err(Error::invalid("exactly the last layer must use softmax"));
            }
        }
        if last.out_channels != self.num_classes {
            return Err(Error::invalid(format!(
                "last layer has {} outputs but the network has {} classes",
                last.out_channels, self.num_classes
            )));
        }
        Ok(())
    }

    /// Input extent that influences one output position.
    pub fn receptive_field(&self) -> (usize, usize) {
        receptive_field(self)
    }

    /// Border that must surround a slice so the output covers it exactly.
    pub fn margin(&self) -> usize {
        (self.receptive_field().0 - 1) / 2
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }
}

/// `1 + 2 * sum of 3x3 dilations` along each axis.
pub fn receptive_field(spec: &NetworkSpec) -> (usize, usize) {
    let extent = 1 + spec
        .layers
        .iter()
        .map(|l| l.dilation * (l.kind.kernel() - 1))
        .sum::<usize>();
    (extent, extent)
}

/// Trainable scalars: convolution weights and biases plus batch-norm gamma and beta.
pub fn parameter_count(spec: &NetworkSpec) -> usize {
    spec.layers.iter().map(LayerSpec::parameter_count).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    pub conv: ConvParams<T>,
    pub norm: Option<BatchNormParams<T>>,
}

#[derive(Clone, PartialEq)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("num_classes", &self.spec.num_classes)
            .field("layers", &self.spec.layers.len())
            .field("parameters", &self.spec.parameter_count())
            .finish()
    }
}

/// Activations kept by [`Network::forward_train`] for [`Network::backward`].
pub struct Trace<T = f32> {
    /// Input of every layer, after dropout.
    inputs: Vec<Tensor<T>>,
    masks: Vec<Option<Tensor<T>>>,
    norms: Vec<Option<BatchNormCache<T>>>,
    output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffers in the order of [`Network::parameters_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.data());
            out.push(l.bias.data());
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g.data());
                out.push(b.data());
            }
        }
        out
    }
}

impl<T: Scalar> Network<T> {
    /// Canonical network with He-uniform weights, zero biases, gamma 1 and beta 0.
    pub fn build<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Result<Self> {
        Self::from_spec(NetworkSpec::canonical(num_classes)?, rng)
    }

    pub fn from_spec<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let k = l.kind.kernel();
            let fan_in = (l.in_channels * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weights = Tensor::from_fn(&[l.out_channels, l.in_channels, k, k], |_| {
                T::from_f64(rng.random_range(-bound..bound))
            });
            let conv = ConvParams::new(weights, Tensor::zeros(&[l.out_channels]), l.dilation)?;
            let norm = l.batch_norm.then(|| BatchNormParams::new(l.out_channels));
            layers.push(Layer {
                spec: l.clone(),
                conv,
                norm,
            });
        }
        Ok(Self { spec, layers })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::invalid("layer count does not match the layer layout"));
        }
        for (i, (l, s)) in layers.iter().zip(&spec.layers).enumerate() {
            l.conv.validate()?;
            let k = s.kind.kernel();
            if l.spec != *s
                || l.conv.weights.shape() != [s.out_channels, s.in_channels, k, k]
                || l.conv.dilation != s.dilation
            {
                return Err(Error::invalid(format!("layer {i} parameters do not match the layer layout")));
            }
            match (&l.norm, s.batch_norm) {
                (Some(n), true) if n.channels() == s.out_channels => n.validate()?,
                (None, false) => {}
                _ => return Err(Error::invalid(format!("layer {i} batch-norm parameters do not match the layer layout"))),
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = input.dims4()?;
        let (rf_h, rf_w) = self.spec.receptive_field();
        if c != self.spec.layers[0].in_channels {
            return Err(Error::invalid(format!("network input must have {} channel(s)", self.spec.layers[0].in_channels)));
        }
        if h < rf_h || w < rf_w {
            return Err(Error::invalid(format!(
                "input {h}x{w} is smaller than the {rf_h}x{rf_w} receptive field"
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass: running batch-norm statistics, no dropout.
    /// Returns class probabilities of shape `(N, classes, H - rf + 1, W - rf + 1)`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = conv2d_dilated(&x, &layer.conv)?;
            if let Some(norm) = &layer.norm {
                let mut params = norm.clone();
                z = batch_norm(&z, &mut params, NormMode::Infer)?.0;
            }
            x = activate(layer.spec.activation, &z)?;
        }
        Ok(x)
    }

    /// Training-mode forward pass: batch statistics (running statistics are
    /// updated) and dropout drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        let mut x = input.clone();
        for layer in &mut self.layers {
            let mask = if layer.spec.dropout_before > 0.0 {
                let m: Tensor<T> = dropout_mask(x.shape(), layer.spec.dropout_before, rng)?;
                x.data_mut().iter_mut().zip(m.data()).for_each(|(v, &k)| *v = *v * k);
                Some(m)
            } else {
                None
            };
            let mut z = conv2d_dilated(&x, &layer.conv)?;
            let cache = match &mut layer.norm {
                Some(norm) => {
                    let (out, cache) = batch_norm(&z, norm, NormMode::Train)?;
                    z = out;
                    Some(cache)
                }
                None => None,
            };
            inputs.push(x);
            masks.push(mask);
            norms.push(cache);
            x = activate(layer.spec.activation, &z)?;
        }
        let trace = Trace {
            inputs,
            masks,
            norms,
            output: x.clone(),
        };
        Ok((x, trace))
    }

    /// Backpropagates a gradient with respect to the network output.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>> {
        trace.output.ensure_same_shape(grad_output, "network grad_output")?;
        let n = self.layers.len();
        let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(n);
        let mut g = grad_output.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let activated = if k + 1 < n { &trace.inputs[k + 1] } else { &trace.output };
            g = match layer.spec.activation {
                Activation::Relu => relu_backward(activated, &g)?,
                Activation::Softmax => softmax_channels_backward(activated, &g)?,
                Activation::None => g,
            };
            let (gamma, beta) = match &trace.norms[k] {
                Some(cache) => {
                    let bg = batch_norm_grad(cache, &g)?;
                    g = bg.input;
                    (Some(bg.gamma), Some(bg.beta))
                }
                None => (None, None),
            };
            let cg = conv2d_dilated_grad(&trace.inputs[k], &layer.conv, &g)?;
            g = cg.input;
            if let Some(mask) = &trace.masks[k] {
                g.data_mut().iter_mut().zip(mask.data()).for_each(|(v, &m)| *v = *v * m);
            }
            grads.push(LayerGrads {
                weights: cg.weights,
                bias: cg.bias,
                gamma,
                beta,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Every trainable buffer: per layer weights, bias, then gamma and beta when present.
    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.conv.weights.data_mut());
            out.push(l.conv.bias.data_mut());
            if let Some(n) = &mut l.norm {
                out.push(n.gamma.data_mut());
                out.push(n.beta.data_mut());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                spec: l.spec.clone(),
                conv: ConvParams {
                    weights: l.conv.weights.cast(),
                    bias: l.conv.bias.cast(),
                    dilation: l.conv.dilation,
                },
                norm: l.norm.as_ref().map(|n| BatchNormParams {
                    gamma: n.gamma.cast(),
                    beta: n.beta.cast(),
                    running_mean: n.running_mean.cast(),
                    running_var: n.running_var.cast(),
                    momentum: U::from_f64(n.momentum.to_f64_lossy()),
                    epsilon: U::from_f64(n.epsilon.to_f64_lossy()),
                }),
            })
            .collect();
        Network {
            spec: self.spec.clone(),
            layers,
        }
    }
}

fn activate<T: Scalar>(activation: Activation, z: &Tensor<T>) -> Result<Tensor<T>> {
    match activation {
        Activation::Relu => Ok(relu(z)),
        Activation::Softmax => softmax_channels(z),
        Activation::None => Ok(z.clone()),
    }
}
