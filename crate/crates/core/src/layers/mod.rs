//! Layer types under simple-layer terminology: a convolution or dense layer
//! computes only its affine pre-activation, and non-linearities, pooling and
//! normalization are layers of their own.
//!
//! All layers work on mini-batches given as slices of per-example tensors.
//! `forward` caches whatever `backward` needs, one entry per example, and
//! `backward` returns one [`LayerGrads`] per example. Only batch
//! normalization couples the examples of a batch.

mod batchnorm;
mod conv;
mod dense;
mod flatten;
mod pool;
mod relu;

pub use batchnorm::{BatchNorm, BN_EPS, BN_STAT_MOMENTUM};
pub use conv::{conv2d_im2col, Conv2d};
pub use dense::Dense;
pub use flatten::Flatten;
pub use pool::MaxPool2d;
pub use relu::{Relu, RELU_GRAD_AT_ZERO};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Whether batch normalization uses batch statistics (and updates its running
/// averages) or the frozen running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Role of a parameter tensor; weight decay only touches `Weight`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

/// Gradients produced by one backward call for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    /// Error with respect to the layer input.
    pub d_input: Tensor,
    /// One tensor per parameter, in the layer's parameter order.
    pub d_params: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    BatchNorm(BatchNorm),
    Flatten(Flatten),
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::State(format!(
        "{layer}: backward called without a matching forward"
    ))
}

pub(crate) fn check_batch_len(layer: &str, cached: usize, given: usize) -> Result<()> {
    if cached != given {
        return Err(Error::State(format!(
            "{layer}: forward cached {cached} examples but backward got {given}"
        )));
    }
    Ok(())
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv",
            Layer::Relu(_) => "relu",
            Layer::MaxPool2d(_) => "pool",
            Layer::BatchNorm(_) => "bn",
            Layer::Flatten(_) => "flatten",
        }
    }

    pub fn forward(&mut self, batch: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
        match self {
            Layer::Dense(l) => l.forward_batch(batch),
            Layer::Conv2d(l) => l.forward_batch(batch),
            Layer::Relu(l) => Ok(l.forward_batch(batch)),
            Layer::MaxPool2d(l) => l.forward_batch(batch),
            Layer::BatchNorm(l) => match mode {
                Mode::Train => l.forward_train(batch),
                Mode::Infer => l.forward_infer_batch(batch),
            },
            Layer::Flatten(l) => l.forward_batch(batch),
        }
    }

    pub fn backward(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        match self {
            Layer::Dense(l) => l.backward_batch(d_out),
            Layer::Conv2d(l) => l.backward_batch(d_out),
            Layer::Relu(l) => l.backward_batch(d_out),
            Layer::MaxPool2d(l) => l.backward_batch(d_out),
            Layer::BatchNorm(l) => l.backward(d_out),
            Layer::Flatten(l) => l.backward_batch(d_out),
        }
    }

    /// Shape produced for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            Layer::Dense(l) => l.output_shape(input),
            Layer::Conv2d(l) => l.output_shape(input),
            Layer::Relu(_) => Ok(input.clone()),
            Layer::MaxPool2d(l) => l.output_shape(input),
            Layer::BatchNorm(l) => l.output_shape(input),
            Layer::Flatten(_) => Shape::new(&[input.numel()]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weights, &l.bias],
            Layer::Conv2d(l) => vec![&l.kernels, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Relu(_) | Layer::MaxPool2d(_) | Layer::Flatten(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weights, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.kernels, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Relu(_) | Layer::MaxPool2d(_) | Layer::Flatten(_) => Vec::new(),
        }
    }

    pub fn param_kinds(&self) -> &'static [ParamKind] {
        match self {
            Layer::Dense(_) | Layer::Conv2d(_) => &[ParamKind::Weight, ParamKind::Bias],
            Layer::BatchNorm(_) => &[ParamKind::Scale, ParamKind::Shift],
            Layer::Relu(_) | Layer::MaxPool2d(_) | Layer::Flatten(_) => &[],
        }
    }

    /// Non-learnable state that must persist with the model (running statistics).
    pub fn state(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        !self.param_kinds().is_empty()
    }

    /// Flatten only reshapes and is not counted as a layer of the network.
    pub fn counts_toward_depth(&self) -> bool {
        !matches!(self, Layer::Flatten(_))
    }

    /// Describes why the cached forward pass sits on a kink of the layer's
    /// function, where finite differences and the analytic subgradient may
    /// legitimately disagree.
    pub fn degeneracy(&self, margin: f64) -> Option<String> {
        match self {
            Layer::Relu(l) => l.degeneracy(margin),
            Layer::MaxPool2d(l) => l.degeneracy(margin),
            Layer::BatchNorm(l) => l.degeneracy(margin),
            _ => None,
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Dense(l) => l.cache.clear(),
            Layer::Conv2d(l) => l.cache.clear(),
            Layer::Relu(l) => l.cache.clear(),
            Layer::MaxPool2d(l) => l.cache.clear(),
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Flatten(l) => l.cache.clear(),
        }
    }
}
