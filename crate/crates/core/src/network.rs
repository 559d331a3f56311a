//! A network is a chain of layers applied in order,
//! `f̂(x) = f_ℓ(… f_2(f_1(x)))`, validated against a declared input shape.

use crate::arch::{ArchSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::init::kaiming_init;
use crate::layers::{BatchNorm, Conv2d, Dense, Flatten, Layer, MaxPool2d, Mode, ParamKind, Relu};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

/// Parameter gradients of a whole network, `grads[layer][param]`, mirroring
/// [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<Tensor>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(
            net.layers
                .iter()
                .map(|l| {
                    l.params()
                        .iter()
                        .map(|p| Tensor::zeros(p.shape()))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.0.iter_mut().flatten()
    }

    pub fn same_layout(&self, other: &Gradients) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
            })
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    input_shape: Shape,
    shapes: Vec<Shape>,
    arch: Option<ArchSpec>,
}

fn layer_from_spec(spec: &LayerSpec, input: &Shape) -> Result<Layer> {
    Ok(match *spec {
        LayerSpec::Conv { f, k, s, p } => {
            let [_, _, c] = *input.dims() else {
                return Err(Error::Shape(format!("conv expects {{h,w,c}}, got {input}")));
            };
            Layer::Conv2d(Conv2d::zeros(f, c, k, s, p)?)
        }
        LayerSpec::Relu => Layer::Relu(Relu::new()),
        LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(input.numel())?),
        LayerSpec::Pool { f, s, p } => {
            Layer::MaxPool2d(MaxPool2d::new(f, s, p).map_err(|e| Error::Shape(e.to_string()))?)
        }
        LayerSpec::Flatten => Layer::Flatten(Flatten::new()),
        LayerSpec::Dense { n } => {
            let [m_in] = *input.dims() else {
                return Err(Error::Shape(format!(
                    "dense expects a flat input, got {input} (add flatten)"
                )));
            };
            Layer::Dense(Dense::zeros(m_in, n)?)
        }
    })
}

impl Network {
    /// Build from an architecture description with Kaiming-initialized weights.
    pub fn build(arch: &ArchSpec, input_shape: &Shape, rng: &mut SeededRng) -> Result<Self> {
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut shape = input_shape.clone();
        for (i, spec) in arch.layers.iter().enumerate() {
            let at = |e: Error| e.context(format_args!("layer {i} ({spec})"));
            let mut layer = layer_from_spec(spec, &shape).map_err(at)?;
            shape = layer.output_shape(&shape).map_err(at)?;
            kaiming_init(&mut layer, rng);
            layers.push(layer);
        }
        let mut net = Self::from_layers(layers, input_shape.clone())?;
        net.arch = Some(arch.clone());
        Ok(net)
    }

    /// Wrap explicit layers, checking that adjacent shapes agree.
    pub fn from_layers(layers: Vec<Layer>, input_shape: Shape) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| e.context(format_args!("layer {i} ({})", layer.name())))?;
            shapes.push(next);
        }
        Ok(Network {
            layers,
            input_shape,
            shapes,
            arch: None,
        })
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    /// Architecture description recovered from the layers themselves.
    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            layers: self.layers.iter().map(LayerSpec::of).collect(),
        }
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        self.shapes.last().unwrap()
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Layer count under simple-layer terminology (flatten is a reshape, not a layer).
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.counts_toward_depth())
            .count()
    }

    /// Number of layers carrying learnable parameters.
    pub fn learnable_depth(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn params(&self) -> Vec<Vec<&Tensor>> {
        self.layers.iter().map(|l| l.params()).collect()
    }

    pub fn param_kinds(&self) -> Vec<&'static [ParamKind]> {
        self.layers.iter().map(|l| l.param_kinds()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.numel())
            .sum()
    }

    /// `Σ ‖W‖²` over weight tensors (biases and batchnorm scales excluded).
    pub fn weight_norm_squared(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().zip(l.param_kinds()))
            .filter(|(_, k)| **k == ParamKind::Weight)
            .map(|(p, _)| p.sum_squares())
            .sum()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_batch(std::slice::from_ref(x), mode)?.remove(0))
    }

    /// Run a mini-batch through every layer, leaving caches for `backward_batch`.
    pub fn forward_batch(&mut self, batch: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
        if batch.is_empty() {
            return Err(Error::Config("forward on an empty batch".into()));
        }
        for (n, x) in batch.iter().enumerate() {
            if x.shape() != &self.input_shape {
                return Err(Error::Shape(format!(
                    "example {n}: network expects input {}, got {}",
                    self.input_shape,
                    x.shape()
                )));
            }
        }
        let mut acts = batch.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            acts = layer
                .forward(&acts, mode)
                .map_err(|e| e.context(format_args!("layer {i} ({})", layer.name())))?;
        }
        Ok(acts)
    }

    /// Inference-mode forward pass for one example.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, Mode::Infer)
    }

    pub fn backward(&mut self, d_loss: &Tensor) -> Result<Gradients> {
        Ok(self.backward_batch(std::slice::from_ref(d_loss))?.remove(0))
    }

    /// Walk the layers in reverse from the per-example loss errors and return
    /// each example's parameter gradients. Batch normalization mixes the
    /// examples' input errors; everything else is per example.
    pub fn backward_batch(&mut self, d_loss: &[Tensor]) -> Result<Vec<Gradients>> {
        Ok(self.backward_batch_with_input(d_loss)?.1)
    }

    /// As [`Network::backward_batch`], also returning `∂J/∂x` for each
    /// example's network input.
    pub fn backward_batch_with_input(
        &mut self,
        d_loss: &[Tensor],
    ) -> Result<(Vec<Tensor>, Vec<Gradients>)> {
        let m = d_loss.len();
        let mut per_layer: Vec<Vec<Vec<Tensor>>> = Vec::with_capacity(self.layers.len());
        let mut deltas = d_loss.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let grads = layer
                .backward(&deltas)
                .map_err(|e| e.context(format_args!("layer {i} ({})", layer.name())))?;
            let (d_inputs, d_params): (Vec<_>, Vec<_>) =
                grads.into_iter().map(|g| (g.d_input, g.d_params)).unzip();
            deltas = d_inputs;
            per_layer.push(d_params);
        }
        per_layer.reverse();
        let mut out: Vec<Gradients> = (0..m)
            .map(|_| Gradients(Vec::with_capacity(self.layers.len())))
            .collect();
        for layer_grads in per_layer {
            for (g, params) in out.iter_mut().zip(layer_grads) {
                g.0.push(params);
            }
        }
        Ok((deltas, out))
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }
}
