//! Gradient descent updates: plain SGD, momentum and L² weight decay, plus
//! the mini-batch gradient average.

use crate::error::{Error, Result};
use crate::layers::ParamKind;
use crate::network::{Gradients, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptConfig {
    /// Learning rate ε.
    pub lr: f64,
    /// Momentum μ in `[0, 1)`.
    pub momentum: f64,
    /// L² coefficient λ, applied to weights only.
    pub weight_decay: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptConfig {
    pub fn sgd(lr: f64) -> Self {
        OptConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config(format!(
                "lr·weight_decay = {} ≥ 1 would flip the sign of every weight",
                self.lr * self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Elementwise mean of per-example gradients, summed in list order.
pub fn average_gradients(per_example: &[Gradients]) -> Result<Gradients> {
    let (first, rest) = per_example
        .split_first()
        .ok_or_else(|| Error::Config("cannot average an empty gradient list".into()))?;
    let mut sum = first.clone();
    for g in rest {
        if !g.same_layout(&sum) {
            return Err(Error::Shape(
                "gradient collections have different layouts".into(),
            ));
        }
        for (acc, t) in sum.iter_mut().zip(g.iter()) {
            acc.add_assign(t)?;
        }
    }
    let n = per_example.len() as f64;
    for t in sum.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(sum)
}

fn check_pair(w: &Tensor, g: &Tensor) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "parameter {} and gradient {} differ",
            w.shape(),
            g.shape()
        )));
    }
    Ok(())
}

fn check_lists(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params
        .iter()
        .zip(grads)
        .try_for_each(|(w, g)| check_pair(w, g))
}

/// `w ← (1 − ελ)·w − ε·g`; with λ = 0 this is exactly `w − ε·g`.
fn decayed_update(w: &mut Tensor, g: &Tensor, lr: f64, decay: f64) {
    let keep = 1.0 - lr * decay;
    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
        *w = keep * *w - lr * g;
    }
}

/// `v ← μ·v − ε·(g + λ·w)`, `w ← w + v`.
fn momentum_update(w: &mut Tensor, g: &Tensor, v: &mut Tensor, cfg: &OptConfig, decay: f64) {
    for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let g = if decay != 0.0 { g + decay * *w } else { g };
        *v = cfg.momentum * *v - cfg.lr * g;
        *w += *v;
    }
}

/// `w ← w − ε·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_lists(params, grads)?;
    for (w, g) in params.iter_mut().zip(grads) {
        for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// `v ← μ·v − ε·g`, `w ← w + v`; with λ > 0 the decay term `λ·w` is added
/// to `g` first.
pub fn momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    cfg: &OptConfig,
) -> Result<()> {
    cfg.validate()?;
    check_lists(params, grads)?;
    check_lists(params, velocity)?;
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        momentum_update(w, g, v, cfg, cfg.weight_decay);
    }
    Ok(())
}

/// `w ← (1 − ελ)·w − ε·g`.
pub fn decayed_step(params: &mut [Tensor], grads: &[Tensor], cfg: &OptConfig) -> Result<()> {
    cfg.validate()?;
    check_lists(params, grads)?;
    for (w, g) in params.iter_mut().zip(grads) {
        decayed_update(w, g, cfg.lr, cfg.weight_decay);
    }
    Ok(())
}

/// Momentum SGD with weight decay over every parameter of a network.
///
/// Velocities start at zero. Decay touches only [`ParamKind::Weight`]
/// tensors. With zero momentum the update is the plain (decayed) step and
/// no velocity is kept.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptConfig,
    velocity: Vec<Vec<Tensor>>,
}

impl Optimizer {
    pub fn new(cfg: OptConfig, net: &Network) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            velocity: Gradients::zeros_like(net).0,
        })
    }

    pub fn velocity(&self) -> &[Vec<Tensor>] {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.0.len() != net.layers.len() || self.velocity.len() != net.layers.len() {
            return Err(Error::Shape(
                "gradient layout does not match the network".into(),
            ));
        }
        let cfg = self.cfg;
        for ((layer, g), v) in net.layers.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            let kinds = layer.param_kinds();
            let mut params = layer.params_mut();
            if params.len() != g.len() || params.len() != v.len() {
                return Err(Error::Shape(format!(
                    "{} gradients do not match its parameters",
                    layer.name()
                )));
            }
            for (((w, g), v), kind) in params.iter_mut().zip(g).zip(v.iter_mut()).zip(kinds) {
                check_pair(w, g)?;
                let decay = if *kind == ParamKind::Weight {
                    cfg.weight_decay
                } else {
                    0.0
                };
                if cfg.momentum == 0.0 {
                    decayed_update(w, g, cfg.lr, decay);
                } else {
                    momentum_update(w, g, v, &cfg, decay);
                }
            }
        }
        Ok(())
    }
}
