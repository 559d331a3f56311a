use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Stability constant added to the batch variance.
pub const BN_EPS: f64 = 1e-8;
/// Rate of the exponential running averages of batch mean and variance.
pub const BN_STAT_MOMENTUM: f64 = 0.1;

/// Batch normalization over `d` independent units.
///
/// Each example is treated as a flat vector of `d` activations whatever its
/// shape (for feature maps every channel-position is its own unit), and the
/// output keeps the input shape. In training mode unit `j` is normalized with
/// the batch mean and biased variance,
/// `γ_j·(a_ij − μ_j)/sqrt(σ²_j + eps) + β_j`, and the running averages move
/// towards the batch statistics. Inference uses the running averages only,
/// so an example's output does not depend on its batch.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub stat_momentum: f64,
    /// Training batches folded into the running averages.
    pub batches_seen: u64,
    pub(crate) cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
pub(crate) enum BnCache {
    Train {
        shapes: Vec<Shape>,
        normalized: Vec<Vec<f64>>,
        inv_std: Vec<f64>,
        var: Vec<f64>,
    },
    Infer {
        shapes: Vec<Shape>,
        normalized: Vec<Vec<f64>>,
        inv_std: Vec<f64>,
    },
}

impl BatchNorm {
    /// `γ = 1`, `β = 0`, running mean 0 and running variance 1.
    pub fn new(units: usize) -> Result<Self> {
        let shape = Shape::new(&[units])?;
        Ok(BatchNorm {
            gamma: Tensor::filled(&shape, 1.0),
            beta: Tensor::zeros(&shape),
            running_mean: Tensor::zeros(&shape),
            running_var: Tensor::filled(&shape, 1.0),
            eps: BN_EPS,
            stat_momentum: BN_STAT_MOMENTUM,
            batches_seen: 0,
            cache: None,
        })
    }

    pub fn units(&self) -> usize {
        self.gamma.numel()
    }

    /// Install running statistics directly and mark them as usable.
    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        if mean.shape() != self.gamma.shape() || var.shape() != self.gamma.shape() {
            return Err(Error::Shape(format!(
                "bn: running stats {} / {} do not match {} units",
                mean.shape(),
                var.shape(),
                self.units()
            )));
        }
        if var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("bn: negative running variance".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.batches_seen = self.batches_seen.max(1);
        Ok(())
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        if input.numel() != self.units() {
            return Err(Error::Shape(format!(
                "bn over {} units cannot take input {input}",
                self.units()
            )));
        }
        Ok(input.clone())
    }

    fn check_inputs(&self, batch: &[Tensor]) -> Result<()> {
        for x in batch {
            self.output_shape(x.shape())?;
        }
        Ok(())
    }

    pub fn forward_train(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        let m = batch.len();
        if m < 2 {
            return Err(Error::Config(format!(
                "bn needs at least 2 examples per training batch, got {m}"
            )));
        }
        self.check_inputs(batch)?;
        let d = self.units();
        let inv_m = 1.0 / m as f64;
        let mut mean = vec![0.0; d];
        for x in batch {
            for (mu, &a) in mean.iter_mut().zip(x.data()) {
                *mu += a;
            }
        }
        mean.iter_mut().for_each(|mu| *mu *= inv_m);
        let mut var = vec![0.0; d];
        for x in batch {
            for ((v, &a), &mu) in var.iter_mut().zip(x.data()).zip(&mean) {
                *v += (a - mu) * (a - mu);
            }
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        let mut normalized = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for x in batch {
            let xhat: Vec<f64> = x
                .data()
                .iter()
                .zip(&mean)
                .zip(&inv_std)
                .map(|((a, mu), is)| (a - mu) * is)
                .collect();
            let y = xhat
                .iter()
                .zip(gamma)
                .zip(beta)
                .map(|((xh, g), b)| g * xh + b)
                .collect();
            out.push(Tensor::from_shape_vec(x.shape().clone(), y)?);
            normalized.push(xhat);
        }

        let rate = self.stat_momentum;
        for (r, mu) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - rate) * *r + rate * mu;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - rate) * *r + rate * v;
        }
        self.batches_seen += 1;
        self.cache = Some(BnCache::Train {
            shapes: batch.iter().map(|x| x.shape().clone()).collect(),
            normalized,
            inv_std,
            var,
        });
        Ok(out)
    }

    pub fn forward_infer(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_infer_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn forward_infer_batch(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        if self.batches_seen == 0 {
            return Err(Error::State(
                "bn: running statistics are unpopulated; train on at least one batch first".into(),
            ));
        }
        self.check_inputs(batch)?;
        let inv_std: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let (gamma, beta, mean) = (
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.data(),
        );
        let mut normalized = Vec::with_capacity(batch.len());
        let mut out = Vec::with_capacity(batch.len());
        for x in batch {
            let xhat: Vec<f64> = x
                .data()
                .iter()
                .zip(mean)
                .zip(&inv_std)
                .map(|((a, mu), is)| (a - mu) * is)
                .collect();
            let y = xhat
                .iter()
                .zip(gamma)
                .zip(beta)
                .map(|((xh, g), b)| g * xh + b)
                .collect();
            out.push(Tensor::from_shape_vec(x.shape().clone(), y)?);
            normalized.push(xhat);
        }
        self.cache = Some(BnCache::Infer {
            shapes: batch.iter().map(|x| x.shape().clone()).collect(),
            normalized,
            inv_std,
        });
        Ok(out)
    }

    /// Per-example gradients. After a training forward the input errors are
    /// coupled through the batch mean and variance:
    /// `dx_i = (γ/(m·σ))·(m·dy_i − Σ_k dy_k − x̂_i·Σ_k dy_k·x̂_k)`.
    /// The parameter contributions `dγ = dy ⊙ x̂`, `dβ = dy` are reported per
    /// example; their sum over the batch is the batch gradient.
    pub fn backward(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("bn"))?;
        let gamma = self.gamma.data();
        let d = self.units();
        let (shapes, normalized, inv_std) = match cache {
            BnCache::Train {
                shapes,
                normalized,
                inv_std,
                ..
            }
            | BnCache::Infer {
                shapes,
                normalized,
                inv_std,
            } => (shapes, normalized, inv_std),
        };
        check_batch_len("bn", shapes.len(), d_out.len())?;
        for (dy, shape) in d_out.iter().zip(shapes) {
            if dy.shape() != shape {
                return Err(Error::Shape(format!(
                    "bn backward expects {shape}, got {}",
                    dy.shape()
                )));
            }
        }

        let d_inputs: Vec<Vec<f64>> = match cache {
            BnCache::Infer { .. } => d_out
                .iter()
                .map(|dy| {
                    dy.data()
                        .iter()
                        .zip(gamma)
                        .zip(inv_std)
                        .map(|((g, ga), is)| g * ga * is)
                        .collect()
                })
                .collect(),
            BnCache::Train { .. } => {
                let m = d_out.len() as f64;
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                for (dy, xhat) in d_out.iter().zip(normalized) {
                    for j in 0..d {
                        let dxh = dy.data()[j] * gamma[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[j];
                    }
                }
                d_out
                    .iter()
                    .zip(normalized)
                    .map(|(dy, xhat)| {
                        (0..d)
                            .map(|j| {
                                let dxh = dy.data()[j] * gamma[j];
                                inv_std[j] / m
                                    * (m * dxh - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j])
                            })
                            .collect()
                    })
                    .collect()
            }
        };

        d_out
            .iter()
            .zip(normalized)
            .zip(d_inputs)
            .zip(shapes)
            .map(|(((dy, xhat), dx), shape)| {
                let dgamma: Vec<f64> = dy.data().iter().zip(xhat).map(|(g, x)| g * x).collect();
                Ok(LayerGrads {
                    d_input: Tensor::from_shape_vec(shape.clone(), dx)?,
                    d_params: vec![
                        Tensor::from_vec(&[d], dgamma)?,
                        Tensor::from_vec(&[d], dy.data().to_vec())?,
                    ],
                })
            })
            .collect()
    }

    /// Near-zero batch variance, or a unit whose batch values all coincide
    /// within `margin` except one: normalizing then fixes the outputs no
    /// matter how the odd value moves, as with a single ReLU survivor.
    pub(crate) fn degeneracy(&self, margin: f64) -> Option<String> {
        let Some(BnCache::Train {
            var,
            normalized,
            inv_std,
            ..
        }) = &self.cache
        else {
            return None;
        };
        if let Some(j) = var.iter().position(|&v| v < margin) {
            return Some(format!(
                "bn unit {j} has near-zero batch variance {}",
                var[j]
            ));
        }
        if normalized.len() < 3 {
            return None;
        }
        for (j, is) in inv_std.iter().enumerate() {
            let mut col: Vec<f64> = normalized.iter().map(|x| x[j] / is).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len();
            if col[m - 2] - col[0] < margin || col[m - 1] - col[1] < margin {
                return Some(format!("bn unit {j}: all but one batch value coincide"));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x).unwrap()
    }

    #[test]
    fn two_point_batch_maps_to_plus_minus_one() {
        let mut bn = BatchNorm::new(1).unwrap();
        let out = bn.forward_train(&[v(&[1.]), v(&[3.])]).unwrap();
        assert!((out[0].data()[0] + 1.0).abs() <= 1e-4);
        assert!((out[1].data()[0] - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn gamma_beta_can_recover_inputs() {
        let mut rng = SeededRng::new(8);
        let batch: Vec<Tensor> = (0..6)
            .map(|_| Tensor::randn(&Shape::new(&[3]).unwrap(), 2.0, &mut rng))
            .collect();
        let mut bn = BatchNorm::new(3).unwrap();
        let m = batch.len() as f64;
        let mean: Vec<f64> = (0..3)
            .map(|j| batch.iter().map(|x| x.data()[j]).sum::<f64>() / m)
            .collect();
        let std: Vec<f64> = (0..3)
            .map(|j| {
                (batch
                    .iter()
                    .map(|x| (x.data()[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / m)
                    .sqrt()
            })
            .collect();
        bn.gamma = v(&std);
        bn.beta = v(&mean);
        let out = bn.forward_train(&batch).unwrap();
        for (o, x) in out.iter().zip(&batch) {
            assert!(o.max_abs_diff(x).unwrap() < 1e-6);
        }
    }

    #[test]
    fn train_outputs_are_standardized() {
        let mut rng = SeededRng::new(21);
        let batch: Vec<Tensor> = (0..8)
            .map(|_| Tensor::randn(&Shape::new(&[5]).unwrap(), 3.0, &mut rng).map(|x| x + 1.5))
            .collect();
        let mut bn = BatchNorm::new(5).unwrap();
        let out = bn.forward_train(&batch).unwrap();
        for j in 0..5 {
            let mean = out.iter().map(|o| o.data()[j]).sum::<f64>() / 8.0;
            let var = out
                .iter()
                .map(|o| (o.data()[j] - mean).powi(2))
                .sum::<f64>()
                / 8.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn running_stats_follow_exponential_average() {
        let mut bn = BatchNorm::new(1).unwrap();
        bn.forward_train(&[v(&[1.]), v(&[3.])]).unwrap();
        // mean 2, biased var 1
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(bn.batches_seen, 1);
    }

    #[test]
    fn single_example_batch_is_config_error() {
        let mut bn = BatchNorm::new(1).unwrap();
        assert!(matches!(
            bn.forward_train(&[v(&[1.])]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inference_examples() {
        let mut bn = BatchNorm::new(2).unwrap();
        assert!(matches!(
            bn.forward_infer(&v(&[1., 2.])),
            Err(Error::State(_))
        ));
        bn.set_running_stats(v(&[0., 0.]), v(&[1., 1.])).unwrap();
        let y = bn.forward_infer(&v(&[1.5, -2.])).unwrap();
        assert!(y.max_abs_diff(&v(&[1.5, -2.])).unwrap() < 1e-7);

        bn.set_running_stats(v(&[0.3, -4.]), v(&[2., 0.5])).unwrap();
        bn.beta = v(&[0.25, 0.75]);
        assert_eq!(bn.forward_infer(&v(&[0.3, -4.])).unwrap(), v(&[0.25, 0.75]));
    }

    #[test]
    fn backward_examples() {
        let mut bn = BatchNorm::new(1).unwrap();
        bn.forward_train(&[v(&[1.]), v(&[3.])]).unwrap();
        let g = bn.backward(&[v(&[0.]), v(&[0.])]).unwrap();
        assert!(g
            .iter()
            .all(|g| g.d_input.data()[0] == 0.0 && g.d_params.iter().all(|p| p.data()[0] == 0.0)));

        let g = bn.backward(&[v(&[1.]), v(&[1.])]).unwrap();
        let dbeta: f64 = g.iter().map(|g| g.d_params[1].data()[0]).sum();
        let dgamma: f64 = g.iter().map(|g| g.d_params[0].data()[0]).sum();
        assert_eq!(dbeta, 2.0);
        assert!(dgamma.abs() < 1e-12);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut bn = BatchNorm::new(1).unwrap();
        assert!(matches!(bn.backward(&[v(&[1.])]), Err(Error::State(_))));
    }

    #[test]
    fn lone_survivor_is_degenerate() {
        let mut bn = BatchNorm::new(2).unwrap();
        bn.forward_train(&[v(&[0., 1.]), v(&[0., 2.]), v(&[2., 4.])])
            .unwrap();
        assert!(bn.degeneracy(1e-3).unwrap().contains("unit 0"));
        bn.forward_train(&[v(&[0.5, 1.]), v(&[0., 2.]), v(&[2., 4.])])
            .unwrap();
        assert_eq!(bn.degeneracy(1e-3), None);
    }
}
