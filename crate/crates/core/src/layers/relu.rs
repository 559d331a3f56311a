use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value used for `g'(0)`: a pre-activation of exactly zero passes no gradient.
pub const RELU_GRAD_AT_ZERO: f64 = 0.0;

/// `g(z) = max(0, z)`, elementwise.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    pub(crate) cache: Vec<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, z: &Tensor) -> Tensor {
        self.forward_batch(std::slice::from_ref(z)).remove(0)
    }

    pub fn forward_batch(&mut self, batch: &[Tensor]) -> Vec<Tensor> {
        self.cache = batch.to_vec();
        batch.iter().map(|z| z.map(|v| v.max(0.0))).collect()
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<LayerGrads> {
        Ok(self.backward_batch(std::slice::from_ref(d_out))?.remove(0))
    }

    pub fn backward_batch(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        if self.cache.is_empty() {
            return Err(missing_cache("relu"));
        }
        check_batch_len("relu", self.cache.len(), d_out.len())?;
        d_out
            .iter()
            .zip(&self.cache)
            .map(|(d, z)| {
                let d_input = d
                    .zip_map(z, |d, z| {
                        if z > 0.0 {
                            d
                        } else if z == 0.0 {
                            d * RELU_GRAD_AT_ZERO
                        } else {
                            0.0
                        }
                    })
                    .map_err(|e| Error::Shape(format!("relu backward: {e}")))?;
                Ok(LayerGrads {
                    d_input,
                    d_params: Vec::new(),
                })
            })
            .collect()
    }

    pub(crate) fn degeneracy(&self, margin: f64) -> Option<String> {
        for (n, z) in self.cache.iter().enumerate() {
            if let Some(i) = z.data().iter().position(|v| v.abs() < margin) {
                return Some(format!(
                    "relu pre-activation {} within {margin:e} of the kink (example {n}, index {i})",
                    z.data()[i]
                ));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut r = Relu::new();
        assert_eq!(r.forward(&v(&[-1., 0., 2.])), v(&[0., 0., 2.]));
        assert_eq!(r.forward(&v(&[-3., -0.5])), v(&[0., 0.]));
        assert_eq!(r.forward(&v(&[0.5, 3.])), v(&[0.5, 3.]));
    }

    #[test]
    fn backward_masks() {
        let mut r = Relu::new();
        r.forward(&v(&[-1., 2.]));
        assert_eq!(r.backward(&v(&[5., 5.])).unwrap().d_input, v(&[0., 5.]));
        r.forward(&v(&[0., 0.]));
        assert_eq!(r.backward(&v(&[3., -2.])).unwrap().d_input, v(&[0., 0.]));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        assert!(matches!(
            Relu::new().backward(&v(&[1.])),
            Err(Error::State(_))
        ));
    }
}
