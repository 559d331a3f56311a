use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Row-major reshape of `{h, w, c}` into a vector of `h·w·c` values.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    pub(crate) cache: Vec<Shape>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn forward_batch(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        self.cache = batch.iter().map(|x| x.shape().clone()).collect();
        batch.iter().map(|x| x.reshape(&[x.numel()])).collect()
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<LayerGrads> {
        Ok(self.backward_batch(std::slice::from_ref(d_out))?.remove(0))
    }

    pub fn backward_batch(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        if self.cache.is_empty() {
            return Err(missing_cache("flatten"));
        }
        check_batch_len("flatten", self.cache.len(), d_out.len())?;
        d_out
            .iter()
            .zip(&self.cache)
            .map(|(d, shape)| {
                if d.dims() != [shape.numel()] {
                    return Err(Error::Shape(format!(
                        "flatten backward expects {{{}}}, got {}",
                        shape.numel(),
                        d.shape()
                    )));
                }
                Ok(LayerGrads {
                    d_input: d.reshape(shape.dims())?,
                    d_params: Vec::new(),
                })
            })
            .collect()
    }
}
