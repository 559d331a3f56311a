use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fully-connected layer computing `z = W·x + b`.
///
/// `weights` is `{m_out, m_in}` with `weights[j][k]` connecting input `k` to
/// output `j`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
    pub(crate) cache: Vec<Tensor>,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        match (weights.dims(), bias.dims()) {
            ([rows, _], [len]) if rows == len => Ok(Dense {
                weights,
                bias,
                cache: Vec::new(),
            }),
            _ => Err(Error::Shape(format!(
                "dense: weights {} and bias {} are incompatible",
                weights.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&Shape::new(&[outputs, inputs])?),
            Tensor::zeros(&Shape::new(&[outputs])?),
        )
    }

    pub fn inputs(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        if input.dims() != [self.inputs()] {
            return Err(Error::Shape(format!(
                "dense expects input {{{}}}, got {input}",
                self.inputs()
            )));
        }
        Shape::new(&[self.outputs()])
    }

    fn affine(&self, x: &Tensor) -> Result<Tensor> {
        self.output_shape(x.shape())?;
        let (m_out, m_in) = (self.outputs(), self.inputs());
        let w = self.weights.data();
        let mut z = self.bias.data().to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &w[j * m_in..(j + 1) * m_in];
            *zj += row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Tensor::from_vec(&[m_out], z)
    }

    /// Single-example forward; replaces the cache.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.forward_batch(std::slice::from_ref(x))?;
        Ok(out.remove(0))
    }

    pub fn forward_batch(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        let out = batch
            .iter()
            .map(|x| self.affine(x))
            .collect::<Result<Vec<_>>>()?;
        self.cache = batch.to_vec();
        Ok(out)
    }

    /// `d_out` is the error with respect to this layer's pre-activation.
    pub fn backward(&mut self, d_out: &Tensor) -> Result<LayerGrads> {
        let mut g = self.backward_batch(std::slice::from_ref(d_out))?;
        Ok(g.remove(0))
    }

    pub fn backward_batch(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        if self.cache.is_empty() {
            return Err(missing_cache("dense"));
        }
        check_batch_len("dense", self.cache.len(), d_out.len())?;
        let (m_out, m_in) = (self.outputs(), self.inputs());
        let w = self.weights.data();
        d_out
            .iter()
            .zip(&self.cache)
            .map(|(delta, x)| {
                if delta.dims() != [m_out] {
                    return Err(Error::Shape(format!(
                        "dense backward expects {{{m_out}}}, got {}",
                        delta.shape()
                    )));
                }
                // Wᵀ·δ
                let mut d_input = vec![0.0; m_in];
                for (j, &dj) in delta.data().iter().enumerate() {
                    let row = &w[j * m_in..(j + 1) * m_in];
                    for (di, &wjk) in d_input.iter_mut().zip(row) {
                        *di += wjk * dj;
                    }
                }
                Ok(LayerGrads {
                    d_input: Tensor::from_vec(&[m_in], d_input)?,
                    d_params: vec![Tensor::outer(delta, x)?, delta.clone()],
                })
            })
            .collect()
    }
}
