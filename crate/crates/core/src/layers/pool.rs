use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{pool_out_dims, Shape, Tensor};

/// Per-channel max pooling over `f×f` windows with stride `s`.
///
/// Padding cells never win a window (they act as −∞), and `padding < size`
/// guarantees every window overlaps the input. Ties go to the first maximum
/// in row-major window order.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Per example: input shape, window maxima, and for each output element
    /// the flat input index of its maximum.
    pub(crate) cache: Vec<PoolCache>,
}

#[derive(Clone, Debug)]
pub(crate) struct PoolCache {
    input: Shape,
    input_data: Vec<f64>,
    routes: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize, padding: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config(
                "pool size and stride must be at least 1".into(),
            ));
        }
        if padding >= size {
            return Err(Error::Config(format!(
                "pool padding {padding} must be smaller than the window {size}"
            )));
        }
        Ok(MaxPool2d {
            size,
            stride,
            padding,
            cache: Vec::new(),
        })
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let [h, w, c] = *input.dims() else {
            return Err(Error::Shape(format!("pool expects {{h,w,c}}, got {input}")));
        };
        pool_out_dims(h, w, c, self.size, self.stride, self.padding)
    }

    /// Flat input index of the maximum of every output element.
    pub fn routing(&self) -> Option<&[usize]> {
        self.cache.last().map(|c| c.routes.as_slice())
    }

    pub fn routing_for(&self, example: usize) -> Option<&[usize]> {
        self.cache.get(example).map(|c| c.routes.as_slice())
    }

    fn pool_one(&self, x: &Tensor) -> Result<(Tensor, PoolCache)> {
        let out_shape = self.output_shape(x.shape())?;
        let [h, w, c] = *x.dims() else { unreachable!() };
        let [ho, wo, _] = *out_shape.dims() else {
            unreachable!()
        };
        let (f, s, p) = (self.size, self.stride, self.padding);
        let src = x.data();
        let mut out = vec![0.0; ho * wo * c];
        let mut routes = vec![0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for m in 0..f {
                        let Some(r) = (i * s + m).checked_sub(p).filter(|&r| r < h) else {
                            continue;
                        };
                        for n in 0..f {
                            let Some(q) = (j * s + n).checked_sub(p).filter(|&q| q < w) else {
                                continue;
                            };
                            let at = (r * w + q) * c + ch;
                            if src[at] > best || best_at == usize::MAX {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = (i * wo + j) * c + ch;
                    out[o] = best;
                    routes[o] = best_at;
                }
            }
        }
        Ok((
            Tensor::from_shape_vec(out_shape, out)?,
            PoolCache {
                input: x.shape().clone(),
                input_data: src.to_vec(),
                routes,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn forward_batch(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        let (out, cache) = batch
            .iter()
            .map(|x| self.pool_one(x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        self.cache = cache;
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<LayerGrads> {
        Ok(self.backward_batch(std::slice::from_ref(d_out))?.remove(0))
    }

    /// Each output error is sent back to the position that won its window;
    /// overlapping windows accumulate.
    pub fn backward_batch(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        if self.cache.is_empty() {
            return Err(missing_cache("pool"));
        }
        check_batch_len("pool", self.cache.len(), d_out.len())?;
        d_out
            .iter()
            .zip(&self.cache)
            .map(|(d, cache)| {
                if d.numel() != cache.routes.len()
                    || d.dims()[..] != self.output_shape(&cache.input)?.dims()[..]
                {
                    return Err(Error::Shape(format!(
                        "pool backward expects {}, got {}",
                        self.output_shape(&cache.input)?,
                        d.shape()
                    )));
                }
                let mut dx = vec![0.0; cache.input.numel()];
                for (&route, &g) in cache.routes.iter().zip(d.data()) {
                    dx[route] += g;
                }
                Ok(LayerGrads {
                    d_input: Tensor::from_shape_vec(cache.input.clone(), dx)?,
                    d_params: Vec::new(),
                })
            })
            .collect()
    }

    /// A window whose two largest entries are closer than `margin` is a tie
    /// for finite differences. Ties at exactly 0.0 are ignored: those are
    /// clamped values (e.g. ReLU output) that carry no gradient either way.
    pub(crate) fn degeneracy(&self, margin: f64) -> Option<String> {
        let (f, s, p) = (self.size, self.stride, self.padding);
        for (e, cache) in self.cache.iter().enumerate() {
            let [h, w, c] = *cache.input.dims() else {
                continue;
            };
            let out = self.output_shape(&cache.input).ok()?;
            let [ho, wo, _] = *out.dims() else { continue };
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let mut vals = Vec::with_capacity(f * f);
                        for m in 0..f {
                            for n in 0..f {
                                let (r, q) =
                                    ((i * s + m).checked_sub(p), (j * s + n).checked_sub(p));
                                if let (Some(r), Some(q)) = (r, q) {
                                    if r < h && q < w {
                                        vals.push(cache.input_data[(r * w + q) * c + ch]);
                                    }
                                }
                            }
                        }
                        vals.sort_by(|a, b| b.total_cmp(a));
                        if vals.len() >= 2 && vals[0] - vals[1] < margin && vals[0] != 0.0 {
                            return Some(format!(
                                "pool window ({i},{j},{ch}) of example {e} has a near tie: {} vs {}",
                                vals[0], vals[1]
                            ));
                        }
                    }
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn single_window_routes_to_max() {
        let mut pool = MaxPool2d::new(2, 2, 0).unwrap();
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(pool.forward(&x).unwrap().data(), &[4.0]);
        assert_eq!(pool.routing().unwrap(), &[3]);
        let g = pool.backward(&t(&[1, 1, 1], &[7.])).unwrap();
        assert_eq!(g.d_input.data(), &[0., 0., 0., 7.]);
        assert!(g.d_params.is_empty());
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let mut pool = MaxPool2d::new(2, 2, 0).unwrap();
        let x = Tensor::filled(&Shape::new(&[4, 4, 1]).unwrap(), 3.0);
        let y = pool.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        // top-left corner of each window
        assert_eq!(pool.routing().unwrap(), &[0, 2, 8, 10]);
    }

    #[test]
    fn padding_never_wins() {
        let mut pool = MaxPool2d::new(2, 2, 1).unwrap();
        let x = t(&[2, 2, 1], &[-1., -2., -3., -4.]);
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[-1., -2., -3., -4.]);
        assert_eq!(pool.routing().unwrap(), &[0, 1, 2, 3]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let mut pool = MaxPool2d::new(2, 1, 0).unwrap();
        let x = t(&[3, 3, 1], &[0., 0., 0., 0., 9., 0., 0., 0., 0.]);
        pool.forward(&x).unwrap();
        let g = pool.backward(&t(&[2, 2, 1], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(g.d_input.data()[4], 10.0);
        assert_eq!(g.d_input.sum(), 10.0);
    }

    #[test]
    fn errors() {
        assert!(MaxPool2d::new(2, 2, 2).is_err());
        let mut pool = MaxPool2d::new(3, 1, 0).unwrap();
        assert!(matches!(
            pool.forward(&t(&[2, 2, 1], &[1., 2., 3., 4.])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            pool.backward(&t(&[1, 1, 1], &[1.])),
            Err(Error::State(_))
        ));
    }
}
