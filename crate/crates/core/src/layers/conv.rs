use super::{check_batch_len, missing_cache, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_dims, matmul_into, Shape, Tensor};

/// 2-D cross-correlation over volumes.
///
/// Input `{h, w, c}`, kernels `{f, f, c, k}`, one shared bias per output
/// channel, output `{H', W', k}`. No non-linearity is applied.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    /// Zero-padded inputs of the last forward pass.
    pub(crate) cache: Vec<Tensor>,
}

fn rank3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape(format!(
            "{what}: expected {{h,w,c}}, got {}",
            t.shape()
        ))),
    }
}

fn kernel_dims(kernels: &Tensor) -> Result<(usize, usize, usize)> {
    match *kernels.dims() {
        [f, f2, c, k] if f == f2 => Ok((f, c, k)),
        _ => Err(Error::Shape(format!(
            "kernels must be {{f,f,c,k}}, got {}",
            kernels.shape()
        ))),
    }
}

/// Surround the spatial axes of `{h, w, c}` with `p` zeros on every side.
pub(crate) fn pad_spatial(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Ok(x.clone());
    }
    let (h, w, c) = rank3(x, "pad")?;
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; hp * wp * c];
    let src = x.data();
    for i in 0..h {
        let dst = ((i + p) * wp + p) * c;
        out[dst..dst + w * c].copy_from_slice(&src[i * w * c..(i + 1) * w * c]);
    }
    Tensor::from_vec(&[hp, wp, c], out)
}

/// Patch matrix `[H'·W' × f·f·c]` of an already padded input; column order
/// `(m, n, c)` matches the row-major kernel layout `{f, f, c, k}`.
fn im2col(xp: &Tensor, f: usize, s: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (hp, wp, c) = rank3(xp, "im2col")?;
    let out = conv_out_dims(hp, wp, f, 1, s, 0)?;
    let (ho, wo) = (out.dims()[0], out.dims()[1]);
    let cols = f * f * c;
    let src = xp.data();
    let mut patches = vec![0.0; ho * wo * cols];
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut patches[(i * wo + j) * cols..(i * wo + j + 1) * cols];
            for m in 0..f {
                let start = ((i * s + m) * wp + j * s) * c;
                row[m * f * c..(m + 1) * f * c].copy_from_slice(&src[start..start + f * c]);
            }
        }
    }
    Ok((patches, ho, wo))
}

/// Convolution lowered to one matrix product: patches `[H'W' × ffc]` times
/// kernels `[ffc × k]`, plus the per-channel bias.
pub fn conv2d_im2col(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (_, _, c) = rank3(x, "conv")?;
    let (_, kc, k) = kernel_dims(kernels)?;
    if kc != c {
        return Err(Error::Shape(format!(
            "conv: input has {c} channels but kernels {} expect {kc}",
            kernels.shape()
        )));
    }
    if bias.dims() != [k] {
        return Err(Error::Shape(format!(
            "conv: bias {} does not match {k} kernels",
            bias.shape()
        )));
    }
    let xp = pad_spatial(x, padding)?;
    conv_padded(&xp, kernels, bias, stride)
}

fn conv_padded(xp: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (f, _, k) = kernel_dims(kernels)?;
    let (patches, ho, wo) = im2col(xp, f, stride)?;
    let mut out: Vec<f64> = bias
        .data()
        .iter()
        .copied()
        .cycle()
        .take(ho * wo * k)
        .collect();
    matmul_into(
        &patches,
        kernels.data(),
        &mut out,
        ho * wo,
        f * f * xp.dims()[2],
        k,
    );
    Tensor::from_vec(&[ho, wo, k], out)
}

/// `{f, f, c, k}` → `{f, f, k, c}`.
fn swap_kernel_channels(kernels: &Tensor) -> Result<Tensor> {
    let (f, c, k) = kernel_dims(kernels)?;
    let src = kernels.data();
    let mut out = vec![0.0; src.len()];
    for mn in 0..f * f {
        for ci in 0..c {
            for ki in 0..k {
                out[(mn * k + ki) * c + ci] = src[(mn * c + ci) * k + ki];
            }
        }
    }
    Tensor::from_vec(&[f, f, k, c], out)
}

impl Conv2d {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (_, _, k) = kernel_dims(&kernels)?;
        if bias.dims() != [k] {
            return Err(Error::Shape(format!(
                "conv: bias {} does not match {k} kernels",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be at least 1".into()));
        }
        Ok(Conv2d {
            kernels,
            bias,
            stride,
            padding,
            cache: Vec::new(),
        })
    }

    pub fn zeros(
        f: usize,
        channels: usize,
        count: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::new(
            Tensor::zeros(&Shape::new(&[f, f, channels, count])?),
            Tensor::zeros(&Shape::new(&[count])?),
            stride,
            padding,
        )
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[3]
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let [h, w, c] = *input.dims() else {
            return Err(Error::Shape(format!("conv expects {{h,w,c}}, got {input}")));
        };
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {input}",
                self.in_channels()
            )));
        }
        conv_out_dims(
            h,
            w,
            self.kernel_size(),
            self.out_channels(),
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn forward_batch(&mut self, batch: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut cache = Vec::with_capacity(batch.len());
        let mut out = Vec::with_capacity(batch.len());
        for x in batch {
            self.output_shape(x.shape())?;
            let xp = pad_spatial(x, self.padding)?;
            out.push(conv_padded(&xp, &self.kernels, &self.bias, self.stride)?);
            cache.push(xp);
        }
        self.cache = cache;
        Ok(out)
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<LayerGrads> {
        Ok(self.backward_batch(std::slice::from_ref(d_out))?.remove(0))
    }

    pub fn backward_batch(&mut self, d_out: &[Tensor]) -> Result<Vec<LayerGrads>> {
        if self.cache.is_empty() {
            return Err(missing_cache("conv"));
        }
        check_batch_len("conv", self.cache.len(), d_out.len())?;
        // Rotated kernels with input/output channels exchanged, so that the
        // input gradient is itself a stride-1 cross-correlation.
        let flipped = swap_kernel_channels(&self.kernels.rot180()?)?;
        let no_bias = Tensor::zeros(&Shape::new(&[self.in_channels()])?);
        d_out
            .iter()
            .zip(&self.cache)
            .map(|(delta, xp)| self.backward_one(delta, xp, &flipped, &no_bias))
            .collect()
    }

    fn backward_one(
        &self,
        delta: &Tensor,
        xp: &Tensor,
        flipped: &Tensor,
        no_bias: &Tensor,
    ) -> Result<LayerGrads> {
        let (f, s, p) = (self.kernel_size(), self.stride, self.padding);
        let (c, k) = (self.in_channels(), self.out_channels());
        let (hp, wp, _) = rank3(xp, "conv cache")?;
        let expected = conv_out_dims(hp, wp, f, k, s, 0)?;
        if delta.shape() != &expected {
            return Err(Error::Shape(format!(
                "conv backward expects {expected}, got {}",
                delta.shape()
            )));
        }
        let (ho, wo) = (expected.dims()[0], expected.dims()[1]);
        let d = delta.data();

        // db[k] = Σ_ij δ[i,j,k]
        let mut db = vec![0.0; k];
        for px in d.chunks_exact(k) {
            for (b, &v) in db.iter_mut().zip(px) {
                *b += v;
            }
        }

        // dK[m,n,c,k] = Σ_ij δ[i,j,k]·xp[i·s+m, j·s+n, c]  (patchesᵀ · δ)
        let (patches, _, _) = im2col(xp, f, s)?;
        let cols = f * f * c;
        let mut dk = vec![0.0; cols * k];
        for r in 0..ho * wo {
            let prow = &patches[r * cols..(r + 1) * cols];
            let drow = &d[r * k..(r + 1) * k];
            for (q, &pv) in prow.iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                for (o, &dv) in dk[q * k..(q + 1) * k].iter_mut().zip(drow) {
                    *o += pv * dv;
                }
            }
        }

        // Input gradient: dilate δ by the stride, pad by f−1, cross-correlate
        // with the rotated kernels, then crop away the zero padding.
        let (dh, dw) = ((ho - 1) * s + 1, (wo - 1) * s + 1);
        let (eh, ew) = (dh + 2 * (f - 1), dw + 2 * (f - 1));
        let mut expanded = vec![0.0; eh * ew * k];
        for i in 0..ho {
            for j in 0..wo {
                let dst = ((i * s + f - 1) * ew + j * s + f - 1) * k;
                expanded[dst..dst + k].copy_from_slice(&d[(i * wo + j) * k..(i * wo + j + 1) * k]);
            }
        }
        let expanded = Tensor::from_vec(&[eh, ew, k], expanded)?;
        let full = conv_padded(&expanded, flipped, no_bias, 1)?;
        let (fh, fw) = (full.dims()[0], full.dims()[1]);
        // Rows/cols past (fh, fw) were never covered by a window: zero gradient.
        let (h, w) = (hp - 2 * p, wp - 2 * p);
        let mut dx = vec![0.0; h * w * c];
        let fd = full.data();
        for i in 0..h {
            let pi = i + p;
            if pi >= fh {
                break;
            }
            for j in 0..w {
                let pj = j + p;
                if pj >= fw {
                    break;
                }
                let src = (pi * fw + pj) * c;
                dx[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&fd[src..src + c]);
            }
        }

        Ok(LayerGrads {
            d_input: Tensor::from_vec(&[h, w, c], dx)?,
            d_params: vec![
                Tensor::from_shape_vec(self.kernels.shape().clone(), dk)?,
                Tensor::from_vec(&[k], db)?,
            ],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d).unwrap()
    }

    #[test]
    fn ones_kernel_counts_window() {
        let x = Tensor::filled(&shape(&[3, 3, 1]), 1.0);
        let mut conv = Conv2d::new(
            Tensor::filled(&shape(&[2, 2, 1, 1]), 1.0),
            Tensor::zeros(&shape(&[1])),
            1,
            0,
        )
        .unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_passes_input() {
        let x = Tensor::randn(&shape(&[4, 5, 1]), 1.0, &mut SeededRng::new(2));
        let mut conv = Conv2d::new(
            Tensor::filled(&shape(&[1, 1, 1, 1]), 1.0),
            Tensor::zeros(&shape(&[1])),
            1,
            0,
        )
        .unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn one_by_one_backward_reduces_to_pixel_products() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(&shape(&[3, 3, 1]), 1.0, &mut rng);
        let delta = Tensor::randn(&shape(&[3, 3, 1]), 1.0, &mut rng);
        let mut conv = Conv2d::new(
            Tensor::filled(&shape(&[1, 1, 1, 1]), 1.0),
            Tensor::zeros(&shape(&[1])),
            1,
            0,
        )
        .unwrap();
        conv.forward(&x).unwrap();
        let g = conv.backward(&delta).unwrap();
        assert_eq!(g.d_input, delta);
        let expect_dk: f64 = x.hadamard(&delta).unwrap().sum();
        assert!((g.d_params[0].data()[0] - expect_dk).abs() < 1e-14);
        assert!((g.d_params[1].data()[0] - delta.sum()).abs() < 1e-14);
    }

    #[test]
    fn zero_error_zero_grads() {
        let mut rng = SeededRng::new(4);
        let mut conv = Conv2d::new(
            Tensor::randn(&shape(&[3, 3, 2, 2]), 1.0, &mut rng),
            Tensor::randn(&shape(&[2]), 1.0, &mut rng),
            2,
            1,
        )
        .unwrap();
        let x = Tensor::randn(&shape(&[6, 6, 2]), 1.0, &mut rng);
        let y = conv.forward(&x).unwrap();
        let g = conv.backward(&Tensor::zeros(y.shape())).unwrap();
        assert_eq!(g.d_input.dims(), x.dims());
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g
            .d_params
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn valid_conv_output_is_n_minus_f_plus_1() {
        let conv = Conv2d::zeros(3, 2, 4, 1, 0).unwrap();
        assert_eq!(
            conv.output_shape(&shape(&[9, 7, 2])).unwrap().dims(),
            &[7, 5, 4]
        );
    }

    #[test]
    fn shape_errors() {
        let mut conv = Conv2d::zeros(3, 2, 1, 1, 0).unwrap();
        assert!(matches!(
            conv.forward(&Tensor::zeros(&shape(&[4, 4, 1]))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv.forward(&Tensor::zeros(&shape(&[2, 2, 2]))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv.backward(&Tensor::zeros(&shape(&[1, 1, 1]))),
            Err(Error::State(_))
        ));
    }
}
