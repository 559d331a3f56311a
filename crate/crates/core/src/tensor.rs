//! Dense row-major `f64` tensors and the shape arithmetic used by the layers.
//!
//! Activations are laid out `{h, w, c}` and convolution kernels `{f, f, c, k}`.
//! There is no batch axis; a mini-batch is a slice of tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Ordered list of positive extents, rank 1 to 4.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 4;

    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > Self::MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be between 1 and {}, got {:?}",
                Self::MAX_RANK,
                dims
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major flat offset of a multi-index.
    pub fn flatten_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::Shape(format!(
                "index {index:?} has rank {} but shape {self} has rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.0) {
            if i >= d {
                return Err(Error::Shape(format!(
                    "index {index:?} out of bounds for {self}"
                )));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    /// Inverse of [`Shape::flatten_index`].
    pub fn unflatten_index(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.numel() {
            return Err(Error::Shape(format!(
                "flat index {flat} out of bounds for {self}"
            )));
        }
        let mut index = vec![0; self.rank()];
        for (slot, &d) in index.iter_mut().zip(&self.0).rev() {
            *slot = flat % d;
            flat /= d;
        }
        Ok(index)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &Shape) -> Self {
        Tensor {
            shape: shape.clone(),
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: &Shape, value: f64) -> Self {
        Tensor {
            shape: shape.clone(),
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape_vec(shape, data)
    }

    pub fn from_shape_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(&[values.len()], values.to_vec())
    }

    /// 2-D tensor from equal-length rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    /// I.i.d. normal entries with mean 0 and the given standard deviation.
    pub fn randn(shape: &Shape, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..shape.numel()).map(|_| std * rng.normal()).collect();
        Tensor {
            shape: shape.clone(),
            data,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.flatten_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.shape.flatten_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value at flat index {i}"
            ))),
        }
    }

    fn ensure_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {} and {} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.ensure_same_shape(other, "hadamard")?;
        self.zip_map(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Inner product over all elements; shapes must match exactly.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn matrix_dims(&self, op: &str) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "{op}: expected a matrix, got {}",
                self.shape
            ))),
        }
    }

    /// `c[i,j] = Σ_k a[i,k]·b[k,j]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("matmul")?;
        let (n2, p) = other.matrix_dims("matmul")?;
        if n != n2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions of {} and {} disagree",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * p];
        matmul_into(&self.data, &other.data, &mut out, m, n, p);
        Tensor::from_vec(&[m, p], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// Outer product of two vectors, `out[i,j] = a[i]·b[j]`.
    pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.rank() != 1 || b.shape.rank() != 1 {
            return Err(Error::Shape(format!(
                "outer: expected vectors, got {} and {}",
                a.shape, b.shape
            )));
        }
        let data = a
            .data
            .iter()
            .flat_map(|&x| b.data.iter().map(move |&y| x * y))
            .collect();
        Tensor::from_vec(&[a.numel(), b.numel()], data)
    }

    /// Reverse both leading (spatial) axes of every trailing slice.
    pub fn rot180(&self) -> Result<Tensor> {
        let dims = self.dims();
        if dims.len() < 2 {
            return Err(Error::Shape(format!(
                "rot180 needs at least two spatial axes, got {}",
                self.shape
            )));
        }
        let (rows, cols) = (dims[0], dims[1]);
        let inner: usize = dims[2..].iter().product();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            for c in 0..cols {
                let src = (r * cols + c) * inner;
                let dst = ((rows - 1 - r) * cols + (cols - 1 - c)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Row-major `out[m×p] += a[m×n] · b[n×p]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

fn window_out_extent(extent: usize, f: usize, s: usize, p: usize, axis: &str) -> Result<usize> {
    if s == 0 {
        return Err(Error::Shape("stride must be at least 1".into()));
    }
    if f == 0 {
        return Err(Error::Shape("window size must be at least 1".into()));
    }
    let padded = extent + 2 * p;
    if f > padded {
        return Err(Error::Shape(format!(
            "window {f} exceeds padded {axis} extent {padded} ({extent} + 2·{p})"
        )));
    }
    Ok((padded - f) / s + 1)
}

/// Output dimensions `{W', H', k}` of a convolution with `k` kernels of size
/// `f×f`, stride `s` and zero padding `p`: `⌊(w + 2p − f)/s⌋ + 1`.
pub fn conv_out_dims(w: usize, h: usize, f: usize, k: usize, s: usize, p: usize) -> Result<Shape> {
    let w_out = window_out_extent(w, f, s, p, "width")?;
    let h_out = window_out_extent(h, f, s, p, "height")?;
    Shape::new(&[w_out, h_out, k])
}

/// Output dimensions `{W', H', c}` of a pooling window; channels pass through.
pub fn pool_out_dims(w: usize, h: usize, c: usize, f: usize, s: usize, p: usize) -> Result<Shape> {
    let w_out = window_out_extent(w, f, s, p, "width")?;
    let h_out = window_out_extent(h, f, s, p, "height")?;
    Shape::new(&[w_out, h_out, c])
}
