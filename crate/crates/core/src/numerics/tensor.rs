use crate::error::{ensure_shape, invalid, DimError, Result};

/// Dense row-major `f64` array with shape metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(invalid("tensor shape must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(invalid(format!("zero-sized dimension at axis {axis} in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero tensor. Panics on an empty or zero-sized shape; use [`Tensor::new`]
    /// for untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = checked_numel(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = checked_numel(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(DimError::Shape {
                op: "reshape",
                expected: self.shape,
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Number of rows of a matrix view (all axes but the last collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure_shape("zip_map", &self.shape, &other.shape)?;
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

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        ensure_shape("axpy", &self.shape, &other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure_shape("max_abs_diff", &self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Reverses the order of the leading axis (rows of a `[L × D]` sequence).
    pub fn reverse_rows(&self) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(c).rev() {
            data.extend_from_slice(chunk);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(DimError::NonFinite(format!("{what} (flat index {i})")));
        }
        Ok(())
    }

    /// Round-trips every value through `f32`.
    pub fn to_f32_precision(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}
