use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Row-major dense array of `f64`.
///
/// Every constructor checks that the shape matches the data length and that
/// all entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction axis for 2-D tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, one result per column.
    Rows,
    /// Reduce over columns, one result per row.
    Cols,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::Shape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let n = rows.len();
        if n == 0 {
            return Err(NumericsError::Empty("from_rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Self::matrix(n, cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, NumericsError> {
        if self.data.len() != 1 {
            return Err(NumericsError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a 2-D tensor; vectors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(NumericsError::Shape(format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(self.data.len())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Copies out selected rows of a matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self, NumericsError> {
        let (r, c) = self.dims2()?;
        if idx.is_empty() {
            return Err(NumericsError::Empty("select_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericsError::Shape(format!("row {i} out of range {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![idx.len(), c],
            data,
        })
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        check_finite(&data, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += scale * other`, in place.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::Shape(format!(
                "axpy: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        check_finite(&self.data, "axpy")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

pub(crate) fn check_finite(data: &[f64], context: &'static str) -> Result<(), NumericsError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(context))
    }
}

/// Dense matrix product `a (n×k) · b (k×m)`.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, NumericsError> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Shape(format!("matmul: {n}x{k} · {k2}x{m}")));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    check_finite(&out, "matmul")?;
    Ok(DenseTensor::from_parts_unchecked(vec![n, m], out))
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp_slice(v: &[f64]) -> Result<f64, NumericsError> {
    if v.is_empty() {
        return Err(NumericsError::Empty("logsumexp"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(NumericsError::NonFinite("logsumexp"));
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Log-sum-exp of a 2-D tensor along `axis`; vectors reduce to a scalar.
pub fn logsumexp(v: &DenseTensor, axis: Axis) -> Result<DenseTensor, NumericsError> {
    if v.shape().len() == 1 {
        return DenseTensor::scalar(logsumexp_slice(v.data())?);
    }
    let (r, c) = v.dims2()?;
    match axis {
        Axis::Cols => {
            let out = (0..r)
                .map(|i| logsumexp_slice(v.row(i)))
                .collect::<Result<Vec<_>, _>>()?;
            DenseTensor::vector(out)
        }
        Axis::Rows => {
            let out = (0..c)
                .map(|j| {
                    let col: Vec<f64> = (0..r).map(|i| v.get2(i, j)).collect();
                    logsumexp_slice(&col)
                })
                .collect::<Result<Vec<_>, _>>()?;
            DenseTensor::vector(out)
        }
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(v: &DenseTensor) -> Result<DenseTensor, NumericsError> {
    let (r, c) = v.dims2()?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = v.row(i);
        let lse = logsumexp_slice(row)?;
        out.extend(row.iter().map(|x| (x - lse).exp()));
    }
    Ok(DenseTensor::from_parts_unchecked(vec![r, c], out))
}
