use serde::{Deserialize, Serialize};

use super::NnetError;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnetError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NnetError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `[batch, rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates `[B, nᵢ]` tensors along the feature axis.
    pub fn concat_features(parts: &[Tensor]) -> Result<Tensor, NnetError> {
        let b = parts
            .first()
            .map(|t| t.batch())
            .ok_or_else(|| NnetError::ShapeMismatch("nothing to concatenate".into()))?;
        let widths: Vec<usize> = parts.iter().map(|t| t.len() / t.batch()).collect();
        if parts.iter().any(|t| t.batch() != b) {
            return Err(NnetError::ShapeMismatch(
                "batch sizes differ across concatenated tensors".into(),
            ));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * total);
        for i in 0..b {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::new(vec![b, total], data)
    }

    /// Splits a `[B, Σnᵢ]` tensor into `[B, nᵢ]` pieces.
    pub fn split_features(&self, widths: &[usize]) -> Result<Vec<Tensor>, NnetError> {
        let b = self.batch();
        let total: usize = widths.iter().sum();
        if total * b != self.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "cannot split {:?} into widths {widths:?}",
                self.shape
            )));
        }
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * b)).collect();
        for i in 0..b {
            let row = self.row(i);
            let mut at = 0;
            for (k, w) in widths.iter().enumerate() {
                out[k].extend_from_slice(&row[at..at + w]);
                at += w;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &w)| Tensor::new(vec![b, w], d))
            .collect()
    }

    /// Selects rows `[start, end)` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let w = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    /// Gathers rows by index along the leading axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let w = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        Tensor { shape, data }
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` for row-major matrices, where `op`
/// optionally transposes. `A` is `m×k` after `op`, `B` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
