//! Dense row-major tensors.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense n-dimensional array stored in row-major order.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
/// Gradients live on the [`crate::tape::Tape`], not on the tensor.
///
/// Storage is shared between clones and copied on the first write, so
/// cloning or reshaping a tensor does not touch its elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

fn validate_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "extents must be positive and rank at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = validate_shape("tensor", shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("holds {} elements, data has {}", n, data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = validate_shape("tensor", shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// Builds a tensor from nested `f64` rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape {
                op: "from_rows",
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&x| T::from_f64_lossy(x)))
            .collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64_lossy(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Element at a full multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {i} out of range for extent {e}");
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Same data, new shape with equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n = validate_shape("reshape", shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, x| if x.abs() > m { x.abs() } else { m })
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as `(len / cols) × cols`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                    .collect(),
            ),
        }
    }
}

/// Boolean mask over the trailing `rows × cols` of an attention logit tensor.
///
/// `true` marks an allowed position. The mask carries its own batch count;
/// a batch count of 1 broadcasts over any number of logit batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if batch * rows * cols != allowed.len() || batch == 0 || rows == 0 || cols == 0 {
            return Err(TensorError::InvalidShape {
                op: "mask",
                shape: vec![batch, rows, cols],
                reason: format!("mask data has {} entries", allowed.len()),
            });
        }
        Ok(Self {
            batch,
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular-inclusive mask: query `i` may see keys `0..=i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|x| x % len <= x / len).collect();
        Self {
            batch: 1,
            rows: len,
            cols: len,
            allowed,
        }
    }

    /// Key-padding mask combined with an optional causal constraint.
    ///
    /// `key_valid` is `batch × cols`; queries span `rows` positions.
    pub fn from_keys(
        batch: usize,
        rows: usize,
        cols: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Result<Self> {
        if key_valid.len() != batch * cols {
            return Err(TensorError::ShapeMismatch {
                op: "mask",
                lhs: vec![batch, cols],
                rhs: vec![key_valid.len()],
            });
        }
        let mut allowed = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for q in 0..rows {
                for k in 0..cols {
                    allowed.push(key_valid[b * cols + k] && (!causal || k <= q));
                }
            }
        }
        Self::new(batch, rows, cols, allowed)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    /// Allowed flags for flattened logit row `row` (of `rows` per batch).
    pub(crate) fn row(&self, row: usize) -> &[bool] {
        let per = self.rows;
        let b = (row / per) % self.batch;
        let r = row % per;
        let start = (b * self.rows + r) * self.cols;
        &self.allowed[start..start + self.cols]
    }
}
