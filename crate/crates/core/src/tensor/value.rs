//! Dense tensor values: shape + contiguous row-major f64 storage.
//!
//! Values are immutable once built and cheap to clone (shared storage).
//! Gradient bookkeeping lives in the tape, not here.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Storage width. Arithmetic always runs in f64; with `F32` every stored
/// value is rounded through f32, so all results are f32-representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatWidth {
    F64,
    F32,
}

impl Default for FloatWidth {
    fn default() -> Self {
        FloatWidth::F64
    }
}

impl FloatWidth {
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            FloatWidth::F64 => x,
            FloatWidth::F32 => x as f32 as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorValue {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} incompatible with {} elements",
            shape,
            data.len()
        );
        TensorValue {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorValue::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorValue::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        TensorValue::new(shape, vec![v; n])
    }

    /// Row-major matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        TensorValue::new(vec![r, c], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The two extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn quantize(self, width: FloatWidth) -> Self {
        match width {
            FloatWidth::F64 => self,
            FloatWidth::F32 => {
                let data = self.data.iter().map(|&x| x as f32 as f64).collect();
                TensorValue::new(self.shape, data)
            }
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

/// Right-aligned shape broadcast (dims must match or be 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Dimension(format!(
                "cannot broadcast shapes {a:?} and {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Strides for indexing `shape` as if it had been broadcast to `out`:
/// broadcast dimensions get stride 0.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}
