//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::TensorValue;

pub fn to_dmatrix(t: &TensorValue) -> DMatrix<f64> {
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        s => panic!("expected matrix, got shape {s:?}"),
    };
    DMatrix::from_row_slice(r, c, t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> TensorValue {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    TensorValue::new(vec![r, c], data)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(t: &TensorValue) -> Option<TensorValue> {
    let m = to_dmatrix(t);
    nalgebra::Cholesky::new(m).map(|c| from_dmatrix(&c.l()))
}

/// Condition number sigma_max / sigma_min; infinite for singular input.
pub fn condition_number(t: &TensorValue) -> f64 {
    let svd = to_dmatrix(t).svd(false, false);
    let sv = &svd.singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Singular values, descending.
pub fn singular_values(t: &TensorValue) -> Vec<f64> {
    let svd = to_dmatrix(t).svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(t: &TensorValue) -> f64 {
    let m = to_dmatrix(t);
    let eig = nalgebra::SymmetricEigen::new(m);
    eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Solve min ||X w - y||² + ridge ||w||² per target column via SVD
/// pseudoinverse with Tikhonov damping. X: [N, p], Y: [N, q] -> W: [p, q].
pub fn ridge_solve_svd(x: &TensorValue, y: &TensorValue, ridge: f64) -> Result<TensorValue> {
    let xm = to_dmatrix(x);
    let ym = to_dmatrix(y);
    let (n, p) = xm.shape();
    if n <= p {
        return Err(Error::Underdetermined(format!(
            "{n} samples for {p} features"
        )));
    }
    let svd = xm.svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Numeric("svd failed".into()))?;
    let s = &svd.singular_values;
    // W = V diag(s / (s² + ridge)) Uᵀ Y
    let uty = u.transpose() * &ym;
    let mut scaled = uty;
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        let si = s[i];
        let factor = si / (si * si + ridge);
        row *= factor;
    }
    let w = vt.transpose() * scaled;
    Ok(from_dmatrix(&w))
}

/// Matrix-vector product for a row-major square matrix.
pub fn matvec(m: &TensorValue, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    assert_eq!(c, v.len());
    let mut out = vec![0.0; r];
    for i in 0..r {
        let row = m.row(i);
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// Transposed matrix-vector product: out = Mᵀ v.
pub fn matvec_t(m: &TensorValue, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    assert_eq!(r, v.len());
    let mut out = vec![0.0; c];
    for i in 0..r {
        let row = m.row(i);
        for j in 0..c {
            out[j] += row[j] * v[i];
        }
    }
    out
}

/// Lower-triangular matvec (only the lower triangle is read).
pub fn lower_tri_matvec(l: &TensorValue, v: &[f64]) -> Vec<f64> {
    let n = l.shape()[0];
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        out[i] = row[..=i].iter().zip(&v[..=i]).map(|(a, b)| a * b).sum();
    }
    out
}

/// Invert a square matrix (small systems only).
pub fn invert(t: &TensorValue) -> Result<TensorValue> {
    let m = to_dmatrix(t);
    m.try_inverse()
        .map(|inv| from_dmatrix(&inv))
        .ok_or_else(|| Error::Numeric("matrix not invertible".into()))
}

pub fn dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
