//! Disentanglement scoring: Lasso importance matrices and the
//! entropy-based aggregation.

use crate::error::{Error, Result};
use crate::tensor::TensorValue;

/// z-score columns; constant columns become zero.
fn standardize(x: &TensorValue) -> TensorValue {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * d];
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
        let var: f64 = (0..n).map(|i| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for i in 0..n {
            out[i * d + j] = if std > 1e-12 {
                (x.at2(i, j) - mean) / std
            } else {
                0.0
            };
        }
    }
    TensorValue::new(vec![n, d], out)
}

/// Cyclic coordinate-descent Lasso on standardized data:
/// min (1/2N) ||y - Xw||² + lambda ||w||₁.
pub fn lasso_coordinate_descent(
    x: &TensorValue,
    y: &[f64],
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let nf = n as f64;
    // Column norms (1/N) Σ x_ij² (≈1 after standardization, but compute).
    let col_sq: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.at2(i, j).powi(2)).sum::<f64>() / nf)
        .collect();
    let mut w = vec![0.0; d];
    let mut residual: Vec<f64> = y.to_vec();
    for _ in 0..max_iter {
        let mut max_delta = 0.0f64;
        for j in 0..d {
            if col_sq[j] <= 1e-12 {
                continue;
            }
            // rho = (1/N) x_jᵀ (residual + x_j w_j)
            let mut rho = 0.0;
            for i in 0..n {
                rho += x.at2(i, j) * residual[i];
            }
            rho = rho / nf + col_sq[j] * w[j];
            let new_w = soft_threshold(rho, lambda) / col_sq[j];
            let delta = new_w - w[j];
            if delta != 0.0 {
                for i in 0..n {
                    residual[i] -= delta * x.at2(i, j);
                }
                w[j] = new_w;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
    w
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// |Lasso weights| per (embedding dim, factor): one regressor per factor on
/// standardized embeddings and factors.
pub fn importance_matrix(
    embeddings: &TensorValue,
    factors: &TensorValue,
    lambda: f64,
) -> Result<TensorValue> {
    let (n, d) = embeddings.dims2()?;
    let (nf, k) = factors.dims2()?;
    if n != nf {
        return Err(Error::Dimension("sample counts differ".into()));
    }
    if !embeddings.all_finite() || !factors.all_finite() {
        return Err(Error::Numeric("non-finite inputs to importance matrix".into()));
    }
    let xs = standardize(embeddings);
    let fs = standardize(factors);
    let mut imp = vec![0.0; d * k];
    for factor in 0..k {
        let y: Vec<f64> = (0..n).map(|i| fs.at2(i, factor)).collect();
        let w = lasso_coordinate_descent(&xs, &y, lambda, 10_000, 1e-8);
        for dim in 0..d {
            imp[dim * k + factor] = w[dim].abs();
        }
    }
    Ok(TensorValue::new(vec![d, k], imp))
}

/// Disentanglement of one importance matrix: per embedding dimension,
/// 1 - normalized entropy of its importance distribution over factors,
/// averaged with weights proportional to the dimension's importance mass.
/// Dimensions with zero mass are excluded.
pub fn disentanglement_from_importance(importance: &TensorValue) -> Result<f64> {
    let (d, k) = importance.dims2()?;
    if k < 2 {
        return Err(Error::Dimension(
            "disentanglement needs at least two factors".into(),
        ));
    }
    let log_k = (k as f64).ln();
    let mut total_mass = 0.0;
    let mut weighted = 0.0;
    for dim in 0..d {
        let row = importance.row(dim);
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        let mut entropy = 0.0;
        for &v in row {
            if v > 0.0 {
                let p = v / mass;
                entropy -= p * p.ln();
            }
        }
        let disent = 1.0 - entropy / log_k;
        weighted += mass * disent;
        total_mass += mass;
    }
    if total_mass <= 0.0 {
        return Ok(0.0);
    }
    Ok(weighted / total_mass)
}

/// Full metric: Lasso importances then entropy aggregation; in [0, 1].
pub fn dci_disentanglement(
    embeddings: &TensorValue,
    factors: &TensorValue,
    lambda: f64,
) -> Result<f64> {
    let imp = importance_matrix(embeddings, factors, lambda)?;
    disentanglement_from_importance(&imp)
}
