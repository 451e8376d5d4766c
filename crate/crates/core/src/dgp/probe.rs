//! Numerical demonstration that curved embedding spaces force
//! input-dependent conditional covariance: push a latent covariance through
//! the map's Jacobian at many points and measure how much the resulting
//! covariances spread.

use crate::error::{Error, Result};
use crate::la;
use crate::tensor::TensorValue;

#[derive(Clone, Debug)]
pub struct HeteroProbeReport {
    /// max/min ratio of Frobenius norms of J Σ Jᵀ across samples.
    pub frobenius_ratio: f64,
    /// max/min ratio of leading eigenvalues across samples.
    pub leading_eig_ratio: f64,
    pub samples_used: usize,
    pub samples_excluded: usize,
}

/// For each latent sample z, form the pushed-forward covariance
/// J(z) Σ J(z)ᵀ with a central finite-difference Jacobian, and report the
/// spread of its size across samples. Rank-deficient Jacobians are excluded.
pub fn heteroscedasticity_probe(
    h: &dyn Fn(&[f64]) -> Vec<f64>,
    z_samples: &TensorValue,
    sigma: &TensorValue,
) -> Result<HeteroProbeReport> {
    let (n, d) = z_samples.dims2()?;
    let (sr, sc) = sigma.dims2()?;
    if sr != d || sc != d {
        return Err(Error::Dimension(format!(
            "covariance {sr}x{sc} does not match latent dim {d}"
        )));
    }
    const STEP: f64 = 1e-6;
    const RANK_TOL: f64 = 1e-6;

    let mut frob_min = f64::INFINITY;
    let mut frob_max = 0.0f64;
    let mut eig_min = f64::INFINITY;
    let mut eig_max = 0.0f64;
    let mut used = 0usize;
    let mut excluded = 0usize;

    for i in 0..n {
        let z = z_samples.row(i);
        let k = h(z).len();
        // Central-difference Jacobian, k x d.
        let mut jac = vec![0.0; k * d];
        let mut zp = z.to_vec();
        for j in 0..d {
            let orig = zp[j];
            zp[j] = orig + STEP;
            let up = h(&zp);
            zp[j] = orig - STEP;
            let down = h(&zp);
            zp[j] = orig;
            for r in 0..k {
                jac[r * d + j] = (up[r] - down[r]) / (2.0 * STEP);
            }
        }
        let jac = TensorValue::new(vec![k, d], jac);
        let sv = la::singular_values(&jac);
        let full_rank = sv.len() >= d && sv[d - 1] > RANK_TOL * sv[0];
        if !full_rank {
            excluded += 1;
            continue;
        }
        // C = J Σ Jᵀ.
        let jm = la::to_dmatrix(&jac);
        let sm = la::to_dmatrix(sigma);
        let c = &jm * sm * jm.transpose();
        let frob = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eig = la::sym_eig_max(&la::from_dmatrix(&c));
        frob_min = frob_min.min(frob);
        frob_max = frob_max.max(frob);
        eig_min = eig_min.min(eig);
        eig_max = eig_max.max(eig);
        used += 1;
    }

    if used == 0 {
        return Err(Error::Degenerate(
            "all samples excluded: Jacobian rank-deficient everywhere".into(),
        ));
    }
    Ok(HeteroProbeReport {
        frobenius_ratio: frob_max / frob_min,
        leading_eig_ratio: eig_max / eig_min,
        samples_used: used,
        samples_excluded: excluded,
    })
}
