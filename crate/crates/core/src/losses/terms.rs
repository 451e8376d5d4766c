//! Loss building blocks: weighted squared-distance similarities, the
//! contrastive objective, the distillation objective, and the two
//! regularizers.

use crate::error::{Error, Result};
use crate::models::GaussianParams;
use crate::tensor::{RedKind, Tape, Tensor};

/// Pairwise similarity matrix s[i][j] = -Σ_d w[i][d] (a[i][d] - b[j][d])²,
/// where `weights` broadcasts per row: [1,1] (scalar), [1,d] (diagonal) or
/// [K,d] (per-sample conditional).
pub fn weighted_sqdist_matrix(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let (k, _d) = a.value.dims2()?;
    let a2 = tape.square(a);
    let b2 = tape.square(b);
    // u_i = Σ_d w_id a_id²  -> [K,1]
    let wa2 = tape.mul(weights, &a2)?;
    let u = tape.reduce(RedKind::Sum, &wa2, Some(1))?;
    // w_ij = Σ_d w_id a_id b_jd  -> [K,K]
    let wa = tape.mul(weights, a)?;
    let bt = tape.transpose(b)?;
    let cross = tape.matmul(&wa, &bt)?;
    // v_ij = Σ_d w_id b_jd²  -> [K,K] (conditional) or [1,K] (shared).
    let v = if weights.shape()[0] == k {
        let b2t = tape.transpose(&b2)?;
        tape.matmul(weights, &b2t)?
    } else {
        let wb2 = tape.mul(weights, &b2)?;
        let col = tape.reduce(RedKind::Sum, &wb2, Some(1))?;
        tape.transpose(&col)?
    };
    let two_cross = tape.scale(&cross, 2.0);
    let uv = tape.add(&u, &v)?;
    let quad = tape.sub(&uv, &two_cross)?;
    Ok(tape.neg(&quad))
}

/// Similarity restricted to aligned pairs: s_i = -Σ_d w_id (a_id - b_id)²,
/// as a [K,1] column.
pub fn positive_pair_similarity(
    tape: &mut Tape,
    a: &Tensor,
    b: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(&diff);
    let wsq = tape.mul(weights, &sq)?;
    let s = tape.reduce(RedKind::Sum, &wsq, Some(1))?;
    Ok(tape.neg(&s))
}

/// Contrastive loss over a K x K similarity matrix, with the 1/K normalizer
/// inside the log: mean_i [ logsumexp_j(s_ij/τ) - s_ii/τ ] - ln K.
/// Zero for a constant matrix; bounded below by -ln K.
pub fn infonce_from_sim(tape: &mut Tape, sim: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (k, k2) = sim.value.dims2()?;
    if k != k2 {
        return Err(Error::Dimension("similarity matrix must be square".into()));
    }
    let logits = tape.scale(sim, 1.0 / tau);
    let diag = tape.take_diag(&logits)?;
    let lse = tape.logsumexp(&logits, Some(1))?;
    let per_row = tape.sub(&lse, &diag)?;
    let mean = tape.mean_all(&per_row)?;
    Ok(tape.shift(&mean, -((k as f64).ln())))
}

/// Mean squared Euclidean distance per pair of rows.
pub fn mean_squared_distance(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(&diff);
    let per_sample = tape.reduce(RedKind::Sum, &sq, Some(1))?;
    tape.mean_all(&per_sample)
}

/// KL(q ‖ p) between factorized Gaussians, per sample:
/// Σ_d ½ (e^{lq-lp} + (μp-μq)²/e^{lp} - 1 + lp - lq), a [B,1] column.
pub fn kl_factorized_gaussians(
    tape: &mut Tape,
    q: &GaussianParams,
    p: &GaussianParams,
) -> Result<Tensor> {
    let dlv = tape.sub(&q.logvar, &p.logvar)?;
    let var_ratio = tape.exp(&dlv);
    let dmean = tape.sub(&p.mean, &q.mean)?;
    let dmean_sq = tape.square(&dmean);
    let p_var = tape.exp(&p.logvar);
    let mahal = tape.div(&dmean_sq, &p_var)?;
    let neg_dlv = tape.neg(&dlv); // lp - lq
    let s1 = tape.add(&var_ratio, &mahal)?;
    let s2 = tape.add(&s1, &neg_dlv)?;
    let s3 = tape.shift(&s2, -1.0);
    let half = tape.scale(&s3, 0.5);
    tape.reduce(RedKind::Sum, &half, Some(1))
}

/// Expected number of active gates: batch mean of Σ_i π_i.
pub fn expected_l0(tape: &mut Tape, pi: &Tensor) -> Result<Tensor> {
    let per_sample = tape.reduce(RedKind::Sum, pi, Some(1))?;
    tape.mean_all(&per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedKey;
    use crate::tensor::{FloatWidth, TensorValue};

    #[test]
    fn identical_embeddings_give_zero_similarity() {
        let mut tape = Tape::new(FloatWidth::F64);
        let a = tape.constant(TensorValue::new(vec![2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 2.0]));
        let lam = tape.constant(TensorValue::scalar(1.7));
        let s = positive_pair_similarity(&mut tape, &a, &a, &lam).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_weight_equals_diagonal_weight_of_same_value() {
        let mut tape = Tape::new(FloatWidth::F64);
        let mut stream = SeedKey::root(2).stream();
        let a = tape.constant(TensorValue::new(vec![4, 3], stream.normals(12)));
        let b = tape.constant(TensorValue::new(vec![4, 3], stream.normals(12)));
        let lam_s = tape.constant(TensorValue::new(vec![1, 1], vec![0.8]));
        let lam_d = tape.constant(TensorValue::new(vec![1, 3], vec![0.8; 3]));
        let s1 = weighted_sqdist_matrix(&mut tape, &a, &b, &lam_s).unwrap();
        let s2 = weighted_sqdist_matrix(&mut tape, &a, &b, &lam_d).unwrap();
        for (x, y) in s1.data().iter().zip(s2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_pair_similarity_is_affine_in_dot_product() {
        // On unit vectors with λ = 1: -‖a-b‖² = 2(aᵀb - 1).
        let mut tape = Tape::new(FloatWidth::F64);
        let mut stream = SeedKey::root(3).stream();
        let raw_a = TensorValue::new(vec![5, 4], stream.normals(20));
        let raw_b = TensorValue::new(vec![5, 4], stream.normals(20));
        let a0 = tape.constant(raw_a);
        let b0 = tape.constant(raw_b);
        let a = tape.l2_normalize_rows(&a0).unwrap();
        let b = tape.l2_normalize_rows(&b0).unwrap();
        let lam = tape.constant(TensorValue::scalar(1.0));
        let s = positive_pair_similarity(&mut tape, &a, &b, &lam).unwrap();
        for i in 0..5 {
            let dot: f64 = a.value.row(i).iter().zip(b.value.row(i)).map(|(x, y)| x * y).sum();
            let expect = 2.0 * (dot - 1.0);
            assert!((s.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let mut tape = Tape::new(FloatWidth::F64);
        let sim = tape.constant(TensorValue::new(vec![1, 1], vec![0.37]));
        let loss = infonce_from_sim(&mut tape, &sim, 0.5).unwrap();
        assert!(loss.item().abs() < 1e-15);
    }

    #[test]
    fn infonce_constant_matrix_is_zero() {
        let mut tape = Tape::new(FloatWidth::F64);
        let sim = tape.constant(TensorValue::full(vec![6, 6], -1.23));
        let loss = infonce_from_sim(&mut tape, &sim, 1.0).unwrap();
        assert!(loss.item().abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn infonce_two_pair_case_matches_brute_force() {
        // K=2, s = I, τ=1: per-row loss is log((e+1)/2) - 1.
        let mut tape = Tape::new(FloatWidth::F64);
        let sim = tape.constant(TensorValue::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let loss = infonce_from_sim(&mut tape, &sim, 1.0).unwrap();
        let expect = ((1f64.exp() + 1.0) / 2.0).ln() - 1.0;
        assert!((loss.item() - expect).abs() < 1e-12);
        assert!((expect + 0.379885).abs() < 1e-6);

        // Brute-force evaluation of the same definition.
        let s = [[1.0, 0.0], [0.0, 1.0]];
        let mut brute = 0.0;
        for i in 0..2 {
            let denom: f64 = (0..2).map(|j| (s[i][j] as f64).exp()).sum::<f64>() / 2.0;
            brute += -((s[i][i] as f64).exp() / denom).ln();
        }
        brute /= 2.0;
        assert!((loss.item() - brute).abs() < 1e-12);
    }

    #[test]
    fn infonce_lower_bound_holds_on_random_matrices() {
        for seed in 0..20 {
            let mut stream = SeedKey::root(100 + seed).stream();
            let k = 5;
            let mut tape = Tape::new(FloatWidth::F64);
            let sim = tape.constant(TensorValue::new(vec![k, k], stream.normals(k * k)));
            let loss = infonce_from_sim(&mut tape, &sim, 0.7).unwrap().item();
            assert!(loss >= -(k as f64).ln() - 1e-12, "loss {loss}");
        }
    }

    #[test]
    fn kl_identical_gaussians_is_zero() {
        let mut tape = Tape::new(FloatWidth::F64);
        let mean = tape.constant(TensorValue::new(vec![2, 3], vec![0.3; 6]));
        let logvar = tape.constant(TensorValue::new(vec![2, 3], vec![-0.7; 6]));
        let q = GaussianParams {
            mean: mean.clone(),
            logvar: logvar.clone(),
        };
        let p = GaussianParams { mean, logvar };
        let kl = kl_factorized_gaussians(&mut tape, &q, &p).unwrap();
        for v in kl.data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn kl_unit_gaussians_mean_shift() {
        // KL(N(1,1) ‖ N(0,1)) = 1/2.
        let mut tape = Tape::new(FloatWidth::F64);
        let q = GaussianParams {
            mean: tape.constant(TensorValue::new(vec![1, 1], vec![1.0])),
            logvar: tape.constant(TensorValue::new(vec![1, 1], vec![0.0])),
        };
        let p = GaussianParams {
            mean: tape.constant(TensorValue::new(vec![1, 1], vec![0.0])),
            logvar: tape.constant(TensorValue::new(vec![1, 1], vec![0.0])),
        };
        let kl = kl_factorized_gaussians(&mut tape, &q, &p).unwrap();
        assert!((kl.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_parameters() {
        for seed in 0..50 {
            let mut s = SeedKey::root(500 + seed).stream();
            let mut tape = Tape::new(FloatWidth::F64);
            let q = GaussianParams {
                mean: tape.constant(TensorValue::new(vec![1, 4], s.normals(4))),
                logvar: tape.constant(TensorValue::new(vec![1, 4], s.normals(4))),
            };
            let p = GaussianParams {
                mean: tape.constant(TensorValue::new(vec![1, 4], s.normals(4))),
                logvar: tape.constant(TensorValue::new(vec![1, 4], s.normals(4))),
            };
            let kl = kl_factorized_gaussians(&mut tape, &q, &p).unwrap();
            assert!(kl.item() >= 0.0, "negative KL {}", kl.item());
        }
    }

    #[test]
    fn expected_l0_matches_formula_and_range() {
        let mut tape = Tape::new(FloatWidth::F64);
        let pi = tape.constant(TensorValue::new(vec![1, 2], vec![0.5, 0.5]));
        let l0 = expected_l0(&mut tape, &pi).unwrap();
        assert!((l0.item() - 1.0).abs() < 1e-15);

        let zeros = tape.constant(TensorValue::zeros(vec![3, 4]));
        let l0z = expected_l0(&mut tape, &zeros).unwrap();
        assert_eq!(l0z.item(), 0.0);
    }

    #[test]
    fn expected_l0_gradient_through_sigmoid_is_pi_times_one_minus_pi() {
        let mut tape = Tape::new(FloatWidth::F64);
        let logits = tape.leaf(TensorValue::new(vec![1, 3], vec![0.3, -1.2, 2.0]));
        let pi = tape.sigmoid(&logits);
        let l0 = expected_l0(&mut tape, &pi).unwrap();
        let grads = tape.backward(&l0).unwrap();
        let g = grads.get(&logits).unwrap();
        for (gi, li) in g.data().iter().zip([0.3, -1.2, 2.0]) {
            let p = 1.0 / (1.0 + (-li as f64).exp());
            assert!((gi - p * (1.0 - p)).abs() < 1e-12);
        }
    }
}
