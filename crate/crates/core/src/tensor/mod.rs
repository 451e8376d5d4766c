//! Dense tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod value;

pub use nn::{batch_norm, BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
pub use params::{BoundParams, ParamBank, ParamEntry, ParamRef};
pub use tape::{BinKind, Gradients, NodeId, RedKind, Tape, Tensor, UnKind};
pub use value::{FloatWidth, TensorValue};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradient, FD_STEP};
    use super::*;
    use crate::rng::SeedKey;

    fn t(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        tape.leaf(TensorValue::new(shape, data))
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new(FloatWidth::F64);
        let i2 = t(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new(FloatWidth::F64);
        let a = t(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = t(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new(FloatWidth::F64);
        let a = t(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = t(&mut tape, vec![2, 3], vec![0.0; 6]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    /// Gradient of sum(A·B) w.r.t. both operands against finite differences.
    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut stream = SeedKey::root(11).stream();
        let a0 = stream.normals(5 * 4);
        let b0 = stream.normals(4 * 3);
        let mut packed = a0.clone();
        packed.extend_from_slice(&b0);

        let eval = |x: &[f64]| {
            let mut tape = Tape::new(FloatWidth::F64);
            let a = tape.leaf(TensorValue::new(vec![5, 4], x[..20].to_vec()));
            let b = tape.leaf(TensorValue::new(vec![4, 3], x[20..].to_vec()));
            let c = tape.matmul(&a, &b).unwrap();
            let sq = tape.square(&c);
            tape.sum_all(&sq).unwrap().item()
        };

        let mut tape = Tape::new(FloatWidth::F64);
        let a = tape.leaf(TensorValue::new(vec![5, 4], a0));
        let b = tape.leaf(TensorValue::new(vec![4, 3], b0));
        let c = tape.matmul(&a, &b).unwrap();
        let sq = tape.square(&c);
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut analytic = grads.get(&a).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.get(&b).unwrap().data());

        let rep = check_gradient("matmul", eval, &packed, &analytic, FD_STEP, 1e-6, None);
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn softplus_values() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![3], vec![0.0, 50.0, -100.0]);
        let y = tape.softplus(&x);
        assert!((y.data()[0] - 2.0f64.ln()).abs() < 1e-15);
        assert!((y.data()[1] - 50.0).abs() < 1e-12);
        assert!(y.data()[2] > 0.0 && y.data()[2] < 1e-40);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![2], vec![-1.0, 2.0]);
        let y = tape.leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[-0.2, 2.0]);
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![2], vec![1.0, 0.0]);
        assert!(tape.log(&x).is_err());
    }

    #[test]
    fn logsumexp_values_and_stability() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.logsumexp(&x, None).unwrap();
        assert!((y.item() - 2.0f64.ln()).abs() < 1e-15);

        let big = t(&mut tape, vec![2], vec![1000.0, 1000.0]);
        let y = tape.logsumexp(&big, None).unwrap();
        assert!((y.item() - (1000.0 + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let s = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn max_reduce_ties_take_first_index() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![3], vec![2.0, 2.0, 1.0]);
        let m = tape.reduce(RedKind::Max, &x, None).unwrap();
        let grads = tape.backward(&m).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_values() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![1, 2], vec![3.0, 4.0]);
        let y = tape.l2_normalize_rows(&x).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);

        // Unit vector maps to itself.
        let u = t(&mut tape, vec![1, 2], vec![0.6, 0.8]);
        let yu = tape.l2_normalize_rows(&u).unwrap();
        assert!((yu.data()[0] - 0.6).abs() < 1e-15);
        assert!((yu.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_near_zero_rows() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![1, 2], vec![0.0, 1e-13]);
        assert!(tape.l2_normalize_rows(&x).is_err());
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut stream = SeedKey::root(5).stream();
        let x0 = stream.normals(8);
        let w = stream.normals(8);
        let eval = |x: &[f64]| {
            let mut tape = Tape::new(FloatWidth::F64);
            let xt = tape.leaf(TensorValue::new(vec![1, 8], x.to_vec()));
            let y = tape.l2_normalize_rows(&xt).unwrap();
            let wt = tape.constant(TensorValue::new(vec![1, 8], w.clone()));
            let p = tape.mul(&y, &wt).unwrap();
            tape.sum_all(&p).unwrap().item()
        };
        let mut tape = Tape::new(FloatWidth::F64);
        let xt = tape.leaf(TensorValue::new(vec![1, 8], x0.clone()));
        let y = tape.l2_normalize_rows(&xt).unwrap();
        let wt = tape.constant(TensorValue::new(vec![1, 8], w.clone()));
        let p = tape.mul(&y, &wt).unwrap();
        let s = tape.sum_all(&p).unwrap();
        let grads = tape.backward(&s).unwrap();
        let analytic = grads.get(&xt).unwrap().data().to_vec();
        let rep = check_gradient("l2norm", eval, &x0, &analytic, FD_STEP, 1e-6, None);
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn broadcasting_row_and_col() {
        let mut tape = Tape::new(FloatWidth::F64);
        let m = t(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = t(&mut tape, vec![1, 3], vec![10.0, 20.0, 30.0]);
        let col = t(&mut tape, vec![2, 1], vec![100.0, 200.0]);
        let a = tape.add(&m, &row).unwrap();
        assert_eq!(a.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let b = tape.add(&m, &col).unwrap();
        assert_eq!(b.data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_dims() {
        let mut tape = Tape::new(FloatWidth::F64);
        let m = t(&mut tape, vec![2, 3], vec![1.0; 6]);
        let row = t(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let prod = tape.mul(&m, &row).unwrap();
        let s = tape.sum_all(&prod).unwrap();
        let grads = tape.backward(&s).unwrap();
        // d/d row_j = sum_i m[i][j] = 2.
        assert_eq!(grads.get(&row).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates_additively() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![1], vec![3.0]);
        let a = tape.square(&x); // x²
        let b = tape.scale(&x, 2.0); // 2x
        let sum = tape.add(&a, &b).unwrap(); // x² + 2x
        let grads = tape.backward(&sum).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[8.0]); // 2x + 2 at x=3
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![1], vec![3.0]);
        let frozen = tape.stop_grad(&x);
        let prod = tape.mul(&x, &frozen).unwrap();
        let grads = tape.backward(&prod).unwrap();
        // d(x · const(x))/dx = const(x) = 3, not 2x = 6.
        assert_eq!(grads.get(&x).unwrap().data(), &[3.0]);
        assert!(grads.get(&frozen).is_none());
    }

    #[test]
    fn replaying_a_graph_gives_bit_identical_gradients() {
        let run = || {
            let mut stream = SeedKey::root(99).stream();
            let x0 = stream.normals(12);
            let mut tape = Tape::new(FloatWidth::F64);
            let x = tape.leaf(TensorValue::new(vec![3, 4], x0));
            let h = tape.tanh(&x);
            let s = tape.square(&h);
            let m = tape.mean_all(&s).unwrap();
            let grads = tape.backward(&m).unwrap();
            grads
                .get(&x)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_norm_normalizes_columns() {
        let mut tape = Tape::new(FloatWidth::F64);
        // One constant column, one varying.
        let x = t(
            &mut tape,
            vec![4, 2],
            vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0],
        );
        let scale = t(&mut tape, vec![1, 2], vec![1.0, 1.0]);
        let shiftp = t(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let mut state = BatchNormState::new(2);
        let y = batch_norm(
            &mut tape,
            &x,
            &scale,
            &shiftp,
            &mut state,
            BnMode::Train { update_stats: true },
        )
        .unwrap();
        // Constant column becomes zero.
        for i in 0..4 {
            assert!(y.value.at2(i, 0).abs() < 1e-9);
        }
        // Varying column: unit batch variance pre-affine (biased estimate).
        let col: Vec<f64> = (0..4).map(|i| y.value.at2(i, 1)).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
        // Running stats moved toward the batch statistics.
        assert!((state.running_mean[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut tape = Tape::new(FloatWidth::F64);
        let x = t(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let scale = t(&mut tape, vec![1, 2], vec![1.0, 1.0]);
        let shiftp = t(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let mut state = BatchNormState::new(2);
        let r = batch_norm(
            &mut tape,
            &x,
            &scale,
            &shiftp,
            &mut state,
            BnMode::Train { update_stats: false },
        );
        assert!(r.is_err());
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut stream = SeedKey::root(31).stream();
        let x0 = stream.normals(16 * 4);
        let eval = |x: &[f64]| {
            let mut tape = Tape::new(FloatWidth::F64);
            let xt = tape.leaf(TensorValue::new(vec![16, 4], x.to_vec()));
            let scale = tape.constant(TensorValue::new(vec![1, 4], vec![1.3, 0.7, 1.0, 2.0]));
            let shiftp = tape.constant(TensorValue::new(vec![1, 4], vec![0.1, -0.2, 0.0, 0.5]));
            let mut state = BatchNormState::new(4);
            let y = batch_norm(
                &mut tape,
                &xt,
                &scale,
                &shiftp,
                &mut state,
                BnMode::Train { update_stats: false },
            )
            .unwrap();
            let sq = tape.square(&y);
            let cube_ish = tape.mul(&sq, &y).unwrap();
            tape.mean_all(&cube_ish).unwrap().item()
        };
        let mut tape = Tape::new(FloatWidth::F64);
        let xt = tape.leaf(TensorValue::new(vec![16, 4], x0.clone()));
        let scale = tape.constant(TensorValue::new(vec![1, 4], vec![1.3, 0.7, 1.0, 2.0]));
        let shiftp = tape.constant(TensorValue::new(vec![1, 4], vec![0.1, -0.2, 0.0, 0.5]));
        let mut state = BatchNormState::new(4);
        let y = batch_norm(
            &mut tape,
            &xt,
            &scale,
            &shiftp,
            &mut state,
            BnMode::Train { update_stats: false },
        )
        .unwrap();
        let sq = tape.square(&y);
        let cube_ish = tape.mul(&sq, &y).unwrap();
        let loss = tape.mean_all(&cube_ish).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&xt).unwrap().data().to_vec();
        let rep = check_gradient("batch_norm", eval, &x0, &analytic, FD_STEP, 1e-5, None);
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn straight_through_gate_thresholds_and_backprops() {
        let mut tape = Tape::new(FloatWidth::F64);
        let logits = t(&mut tape, vec![1, 3], vec![4.0, -4.0, 0.2]);
        let noise = TensorValue::new(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let gate = tape.gate_straight_through(&logits, &noise, 1.0).unwrap();
        assert_eq!(gate.data(), &[1.0, 0.0, 1.0]);
        let s = tape.sum_all(&gate).unwrap();
        let grads = tape.backward(&s).unwrap();
        let g = grads.get(&logits).unwrap();
        // Relaxed-gate derivative is sigmoid'(l): nonzero everywhere the
        // relaxed gate is interior.
        for v in g.data() {
            assert!(*v > 0.0);
        }
    }
}
