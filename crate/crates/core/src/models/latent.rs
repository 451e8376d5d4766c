//! Inference of the pair-transition latent r: a factorized-Gaussian
//! variational pathway and a sparse deterministic pathway with hard gates.

use crate::error::Result;
use crate::rng::SeedKey;
use crate::tensor::{BnMode, ParamBank, Tape, Tensor, TensorValue};

use super::mlp::{Mlp, MlpSpec, ParamSource};

pub const LOGVAR_CLAMP: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// q(r | x, pair) and p(r | x) as factorized Gaussians on top of the
/// embeddings, each a lightweight MLP emitting (mean, logvar).
#[derive(Clone, Debug)]
pub struct VariationalNets {
    pub d_r: usize,
    q_net: Mlp,
    p_net: Mlp,
}

impl VariationalNets {
    pub fn init(
        bank: &mut ParamBank,
        d_f: usize,
        d_r: usize,
        hidden: usize,
        key: SeedKey,
    ) -> VariationalNets {
        let q_net = Mlp::init(
            bank,
            "q",
            MlpSpec {
                input: 2 * d_f,
                hidden: vec![hidden, hidden],
                output: 2 * d_r,
                leaky_slope: 0.01,
                batch_norm_hidden: true,
                final_bias: None,
            },
            key.child(0),
        );
        let p_net = Mlp::init(
            bank,
            "p",
            MlpSpec {
                input: d_f,
                hidden: vec![hidden, hidden],
                output: 2 * d_r,
                leaky_slope: 0.01,
                batch_norm_hidden: true,
                final_bias: None,
            },
            key.child(1),
        );
        VariationalNets { d_r, q_net, p_net }
    }

    fn split(&self, tape: &mut Tape, out: &Tensor) -> Result<GaussianParams> {
        let mean = tape.slice_cols(out, 0, self.d_r)?;
        let raw_logvar = tape.slice_cols(out, self.d_r, self.d_r)?;
        let logvar = tape.clamp(&raw_logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok(GaussianParams { mean, logvar })
    }

    pub fn posterior(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        f_x: &Tensor,
        f_pair: &Tensor,
        mode: BnMode,
    ) -> Result<GaussianParams> {
        let joint = tape.concat_cols(&[f_x, f_pair])?;
        let out = self.q_net.forward(tape, params, &joint, mode)?;
        self.split(tape, &out)
    }

    pub fn prior(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        f_x: &Tensor,
        mode: BnMode,
    ) -> Result<GaussianParams> {
        let out = self.p_net.forward(tape, params, f_x, mode)?;
        self.split(tape, &out)
    }
}

/// r = mean + exp(logvar / 2) ⊙ noise, differentiable in both Gaussian
/// parameters.
pub fn reparam_sample(
    tape: &mut Tape,
    gaussian: &GaussianParams,
    noise: &TensorValue,
) -> Result<Tensor> {
    let half_logvar = tape.scale(&gaussian.logvar, 0.5);
    let std = tape.exp(&half_logvar);
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(&std, &eps)?;
    tape.add(&gaussian.mean, &scaled)
}

/// Standard-normal noise matrix with per-sample keyed sub-streams.
pub fn noise_matrix(key: SeedKey, rows: usize, cols: usize) -> TensorValue {
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        data.extend(key.child(i as u64).stream().normals(cols));
    }
    TensorValue::new(vec![rows, cols], data)
}

/// Logistic noise ln u - ln(1-u) for the relaxed Bernoulli gates.
pub fn logistic_noise_matrix(key: SeedKey, rows: usize, cols: usize) -> TensorValue {
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let mut stream = key.child(i as u64).stream();
        for _ in 0..cols {
            let u = stream.uniform_open();
            data.push(u.ln() - (1.0 - u).ln());
        }
    }
    TensorValue::new(vec![rows, cols], data)
}

/// How the Bernoulli gates are realized in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Hard {0,1} gates with straight-through gradients (training).
    HardStraightThrough,
    /// Fully relaxed soft gates; exactly differentiable (used by gradient
    /// verification).
    Relaxed,
    /// Deterministic threshold on the gate probability (evaluation).
    Deterministic,
}

#[derive(Clone, Debug)]
pub struct SparseSample {
    pub r: Tensor,
    /// Gate probabilities sigmoid(logits), differentiable.
    pub pi: Tensor,
    pub mask: Tensor,
}

/// Deterministic predictor of r with L0-style gating: an MLP on the pair
/// embeddings emits Bernoulli logits and tanh-bounded values; the realized
/// r is mask ⊙ values.
#[derive(Clone, Debug)]
pub struct SparsePredictor {
    pub d_r: usize,
    pub temperature: f64,
    net: Mlp,
}

impl SparsePredictor {
    pub fn init(
        bank: &mut ParamBank,
        d_f: usize,
        d_r: usize,
        hidden: usize,
        temperature: f64,
        key: SeedKey,
    ) -> SparsePredictor {
        let net = Mlp::init(
            bank,
            "m",
            MlpSpec {
                input: 2 * d_f,
                hidden: vec![hidden, hidden],
                output: 2 * d_r,
                leaky_slope: 0.01,
                batch_norm_hidden: true,
                final_bias: None,
            },
            key,
        );
        SparsePredictor {
            d_r,
            temperature,
            net,
        }
    }

    pub fn sample(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        f_x: &Tensor,
        f_pair: &Tensor,
        gate_mode: GateMode,
        gate_noise: Option<&TensorValue>,
        mode: BnMode,
    ) -> Result<SparseSample> {
        let joint = tape.concat_cols(&[f_x, f_pair])?;
        let out = self.net.forward(tape, params, &joint, mode)?;
        let logits = tape.slice_cols(&out, 0, self.d_r)?;
        let raw_values = tape.slice_cols(&out, self.d_r, self.d_r)?;
        let values = tape.tanh(&raw_values);
        let pi = tape.sigmoid(&logits);

        let mask = match gate_mode {
            GateMode::HardStraightThrough => {
                let noise = gate_noise.expect("hard gates need logistic noise");
                tape.gate_straight_through(&logits, noise, self.temperature)?
            }
            GateMode::Relaxed => {
                let noise = gate_noise.expect("relaxed gates need logistic noise");
                let noise_t = tape.constant(noise.clone());
                let shifted = tape.add(&logits, &noise_t)?;
                let scaled = tape.scale(&shifted, 1.0 / self.temperature);
                tape.sigmoid(&scaled)
            }
            GateMode::Deterministic => {
                let hard: Vec<f64> = pi
                    .data()
                    .iter()
                    .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
                    .collect();
                tape.constant(TensorValue::new(pi.shape().to_vec(), hard))
            }
        };
        let r = tape.mul(&mask, &values)?;
        Ok(SparseSample { r, pi, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{FloatWidth, ParamBank};

    fn forward_fixture() -> (ParamBank, SparsePredictor) {
        let mut bank = ParamBank::new();
        let pred = SparsePredictor::init(&mut bank, 3, 4, 8, 1.0, SeedKey::root(5));
        (bank, pred)
    }

    #[test]
    fn deterministic_mode_thresholds_pi() {
        let (bank, mut pred) = forward_fixture();
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let f_x = tape.constant(TensorValue::new(vec![4, 3], vec![0.3; 12]));
        let f_pair = tape.constant(TensorValue::new(vec![4, 3], vec![-0.2; 12]));
        let s = pred
            .sample(
                &mut tape,
                &ParamSource::Bound(&bound),
                &f_x,
                &f_pair,
                GateMode::Deterministic,
                None,
                BnMode::Train { update_stats: false },
            )
            .unwrap();
        for (p, m) in s.pi.data().iter().zip(s.mask.data()) {
            assert_eq!(*m, if *p > 0.5 { 1.0 } else { 0.0 });
        }
        // r zeroed wherever the mask is closed.
        for (r, m) in s.r.data().iter().zip(s.mask.data()) {
            if *m == 0.0 {
                assert_eq!(*r, 0.0);
            }
        }
    }

    #[test]
    fn gate_activation_frequency_tracks_pi() {
        // Activation frequency of the hard gate equals sigmoid(logit),
        // independent of the temperature.
        let logit = 0.8;
        let pi = 1.0 / (1.0 + (-logit as f64).exp());
        let n = 100_000;
        let noise = logistic_noise_matrix(SeedKey::root(9), n, 1);
        let mut tape = Tape::new(FloatWidth::F64);
        let logits = tape.leaf(TensorValue::full(vec![n, 1], logit));
        let gate = tape.gate_straight_through(&logits, &noise, 1.0).unwrap();
        let freq = gate.data().iter().sum::<f64>() / n as f64;
        assert!((freq - pi).abs() < 0.01, "freq {freq} pi {pi}");
    }

    #[test]
    fn reparam_sample_matches_moments() {
        let mut tape = Tape::new(FloatWidth::F64);
        let n = 100_000;
        let mean = tape.constant(TensorValue::full(vec![n, 1], 0.7));
        let logvar = tape.constant(TensorValue::full(vec![n, 1], -0.5));
        let g = GaussianParams {
            mean,
            logvar,
        };
        let noise = noise_matrix(SeedKey::root(10), n, 1);
        let r = reparam_sample(&mut tape, &g, &noise).unwrap();
        let m = r.data().iter().sum::<f64>() / n as f64;
        let v = r.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!((m - 0.7).abs() < 0.02 * 0.7 + 0.01, "mean {m}");
        let target_var = (-0.5f64).exp();
        assert!((v - target_var).abs() / target_var < 0.02, "var {v}");
    }

    #[test]
    fn fixed_seed_fixed_sample() {
        let a = noise_matrix(SeedKey::root(4).child(2), 16, 3);
        let b = noise_matrix(SeedKey::root(4).child(2), 16, 3);
        assert_eq!(a.data(), b.data());
    }
}
