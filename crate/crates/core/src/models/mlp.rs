//! Plain fully connected networks over the parameter bank.

use std::collections::HashMap;

use crate::error::Result;
use crate::rng::SeedKey;
use crate::tensor::{
    batch_norm, BatchNormState, BnMode, BoundParams, ParamBank, ParamRef, Tape, Tensor,
    TensorValue,
};

/// Where a forward pass reads its weights from: the current step's tape
/// binding (trainable) or a frozen snapshot such as an EMA shadow
/// (constants, no gradient).
pub enum ParamSource<'a> {
    Bound(&'a BoundParams),
    Frozen(&'a HashMap<usize, TensorValue>),
}

impl<'a> ParamSource<'a> {
    pub fn get(&self, r: ParamRef) -> Tensor {
        match self {
            ParamSource::Bound(b) => b.get(r).clone(),
            ParamSource::Frozen(map) => Tensor {
                value: map
                    .get(&r.0)
                    .unwrap_or_else(|| panic!("frozen source missing parameter {}", r.0))
                    .clone(),
                node: None,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub leaky_slope: f64,
    /// BatchNorm + activation after each hidden layer.
    pub batch_norm_hidden: bool,
    /// Initial value for the final layer's bias entries (None = standard).
    pub final_bias: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    weights: Vec<ParamRef>,
    biases: Vec<ParamRef>,
    bn_scales: Vec<ParamRef>,
    bn_shifts: Vec<ParamRef>,
    bn_states: Vec<BatchNormState>,
}

impl Mlp {
    /// Weights and biases drawn U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer,
    /// each layer from its own keyed stream.
    pub fn init(bank: &mut ParamBank, prefix: &str, spec: MlpSpec, key: SeedKey) -> Mlp {
        let mut dims = vec![spec.input];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.output);

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut bn_scales = Vec::new();
        let mut bn_shifts = Vec::new();
        let mut bn_states = Vec::new();
        let n_layers = dims.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut stream = key.child(l as u64).stream();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (2.0 * stream.uniform_open() - 1.0) * bound)
                .collect();
            let mut b: Vec<f64> = (0..fan_out)
                .map(|_| (2.0 * stream.uniform_open() - 1.0) * bound)
                .collect();
            let last = l == n_layers - 1;
            if last {
                if let Some(fb) = spec.final_bias {
                    b.iter_mut().for_each(|v| *v = fb);
                }
            }
            weights.push(bank.push(
                format!("{prefix}.w{l}"),
                TensorValue::new(vec![fan_in, fan_out], w),
                false,
            ));
            biases.push(bank.push(
                format!("{prefix}.b{l}"),
                TensorValue::new(vec![1, fan_out], b),
                true,
            ));
            if spec.batch_norm_hidden && !last {
                bn_scales.push(bank.push(
                    format!("{prefix}.bn{l}.scale"),
                    TensorValue::full(vec![1, fan_out], 1.0),
                    false,
                ));
                bn_shifts.push(bank.push(
                    format!("{prefix}.bn{l}.shift"),
                    TensorValue::zeros(vec![1, fan_out]),
                    true,
                ));
                bn_states.push(BatchNormState::new(fan_out));
            }
        }
        Mlp {
            spec,
            weights,
            biases,
            bn_scales,
            bn_shifts,
            bn_states,
        }
    }

    /// All parameter handles, in a stable order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        self.weights
            .iter()
            .chain(&self.biases)
            .chain(&self.bn_scales)
            .chain(&self.bn_shifts)
            .copied()
            .collect()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        x: &Tensor,
        mode: BnMode,
    ) -> Result<Tensor> {
        let n_layers = self.weights.len();
        let mut cur = x.clone();
        for l in 0..n_layers {
            let w = params.get(self.weights[l]);
            let b = params.get(self.biases[l]);
            let lin = tape.matmul(&cur, &w)?;
            cur = tape.add(&lin, &b)?;
            let last = l == n_layers - 1;
            if !last {
                if self.spec.batch_norm_hidden {
                    let scale = params.get(self.bn_scales[l]);
                    let shift = params.get(self.bn_shifts[l]);
                    cur = batch_norm(tape, &cur, &scale, &shift, &mut self.bn_states[l], mode)?;
                }
                cur = tape.leaky_relu(&cur, self.spec.leaky_slope);
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FloatWidth;

    #[test]
    fn forward_shapes_and_determinism() {
        let mut bank = ParamBank::new();
        let mut mlp = Mlp::init(
            &mut bank,
            "test",
            MlpSpec {
                input: 4,
                hidden: vec![8, 8],
                output: 3,
                leaky_slope: 0.01,
                batch_norm_hidden: true,
                final_bias: None,
            },
            SeedKey::root(1),
        );
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let x = tape.leaf(TensorValue::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.1).collect()));
        let y = mlp
            .forward(
                &mut tape,
                &ParamSource::Bound(&bound),
                &x,
                BnMode::Train { update_stats: false },
            )
            .unwrap();
        assert_eq!(y.shape(), &[5, 3]);

        // Same weights, fresh tape: identical outputs.
        let mut tape2 = Tape::new(FloatWidth::F64);
        let bound2 = bank.bind(&mut tape2);
        let x2 = tape2.leaf(TensorValue::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.1).collect()));
        let y2 = mlp
            .forward(
                &mut tape2,
                &ParamSource::Bound(&bound2),
                &x2,
                BnMode::Train { update_stats: false },
            )
            .unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn final_bias_override_applies() {
        let mut bank = ParamBank::new();
        let mlp = Mlp::init(
            &mut bank,
            "h",
            MlpSpec {
                input: 2,
                hidden: vec![],
                output: 3,
                leaky_slope: 0.01,
                batch_norm_hidden: false,
                final_bias: Some(0.54),
            },
            SeedKey::root(2),
        );
        let bias_ref = mlp.biases[0];
        for v in bank.value(bias_ref).data() {
            assert_eq!(*v, 0.54);
        }
    }
}
