//! Batch normalization as a differentiable composite of primitive ops.

use crate::error::{Error, Result};

use super::tape::{RedKind, Tape, Tensor};
use super::value::TensorValue;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer (the learnable scale/shift
/// live in the parameter bank).
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics; optionally fold them into the
    /// running averages (disabled during finite-difference replays).
    Train { update_stats: bool },
    /// Normalize by the running statistics.
    Eval,
}

/// y = scale * (x - mean) / sqrt(var + eps) + shift over a [B, d] batch.
pub fn batch_norm(
    tape: &mut Tape,
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<Tensor> {
    let (b, d) = x.value.dims2()?;
    if d != state.running_mean.len() {
        return Err(Error::Dimension(format!(
            "batch norm state dim {} vs input dim {d}",
            state.running_mean.len()
        )));
    }
    let normalized = match mode {
        BnMode::Train { update_stats } => {
            if b < 2 {
                return Err(Error::Degenerate(format!(
                    "batch norm needs at least 2 samples in training mode, got {b}"
                )));
            }
            let mean = tape.reduce(RedKind::Mean, x, Some(0))?;
            let centered = tape.sub(x, &mean)?;
            let sq = tape.square(&centered);
            let var = tape.reduce(RedKind::Mean, &sq, Some(0))?;
            if update_stats {
                // Unbiased variance goes into the running estimate.
                let unbias = b as f64 / (b as f64 - 1.0);
                for j in 0..d {
                    state.running_mean[j] = (1.0 - BN_MOMENTUM) * state.running_mean[j]
                        + BN_MOMENTUM * mean.data()[j];
                    state.running_var[j] = (1.0 - BN_MOMENTUM) * state.running_var[j]
                        + BN_MOMENTUM * var.data()[j] * unbias;
                }
            }
            let var_eps = tape.shift(&var, BN_EPS);
            let std = tape.sqrt(&var_eps)?;
            tape.div(&centered, &std)?
        }
        BnMode::Eval => {
            let mean = tape.constant(TensorValue::new(vec![1, d], state.running_mean.clone()));
            let std = tape.constant(TensorValue::new(
                vec![1, d],
                state
                    .running_var
                    .iter()
                    .map(|v| (v + BN_EPS).sqrt())
                    .collect(),
            ));
            let centered = tape.sub(x, &mean)?;
            tape.div(&centered, &std)?
        }
    };
    let scaled = tape.mul(&normalized, scale)?;
    tape.add(&scaled, shift)
}
