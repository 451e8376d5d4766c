//! Concentration-weight heads: a learnable scalar, a learnable diagonal, or
//! an input-conditional predictor, all realized through softplus so the
//! weights stay strictly positive under any optimizer step.

use crate::error::Result;
use crate::rng::SeedKey;
use crate::tensor::{BnMode, ParamBank, ParamRef, Tape, Tensor, TensorValue};

use super::mlp::{Mlp, MlpSpec, ParamSource};

/// Pre-softplus value whose realized weight is exactly 1.
pub const RAW_UNIT: f64 = 0.541_324_854_612_918_1; // ln(e - 1)

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaVariant {
    /// One learnable scalar shared by every pair and dimension.
    GlobalScalar,
    /// A learnable per-dimension diagonal.
    GlobalDiag,
    /// Affine map from the embedding, then softplus.
    ConditionalAffine,
    /// MLP from the embedding, then softplus.
    ConditionalMlp,
}

impl LambdaVariant {
    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            LambdaVariant::ConditionalAffine | LambdaVariant::ConditionalMlp
        )
    }
}

#[derive(Clone, Debug)]
pub struct LambdaHead {
    pub variant: LambdaVariant,
    raw_scalar: Option<ParamRef>,
    raw_diag: Option<ParamRef>,
    net: Option<Mlp>,
}

impl LambdaHead {
    /// `embed_dim` is the dimensionality the weights act on; `hidden` sizes
    /// the conditional MLP (three hidden layers for the MLP variant).
    pub fn init(
        bank: &mut ParamBank,
        variant: LambdaVariant,
        embed_dim: usize,
        hidden: usize,
        key: SeedKey,
    ) -> LambdaHead {
        match variant {
            LambdaVariant::GlobalScalar => LambdaHead {
                variant,
                raw_scalar: Some(bank.push(
                    "lambda.raw",
                    TensorValue::new(vec![1], vec![RAW_UNIT]),
                    false,
                )),
                raw_diag: None,
                net: None,
            },
            LambdaVariant::GlobalDiag => LambdaHead {
                variant,
                raw_scalar: None,
                raw_diag: Some(bank.push(
                    "lambda.raw_diag",
                    TensorValue::full(vec![1, embed_dim], RAW_UNIT),
                    false,
                )),
                net: None,
            },
            LambdaVariant::ConditionalAffine => LambdaHead {
                variant,
                raw_scalar: None,
                raw_diag: None,
                net: Some(Mlp::init(
                    bank,
                    "lambda.affine",
                    MlpSpec {
                        input: embed_dim,
                        hidden: vec![],
                        output: embed_dim,
                        leaky_slope: 0.01,
                        batch_norm_hidden: false,
                        final_bias: Some(RAW_UNIT),
                    },
                    key,
                )),
            },
            LambdaVariant::ConditionalMlp => LambdaHead {
                variant,
                raw_scalar: None,
                raw_diag: None,
                net: Some(Mlp::init(
                    bank,
                    "lambda.mlp",
                    MlpSpec {
                        input: embed_dim,
                        hidden: vec![hidden, hidden, hidden],
                        output: embed_dim,
                        leaky_slope: 0.01,
                        batch_norm_hidden: true,
                        final_bias: Some(RAW_UNIT),
                    },
                    key,
                )),
            },
        }
    }

    /// Realized positive weights, shaped for row-wise broadcasting against
    /// a [K, d] similarity computation: [1,1] (scalar), [1,d] (diagonal) or
    /// [K,d] (conditional on `f_x`).
    pub fn weights(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        f_x: Option<&Tensor>,
        mode: BnMode,
    ) -> Result<Tensor> {
        match self.variant {
            LambdaVariant::GlobalScalar => {
                let raw = params.get(self.raw_scalar.expect("scalar head"));
                Ok(tape.softplus(&raw))
            }
            LambdaVariant::GlobalDiag => {
                let raw = params.get(self.raw_diag.expect("diag head"));
                Ok(tape.softplus(&raw))
            }
            LambdaVariant::ConditionalAffine | LambdaVariant::ConditionalMlp => {
                let f_x = f_x.expect("conditional head needs embeddings");
                let net = self.net.as_mut().expect("conditional head net");
                let raw = net.forward(tape, params, f_x, mode)?;
                Ok(tape.softplus(&raw))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FloatWidth;

    #[test]
    fn global_heads_start_at_one() {
        let mut bank = ParamBank::new();
        let mut scalar = LambdaHead::init(&mut bank, LambdaVariant::GlobalScalar, 4, 8, SeedKey::root(1));
        let mut diag = LambdaHead::init(&mut bank, LambdaVariant::GlobalDiag, 4, 8, SeedKey::root(2));
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let src = ParamSource::Bound(&bound);
        let s = scalar
            .weights(&mut tape, &src, None, BnMode::Eval)
            .unwrap();
        assert!((s.item() - 1.0).abs() < 1e-12);
        let d = diag.weights(&mut tape, &src, None, BnMode::Eval).unwrap();
        for v in d.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn realized_weights_stay_positive_for_any_raw_value() {
        let mut bank = ParamBank::new();
        let mut head = LambdaHead::init(&mut bank, LambdaVariant::GlobalScalar, 4, 8, SeedKey::root(3));
        // Simulate an aggressive optimizer pushing the raw value negative.
        let raw_ref = head.raw_scalar.unwrap();
        bank.set_value(raw_ref, TensorValue::new(vec![1], vec![-25.0]));
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let w = head
            .weights(&mut tape, &ParamSource::Bound(&bound), None, BnMode::Eval)
            .unwrap();
        assert!(w.item() > 0.0);
    }
}
