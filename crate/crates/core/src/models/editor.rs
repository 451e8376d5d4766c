//! Editing functions t(f(x), r): combine an embedding with the transition
//! latent to predict the paired embedding.

use crate::error::Result;
use crate::rng::SeedKey;
use crate::tensor::{BnMode, ParamBank, ParamRef, Tape, Tensor, TensorValue};

use super::mlp::{Mlp, MlpSpec, ParamSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorVariant {
    /// t = f + W r.
    Additive,
    /// t = W_f f + W_r r + b.
    Linear,
    /// t = MLP([f; r]).
    Mlp,
    /// t = f + Σ_i r_i (B_i A_i f + b_i): per-latent rank-1 edits.
    Modular,
}

/// Shape of the modular offset b_i: a learned full vector, or a learned
/// scalar applied along the unit direction of B_i.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModularBias {
    Vector,
    Scalar,
}

impl Default for ModularBias {
    fn default() -> Self {
        ModularBias::Vector
    }
}

#[derive(Clone, Debug)]
pub struct Editor {
    pub variant: EditorVariant,
    pub d_f: usize,
    pub d_r: usize,
    // Additive.
    add_w: Option<ParamRef>,
    // Linear.
    lin_wf: Option<ParamRef>,
    lin_wr: Option<ParamRef>,
    lin_b: Option<ParamRef>,
    // Mlp.
    net: Option<Mlp>,
    // Modular: one (contract, expand, offset) triple per latent dim.
    mod_contract: Vec<ParamRef>, // A_i as [d_f, 1]
    mod_expand: Vec<ParamRef>,   // B_i as [1, d_f]
    mod_offset: Vec<ParamRef>,   // b_i as [1, d_f] or [1, 1]
    bias_kind: ModularBias,
}

impl Editor {
    pub fn init(
        bank: &mut ParamBank,
        variant: EditorVariant,
        d_f: usize,
        d_r: usize,
        hidden: usize,
        bias_kind: ModularBias,
        key: SeedKey,
    ) -> Editor {
        let mut ed = Editor {
            variant,
            d_f,
            d_r,
            add_w: None,
            lin_wf: None,
            lin_wr: None,
            lin_b: None,
            net: None,
            mod_contract: Vec::new(),
            mod_expand: Vec::new(),
            mod_offset: Vec::new(),
            bias_kind,
        };
        let uniform = |stream: &mut crate::rng::RngStream, n: usize, bound: f64| -> Vec<f64> {
            (0..n)
                .map(|_| (2.0 * stream.uniform_open() - 1.0) * bound)
                .collect()
        };
        match variant {
            EditorVariant::Additive => {
                let mut s = key.child(0).stream();
                let bound = 1.0 / (d_r as f64).sqrt();
                ed.add_w = Some(bank.push(
                    "t.add_w",
                    TensorValue::new(vec![d_r, d_f], uniform(&mut s, d_r * d_f, bound)),
                    false,
                ));
            }
            EditorVariant::Linear => {
                let mut s = key.child(0).stream();
                let bound = 1.0 / ((d_f + d_r) as f64).sqrt();
                ed.lin_wf = Some(bank.push(
                    "t.lin_wf",
                    TensorValue::new(vec![d_f, d_f], uniform(&mut s, d_f * d_f, bound)),
                    false,
                ));
                ed.lin_wr = Some(bank.push(
                    "t.lin_wr",
                    TensorValue::new(vec![d_r, d_f], uniform(&mut s, d_r * d_f, bound)),
                    false,
                ));
                ed.lin_b = Some(bank.push(
                    "t.lin_b",
                    TensorValue::new(vec![1, d_f], uniform(&mut s, d_f, bound)),
                    true,
                ));
            }
            EditorVariant::Mlp => {
                ed.net = Some(Mlp::init(
                    bank,
                    "t.mlp",
                    MlpSpec {
                        input: d_f + d_r,
                        hidden: vec![hidden, hidden],
                        output: d_f,
                        leaky_slope: 0.01,
                        batch_norm_hidden: true,
                        final_bias: None,
                    },
                    key.child(0),
                ));
            }
            EditorVariant::Modular => {
                let bound = 1.0 / (d_f as f64).sqrt();
                for i in 0..d_r {
                    let mut s = key.child(10 + i as u64).stream();
                    ed.mod_contract.push(bank.push(
                        format!("t.mod{i}.a"),
                        TensorValue::new(vec![d_f, 1], uniform(&mut s, d_f, bound)),
                        false,
                    ));
                    ed.mod_expand.push(bank.push(
                        format!("t.mod{i}.b"),
                        TensorValue::new(vec![1, d_f], uniform(&mut s, d_f, bound)),
                        false,
                    ));
                    let offset_shape = match bias_kind {
                        ModularBias::Vector => vec![1, d_f],
                        ModularBias::Scalar => vec![1, 1],
                    };
                    ed.mod_offset.push(bank.push(
                        format!("t.mod{i}.offset"),
                        TensorValue::zeros(offset_shape),
                        true,
                    ));
                }
            }
        }
        ed
    }

    /// Apply the edit; r = 0 leaves the additive and modular variants
    /// bit-exactly at f(x).
    pub fn edit(
        &mut self,
        tape: &mut Tape,
        params: &ParamSource,
        f_x: &Tensor,
        r: &Tensor,
        mode: BnMode,
    ) -> Result<Tensor> {
        match self.variant {
            EditorVariant::Additive => {
                let w = params.get(self.add_w.expect("additive editor weight"));
                let delta = tape.matmul(r, &w)?;
                tape.add(f_x, &delta)
            }
            EditorVariant::Linear => {
                let wf = params.get(self.lin_wf.expect("linear editor"));
                let wr = params.get(self.lin_wr.expect("linear editor"));
                let b = params.get(self.lin_b.expect("linear editor"));
                let xf = tape.matmul(f_x, &wf)?;
                let xr = tape.matmul(r, &wr)?;
                let sum = tape.add(&xf, &xr)?;
                tape.add(&sum, &b)
            }
            EditorVariant::Mlp => {
                let joint = tape.concat_cols(&[f_x, r])?;
                self.net
                    .as_mut()
                    .expect("mlp editor net")
                    .forward(tape, params, &joint, mode)
            }
            EditorVariant::Modular => {
                let mut out = f_x.clone();
                for i in 0..self.d_r {
                    let a = params.get(self.mod_contract[i]);
                    let b = params.get(self.mod_expand[i]);
                    let offset = params.get(self.mod_offset[i]);
                    let contracted = tape.matmul(f_x, &a)?; // [B, 1]
                    let expanded = tape.matmul(&contracted, &b)?; // [B, d_f]
                    let with_offset = match self.bias_kind {
                        ModularBias::Vector => tape.add(&expanded, &offset)?,
                        ModularBias::Scalar => {
                            let dir = tape.l2_normalize_rows(&b)?;
                            let scaled_dir = tape.mul(&dir, &offset)?;
                            tape.add(&expanded, &scaled_dir)?
                        }
                    };
                    let r_i = tape.slice_cols(r, i, 1)?; // [B, 1]
                    let term = tape.mul(&with_offset, &r_i)?;
                    out = tape.add(&out, &term)?;
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FloatWidth;

    fn fixture(variant: EditorVariant, bias: ModularBias) -> (ParamBank, Editor) {
        let mut bank = ParamBank::new();
        let ed = Editor::init(&mut bank, variant, 6, 3, 8, bias, SeedKey::root(20));
        (bank, ed)
    }

    fn run_edit(bank: &ParamBank, ed: &mut Editor, f_data: Vec<f64>, r_data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let f = tape.constant(TensorValue::new(vec![2, 6], f_data));
        let r = tape.constant(TensorValue::new(vec![2, 3], r_data));
        ed.edit(
            &mut tape,
            &ParamSource::Bound(&bound),
            &f,
            &r,
            BnMode::Train { update_stats: false },
        )
        .unwrap()
        .data()
        .to_vec()
    }

    #[test]
    fn modular_zero_r_is_bit_exact_identity() {
        let (bank, mut ed) = fixture(EditorVariant::Modular, ModularBias::Vector);
        let f: Vec<f64> = (0..12).map(|i| 0.31 * i as f64 - 1.0).collect();
        let out = run_edit(&bank, &mut ed, f.clone(), vec![0.0; 6]);
        assert_eq!(out, f);
    }

    #[test]
    fn additive_zero_r_is_identity() {
        let (bank, mut ed) = fixture(EditorVariant::Additive, ModularBias::Vector);
        let f: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let out = run_edit(&bank, &mut ed, f.clone(), vec![0.0; 6]);
        assert_eq!(out, f);
    }

    #[test]
    fn modular_offset_only_adds_r_times_bias() {
        // With A = B = 0 and vector offset = 1, the edit adds r_i per
        // coordinate for each active latent.
        let mut bank = ParamBank::new();
        let mut ed = Editor::init(
            &mut bank,
            EditorVariant::Modular,
            6,
            1,
            8,
            ModularBias::Vector,
            SeedKey::root(21),
        );
        bank.set_value(ed.mod_contract[0], TensorValue::zeros(vec![6, 1]));
        bank.set_value(ed.mod_expand[0], TensorValue::zeros(vec![1, 6]));
        bank.set_value(ed.mod_offset[0], TensorValue::full(vec![1, 6], 1.0));
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bank.bind(&mut tape);
        let f = tape.constant(TensorValue::zeros(vec![1, 6]));
        let r = tape.constant(TensorValue::full(vec![1, 1], 1.0));
        let out = ed
            .edit(
                &mut tape,
                &ParamSource::Bound(&bound),
                &f,
                &r,
                BnMode::Eval,
            )
            .unwrap();
        assert_eq!(out.data(), &[1.0; 6]);
    }

    #[test]
    fn modular_edit_is_affine_in_r() {
        let (bank, mut ed) = fixture(EditorVariant::Modular, ModularBias::Vector);
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let r1 = vec![0.4, -0.2, 0.9, 0.1, 0.5, -0.7];
        let r2 = vec![-0.3, 0.8, 0.2, 0.6, -0.1, 0.35];
        let alpha = 0.37;
        let blend: Vec<f64> = r1
            .iter()
            .zip(&r2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let out1 = run_edit(&bank, &mut ed, f.clone(), r1);
        let out2 = run_edit(&bank, &mut ed, f.clone(), r2);
        let out_blend = run_edit(&bank, &mut ed, f, blend);
        for i in 0..out_blend.len() {
            let expect = alpha * out1[i] + (1.0 - alpha) * out2[i];
            assert!((out_blend[i] - expect).abs() < 1e-12);
        }
    }
}
