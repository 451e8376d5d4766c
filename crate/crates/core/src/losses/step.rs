//! Full per-objective loss graphs over one batch of observation triples.

use crate::dgp::PairBatch;
use crate::error::{Error, Result};
use crate::models::{
    logistic_noise_matrix, noise_matrix, reparam_sample, Branch, GateMode, ModelBundle,
    ParamSource,
};
use crate::rng::SeedKey;
use crate::tensor::{BnMode, BoundParams, Tape, Tensor, TensorValue};

use super::terms::{
    expected_l0, infonce_from_sim, kl_factorized_gaussians, mean_squared_distance,
    weighted_sqdist_matrix,
};
use super::{BaseLoss, Diagnostics, LossConfig, LossOutput, Objective};

/// How stochastic and stateful pieces behave during a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StepMode {
    pub bn: BnMode,
    pub gate: GateMode,
}

impl StepMode {
    /// Regular training: batch statistics folded into running averages,
    /// hard gates with straight-through gradients.
    pub fn train() -> Self {
        StepMode {
            bn: BnMode::Train { update_stats: true },
            gate: GateMode::HardStraightThrough,
        }
    }

    /// Gradient verification: identical math but side-effect free and with
    /// relaxed (exactly differentiable) gates.
    pub fn gradcheck() -> Self {
        StepMode {
            bn: BnMode::Train { update_stats: false },
            gate: GateMode::Relaxed,
        }
    }

    /// Frozen-model evaluation paths.
    pub fn eval() -> Self {
        StepMode {
            bn: BnMode::Eval,
            gate: GateMode::Deterministic,
        }
    }
}

pub struct LossGraph {
    pub total: Tensor,
    pub output: LossOutput,
}

/// Build the loss graph for the configured objective on one batch.
/// Deterministic given (parameters, batch, key).
pub fn compute_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    batch: &PairBatch,
    cfg: &LossConfig,
    beta: f64,
    key: SeedKey,
    mode: StepMode,
) -> Result<LossGraph> {
    cfg.validate()?;
    let needs_view = cfg.use_additional_view
        && matches!(cfg.objective, Objective::AdasslV | Objective::AdasslS);
    if needs_view && batch.x_pp.is_none() {
        return Err(Error::Config(
            "use_additional_view set but the batch has no additional view".into(),
        ));
    }

    let f_x = bundle.encode(tape, bound, &batch.x, Branch::Online)?;
    let f_p = bundle.encode(tape, bound, &batch.x_pos, Branch::Online)?;

    let (ssl, reg, diagnostics) = match cfg.objective {
        Objective::Infonce | Objective::Aninfonce => {
            let d1 = global_contrastive_direction(tape, bound, bundle, &f_x, &f_p, cfg, mode)?;
            let (ssl, pos) = if cfg.symmetric {
                let d2 = global_contrastive_direction(tape, bound, bundle, &f_p, &f_x, cfg, mode)?;
                (mean_two(tape, &d1.0, &d2.0)?, d1.1)
            } else {
                d1
            };
            (
                ssl,
                None,
                Diagnostics {
                    positive_similarity: pos,
                    ..Diagnostics::default()
                },
            )
        }
        Objective::HinfonceAffine | Objective::HinfonceMlp => {
            let d1 = hinfonce_direction(tape, bound, bundle, &f_x, &f_p, cfg, mode)?;
            let (ssl, pos) = if cfg.symmetric {
                let d2 = hinfonce_direction(tape, bound, bundle, &f_p, &f_x, cfg, mode)?;
                (mean_two(tape, &d1.0, &d2.0)?, d1.1)
            } else {
                d1
            };
            (
                ssl,
                None,
                Diagnostics {
                    positive_similarity: pos,
                    ..Diagnostics::default()
                },
            )
        }
        Objective::Byol => {
            let psi_x = bundle.psi(tape, &f_x)?;
            let d1 = byol_direction(tape, bound, bundle, &psi_x, &batch.x_pos, mode)?;
            let (ssl, pos) = if cfg.symmetric {
                let psi_p = bundle.psi(tape, &f_p)?;
                let d2 = byol_direction(tape, bound, bundle, &psi_p, &batch.x, mode)?;
                (mean_two(tape, &d1.0, &d2.0)?, d1.1)
            } else {
                d1
            };
            (
                ssl,
                None,
                Diagnostics {
                    positive_similarity: pos,
                    ..Diagnostics::default()
                },
            )
        }
        Objective::AdasslV => {
            let f_pair1 = if cfg.use_additional_view {
                bundle.encode(tape, bound, batch.x_pp.as_ref().unwrap(), Branch::Online)?
            } else {
                f_p.clone()
            };
            let d1 = adassl_v_direction(
                tape,
                bound,
                bundle,
                &f_x,
                &f_p,
                &batch.x_pos,
                &f_pair1,
                cfg,
                key.child(0),
                mode,
            )?;
            if cfg.symmetric {
                let d2 = adassl_v_direction(
                    tape,
                    bound,
                    bundle,
                    &f_p,
                    &f_x,
                    &batch.x,
                    &f_x,
                    cfg,
                    key.child(1),
                    mode,
                )?;
                let ssl = mean_two(tape, &d1.ssl, &d2.ssl)?;
                let reg = mean_two(tape, &d1.reg, &d2.reg)?;
                let kl_per_dim =
                    0.5 * (d1.diag.mean_kl_per_dim + d2.diag.mean_kl_per_dim);
                (
                    ssl,
                    Some(reg),
                    Diagnostics {
                        mean_kl_per_dim: kl_per_dim,
                        positive_similarity: d1.diag.positive_similarity,
                        ..Diagnostics::default()
                    },
                )
            } else {
                (d1.ssl, Some(d1.reg), d1.diag)
            }
        }
        Objective::AdasslS => {
            let f_pair1 = if cfg.use_additional_view {
                bundle.encode(tape, bound, batch.x_pp.as_ref().unwrap(), Branch::Online)?
            } else {
                f_p.clone()
            };
            let d1 = adassl_s_direction(
                tape,
                bound,
                bundle,
                &f_x,
                &f_p,
                &batch.x_pos,
                &f_pair1,
                cfg,
                key.child(2),
                mode,
            )?;
            if cfg.symmetric {
                let d2 = adassl_s_direction(
                    tape,
                    bound,
                    bundle,
                    &f_p,
                    &f_x,
                    &batch.x,
                    &f_x,
                    cfg,
                    key.child(3),
                    mode,
                )?;
                let ssl = mean_two(tape, &d1.ssl, &d2.ssl)?;
                let reg = mean_two(tape, &d1.reg, &d2.reg)?;
                let l0 = 0.5 * (d1.diag.expected_l0 + d2.diag.expected_l0);
                (
                    ssl,
                    Some(reg),
                    Diagnostics {
                        expected_l0: l0,
                        positive_similarity: d1.diag.positive_similarity,
                        ..Diagnostics::default()
                    },
                )
            } else {
                (d1.ssl, Some(d1.reg), d1.diag)
            }
        }
    };

    let (total, output) = assemble(tape, ssl, reg, beta, diagnostics)?;
    if !output.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: {}",
            output.total
        )));
    }
    Ok(LossGraph { total, output })
}

fn assemble(
    tape: &mut Tape,
    ssl: Tensor,
    reg: Option<Tensor>,
    beta: f64,
    diagnostics: Diagnostics,
) -> Result<(Tensor, LossOutput)> {
    let (total, reg_value) = match &reg {
        Some(r) => {
            let scaled = tape.scale(r, beta);
            (tape.add(&ssl, &scaled)?, r.item())
        }
        None => (ssl.clone(), 0.0),
    };
    let output = LossOutput {
        total: total.item(),
        ssl: ssl.item(),
        reg: reg_value,
        beta,
        diagnostics,
    };
    Ok((total, output))
}

fn mean_two(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = tape.add(a, b)?;
    Ok(tape.scale(&s, 0.5))
}

fn diag_mean(sim: &Tensor) -> f64 {
    let k = sim.shape()[0];
    (0..k).map(|i| sim.value.at2(i, i)).sum::<f64>() / k as f64
}

/// InfoNCE / AnInfoNCE: shared (scalar or diagonal) weights on (possibly
/// normalized) embeddings.
fn global_contrastive_direction(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    f_src: &Tensor,
    f_tgt: &Tensor,
    cfg: &LossConfig,
    mode: StepMode,
) -> Result<(Tensor, f64)> {
    let psi1 = bundle.psi(tape, f_src)?;
    let psi2 = bundle.psi(tape, f_tgt)?;
    let src = ParamSource::Bound(bound);
    let lam = bundle
        .lambda_head
        .as_mut()
        .ok_or_else(|| Error::Config("objective needs a concentration head".into()))?
        .weights(tape, &src, None, mode.bn)?;
    let sim = weighted_sqdist_matrix(tape, &psi1, &psi2, &lam)?;
    let ssl = infonce_from_sim(tape, &sim, cfg.tau)?;
    Ok((ssl, diag_mean(&sim)))
}

/// Conditional weights Λ_x predicted from f(x); optional mean predictor on
/// the source branch, raw embedding on the target branch.
fn hinfonce_direction(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    f_src: &Tensor,
    f_tgt: &Tensor,
    cfg: &LossConfig,
    mode: StepMode,
) -> Result<(Tensor, f64)> {
    let src = ParamSource::Bound(bound);
    let lam = bundle
        .lambda_head
        .as_mut()
        .ok_or_else(|| Error::Config("conditional head missing".into()))?
        .weights(tape, &src, Some(f_src), mode.bn)?;
    let pred_out = match bundle.mean_predictor.as_mut() {
        Some(net) => net.forward(tape, &src, f_src, mode.bn)?,
        None => f_src.clone(),
    };
    let psi1 = bundle.psi(tape, &pred_out)?;
    let psi2 = bundle.psi(tape, f_tgt)?;
    let sim = weighted_sqdist_matrix(tape, &psi1, &psi2, &lam)?;
    let ssl = infonce_from_sim(tape, &sim, cfg.tau)?;
    Ok((ssl, diag_mean(&sim)))
}

/// Distillation direction: predictor on the online embedding against the
/// normalized EMA target of the paired observation.
fn byol_direction(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    predictor_input: &Tensor,
    target_raw: &TensorValue,
    mode: StepMode,
) -> Result<(Tensor, f64)> {
    let f_target = bundle.encode(tape, bound, target_raw, Branch::Target)?;
    let target = tape.l2_normalize_rows(&f_target)?;
    let src = ParamSource::Bound(bound);
    let h = bundle
        .byol_predictor
        .as_mut()
        .ok_or_else(|| Error::Config("distillation predictor missing".into()))?
        .forward(tape, &src, predictor_input, mode.bn)?;
    let pred = tape.l2_normalize_rows(&h)?;
    let loss = mean_squared_distance(tape, &pred, &target)?;
    // Mean cosine of aligned pairs (both sides unit-norm).
    let b = pred.shape()[0];
    let cos = (0..b)
        .map(|i| {
            pred.value
                .row(i)
                .iter()
                .zip(target.value.row(i))
                .map(|(a, t)| a * t)
                .sum::<f64>()
        })
        .sum::<f64>()
        / b as f64;
    Ok((loss, cos))
}

struct LatentDirection {
    ssl: Tensor,
    reg: Tensor,
    diag: Diagnostics,
}

#[allow(clippy::too_many_arguments)]
fn adassl_v_direction(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    f_src: &Tensor,
    f_tgt: &Tensor,
    tgt_raw: &TensorValue,
    f_pair_for_r: &Tensor,
    cfg: &LossConfig,
    key: SeedKey,
    mode: StepMode,
) -> Result<LatentDirection> {
    let src = ParamSource::Bound(bound);
    let d_r = bundle.settings.d_r;
    let batch = f_src.shape()[0];
    let (q, p) = {
        let nets = bundle
            .variational
            .as_mut()
            .ok_or_else(|| Error::Config("variational nets missing".into()))?;
        let q = nets.posterior(tape, &src, f_src, f_pair_for_r, mode.bn)?;
        let p = nets.prior(tape, &src, f_src, mode.bn)?;
        (q, p)
    };
    let eps = noise_matrix(key, batch, d_r);
    let r = reparam_sample(tape, &q, &eps)?;
    let edited = bundle
        .editor
        .as_mut()
        .ok_or_else(|| Error::Config("editor missing".into()))?
        .edit(tape, &src, f_src, &r, mode.bn)?;
    let psi1 = bundle.psi(tape, &edited)?;

    let (ssl, pos) = match cfg.base {
        BaseLoss::Infonce => {
            let psi2 = bundle.psi(tape, f_tgt)?;
            let lam = bundle
                .lambda_head
                .as_mut()
                .ok_or_else(|| Error::Config("scalar head missing".into()))?
                .weights(tape, &src, None, mode.bn)?;
            let sim = weighted_sqdist_matrix(tape, &psi1, &psi2, &lam)?;
            let ssl = infonce_from_sim(tape, &sim, cfg.tau)?;
            (ssl, diag_mean(&sim))
        }
        BaseLoss::Byol => byol_direction(tape, bound, bundle, &psi1, tgt_raw, mode)?,
    };

    let kl = kl_factorized_gaussians(tape, &q, &p)?;
    let reg = tape.mean_all(&kl)?;
    let diag = Diagnostics {
        mean_kl_per_dim: reg.item() / d_r as f64,
        positive_similarity: pos,
        ..Diagnostics::default()
    };
    Ok(LatentDirection { ssl, reg, diag })
}

#[allow(clippy::too_many_arguments)]
fn adassl_s_direction(
    tape: &mut Tape,
    bound: &BoundParams,
    bundle: &mut ModelBundle,
    f_src: &Tensor,
    f_tgt: &Tensor,
    tgt_raw: &TensorValue,
    f_pair_for_r: &Tensor,
    cfg: &LossConfig,
    key: SeedKey,
    mode: StepMode,
) -> Result<LatentDirection> {
    let src = ParamSource::Bound(bound);
    let d_r = bundle.settings.d_r;
    let batch = f_src.shape()[0];
    let gate_noise = match mode.gate {
        GateMode::Deterministic => None,
        _ => Some(logistic_noise_matrix(key, batch, d_r)),
    };
    let sample = {
        let pred = bundle
            .sparse
            .as_mut()
            .ok_or_else(|| Error::Config("sparse predictor missing".into()))?;
        pred.sample(
            tape,
            &src,
            f_src,
            f_pair_for_r,
            mode.gate,
            gate_noise.as_ref(),
            mode.bn,
        )?
    };
    let edited = bundle
        .editor
        .as_mut()
        .ok_or_else(|| Error::Config("editor missing".into()))?
        .edit(tape, &src, f_src, &sample.r, mode.bn)?;
    let psi1 = bundle.psi(tape, &edited)?;

    let (ssl, pos) = match cfg.base {
        BaseLoss::Infonce => {
            let psi2 = bundle.psi(tape, f_tgt)?;
            let lam = bundle
                .lambda_head
                .as_mut()
                .ok_or_else(|| Error::Config("scalar head missing".into()))?
                .weights(tape, &src, None, mode.bn)?;
            let sim = weighted_sqdist_matrix(tape, &psi1, &psi2, &lam)?;
            let ssl = infonce_from_sim(tape, &sim, cfg.tau)?;
            (ssl, diag_mean(&sim))
        }
        BaseLoss::Byol => byol_direction(tape, bound, bundle, &psi1, tgt_raw, mode)?,
    };

    let reg = expected_l0(tape, &sample.pi)?;
    let diag = Diagnostics {
        expected_l0: reg.item(),
        positive_similarity: pos,
        ..Diagnostics::default()
    };
    Ok(LatentDirection { ssl, reg, diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::BetaSchedule;
    use crate::models::{EditorVariant, ModelBundle, ModelSettings};
    use crate::tensor::{FloatWidth, ParamBank, ParamRef, TensorValue};

    const N: usize = 4;

    fn settings() -> ModelSettings {
        ModelSettings {
            encoder_hidden_mult: 3,
            encoder_layers: 2,
            d_r: 2,
            head_hidden: 8,
            ..ModelSettings::default()
        }
    }

    fn bundle_for(objective: Objective, base: BaseLoss, editor: EditorVariant) -> ModelBundle {
        let plan = objective.plan(base, editor, false);
        ModelBundle::build(N, settings(), &plan, FloatWidth::F64, SeedKey::root(7))
    }

    fn cfg(objective: Objective, symmetric: bool) -> LossConfig {
        LossConfig {
            objective,
            base: BaseLoss::Infonce,
            tau: 0.5,
            beta: BetaSchedule::constant(1.0),
            symmetric,
            use_additional_view: false,
        }
    }

    fn batch(with_view: bool) -> PairBatch {
        let mut s = SeedKey::root(88).stream();
        PairBatch {
            x: TensorValue::new(vec![6, N], s.normals(6 * N)),
            x_pos: TensorValue::new(vec![6, N], s.normals(6 * N)),
            x_pp: with_view.then(|| TensorValue::new(vec![6, N], s.normals(6 * N))),
        }
    }

    fn run(
        bundle: &mut ModelBundle,
        batch: &PairBatch,
        cfg: &LossConfig,
        beta: f64,
    ) -> LossOutput {
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = bundle.bank.bind(&mut tape);
        compute_loss(
            &mut tape,
            &bound,
            bundle,
            batch,
            cfg,
            beta,
            SeedKey::root(5),
            StepMode::gradcheck(),
        )
        .unwrap()
        .output
    }

    fn zero_params_with_prefix(bank: &mut ParamBank, prefix: &str) {
        for i in 0..bank.len() {
            if bank.entries()[i].name.starts_with(prefix) {
                let shape = bank.entries()[i].value.shape().to_vec();
                bank.set_value(ParamRef(i), TensorValue::zeros(shape));
            }
        }
    }

    #[test]
    fn aninfonce_with_unit_diagonal_equals_infonce() {
        // Both heads realize weight 1 at init and share the encoder key.
        let mut b1 = bundle_for(Objective::Infonce, BaseLoss::Infonce, EditorVariant::Linear);
        let mut b2 = bundle_for(Objective::Aninfonce, BaseLoss::Infonce, EditorVariant::Linear);
        let data = batch(false);
        let l1 = run(&mut b1, &data, &cfg(Objective::Infonce, true), 0.0);
        let l2 = run(&mut b2, &data, &cfg(Objective::Aninfonce, true), 0.0);
        assert!((l1.total - l2.total).abs() < 1e-12, "{} vs {}", l1.total, l2.total);
    }

    #[test]
    fn hinfonce_with_unit_weights_and_no_predictor_equals_infonce() {
        let mut b1 = bundle_for(Objective::Infonce, BaseLoss::Infonce, EditorVariant::Linear);
        let mut b2 = bundle_for(
            Objective::HinfonceAffine,
            BaseLoss::Infonce,
            EditorVariant::Linear,
        );
        // Conditional affine head: zero weights leave softplus(final bias)=1.
        zero_params_with_prefix(&mut b2.bank, "lambda.affine.w");
        let data = batch(false);
        let l1 = run(&mut b1, &data, &cfg(Objective::Infonce, false), 0.0);
        let l2 = run(&mut b2, &data, &cfg(Objective::HinfonceAffine, false), 0.0);
        assert!((l1.total - l2.total).abs() < 1e-12);
    }

    #[test]
    fn adassl_v_with_inert_editor_and_zero_beta_reduces_to_base_loss() {
        let mut base = bundle_for(Objective::Infonce, BaseLoss::Infonce, EditorVariant::Linear);
        let mut ada = bundle_for(Objective::AdasslV, BaseLoss::Infonce, EditorVariant::Modular);
        // Zeroed modular parameters make the edit the identity for any r.
        zero_params_with_prefix(&mut ada.bank, "t.");
        let data = batch(false);
        let l_base = run(&mut base, &data, &cfg(Objective::Infonce, false), 0.0);
        let l_ada = run(&mut ada, &data, &cfg(Objective::AdasslV, false), 0.0);
        assert!(
            (l_base.total - l_ada.total).abs() < 1e-12,
            "{} vs {}",
            l_base.total,
            l_ada.total
        );
    }

    #[test]
    fn total_is_ssl_plus_beta_reg() {
        let mut b = bundle_for(Objective::AdasslS, BaseLoss::Infonce, EditorVariant::Modular);
        let data = batch(false);
        let beta = 2.5;
        let out = run(&mut b, &data, &cfg(Objective::AdasslS, true), beta);
        assert!((out.total - (out.ssl + beta * out.reg)).abs() < 1e-12);
        assert!(out.reg >= 0.0);
        assert!(out.diagnostics.expected_l0 >= 0.0);
        assert!(out.diagnostics.expected_l0 <= settings().d_r as f64);
    }

    #[test]
    fn symmetric_is_mean_of_the_two_directions() {
        let mut b = bundle_for(Objective::Infonce, BaseLoss::Infonce, EditorVariant::Linear);
        let data = batch(false);
        let swapped = PairBatch {
            x: data.x_pos.clone(),
            x_pos: data.x.clone(),
            x_pp: None,
        };
        let sym = run(&mut b, &data, &cfg(Objective::Infonce, true), 0.0);
        let d1 = run(&mut b, &data, &cfg(Objective::Infonce, false), 0.0);
        let d2 = run(&mut b, &swapped, &cfg(Objective::Infonce, false), 0.0);
        assert!((sym.total - 0.5 * (d1.total + d2.total)).abs() < 1e-14);
    }

    #[test]
    fn missing_additional_view_is_a_config_error() {
        let mut b = bundle_for(Objective::AdasslV, BaseLoss::Infonce, EditorVariant::Linear);
        let mut c = cfg(Objective::AdasslV, false);
        c.use_additional_view = true;
        let data = batch(false);
        let mut tape = Tape::new(FloatWidth::F64);
        let bound = b.bank.bind(&mut tape);
        let err = compute_loss(
            &mut tape,
            &bound,
            &mut b,
            &data,
            &c,
            0.0,
            SeedKey::root(5),
            StepMode::train(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn byol_loss_runs_and_is_deterministic() {
        let mut b = bundle_for(Objective::Byol, BaseLoss::Byol, EditorVariant::Linear);
        let data = batch(false);
        let c = LossConfig {
            objective: Objective::Byol,
            base: BaseLoss::Byol,
            tau: 1.0,
            beta: BetaSchedule::constant(0.0),
            symmetric: false,
            use_additional_view: false,
        };
        let a = run(&mut b, &data, &c, 0.0);
        let bb = run(&mut b, &data, &c, 0.0);
        assert_eq!(a.total, bb.total);
        assert!(a.total >= 0.0);
        // Cosine diagnostic is bounded.
        assert!(a.diagnostics.positive_similarity.abs() <= 1.0 + 1e-12);
    }
}
