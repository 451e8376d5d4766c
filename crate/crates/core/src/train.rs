//! Training loop and trial orchestration.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::dgp::{mix, sample_latents, DgpParams};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_reports, dci_disentanglement, density_export, embed_dataset, evaluate_regimes,
    r_squared, AggRow, EvalReport, EvalSizes, ProbeInput,
};
use crate::losses::{compute_loss, Diagnostics, LossOutput, StepMode};
use crate::models::ModelBundle;
use crate::optim::{AdamWConfig, OptimState};
use crate::rng::SeedKey;
use crate::tensor::{ParamBank, Tape, TensorValue};

/// One line of the step log.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub ssl: f64,
    pub reg: f64,
    pub beta: f64,
    pub lr: f64,
}

pub struct TrialArtifacts {
    pub bundle: ModelBundle,
    pub dgp: DgpParams,
    pub trace: Vec<StepRecord>,
    /// Diagnostics averaged over the trailing 5% of steps (min 20 records).
    pub tail_diagnostics: Diagnostics,
    pub aborted: Option<String>,
}

fn seed_root(cfg: &ExperimentConfig, trial: u64) -> SeedKey {
    SeedKey::root(cfg.trials.base_seed).child(trial)
}

/// Build the model bundle an experiment config describes.
pub fn build_bundle(cfg: &ExperimentConfig, key: SeedKey) -> ModelBundle {
    let plan = cfg
        .loss
        .objective
        .plan(cfg.loss.base, cfg.editor_variant(), cfg.mean_predictor());
    ModelBundle::build(
        cfg.n(),
        cfg.model_settings(),
        &plan,
        cfg.io.float_width,
        key,
    )
}

/// Train one trial: fresh generative process, fresh model, fixed-step loop.
/// Bit-deterministic in (config, trial). A NaN loss or non-finite gradient
/// aborts the trial, leaving the last good parameters in the bundle.
pub fn train_trial(
    cfg: &ExperimentConfig,
    trial: u64,
    mut step_sink: Option<&mut dyn Write>,
) -> Result<TrialArtifacts> {
    cfg.validate()?;
    let root = seed_root(cfg, trial);
    let width = cfg.io.float_width;
    let dgp = DgpParams::sample(
        cfg.dgp.n_c,
        cfg.dgp.n_s,
        cfg.dgp.regime,
        cfg.dgp.weight_norm,
        width,
        root.child(0),
    )?;
    let mut bundle = build_bundle(cfg, root.child(1));
    let mut optim = OptimState::new(
        &bundle.bank,
        AdamWConfig::new(cfg.train.lr, cfg.train.weight_decay),
    );
    let loss_cfg = cfg.loss_config();
    let uses_ema = bundle.ema.is_some();
    let mut trace = Vec::new();
    let mut tail: Vec<Diagnostics> = Vec::new();
    let tail_window = (cfg.train.steps / 20).max(20);
    let mut online_probe = cfg
        .train
        .online_probe
        .then(|| OnlineProbe::new(cfg, &dgp, root.child(4)))
        .transpose()?;
    let mut aborted = None;

    for step in 0..cfg.train.steps {
        let step_key = root.child(2).child(step as u64);
        let latents = sample_latents(&dgp, cfg.train.batch, step_key.child(0))?;
        let pairs = mix(&latents, &dgp.mixing, width);
        let beta = loss_cfg.beta.value(step);

        let mut tape = Tape::new(width);
        let bound = bundle.bank.bind(&mut tape);
        let outcome = compute_loss(
            &mut tape,
            &bound,
            &mut bundle,
            &pairs,
            &loss_cfg,
            beta,
            step_key.child(1),
            StepMode::train(),
        );
        let graph = match outcome {
            Ok(g) => g,
            Err(Error::Numeric(msg)) => {
                aborted = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let grads = tape.backward(&graph.total)?;
        if let Err(Error::Numeric(msg)) = optim.step(&mut bundle.bank, &grads, &bound, width) {
            aborted = Some(format!("step {step}: {msg}"));
            break;
        }
        if uses_ema {
            bundle.ema_update(cfg.train.ema_momentum);
        }
        if step + 1 + tail_window >= cfg.train.steps {
            tail.push(graph.output.diagnostics.clone());
        }
        if step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps {
            let rec = record(step, &graph.output, optim.lr());
            if let Some(sink) = step_sink.as_deref_mut() {
                writeln!(sink, "{}", serde_json::to_string(&rec).expect("record"))?;
            }
            trace.push(rec);
        }
        if let Some(probe) = online_probe.as_mut() {
            if step % cfg.train.log_every == 0 {
                probe.update(&mut bundle, &pairs.x, &latents.c)?;
            }
        }
    }

    if let Some(probe) = online_probe.as_mut() {
        probe.finish(&mut bundle)?;
    }

    let tail_diagnostics = average_diagnostics(&tail);
    Ok(TrialArtifacts {
        bundle,
        dgp,
        trace,
        tail_diagnostics,
        aborted,
    })
}

fn record(step: usize, out: &LossOutput, lr: f64) -> StepRecord {
    StepRecord {
        step,
        total: out.total,
        ssl: out.ssl,
        reg: out.reg,
        beta: out.beta,
        lr,
    }
}

fn average_diagnostics(tail: &[Diagnostics]) -> Diagnostics {
    if tail.is_empty() {
        return Diagnostics::default();
    }
    let n = tail.len() as f64;
    Diagnostics {
        mean_kl_per_dim: tail.iter().map(|d| d.mean_kl_per_dim).sum::<f64>() / n,
        expected_l0: tail.iter().map(|d| d.expected_l0).sum::<f64>() / n,
        positive_similarity: tail.iter().map(|d| d.positive_similarity).sum::<f64>() / n,
    }
}

/// Affine probe maintained during training with its own optimizer; keeps
/// the model checkpoint that maximizes held-out probe R².
struct OnlineProbe {
    bank: ParamBank,
    optim: OptimState,
    val_x: TensorValue,
    val_c: TensorValue,
    best_r2: f64,
    best_snapshot: Option<Vec<TensorValue>>,
    evals_between: usize,
    updates: usize,
}

impl OnlineProbe {
    fn new(cfg: &ExperimentConfig, dgp: &DgpParams, key: SeedKey) -> Result<OnlineProbe> {
        let latents = sample_latents(dgp, 2048, key)?;
        let pairs = mix(&latents, &dgp.mixing, cfg.io.float_width);
        let d_f = cfg.model.space.embed_dim(cfg.n());
        let mut bank = ParamBank::new();
        bank.push("probe.w", TensorValue::zeros(vec![d_f, cfg.dgp.n_c]), false);
        bank.push("probe.b", TensorValue::zeros(vec![1, cfg.dgp.n_c]), true);
        let optim = OptimState::new(&bank, AdamWConfig::new(1e-2, 0.0));
        Ok(OnlineProbe {
            bank,
            optim,
            val_x: pairs.x,
            val_c: latents.c,
            best_r2: f64::NEG_INFINITY,
            best_snapshot: None,
            evals_between: 10,
            updates: 0,
        })
    }

    fn update(
        &mut self,
        bundle: &mut ModelBundle,
        batch_x: &TensorValue,
        targets: &TensorValue,
    ) -> Result<()> {
        let normalize = bundle.encoder.normalize;
        let emb = crate::eval::embed_observations(bundle, batch_x, normalize)?;
        let mut tape = Tape::new(bundle.width);
        let bound = self.bank.bind(&mut tape);
        let x = tape.constant(emb);
        let t = tape.constant(targets.clone());
        let lin = tape.matmul(&x, &bound.vars()[0])?;
        let pred = tape.add(&lin, &bound.vars()[1])?;
        let err = tape.sub(&pred, &t)?;
        let sq = tape.square(&err);
        let loss = tape.mean_all(&sq)?;
        let grads = tape.backward(&loss)?;
        self.optim
            .step(&mut self.bank, &grads, &bound, bundle.width)?;
        self.updates += 1;
        if self.updates % self.evals_between == 0 {
            let r2 = self.val_r2(bundle)?;
            if r2 > self.best_r2 {
                self.best_r2 = r2;
                self.best_snapshot = Some(bundle.bank.snapshot());
            }
        }
        Ok(())
    }

    fn val_r2(&mut self, bundle: &mut ModelBundle) -> Result<f64> {
        let normalize = bundle.encoder.normalize;
        let emb = crate::eval::embed_observations(bundle, &self.val_x, normalize)?;
        let fit = crate::eval::ProbeFit {
            weights: self.bank.value(crate::tensor::ParamRef(0)).clone(),
            intercept: self.bank.value(crate::tensor::ParamRef(1)).data().to_vec(),
            r2_fit: 0.0,
        };
        r_squared(&fit, &emb, &self.val_c)
    }

    fn finish(&mut self, bundle: &mut ModelBundle) -> Result<()> {
        // Final evaluation, then restore the best checkpoint seen.
        let r2 = self.val_r2(bundle)?;
        if r2 > self.best_r2 {
            self.best_r2 = r2;
            self.best_snapshot = None; // current weights are the best
        }
        if let Some(snapshot) = &self.best_snapshot {
            bundle.bank.restore(snapshot);
        }
        Ok(())
    }
}

/// Evaluate one completed trial.
pub fn evaluate_trial(
    cfg: &ExperimentConfig,
    artifacts: &mut TrialArtifacts,
    trial: u64,
) -> Result<EvalReport> {
    let root = seed_root(cfg, trial);
    let sizes = EvalSizes {
        fit: cfg.eval.probe_fit,
        test: cfg.eval.probe_test,
        ridge_eps: cfg.eval.ridge_eps,
    };
    let model_name = model_name(cfg);
    let dgp = artifacts.dgp.clone();
    let regimes = if cfg.model.baseline_identity {
        evaluate_regimes(ProbeInput::RawObservations, &dgp, &sizes, root.child(3))?
    } else {
        evaluate_regimes(
            ProbeInput::Encoder(&mut artifacts.bundle),
            &dgp,
            &sizes,
            root.child(3),
        )?
    };
    let dci = if cfg.eval.dci && !cfg.model.baseline_identity {
        let latents = crate::dgp::eval_distribution(
            &dgp,
            crate::dgp::EvalDistribution::Train,
            cfg.eval.dci_samples,
            root.child(6),
        )?;
        let normalize = artifacts.bundle.encoder.normalize;
        let emb = embed_dataset(&mut artifacts.bundle, &dgp, &latents, normalize)?;
        Some(dci_disentanglement(&emb, &latents.z(), cfg.eval.dci_lambda)?)
    } else {
        None
    };
    let is_latent_model = matches!(
        cfg.loss.objective,
        crate::losses::Objective::AdasslS | crate::losses::Objective::AdasslV
    );
    Ok(EvalReport {
        model: model_name,
        regimes,
        dci,
        converged_expected_l0: (is_latent_model && !cfg.model.baseline_identity)
            .then_some(artifacts.tail_diagnostics.expected_l0),
        final_positive_similarity: (!cfg.model.baseline_identity)
            .then_some(artifacts.tail_diagnostics.positive_similarity),
        density_file: None,
    })
}

pub fn model_name(cfg: &ExperimentConfig) -> String {
    if cfg.model.baseline_identity {
        "Identity".to_string()
    } else {
        cfg.loss.objective.display_name().to_string()
    }
}

pub struct RunOutcome {
    pub rows: Vec<AggRow>,
    pub reports: Vec<EvalReport>,
    pub failures: Vec<(u64, String)>,
}

/// Independent trials (fresh process + model per seed), aggregated into
/// mean ± std rows. Aborted trials are recorded and excluded from the
/// aggregation; their last-good checkpoint is still written.
pub fn run_trials(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for trial in 0..cfg.trials.n_seeds as u64 {
        let trial_dir = out_dir.map(|d| d.join(format!("trial_{trial}")));
        if let Some(dir) = &trial_dir {
            fs::create_dir_all(dir)?;
        }
        let mut sink: Option<fs::File> = match &trial_dir {
            Some(dir) => Some(fs::File::create(dir.join("steps.jsonl"))?),
            None => None,
        };
        let mut artifacts = train_trial(
            cfg,
            trial,
            sink.as_mut().map(|f| f as &mut dyn Write),
        )?;
        if let Some(dir) = &trial_dir {
            let mut ckpt = fs::File::create(dir.join("checkpoint.csv"))?;
            artifacts.bundle.bank.save_checkpoint(&mut ckpt)?;
        }
        if let Some(reason) = &artifacts.aborted {
            failures.push((trial, reason.clone()));
            continue;
        }
        let mut report = evaluate_trial(cfg, &mut artifacts, trial)?;
        if cfg.eval.density_samples > 0 && !cfg.model.baseline_identity {
            if let Some(dir) = &trial_dir {
                let path = dir.join("density.csv");
                let mut f = fs::File::create(&path)?;
                density_export(
                    &mut artifacts.bundle,
                    &artifacts.dgp,
                    cfg.loss.objective,
                    cfg.eval.density_samples,
                    cfg.eval.ridge_eps,
                    seed_root(cfg, trial).child(5),
                    &mut f,
                )?;
                report.density_file = Some(path.to_string_lossy().into_owned());
            }
        }
        if let Some(dir) = &trial_dir {
            let mut f = fs::File::create(dir.join("eval_report.json"))?;
            writeln!(f, "{}", serde_json::to_string_pretty(&report).expect("report"))?;
        }
        reports.push(report);
    }
    let rows = aggregate_reports(&model_name(cfg), &reports, cfg.trials.n_seeds);
    if let Some(dir) = out_dir {
        let mut f = fs::File::create(dir.join("results.csv"))?;
        crate::eval::write_results_csv(&rows, &mut f)?;
        if !failures.is_empty() {
            let mut f = fs::File::create(dir.join("failures.csv"))?;
            writeln!(f, "trial,reason")?;
            for (t, reason) in &failures {
                writeln!(f, "{t},{}", reason.replace(',', ";"))?;
            }
        }
    }
    Ok(RunOutcome {
        rows,
        reports,
        failures,
    })
}

/// Convenience for probing a trained trial without an output directory.
pub fn train_and_evaluate(cfg: &ExperimentConfig, trial: u64) -> Result<EvalReport> {
    let mut artifacts = train_trial(cfg, trial, None)?;
    if let Some(reason) = artifacts.aborted {
        return Err(Error::TrialAborted {
            step: 0,
            reason,
        });
    }
    evaluate_trial(cfg, &mut artifacts, trial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Objective;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dgp.n_c = 2;
        cfg.dgp.n_s = 2;
        cfg.model.encoder_hidden_mult = 3;
        cfg.model.encoder_layers = 2;
        cfg.model.d_r = 2;
        cfg.model.head_hidden = 8;
        cfg.train.steps = 5;
        cfg.train.batch = 16;
        cfg.train.log_every = 2;
        cfg.eval.probe_fit = 64;
        cfg.eval.probe_test = 64;
        cfg.trials.n_seeds = 1;
        cfg
    }

    #[test]
    fn zero_steps_returns_initial_weights() {
        let mut cfg = tiny_cfg();
        cfg.train.steps = 0;
        let art = train_trial(&cfg, 0, None).unwrap();
        let fresh = build_bundle(&cfg, seed_root(&cfg, 0).child(1));
        assert_eq!(art.bundle.bank.flatten(), fresh.bank.flatten());
        assert!(art.aborted.is_none());
    }

    #[test]
    fn identical_seeds_give_bit_identical_parameters() {
        let cfg = tiny_cfg();
        let a = train_trial(&cfg, 0, None).unwrap();
        let b = train_trial(&cfg, 0, None).unwrap();
        let fa = a.bundle.bank.flatten();
        let fb = b.bundle.bank.flatten();
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn different_trials_differ() {
        let cfg = tiny_cfg();
        let a = train_trial(&cfg, 0, None).unwrap();
        let b = train_trial(&cfg, 1, None).unwrap();
        assert_ne!(a.bundle.bank.flatten(), b.bundle.bank.flatten());
    }

    #[test]
    fn full_pipeline_produces_reports_and_rows() {
        let mut cfg = tiny_cfg();
        cfg.loss.objective = Objective::AdasslS;
        cfg.loss.use_additional_view = true;
        cfg.loss.beta_end = 1.0;
        cfg.loss.beta_start = 1.0;
        let out = run_trials(&cfg, None).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert!(out.failures.is_empty());
        assert!(out
            .rows
            .iter()
            .any(|r| r.metric == "r2_test" && r.regime == "p_z"));
        assert!(out
            .rows
            .iter()
            .any(|r| r.metric == "expected_l0"));
    }

    #[test]
    fn identity_baseline_skips_training() {
        let mut cfg = tiny_cfg();
        cfg.model.baseline_identity = true;
        cfg.train.steps = 0;
        let out = run_trials(&cfg, None).unwrap();
        assert_eq!(out.reports[0].model, "Identity");
        // Raw observations of an injective map recover latents well
        // in-distribution even without training.
        assert!(out.reports[0].regimes.p_z.test_r2 > 0.2);
    }

    #[test]
    fn trace_is_logged_at_the_configured_cadence() {
        let cfg = tiny_cfg();
        let art = train_trial(&cfg, 0, None).unwrap();
        // Steps 0, 2, 4 plus the final step 4 deduplicated by position:
        // records at 0, 2, 4.
        assert_eq!(art.trace.len(), 3);
        assert_eq!(art.trace.last().unwrap().step, 4);
    }
}
