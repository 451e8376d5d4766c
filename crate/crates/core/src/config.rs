//! Experiment configuration: schema, validation, overrides, and the preset
//! grids behind the `table` command.

use crate::dgp::{NoiseRegime, WeightNorm};
use crate::error::{Error, Result};
use crate::losses::{BaseLoss, BetaSchedule, LossConfig, Objective};
use crate::models::{EditorVariant, ModelSettings, ModelSpace, ModularBias};
use crate::tensor::FloatWidth;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Label used in artifact names and result rows.
    pub name: String,
    pub dgp: DgpSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub trials: TrialsSection,
    pub io: IoSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            dgp: DgpSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            trials: TrialsSection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSection {
    pub n_c: usize,
    pub n_s: usize,
    pub regime: NoiseRegime,
    pub weight_norm: WeightNorm,
}

impl Default for DgpSection {
    fn default() -> Self {
        DgpSection {
            n_c: 5,
            n_s: 5,
            regime: NoiseRegime::Isotropic,
            weight_norm: WeightNorm::Rows,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub space: ModelSpace,
    pub encoder_hidden_mult: usize,
    pub encoder_layers: usize,
    pub encoder_leaky_slope: f64,
    pub d_r: usize,
    pub head_hidden: usize,
    /// None resolves by objective: modular for the sparse variant, linear
    /// otherwise.
    pub editor: Option<EditorVariant>,
    pub modular_bias: ModularBias,
    pub gumbel_temperature: f64,
    /// None resolves to: enabled on the complex regime (where the
    /// conditional mean is not centered on the source latents).
    pub mean_predictor: Option<bool>,
    /// Probe the raw observations instead of training an encoder.
    pub baseline_identity: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            space: ModelSpace::Hypersphere,
            encoder_hidden_mult: 10,
            encoder_layers: 4,
            encoder_leaky_slope: 0.01,
            d_r: 5,
            head_hidden: 64,
            editor: None,
            modular_bias: ModularBias::Vector,
            gumbel_temperature: 1.0,
            mean_predictor: None,
            baseline_identity: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub objective: Objective,
    pub base: BaseLoss,
    pub tau: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_warmup_steps: usize,
    pub symmetric: bool,
    pub use_additional_view: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            objective: Objective::Infonce,
            base: BaseLoss::Infonce,
            tau: 1.0,
            beta_start: 0.0,
            beta_end: 0.0,
            beta_warmup_steps: 0,
            symmetric: false,
            use_additional_view: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub log_every: usize,
    /// Maintain an online affine probe and keep the best checkpoint.
    pub online_probe: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 20_000,
            batch: 512,
            lr: 5e-4,
            weight_decay: 1e-4,
            ema_momentum: 0.996,
            log_every: 100,
            online_probe: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_fit: usize,
    pub probe_test: usize,
    pub ridge_eps: f64,
    pub dci: bool,
    pub dci_lambda: f64,
    pub dci_samples: usize,
    /// 0 disables the density export.
    pub density_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            probe_fit: 20_000,
            probe_test: 20_000,
            ridge_eps: 1e-8,
            dci: false,
            dci_lambda: 0.01,
            dci_samples: 5_000,
            density_samples: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialsSection {
    pub n_seeds: usize,
    pub base_seed: u64,
}

impl Default for TrialsSection {
    fn default() -> Self {
        TrialsSection {
            n_seeds: 3,
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Output directory root; falls back to the env override, then "runs".
    pub out_dir: Option<String>,
    pub float_width: FloatWidth,
}

#[allow(clippy::derivable_impls)]
impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: None,
            float_width: FloatWidth::F64,
        }
    }
}

impl ExperimentConfig {
    pub fn n(&self) -> usize {
        self.dgp.n_c + self.dgp.n_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.dgp.n_c == 0 || self.dgp.n_s == 0 {
            return Err(Error::Config("n_c and n_s must be at least 1".into()));
        }
        if self.train.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if self.loss.tau <= 0.0 {
            return Err(Error::Config("loss.tau must be > 0".into()));
        }
        if self.loss.beta_start < 0.0 || self.loss.beta_end < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.train.ema_momentum) {
            return Err(Error::Config("ema_momentum must be in [0, 1]".into()));
        }
        if self.trials.n_seeds == 0 {
            return Err(Error::Config("trials.n_seeds must be >= 1".into()));
        }
        if self.eval.probe_fit <= self.model.space.embed_dim(self.n()) + 1 {
            return Err(Error::Config(
                "eval.probe_fit must exceed the embedding dimension".into(),
            ));
        }
        if self.model.baseline_identity && self.train.steps > 0 {
            return Err(Error::Config(
                "baseline_identity runs must set train.steps = 0".into(),
            ));
        }
        Ok(())
    }

    /// Editor variant, defaulted per objective.
    pub fn editor_variant(&self) -> EditorVariant {
        self.model.editor.unwrap_or(match self.loss.objective {
            Objective::AdasslS => EditorVariant::Modular,
            _ => EditorVariant::Linear,
        })
    }

    /// Mean-predictor flag, defaulted to the regimes whose conditional mean
    /// is not the source latent.
    pub fn mean_predictor(&self) -> bool {
        self.model
            .mean_predictor
            .unwrap_or(self.dgp.regime == NoiseRegime::Complex)
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            space: self.model.space,
            encoder_hidden_mult: self.model.encoder_hidden_mult,
            encoder_layers: self.model.encoder_layers,
            encoder_leaky_slope: self.model.encoder_leaky_slope,
            d_r: self.model.d_r,
            head_hidden: self.model.head_hidden,
            modular_bias: self.model.modular_bias,
            gumbel_temperature: self.model.gumbel_temperature,
            ema_momentum: self.train.ema_momentum,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            objective: self.loss.objective,
            base: self.loss.base,
            tau: self.loss.tau,
            beta: BetaSchedule {
                start: self.loss.beta_start,
                end: self.loss.beta_end,
                warmup_steps: self.loss.beta_warmup_steps,
            },
            symmetric: self.loss.symmetric,
            use_additional_view: self.loss.use_additional_view,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Parse with `--set key.path=value` overrides applied before
    /// validation. Unknown keys are rejected, not ignored.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for ov in overrides {
            let (path, literal) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            apply_override(&mut value, path.trim(), literal.trim())?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_override(root: &mut toml::Value, path: &str, literal: &str) -> Result<()> {
    let parsed: toml::Value = match literal.parse::<i64>() {
        Ok(v) => toml::Value::Integer(v),
        Err(_) => match literal.parse::<f64>() {
            Ok(v) => toml::Value::Float(v),
            Err(_) => match literal {
                "true" => toml::Value::Boolean(true),
                "false" => toml::Value::Boolean(false),
                s => toml::Value::String(s.to_string()),
            },
        },
    };
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' hits a non-table")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("non-empty path");
}

/// Desk scale finishes a trial in minutes; paper scale mirrors the source
/// experiments' budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Scale::Desk => {
                cfg.train.steps = 20_000;
                cfg.train.batch = 512;
                cfg.eval.probe_fit = 20_000;
                cfg.eval.probe_test = 20_000;
            }
            Scale::Paper => {
                cfg.train.steps = 200_000;
                cfg.train.batch = 2048;
                cfg.eval.probe_fit = 100_000;
                cfg.eval.probe_test = 100_000;
            }
        }
    }
}

/// A cell of the preset evaluation grids.
#[derive(Clone, Debug)]
pub struct TableCell {
    pub label: &'static str,
    pub regime: NoiseRegime,
    pub space: ModelSpace,
    /// None marks the identity (probe on raw observations) baseline.
    pub objective: Option<Objective>,
}

impl TableCell {
    /// Concrete config for this cell: objective-specific hyperparameters
    /// follow the experimental protocol (temperature per regime, symmetric
    /// application and the additional view on the complex conditional,
    /// warmup for the variational objective).
    pub fn config(&self, scale: Scale, n_seeds: usize, base_seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            name: format!(
                "{}-{}-{}",
                self.label.to_lowercase().replace('_', "-"),
                self.regime.name(),
                match self.space {
                    ModelSpace::Unbounded => "unbounded",
                    ModelSpace::Hypersphere => "hypersphere",
                }
            ),
            ..ExperimentConfig::default()
        };
        cfg.dgp.regime = self.regime;
        cfg.model.space = self.space;
        cfg.trials.n_seeds = n_seeds;
        cfg.trials.base_seed = base_seed;
        match self.objective {
            None => {
                cfg.model.baseline_identity = true;
            }
            Some(objective) => {
                cfg.loss.objective = objective;
                cfg.loss.tau = match self.regime {
                    NoiseRegime::Zero | NoiseRegime::Complex => 0.1,
                    _ => 1.0,
                };
                if self.regime == NoiseRegime::Complex {
                    cfg.loss.symmetric = true;
                }
                match objective {
                    Objective::AdasslV => {
                        cfg.loss.beta_start = 0.0;
                        cfg.loss.beta_end = 0.5;
                        cfg.loss.beta_warmup_steps = 1000;
                        cfg.loss.use_additional_view = true;
                    }
                    Objective::AdasslS => {
                        cfg.loss.beta_start = 1.0;
                        cfg.loss.beta_end = 1.0;
                        cfg.loss.beta_warmup_steps = 0;
                        cfg.loss.use_additional_view = true;
                    }
                    _ => {}
                }
            }
        }
        scale.apply(&mut cfg);
        if self.objective.is_none() {
            cfg.train.steps = 0;
        }
        cfg
    }
}

/// Unimodal-conditional grid: noise regimes of increasing structure, both
/// embedding spaces, plus the identity baseline.
pub fn table1_cells() -> Vec<TableCell> {
    let mut cells = Vec::new();
    for space in [ModelSpace::Unbounded, ModelSpace::Hypersphere] {
        cells.push(TableCell {
            label: "Identity",
            regime: NoiseRegime::Zero,
            space,
            objective: None,
        });
        cells.push(TableCell {
            label: "InfoNCE",
            regime: NoiseRegime::Zero,
            space,
            objective: Some(Objective::Infonce),
        });
        for (label, objective) in [
            ("InfoNCE", Objective::Infonce),
            ("H-InfoNCE_Affine", Objective::HinfonceAffine),
        ] {
            cells.push(TableCell {
                label,
                regime: NoiseRegime::Isotropic,
                space,
                objective: Some(objective),
            });
        }
        for (label, objective) in [
            ("InfoNCE", Objective::Infonce),
            ("AnInfoNCE", Objective::Aninfonce),
            ("H-InfoNCE_Affine", Objective::HinfonceAffine),
        ] {
            cells.push(TableCell {
                label,
                regime: NoiseRegime::Anisotropic,
                space,
                objective: Some(objective),
            });
        }
        for (label, objective) in [
            ("InfoNCE", Objective::Infonce),
            ("AnInfoNCE", Objective::Aninfonce),
            ("H-InfoNCE_Affine", Objective::HinfonceAffine),
            ("H-InfoNCE_MLP", Objective::HinfonceMlp),
        ] {
            cells.push(TableCell {
                label,
                regime: NoiseRegime::Heteroscedastic,
                space,
                objective: Some(objective),
            });
        }
    }
    cells
}

/// Complex-conditional grid: all models on the normalized embedding space.
pub fn table2_cells() -> Vec<TableCell> {
    [
        ("InfoNCE", Objective::Infonce),
        ("AnInfoNCE", Objective::Aninfonce),
        ("H-InfoNCE_MLP", Objective::HinfonceMlp),
        ("AdaSSL-V", Objective::AdasslV),
        ("AdaSSL-S", Objective::AdasslS),
    ]
    .into_iter()
    .map(|(label, objective)| TableCell {
        label,
        regime: NoiseRegime::Complex,
        space: ModelSpace::Hypersphere,
        objective: Some(objective),
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        let text2 = back.to_toml_string();
        assert_eq!(text, text2, "serialize-parse-serialize must be a fixed point");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "nam = \"typo\"";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
        let nested = "[train]\nstepz = 100";
        assert!(ExperimentConfig::from_toml_str(nested).is_err());
    }

    #[test]
    fn overrides_apply_with_dotted_paths() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "",
            &[
                "train.steps=123".into(),
                "loss.tau=0.25".into(),
                "loss.objective=adassl_s".into(),
                "model.space=unbounded".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 123);
        assert_eq!(cfg.loss.tau, 0.25);
        assert_eq!(cfg.loss.objective, Objective::AdasslS);
        assert_eq!(cfg.model.space, ModelSpace::Unbounded);
        // Objective-derived default.
        assert_eq!(cfg.editor_variant(), EditorVariant::Modular);
    }

    #[test]
    fn invalid_override_values_error() {
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["loss.tau=-1.0".into()]).is_err()
        );
        assert!(ExperimentConfig::from_toml_with_overrides("", &["nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["bad".into()]).is_err());
    }

    #[test]
    fn table2_grid_contains_exactly_the_expected_rows() {
        let cells = table2_cells();
        let labels: Vec<&str> = cells.iter().map(|c| c.label).collect();
        assert_eq!(
            labels,
            vec!["InfoNCE", "AnInfoNCE", "H-InfoNCE_MLP", "AdaSSL-V", "AdaSSL-S"]
        );
        assert!(cells
            .iter()
            .all(|c| c.regime == NoiseRegime::Complex && c.space == ModelSpace::Hypersphere));
    }

    #[test]
    fn table1_grid_includes_identity_baseline() {
        let cells = table1_cells();
        assert!(cells.iter().any(|c| c.objective.is_none()));
        // Zero-variance rows use the colder temperature.
        let zero_cell = cells
            .iter()
            .find(|c| c.regime == NoiseRegime::Zero && c.objective.is_some())
            .unwrap();
        let cfg = zero_cell.config(Scale::Desk, 3, 0);
        assert_eq!(cfg.loss.tau, 0.1);
        let iso_cell = cells
            .iter()
            .find(|c| c.regime == NoiseRegime::Isotropic)
            .unwrap();
        assert_eq!(iso_cell.config(Scale::Desk, 3, 0).loss.tau, 1.0);
    }

    #[test]
    fn complex_cells_are_symmetric_with_additional_view_for_latent_models() {
        let cells = table2_cells();
        for c in &cells {
            let cfg = c.config(Scale::Desk, 3, 0);
            assert!(cfg.loss.symmetric);
            assert_eq!(cfg.loss.tau, 0.1);
            match c.objective.unwrap() {
                Objective::AdasslV => {
                    assert!(cfg.loss.use_additional_view);
                    assert_eq!(cfg.loss.beta_end, 0.5);
                    assert_eq!(cfg.loss.beta_warmup_steps, 1000);
                }
                Objective::AdasslS => {
                    assert!(cfg.loss.use_additional_view);
                    assert_eq!(cfg.loss.beta_end, 1.0);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn paper_scale_sets_source_budgets() {
        let cell = &table2_cells()[0];
        let cfg = cell.config(Scale::Paper, 3, 0);
        assert_eq!(cfg.train.steps, 200_000);
        assert_eq!(cfg.train.batch, 2048);
        assert_eq!(cfg.eval.probe_fit, 100_000);
    }
}
