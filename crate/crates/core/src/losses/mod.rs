//! Training objectives and their configuration.

mod step;
mod terms;

pub use step::{compute_loss, LossGraph, StepMode};
pub use terms::{
    expected_l0, infonce_from_sim, kl_factorized_gaussians, mean_squared_distance,
    positive_pair_similarity, weighted_sqdist_matrix,
};

use crate::error::{Error, Result};
use crate::models::{BundlePlan, EditorVariant, LambdaVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Infonce,
    Aninfonce,
    HinfonceAffine,
    HinfonceMlp,
    Byol,
    AdasslV,
    AdasslS,
}

impl Objective {
    pub fn display_name(self) -> &'static str {
        match self {
            Objective::Infonce => "InfoNCE",
            Objective::Aninfonce => "AnInfoNCE",
            Objective::HinfonceAffine => "H-InfoNCE_Affine",
            Objective::HinfonceMlp => "H-InfoNCE_MLP",
            Objective::Byol => "BYOL",
            Objective::AdasslV => "AdaSSL-V",
            Objective::AdasslS => "AdaSSL-S",
        }
    }

    /// Which model components this objective trains.
    pub fn plan(
        self,
        base: BaseLoss,
        editor: EditorVariant,
        mean_predictor: bool,
    ) -> BundlePlan {
        match self {
            Objective::Infonce => BundlePlan {
                lambda: Some(LambdaVariant::GlobalScalar),
                ..BundlePlan::default()
            },
            Objective::Aninfonce => BundlePlan {
                lambda: Some(LambdaVariant::GlobalDiag),
                ..BundlePlan::default()
            },
            Objective::HinfonceAffine => BundlePlan {
                lambda: Some(LambdaVariant::ConditionalAffine),
                mean_predictor,
                ..BundlePlan::default()
            },
            Objective::HinfonceMlp => BundlePlan {
                lambda: Some(LambdaVariant::ConditionalMlp),
                mean_predictor,
                ..BundlePlan::default()
            },
            Objective::Byol => BundlePlan {
                byol: true,
                ..BundlePlan::default()
            },
            Objective::AdasslV => BundlePlan {
                lambda: matches!(base, BaseLoss::Infonce).then_some(LambdaVariant::GlobalScalar),
                variational: true,
                editor: Some(editor),
                byol: matches!(base, BaseLoss::Byol),
                ..BundlePlan::default()
            },
            Objective::AdasslS => BundlePlan {
                lambda: matches!(base, BaseLoss::Infonce).then_some(LambdaVariant::GlobalScalar),
                sparse: true,
                editor: Some(editor),
                byol: matches!(base, BaseLoss::Byol),
                ..BundlePlan::default()
            },
        }
    }
}

/// Base SSL term used inside the latent-variable objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Infonce,
    Byol,
}

/// Linear warmup from `start` to `end` over `warmup_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup_steps: usize,
}

impl BetaSchedule {
    pub fn constant(value: f64) -> Self {
        BetaSchedule {
            start: value,
            end: value,
            warmup_steps: 0,
        }
    }

    pub fn value(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.end
        } else {
            let t = step as f64 / self.warmup_steps as f64;
            self.start + (self.end - self.start) * t
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub objective: Objective,
    /// Base SSL term for the latent-variable objectives.
    pub base: BaseLoss,
    pub tau: f64,
    pub beta: BetaSchedule,
    pub symmetric: bool,
    /// Infer r from (x, x⁺⁺) instead of (x, x⁺).
    pub use_additional_view: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.beta.start < 0.0 || self.beta.end < 0.0 {
            return Err(Error::Config("beta must stay >= 0".into()));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossOutput {
    pub total: f64,
    pub ssl: f64,
    pub reg: f64,
    pub beta: f64,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Mean KL divided by d_r (variational objectives).
    pub mean_kl_per_dim: f64,
    /// E[‖r‖₀] (sparse objectives).
    pub expected_l0: f64,
    /// Mean similarity (or cosine, for distillation) of aligned pairs.
    pub positive_similarity: f64,
}
