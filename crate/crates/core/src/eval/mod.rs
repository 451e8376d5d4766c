//! Evaluation: linear probes over the three latent regimes, the
//! disentanglement score, density export, and result aggregation.

mod dci;
mod density;
mod probe;

pub use dci::{
    dci_disentanglement, disentanglement_from_importance, importance_matrix,
    lasso_coordinate_descent,
};
pub use density::density_export;
pub use probe::{
    embed_dataset, embed_observations, evaluate_regimes, fit_linear_probe, probe_predict,
    r_squared, EvalSizes, ProbeFit, ProbeInput, RegimeR2, RegimeScores,
};

use std::io::Write;

use crate::error::Result;

/// Everything measured about one trained trial.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub regimes: RegimeR2,
    pub dci: Option<f64>,
    /// Mean E[‖r‖₀] diagnostic over the trailing window of training.
    pub converged_expected_l0: Option<f64>,
    pub final_positive_similarity: Option<f64>,
    pub density_file: Option<String>,
}

/// One row of the aggregated results table.
#[derive(Clone, Debug, PartialEq)]
pub struct AggRow {
    pub model: String,
    pub regime: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregate per-trial reports into mean ± std rows per (regime, metric).
pub fn aggregate_reports(model: &str, reports: &[EvalReport], attempted: usize) -> Vec<AggRow> {
    let n = reports.len();
    let mut rows = Vec::new();
    let mut push = |regime: &str, metric: &str, values: Vec<f64>| {
        if values.is_empty() {
            return;
        }
        let (mean, std) = mean_std(&values);
        rows.push(AggRow {
            model: model.to_string(),
            regime: regime.to_string(),
            metric: metric.to_string(),
            mean,
            std,
            n_seeds: values.len(),
        });
    };
    push(
        "p_z",
        "r2_test",
        reports.iter().map(|r| r.regimes.p_z.test_r2).collect(),
    );
    push(
        "p_z",
        "r2_fit",
        reports.iter().map(|r| r.regimes.p_z.fit_r2).collect(),
    );
    push(
        "wide",
        "r2_test",
        reports.iter().map(|r| r.regimes.wide.test_r2).collect(),
    );
    push(
        "wide",
        "r2_fit",
        reports.iter().map(|r| r.regimes.wide.fit_r2).collect(),
    );
    push(
        "wide_ood",
        "r2_test",
        reports.iter().map(|r| r.regimes.wide_ood.test_r2).collect(),
    );
    push(
        "wide_ood",
        "r2_fit",
        reports.iter().map(|r| r.regimes.wide_ood.fit_r2).collect(),
    );
    push(
        "-",
        "dci",
        reports.iter().filter_map(|r| r.dci).collect(),
    );
    push(
        "-",
        "expected_l0",
        reports.iter().filter_map(|r| r.converged_expected_l0).collect(),
    );
    push(
        "-",
        "positive_similarity",
        reports
            .iter()
            .filter_map(|r| r.final_positive_similarity)
            .collect(),
    );
    rows.push(AggRow {
        model: model.to_string(),
        regime: "-".to_string(),
        metric: "completed_trials".to_string(),
        mean: n as f64,
        std: 0.0,
        n_seeds: attempted,
    });
    rows
}

/// `model,regime,metric,mean,std,n_seeds` with fixed-precision floats so
/// identical runs produce identical bytes.
pub fn write_results_csv(rows: &[AggRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "model,regime,metric,mean,std,n_seeds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{}",
            r.model, r.regime, r.metric, r.mean, r.std, r.n_seeds
        )?;
    }
    Ok(())
}
