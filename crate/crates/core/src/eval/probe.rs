//! Closed-form affine probes on frozen embeddings and the three-regime
//! identifiability evaluation.

use crate::dgp::{eval_distribution, DgpParams, EvalDistribution, EvalLatents};
use crate::error::{Error, Result};
use crate::la;
use crate::models::{ModelBundle, ParamSource};
use crate::rng::SeedKey;
use crate::tensor::{BnMode, FloatWidth, Tape, Tensor, TensorValue};

/// Fitted affine regressor embedding -> targets.
#[derive(Clone, Debug)]
pub struct ProbeFit {
    /// [p, q] weights over the embedding dimensions.
    pub weights: TensorValue,
    /// [q] intercept.
    pub intercept: Vec<f64>,
    pub r2_fit: f64,
}

/// Least squares with intercept via SVD pseudoinverse with Tikhonov
/// damping; returns the fit and its training R².
pub fn fit_linear_probe(
    embeddings: &TensorValue,
    targets: &TensorValue,
    ridge_eps: f64,
) -> Result<ProbeFit> {
    let (n, p) = embeddings.dims2()?;
    let (nt, q) = targets.dims2()?;
    if n != nt {
        return Err(Error::Dimension("probe sample counts differ".into()));
    }
    if n <= p + 1 {
        return Err(Error::Underdetermined(format!(
            "{n} samples for {p}+1 coefficients"
        )));
    }
    // Augment with a ones column for the intercept.
    let mut aug = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        aug.extend_from_slice(embeddings.row(i));
        aug.push(1.0);
    }
    let aug = TensorValue::new(vec![n, p + 1], aug);
    let w_aug = la::ridge_solve_svd(&aug, targets, ridge_eps)?;
    let mut weights = Vec::with_capacity(p * q);
    for i in 0..p {
        weights.extend_from_slice(w_aug.row(i));
    }
    let weights = TensorValue::new(vec![p, q], weights);
    let intercept = w_aug.row(p).to_vec();
    let fit = ProbeFit {
        weights,
        intercept,
        r2_fit: 0.0,
    };
    let r2_fit = r_squared(&fit, embeddings, targets)?;
    Ok(ProbeFit { r2_fit, ..fit })
}

pub fn probe_predict(fit: &ProbeFit, embeddings: &TensorValue) -> Result<TensorValue> {
    let (n, p) = embeddings.dims2()?;
    let (wp, q) = fit.weights.dims2()?;
    if p != wp {
        return Err(Error::Dimension("probe dimension mismatch".into()));
    }
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let row = embeddings.row(i);
        let o = &mut out[i * q..(i + 1) * q];
        o.copy_from_slice(&fit.intercept);
        for (k, &x) in row.iter().enumerate() {
            let wrow = fit.weights.row(k);
            for j in 0..q {
                o[j] += x * wrow[j];
            }
        }
    }
    Ok(TensorValue::new(vec![n, q], out))
}

/// 1 - SS_res/SS_tot per target dimension, averaged uniformly.
pub fn r_squared(fit: &ProbeFit, embeddings: &TensorValue, targets: &TensorValue) -> Result<f64> {
    let pred = probe_predict(fit, embeddings)?;
    let (n, q) = targets.dims2()?;
    let mut r2_sum = 0.0;
    for j in 0..q {
        let mean: f64 = (0..n).map(|i| targets.at2(i, j)).sum::<f64>() / n as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..n {
            let t = targets.at2(i, j);
            let d = t - pred.at2(i, j);
            ss_res += d * d;
            let c = t - mean;
            ss_tot += c * c;
        }
        r2_sum += 1.0 - ss_res / ss_tot.max(1e-300);
    }
    Ok(r2_sum / q as f64)
}

/// Frozen-encoder embeddings ψ(x) for a latent set, computed in chunks as
/// pure constants (no tape growth).
pub fn embed_dataset(
    bundle: &mut ModelBundle,
    dgp: &DgpParams,
    latents: &EvalLatents,
    normalize: bool,
) -> Result<TensorValue> {
    let z = latents.z();
    let x = dgp.mixing.apply(&z).quantize(dgp.width);
    embed_observations(bundle, &x, normalize)
}

/// ψ(x) for already mixed observations.
pub fn embed_observations(
    bundle: &mut ModelBundle,
    x: &TensorValue,
    normalize: bool,
) -> Result<TensorValue> {
    let (n, d_in) = x.dims2()?;
    let frozen = bundle.bank.frozen_map();
    let src = ParamSource::Frozen(&frozen);
    let d_f = bundle.d_f;
    let mut out = Vec::with_capacity(n * d_f);
    let chunk = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let slice =
            TensorValue::new(vec![rows, d_in], x.data()[start * d_in..end * d_in].to_vec());
        let mut tape = Tape::new(FloatWidth::F64);
        let xt = tape.constant(slice);
        let f: Tensor =
            bundle
                .encoder
                .mlp
                .forward(&mut tape, &src, &xt, BnMode::Eval)?;
        let emb = if normalize {
            tape.l2_normalize_rows(&f)?
        } else {
            f
        };
        out.extend_from_slice(emb.data());
        start = end;
    }
    Ok(TensorValue::new(vec![n, d_f], out).quantize(bundle.width))
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct RegimeScores {
    pub fit_r2: f64,
    pub test_r2: f64,
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct RegimeR2 {
    /// Probe fit and tested on the training latent law.
    pub p_z: RegimeScores,
    /// Probe fit and tested on N(0, 5·I).
    pub wide: RegimeScores,
    /// Probe fit on the training law, tested on N(0, 5·I).
    pub wide_ood: RegimeScores,
}

pub struct EvalSizes {
    pub fit: usize,
    pub test: usize,
    pub ridge_eps: f64,
}

/// Embedding source for the probes: a trained encoder or the raw
/// observations (identity baseline).
pub enum ProbeInput<'a> {
    Encoder(&'a mut ModelBundle),
    RawObservations,
}

/// The three-regime evaluation protocol, with fresh data per regime.
/// Targets are the content factors only.
pub fn evaluate_regimes(
    mut input: ProbeInput,
    dgp: &DgpParams,
    sizes: &EvalSizes,
    key: SeedKey,
) -> Result<RegimeR2> {
    let mut embed = |latents: &EvalLatents| -> Result<TensorValue> {
        match &mut input {
            ProbeInput::Encoder(bundle) => {
                let normalize = bundle.encoder.normalize;
                embed_dataset(bundle, dgp, latents, normalize)
            }
            ProbeInput::RawObservations => {
                Ok(dgp.mixing.apply(&latents.z()).quantize(dgp.width))
            }
        }
    };

    let mut run = |fit_kind: EvalDistribution,
                   test_kind: EvalDistribution,
                   fit_key: SeedKey,
                   test_key: SeedKey,
                   embed: &mut dyn FnMut(&EvalLatents) -> Result<TensorValue>|
     -> Result<RegimeScores> {
        let fit_lat = eval_distribution(dgp, fit_kind, sizes.fit, fit_key)?;
        let test_lat = eval_distribution(dgp, test_kind, sizes.test, test_key)?;
        let fit_emb = embed(&fit_lat)?;
        let test_emb = embed(&test_lat)?;
        let probe = fit_linear_probe(&fit_emb, &fit_lat.c, sizes.ridge_eps)?;
        let test_r2 = r_squared(&probe, &test_emb, &test_lat.c)?;
        Ok(RegimeScores {
            fit_r2: probe.r2_fit,
            test_r2,
        })
    };

    let p_z = run(
        EvalDistribution::Train,
        EvalDistribution::Train,
        key.child(0),
        key.child(1),
        &mut embed,
    )?;
    let wide = run(
        EvalDistribution::Wide,
        EvalDistribution::Wide,
        key.child(2),
        key.child(3),
        &mut embed,
    )?;
    let wide_ood = run(
        EvalDistribution::Train,
        EvalDistribution::Wide,
        key.child(4),
        key.child(5),
        &mut embed,
    )?;
    Ok(RegimeR2 { p_z, wide, wide_ood })
}
