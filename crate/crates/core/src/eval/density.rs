//! Export of the aggregated transition density implied by a trained model:
//! for sampled z, project the model's predicted paired embedding back to
//! latent space through a fitted affine probe and dump (z, ẑ⁺) rows.

use std::io::Write;

use crate::dgp::{mix, sample_latents, DgpParams};
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::models::{noise_matrix, reparam_sample, ModelBundle, ParamSource};
use crate::rng::SeedKey;
use crate::tensor::{BnMode, FloatWidth, Tape, TensorValue};

use super::probe::{embed_observations, fit_linear_probe, probe_predict};

/// One Monte-Carlo draw of the model's z⁺ prediction per sampled z,
/// written as CSV rows `model,z_0..,zhat_0..`. The projection from
/// embedding space to latent space is a probe fitted on fresh pairs
/// (embedding of x against z⁺).
pub fn density_export(
    bundle: &mut ModelBundle,
    dgp: &DgpParams,
    objective: Objective,
    n_samples: usize,
    ridge_eps: f64,
    key: SeedKey,
    w: &mut impl Write,
) -> Result<usize> {
    let n_fit = n_samples.max(2_000);
    let normalize = bundle.encoder.normalize;

    // Projection: ψ(x) -> z⁺.
    let fit_latents = sample_latents(dgp, n_fit, key.child(0))?;
    let fit_pairs = mix(&fit_latents, &dgp.mixing, dgp.width);
    let fit_emb = embed_observations(bundle, &fit_pairs.x, normalize)?;
    let projection = fit_linear_probe(&fit_emb, &fit_latents.z_pos(), ridge_eps)?;

    // Fresh z ~ p(z) and the model's predicted pair embedding.
    let latents = sample_latents(dgp, n_samples, key.child(1))?;
    let z = latents.z();
    let x = dgp.mixing.apply(&z).quantize(dgp.width);
    let predicted = predicted_pair_embedding(bundle, objective, &x, key.child(2))?;
    let zhat = probe_predict(&projection, &predicted)?;

    let n_dims = z.shape()[1];
    let header: Vec<String> = std::iter::once("model".to_string())
        .chain((0..n_dims).map(|i| format!("z_{i}")))
        .chain((0..n_dims).map(|i| format!("zhat_{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let name = objective.display_name();
    for i in 0..n_samples {
        let row: Vec<String> = std::iter::once(name.to_string())
            .chain(z.row(i).iter().map(|v| format!("{v:.6}")))
            .chain(zhat.row(i).iter().map(|v| format!("{v:.6}")))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(n_samples)
}

/// The embedding the model itself would predict for x's pair.
fn predicted_pair_embedding(
    bundle: &mut ModelBundle,
    objective: Objective,
    x: &TensorValue,
    key: SeedKey,
) -> Result<TensorValue> {
    let frozen = bundle.bank.frozen_map();
    let normalize = bundle.encoder.normalize;
    let d_r = bundle.settings.d_r;
    let mut tape = Tape::new(FloatWidth::F64);
    let src = ParamSource::Frozen(&frozen);
    let xt = tape.constant(x.clone());
    let f = bundle
        .encoder
        .mlp
        .forward(&mut tape, &src, &xt, BnMode::Eval)?;

    let raw = match objective {
        Objective::HinfonceAffine | Objective::HinfonceMlp => {
            match bundle.mean_predictor.as_mut() {
                Some(net) => net.forward(&mut tape, &src, &f, BnMode::Eval)?,
                None => f,
            }
        }
        Objective::AdasslV => {
            let nets = bundle
                .variational
                .as_mut()
                .ok_or_else(|| Error::Config("variational nets missing".into()))?;
            let prior = nets.prior(&mut tape, &src, &f, BnMode::Eval)?;
            let noise = noise_matrix(key, x.shape()[0], d_r);
            let r = reparam_sample(&mut tape, &prior, &noise)?;
            bundle
                .editor
                .as_mut()
                .ok_or_else(|| Error::Config("editor missing".into()))?
                .edit(&mut tape, &src, &f, &r, BnMode::Eval)?
        }
        _ => f,
    };
    let emb = if normalize {
        tape.l2_normalize_rows(&raw)?
    } else {
        raw
    };
    Ok(emb.value)
}
