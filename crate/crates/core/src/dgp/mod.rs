//! Synthetic data-generating process: correlated ground-truth latents,
//! conditional positive pairs under five noise regimes, and the nonlinear
//! mixing into observations.

mod mixing;
mod probe;

pub use mixing::{build_mixing, MixingMlp, WeightNorm, MIXING_CANDIDATE_POOL};
pub use probe::{heteroscedasticity_probe, HeteroProbeReport};

use std::io::Write;

use crate::error::{Error, Result};
use crate::la;
use crate::rng::SeedKey;
use crate::tensor::{FloatWidth, TensorValue};

/// softplus⁻¹(1) = ln(e - 1).
pub const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegime {
    /// c⁺ = c exactly.
    Zero,
    /// c⁺_i ~ N(c_i, 1).
    Isotropic,
    /// c⁺_i ~ N(c_i, sigma_i²) with fixed per-dimension variances.
    Anisotropic,
    /// c⁺_i ~ N(c_i, sigma(c)_i²), variance an affine+softplus map of c.
    Heteroscedastic,
    /// Multimodal + heteroscedastic: shared coordinates plus resampling
    /// conditioned on an auxiliary variable.
    Complex,
}

impl NoiseRegime {
    pub fn name(self) -> &'static str {
        match self {
            NoiseRegime::Zero => "zero",
            NoiseRegime::Isotropic => "isotropic",
            NoiseRegime::Anisotropic => "anisotropic",
            NoiseRegime::Heteroscedastic => "heteroscedastic",
            NoiseRegime::Complex => "complex",
        }
    }
}

/// Frozen parameters of one sampled generative process.
#[derive(Clone, Debug)]
pub struct DgpParams {
    pub n_c: usize,
    pub n_s: usize,
    pub regime: NoiseRegime,
    /// Content covariance (SPD).
    pub sigma: TensorValue,
    /// Lower Cholesky factor of `sigma`.
    pub sigma_chol: TensorValue,
    /// Fixed per-dim variances (anisotropic regime).
    pub aniso_var: Option<Vec<f64>>,
    /// Variance map weights (heteroscedastic / complex).
    pub w_sigma: Option<TensorValue>,
    /// Mean map weights and offset (complex).
    pub w_mu: Option<TensorValue>,
    pub b_mu: Option<Vec<f64>>,
    pub mixing: MixingMlp,
    pub width: FloatWidth,
}

impl DgpParams {
    pub fn n(&self) -> usize {
        self.n_c + self.n_s
    }

    /// Sample a fresh process. Sub-streams are keyed per component so the
    /// draws of one component never shift another's.
    pub fn sample(
        n_c: usize,
        n_s: usize,
        regime: NoiseRegime,
        weight_norm: WeightNorm,
        width: FloatWidth,
        key: SeedKey,
    ) -> Result<DgpParams> {
        let sigma = sample_sigma(n_c, key.child(0))?;
        let sigma_chol = la::cholesky_lower(&sigma)
            .ok_or_else(|| Error::Numeric("sampled covariance failed Cholesky".into()))?;
        let aniso_var = match regime {
            NoiseRegime::Anisotropic => {
                let mut s = key.child(1).stream();
                Some((0..n_c).map(|_| s.inv_gamma(2.0, 1.0)).collect())
            }
            _ => None,
        };
        let w_sigma = match regime {
            NoiseRegime::Heteroscedastic | NoiseRegime::Complex => {
                let mut s = key.child(2).stream();
                Some(TensorValue::new(vec![n_c, n_c], s.normals(n_c * n_c)))
            }
            _ => None,
        };
        let (w_mu, b_mu) = match regime {
            NoiseRegime::Complex => {
                let mut s = key.child(3).stream();
                let w = TensorValue::new(vec![n_c, n_c], s.normals(n_c * n_c));
                let b = s.normals(n_c);
                (Some(w), Some(b))
            }
            _ => (None, None),
        };
        let mixing = build_mixing(n_c + n_s, weight_norm, key.child(5));
        Ok(DgpParams {
            n_c,
            n_s,
            regime,
            sigma,
            sigma_chol,
            aniso_var,
            w_sigma,
            w_mu,
            b_mu,
            mixing,
            width,
        })
    }

    fn variance_map(&self, input: &[f64]) -> Vec<f64> {
        let w = self.w_sigma.as_ref().expect("variance map weights");
        la::matvec(w, input)
            .into_iter()
            .map(|v| stable_softplus(v + SOFTPLUS_INV_ONE))
            .collect()
    }

    fn mean_map(&self, kappa: &[f64]) -> Vec<f64> {
        let w = self.w_mu.as_ref().expect("mean map weights");
        let b = self.b_mu.as_ref().expect("mean map offset");
        la::matvec_t(w, kappa)
            .iter()
            .zip(b)
            .map(|(v, bi)| v + bi)
            .collect()
    }

    fn flip_probability(&self, kappa: &[f64]) -> Vec<f64> {
        (0..self.n_c)
            .map(|i| sigmoid(kappa[i] / self.sigma.at2(i, i) - 1.0))
            .collect()
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Draw from Inverse-Wishart(df = n_c + 2, scale = I): build the Wishart
/// factor by the Bartlett construction and invert it. The analytic mean
/// I / (df - n_c - 1) is the identity.
pub fn sample_sigma(n_c: usize, key: SeedKey) -> Result<TensorValue> {
    if n_c == 0 {
        return Err(Error::Config("n_c must be at least 1".into()));
    }
    let df = (n_c + 2) as f64;
    const MAX_RETRIES: u64 = 8;
    for retry in 0..MAX_RETRIES {
        let mut s = key.child(retry).stream();
        // Lower-triangular Bartlett factor A with A_ii² ~ χ²(df - i).
        let mut a = vec![0.0; n_c * n_c];
        for i in 0..n_c {
            a[i * n_c + i] = s.chi_squared(df - i as f64).sqrt();
            for j in 0..i {
                a[i * n_c + j] = s.normal();
            }
        }
        let a = TensorValue::new(vec![n_c, n_c], a);
        // W = A Aᵀ ~ Wishart(df, I); Σ = W⁻¹ = A⁻ᵀ A⁻¹.
        let a_inv = match la::invert(&a) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let mut sigma = vec![0.0; n_c * n_c];
        for i in 0..n_c {
            for j in 0..n_c {
                let mut acc = 0.0;
                for k in 0..n_c {
                    acc += a_inv.at2(k, i) * a_inv.at2(k, j);
                }
                sigma[i * n_c + j] = acc;
            }
        }
        // Exact symmetry despite rounding.
        for i in 0..n_c {
            for j in 0..i {
                let avg = 0.5 * (sigma[i * n_c + j] + sigma[j * n_c + i]);
                sigma[i * n_c + j] = avg;
                sigma[j * n_c + i] = avg;
            }
        }
        let sigma = TensorValue::new(vec![n_c, n_c], sigma);
        if la::cholesky_lower(&sigma).is_some() {
            return Ok(sigma);
        }
    }
    Err(Error::Numeric(
        "inverse-Wishart sampling failed Cholesky after bounded retries".into(),
    ))
}

/// Ground-truth generative state for a batch of positive-pair triples.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub c: TensorValue,
    pub s: TensorValue,
    pub c_pos: TensorValue,
    pub s_pos: TensorValue,
    /// Style for the additional view x⁺⁺ (shares content with x⁺).
    pub s_pp: TensorValue,
    /// Auxiliary variable (complex regime only).
    pub kappa: Option<TensorValue>,
    /// Binary change mask (complex regime only).
    pub iota: Option<TensorValue>,
}

impl LatentBatch {
    pub fn batch_size(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn z(&self) -> TensorValue {
        concat_cols_value(&self.c, &self.s)
    }

    pub fn z_pos(&self) -> TensorValue {
        concat_cols_value(&self.c_pos, &self.s_pos)
    }

    pub fn z_pp(&self) -> TensorValue {
        concat_cols_value(&self.c_pos, &self.s_pp)
    }
}

pub fn concat_cols_value(a: &TensorValue, b: &TensorValue) -> TensorValue {
    let (r, ca) = (a.shape()[0], a.shape()[1]);
    let cb = b.shape()[1];
    let mut data = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    TensorValue::new(vec![r, ca + cb], data)
}

/// Sample a batch of latent triples under the configured regime.
/// Each sample draws from its own keyed sub-stream, in a fixed field order,
/// so batch size and parallelism never change any draw.
pub fn sample_latents(params: &DgpParams, batch: usize, key: SeedKey) -> Result<LatentBatch> {
    let n_c = params.n_c;
    let n_s = params.n_s;
    let mut c = Vec::with_capacity(batch * n_c);
    let mut c_pos = Vec::with_capacity(batch * n_c);
    let mut s = Vec::with_capacity(batch * n_s);
    let mut s_pos = Vec::with_capacity(batch * n_s);
    let mut s_pp = Vec::with_capacity(batch * n_s);
    let mut kappa_all = Vec::new();
    let mut iota_all = Vec::new();

    for i in 0..batch {
        let mut stream = key.child(i as u64).stream();
        match params.regime {
            NoiseRegime::Complex => {
                let eps_kappa = stream.normals(n_c);
                let kappa = la::lower_tri_matvec(&params.sigma_chol, &eps_kappa);
                let mu = params.mean_map(&kappa);
                let var = params.variance_map(&kappa);
                let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
                let eps_c = stream.normals(n_c);
                let ci: Vec<f64> = (0..n_c).map(|d| mu[d] + std[d] * eps_c[d]).collect();
                let pi = params.flip_probability(&kappa);
                let flips: Vec<bool> = pi.iter().map(|&p| stream.bernoulli(p)).collect();
                // Resample noise always drawn to keep the stream layout fixed.
                let eps_res = stream.normals(n_c);
                let ci_pos: Vec<f64> = (0..n_c)
                    .map(|d| {
                        if flips[d] {
                            mu[d] + std[d] * eps_res[d]
                        } else {
                            ci[d]
                        }
                    })
                    .collect();
                c.extend_from_slice(&ci);
                c_pos.extend_from_slice(&ci_pos);
                kappa_all.extend_from_slice(&kappa);
                iota_all.extend(flips.iter().map(|&f| if f { 1.0 } else { 0.0 }));
            }
            _ => {
                let eps = stream.normals(n_c);
                let ci = la::lower_tri_matvec(&params.sigma_chol, &eps);
                let pair_noise = stream.normals(n_c);
                let ci_pos: Vec<f64> = match params.regime {
                    NoiseRegime::Zero => ci.clone(),
                    NoiseRegime::Isotropic => {
                        (0..n_c).map(|d| ci[d] + pair_noise[d]).collect()
                    }
                    NoiseRegime::Anisotropic => {
                        let var = params.aniso_var.as_ref().expect("anisotropic variances");
                        (0..n_c)
                            .map(|d| ci[d] + var[d].sqrt() * pair_noise[d])
                            .collect()
                    }
                    NoiseRegime::Heteroscedastic => {
                        let var = params.variance_map(&ci);
                        (0..n_c)
                            .map(|d| ci[d] + var[d].sqrt() * pair_noise[d])
                            .collect()
                    }
                    NoiseRegime::Complex => unreachable!(),
                };
                c.extend_from_slice(&ci);
                c_pos.extend_from_slice(&ci_pos);
            }
        }
        s.extend(stream.normals(n_s));
        s_pos.extend(stream.normals(n_s));
        s_pp.extend(stream.normals(n_s));
    }

    let width = params.width;
    let wrap = |shape: Vec<usize>, data: Vec<f64>| TensorValue::new(shape, data).quantize(width);
    Ok(LatentBatch {
        c: wrap(vec![batch, n_c], c),
        s: wrap(vec![batch, n_s], s),
        c_pos: wrap(vec![batch, n_c], c_pos),
        s_pos: wrap(vec![batch, n_s], s_pos),
        s_pp: wrap(vec![batch, n_s], s_pp),
        kappa: if kappa_all.is_empty() {
            None
        } else {
            Some(wrap(vec![batch, n_c], kappa_all))
        },
        iota: if iota_all.is_empty() {
            None
        } else {
            Some(wrap(vec![batch, n_c], iota_all))
        },
    })
}

/// Observation triples produced by the mixing function. Synthetic batches
/// built outside the generative process may omit the additional view.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x: TensorValue,
    pub x_pos: TensorValue,
    pub x_pp: Option<TensorValue>,
}

/// x = g(z), x⁺ = g(z⁺), x⁺⁺ = g([c⁺, s⁺⁺]); deterministic in the latents.
pub fn mix(latents: &LatentBatch, g: &MixingMlp, width: FloatWidth) -> PairBatch {
    PairBatch {
        x: g.apply(&latents.z()).quantize(width),
        x_pos: g.apply(&latents.z_pos()).quantize(width),
        x_pp: Some(g.apply(&latents.z_pp()).quantize(width)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDistribution {
    /// The regime's own latent law p(z).
    Train,
    /// z ~ N(0, 5·I) over all dimensions.
    Wide,
}

/// Latents for probe fitting/evaluation (no pair structure needed).
#[derive(Clone, Debug)]
pub struct EvalLatents {
    pub c: TensorValue,
    pub s: TensorValue,
}

impl EvalLatents {
    pub fn z(&self) -> TensorValue {
        concat_cols_value(&self.c, &self.s)
    }
}

pub fn eval_distribution(
    params: &DgpParams,
    kind: EvalDistribution,
    batch: usize,
    key: SeedKey,
) -> Result<EvalLatents> {
    match kind {
        EvalDistribution::Train => {
            let lat = sample_latents(params, batch, key)?;
            Ok(EvalLatents { c: lat.c, s: lat.s })
        }
        EvalDistribution::Wide => {
            let scale = 5.0f64.sqrt();
            let n_c = params.n_c;
            let n_s = params.n_s;
            let mut c = Vec::with_capacity(batch * n_c);
            let mut s = Vec::with_capacity(batch * n_s);
            for i in 0..batch {
                let mut stream = key.child(i as u64).stream();
                c.extend(stream.normals(n_c).into_iter().map(|v| scale * v));
                s.extend(stream.normals(n_s).into_iter().map(|v| scale * v));
            }
            Ok(EvalLatents {
                c: TensorValue::new(vec![batch, n_c], c).quantize(params.width),
                s: TensorValue::new(vec![batch, n_s], s).quantize(params.width),
            })
        }
    }
}

/// CSV export of a sampled batch (header `z_0..,x_0..`) for
/// cross-implementation diffing.
pub fn export_batch_csv(
    latents: &LatentBatch,
    pairs: &PairBatch,
    w: &mut impl Write,
) -> Result<()> {
    let z = latents.z();
    let n = z.shape()[1];
    let header: Vec<String> = (0..n)
        .map(|i| format!("z_{i}"))
        .chain((0..n).map(|i| format!("x_{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..latents.batch_size() {
        let row: Vec<String> = z
            .row(i)
            .iter()
            .chain(pairs.x.row(i))
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
