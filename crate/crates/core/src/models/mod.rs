//! Trainable components: encoder, concentration heads, transition-latent
//! predictors, editing functions, the distillation predictor, and the EMA
//! target shadow — all owned by one [`ModelBundle`].

mod editor;
mod heads;
mod latent;
mod mlp;

pub use editor::{Editor, EditorVariant, ModularBias};
pub use heads::{LambdaHead, LambdaVariant, RAW_UNIT};
pub use latent::{
    logistic_noise_matrix, noise_matrix, reparam_sample, GateMode, GaussianParams, SparsePredictor,
    SparseSample, VariationalNets, LOGVAR_CLAMP,
};
pub use mlp::{Mlp, MlpSpec, ParamSource};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeedKey;
use crate::tensor::{BnMode, BoundParams, FloatWidth, ParamBank, ParamRef, Tape, Tensor, TensorValue};

/// The embedding space the encoder maps into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpace {
    Unbounded,
    Hypersphere,
}

impl ModelSpace {
    /// Output dimensionality: the sphere gets one extra degree of freedom.
    pub fn embed_dim(self, n: usize) -> usize {
        match self {
            ModelSpace::Unbounded => n,
            ModelSpace::Hypersphere => n + 1,
        }
    }

    pub fn normalized(self) -> bool {
        matches!(self, ModelSpace::Hypersphere)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub mlp: Mlp,
    pub normalize: bool,
    pub d_f: usize,
}

impl Encoder {
    /// Four hidden layers of width `hidden_mult * n`, LeakyReLU activations,
    /// no batch norm; output dim n (+1 on the sphere).
    pub fn init(
        bank: &mut ParamBank,
        n: usize,
        space: ModelSpace,
        hidden_mult: usize,
        layers: usize,
        leaky_slope: f64,
        key: SeedKey,
    ) -> Encoder {
        let d_f = space.embed_dim(n);
        let mlp = Mlp::init(
            bank,
            "encoder",
            MlpSpec {
                input: n,
                hidden: vec![hidden_mult * n; layers],
                output: d_f,
                leaky_slope,
                batch_norm_hidden: false,
                final_bias: None,
            },
            key,
        );
        Encoder {
            mlp,
            normalize: space.normalized(),
            d_f,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Online,
    Target,
}

/// Exponential-moving-average shadow of the encoder's parameters. Never
/// receives gradients; the target branch reads it as constants.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    refs: Vec<ParamRef>,
    values: HashMap<usize, TensorValue>,
}

impl EmaShadow {
    /// Initialize as a copy of the current online weights.
    pub fn from_bank(bank: &ParamBank, refs: Vec<ParamRef>) -> EmaShadow {
        let values = refs
            .iter()
            .map(|r| (r.0, bank.value(*r).clone()))
            .collect();
        EmaShadow { refs, values }
    }

    /// shadow <- momentum * shadow + (1 - momentum) * online, elementwise.
    pub fn update(&mut self, bank: &ParamBank, momentum: f64, width: FloatWidth) {
        for r in &self.refs {
            let online = bank.value(*r);
            let shadow = self.values.get_mut(&r.0).expect("shadow entry");
            let data: Vec<f64> = shadow
                .data()
                .iter()
                .zip(online.data())
                .map(|(s, o)| width.quantize(momentum * s + (1.0 - momentum) * o))
                .collect();
            *shadow = TensorValue::new(shadow.shape().to_vec(), data);
        }
    }

    pub fn values(&self) -> &HashMap<usize, TensorValue> {
        &self.values
    }
}

/// Which auxiliary components a bundle carries, beyond the encoder.
#[derive(Clone, Debug, Default)]
pub struct BundlePlan {
    pub lambda: Option<LambdaVariant>,
    /// MLP predicting the paired embedding from f(x) (heteroscedastic
    /// contrastive models on non-centered conditionals).
    pub mean_predictor: bool,
    pub variational: bool,
    pub sparse: bool,
    pub editor: Option<EditorVariant>,
    /// Distillation pathway: predictor MLP + EMA target shadow.
    pub byol: bool,
}

#[derive(Clone, Debug)]
pub struct ModelSettings {
    pub space: ModelSpace,
    pub encoder_hidden_mult: usize,
    pub encoder_layers: usize,
    pub encoder_leaky_slope: f64,
    pub d_r: usize,
    /// Hidden width of the lightweight heads (q, p, m, the distillation
    /// predictor, and the MLP editor).
    pub head_hidden: usize,
    pub modular_bias: ModularBias,
    pub gumbel_temperature: f64,
    pub ema_momentum: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            space: ModelSpace::Hypersphere,
            encoder_hidden_mult: 10,
            encoder_layers: 4,
            encoder_leaky_slope: 0.01,
            d_r: 5,
            head_hidden: 64,
            modular_bias: ModularBias::Vector,
            gumbel_temperature: 1.0,
            ema_momentum: 0.996,
        }
    }
}

/// All trainable state for one model, plus the EMA shadow when present.
pub struct ModelBundle {
    pub bank: ParamBank,
    pub settings: ModelSettings,
    pub n: usize,
    pub d_f: usize,
    pub encoder: Encoder,
    pub lambda_head: Option<LambdaHead>,
    pub mean_predictor: Option<Mlp>,
    pub variational: Option<VariationalNets>,
    pub sparse: Option<SparsePredictor>,
    pub editor: Option<Editor>,
    pub byol_predictor: Option<Mlp>,
    pub ema: Option<EmaShadow>,
    pub width: FloatWidth,
}

impl ModelBundle {
    pub fn build(
        n: usize,
        settings: ModelSettings,
        plan: &BundlePlan,
        width: FloatWidth,
        key: SeedKey,
    ) -> ModelBundle {
        let mut bank = ParamBank::new();
        let encoder = Encoder::init(
            &mut bank,
            n,
            settings.space,
            settings.encoder_hidden_mult,
            settings.encoder_layers,
            settings.encoder_leaky_slope,
            key.child(0),
        );
        let d_f = encoder.d_f;
        let lambda_hidden = settings.encoder_hidden_mult * n;
        let lambda_head = plan
            .lambda
            .map(|v| LambdaHead::init(&mut bank, v, d_f, lambda_hidden, key.child(1)));
        let mean_predictor = plan.mean_predictor.then(|| {
            Mlp::init(
                &mut bank,
                "predictor",
                MlpSpec {
                    input: d_f,
                    hidden: vec![lambda_hidden, lambda_hidden, lambda_hidden],
                    output: d_f,
                    leaky_slope: 0.01,
                    batch_norm_hidden: true,
                    final_bias: None,
                },
                key.child(2),
            )
        });
        let variational = plan
            .variational
            .then(|| VariationalNets::init(&mut bank, d_f, settings.d_r, settings.head_hidden, key.child(3)));
        let sparse = plan.sparse.then(|| {
            SparsePredictor::init(
                &mut bank,
                d_f,
                settings.d_r,
                settings.head_hidden,
                settings.gumbel_temperature,
                key.child(4),
            )
        });
        let editor = plan.editor.map(|v| {
            Editor::init(
                &mut bank,
                v,
                d_f,
                settings.d_r,
                settings.head_hidden,
                settings.modular_bias,
                key.child(5),
            )
        });
        let byol_predictor = plan.byol.then(|| {
            Mlp::init(
                &mut bank,
                "eta",
                MlpSpec {
                    input: d_f,
                    hidden: vec![settings.head_hidden, settings.head_hidden],
                    output: d_f,
                    leaky_slope: 0.01,
                    batch_norm_hidden: true,
                    final_bias: None,
                },
                key.child(6),
            )
        });
        let ema = plan
            .byol
            .then(|| EmaShadow::from_bank(&bank, encoder.mlp.param_refs()));
        ModelBundle {
            bank,
            settings,
            n,
            d_f,
            encoder,
            lambda_head,
            mean_predictor,
            variational,
            sparse,
            editor,
            byol_predictor,
            ema,
            width,
        }
    }

    /// Raw embeddings f(x). The target branch reads EMA weights as
    /// constants, so no gradient can reach them.
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &TensorValue,
        branch: Branch,
    ) -> Result<Tensor> {
        if !x.all_finite() {
            return Err(Error::Numeric("non-finite encoder input".into()));
        }
        let x_t = tape.constant(x.clone());
        match branch {
            Branch::Online => {
                let src = ParamSource::Bound(bound);
                self.encoder
                    .mlp
                    .forward(tape, &src, &x_t, BnMode::Train { update_stats: false })
            }
            Branch::Target => {
                let ema = self
                    .ema
                    .as_ref()
                    .ok_or_else(|| Error::Config("no EMA shadow initialized".into()))?;
                let src = ParamSource::Frozen(ema.values());
                self.encoder
                    .mlp
                    .forward(tape, &src, &x_t, BnMode::Train { update_stats: false })
            }
        }
    }

    /// ψ(x): f(x), normalized on the hypersphere.
    pub fn psi(&self, tape: &mut Tape, f_x: &Tensor) -> Result<Tensor> {
        if self.encoder.normalize {
            tape.l2_normalize_rows(f_x)
        } else {
            Ok(f_x.clone())
        }
    }

    /// One EMA step on the target shadow.
    pub fn ema_update(&mut self, momentum: f64) {
        let width = self.width;
        if let Some(ema) = self.ema.as_mut() {
            ema.update(&self.bank, momentum, width);
        }
    }
}
