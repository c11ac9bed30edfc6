//! Base forecasters in vanilla, routed and additive-text-fusion modes.

pub mod blocks;
pub mod checkpoint;
pub mod itransformer;
pub mod tcn;
pub mod tsmixer;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::blocks::{stack, DescriptionFusion, TimeMmdFusion};
use self::itransformer::ITransformer;
use self::tcn::Tcn;
use self::tsmixer::TsMixer;
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::routing::{BatchRouting, RoutingConfig, RoutingModule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Tsmixer,
    Tcn,
    Itransformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::Tsmixer, Self::Tcn, Self::Itransformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tsmixer => "tsmixer",
            Self::Tcn => "tcn",
            Self::Itransformer => "itransformer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Vanilla,
    Air,
    Timemmd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub mode: ModelMode,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub targets: Vec<usize>,
    pub latent: usize,
    pub codebook_size: usize,
    pub blocks: usize,
    pub d_model: usize,
    pub attention_heads: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub air_on_features: bool,
    pub air_on_predictor: bool,
    pub vq_enabled: bool,
    pub embedding_dim: usize,
    pub description_dim: usize,
    pub description_proj: usize,
    pub generator_hidden: usize,
    pub fusion_hidden: usize,
    pub rescale_routing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Tsmixer,
            mode: ModelMode::Vanilla,
            lookback: 20,
            horizon: 20,
            channels: 8,
            targets: vec![0, 1],
            latent: 32,
            codebook_size: 16,
            blocks: 2,
            d_model: 64,
            attention_heads: 1,
            kernel_size: 3,
            dilations: vec![1, 2, 4],
            air_on_features: false,
            air_on_predictor: false,
            vq_enabled: false,
            embedding_dim: 64,
            description_dim: 64,
            description_proj: 16,
            generator_hidden: 256,
            fusion_hidden: 256,
            rescale_routing: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lookback == 0 || self.horizon == 0 {
            return fail("lookback and horizon must be positive".into());
        }
        if self.channels == 0 || self.targets.is_empty() {
            return fail("need at least one channel and one target".into());
        }
        if let Some(t) = self.targets.iter().find(|&&t| t >= self.channels) {
            return fail(format!("target index {t} outside 0..{}", self.channels));
        }
        if self.blocks == 0 || self.latent == 0 {
            return fail("blocks and latent must be positive".into());
        }
        let routed = self.air_on_features || self.air_on_predictor;
        if routed && self.mode != ModelMode::Air {
            return fail("air_on_features/air_on_predictor require mode \"air\"".into());
        }
        if self.vq_enabled && !routed {
            return fail("vq_enabled requires a routed stage".into());
        }
        if self.mode == ModelMode::Air && !routed {
            return fail("mode \"air\" needs air_on_features or air_on_predictor".into());
        }
        if self.architecture == Architecture::Tcn && (self.kernel_size == 0 || self.dilations.is_empty()) {
            return fail("tcn needs a kernel size and at least one dilation".into());
        }
        if self.architecture == Architecture::Itransformer
            && (self.attention_heads == 0 || !self.d_model.is_multiple_of(self.attention_heads))
        {
            return fail(format!(
                "d_model {} not divisible by {} attention heads",
                self.d_model, self.attention_heads
            ));
        }
        Ok(())
    }

    fn routing_config(&self) -> RoutingConfig {
        RoutingConfig {
            embedding_dim: self.embedding_dim,
            hidden: self.generator_hidden,
            latent: self.latent,
            codebook_size: self.codebook_size,
            vq_enabled: self.vq_enabled,
            rescale: self.rescale_routing,
        }
    }

    pub fn feature_heads(&self) -> usize {
        match self.architecture {
            Architecture::Tsmixer => TsMixer::feature_heads(self),
            Architecture::Tcn => Tcn::feature_heads(self),
            Architecture::Itransformer => ITransformer::feature_heads(self),
        }
    }

    pub fn predictor_heads(&self) -> usize {
        match self.architecture {
            Architecture::Tsmixer => TsMixer::predictor_heads(self),
            Architecture::Tcn => Tcn::predictor_heads(self),
            Architecture::Itransformer => ITransformer::predictor_heads(self),
        }
    }
}

/// The model variants selectable by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    /// Routing on the feature extractor only, no quantization.
    AirF,
    /// Routing on extractor and predictor, no quantization.
    AirFp,
    /// Routing on extractor and predictor with quantization.
    Air,
    Timemmd,
}

impl Variant {
    fn prefix(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::AirF => "air-f",
            Self::AirFp => "air-fp",
            Self::Air => "air",
            Self::Timemmd => "timemmd",
        }
    }
}

/// `<variant>-<architecture>`, e.g. `air-tsmixer` or `air-fp-tcn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelId {
    pub variant: Variant,
    pub architecture: Architecture,
}

impl ModelId {
    pub fn all() -> Vec<ModelId> {
        let variants = [
            Variant::Vanilla,
            Variant::AirF,
            Variant::AirFp,
            Variant::Air,
            Variant::Timemmd,
        ];
        Architecture::ALL
            .iter()
            .flat_map(|&architecture| {
                variants.iter().map(move |&variant| ModelId {
                    variant,
                    architecture,
                })
            })
            .collect()
    }

    /// Specializes a base configuration to this variant.
    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.architecture = self.architecture;
        let (mode, f, p, vq) = match self.variant {
            Variant::Vanilla => (ModelMode::Vanilla, false, false, false),
            Variant::AirF => (ModelMode::Air, true, false, false),
            Variant::AirFp => (ModelMode::Air, true, true, false),
            Variant::Air => (ModelMode::Air, true, true, true),
            Variant::Timemmd => (ModelMode::Timemmd, false, false, false),
        };
        cfg.mode = mode;
        cfg.air_on_features = f;
        cfg.air_on_predictor = p;
        cfg.vq_enabled = vq;
        cfg
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.variant.prefix(), self.architecture.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::all()
            .into_iter()
            .find(|id| id.to_string() == s)
            .ok_or_else(|| {
                let valid: Vec<String> = ModelId::all().iter().map(ToString::to_string).collect();
                Error::Config(format!(
                    "unknown model id {s:?}; valid ids: {}",
                    valid.join(", ")
                ))
            })
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tsmixer(TsMixer),
    Tcn(Tcn),
    Itransformer(ITransformer),
}

/// Routing weights available to a backbone, one `B × L` matrix per head.
#[derive(Debug, Clone, Default)]
pub(crate) struct Routes {
    kd: Option<Vec<Var>>,
    ol: Option<Vec<Var>>,
}

impl Routes {
    fn kd(&self, i: usize) -> Option<Var> {
        self.kd.as_ref().map(|v| v[i])
    }

    fn ol(&self, i: usize) -> Option<Var> {
        self.ol.as_ref().map(|v| v[i])
    }
}

/// A point forecast in normalized space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Forecast {
    /// `targets × H`.
    pub values: Vec<Vec<f64>>,
    pub origin: NaiveDate,
    pub model_id: String,
    pub seed: u64,
}

/// Graph handles produced by a batched forward.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × targets·H`.
    pub prediction: Var,
    /// `codebook + 0.25 · commitment` summed over both streams, if any VQ.
    pub aux_loss: Option<Var>,
    pub key_driver: Option<BatchRouting>,
    pub outlook: Option<BatchRouting>,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub description_fusion: Option<DescriptionFusion>,
    pub key_driver_routing: Option<RoutingModule>,
    pub outlook_routing: Option<RoutingModule>,
    pub timemmd: Option<TimeMmdFusion>,
}

impl ForecastModel {
    /// Builds and initializes a model; `seed` fixes every initial weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = match config.architecture {
            Architecture::Tsmixer => Backbone::Tsmixer(TsMixer::new(&mut store, &config, &mut rng)),
            Architecture::Tcn => Backbone::Tcn(Tcn::new(&mut store, &config, &mut rng)?),
            Architecture::Itransformer => {
                Backbone::Itransformer(ITransformer::new(&mut store, &config, &mut rng)?)
            }
        };
        let air = config.mode == ModelMode::Air;
        let description_fusion = air.then(|| {
            DescriptionFusion::new(
                &mut store,
                "describe",
                config.lookback,
                config.description_dim,
                config.description_proj,
                &mut rng,
            )
        });
        let rc = config.routing_config();
        let key_driver_routing = if config.air_on_features {
            Some(RoutingModule::new(&mut store, "route_kd", &rc, config.feature_heads(), &mut rng)?)
        } else {
            None
        };
        let outlook_routing = if config.air_on_predictor {
            Some(RoutingModule::new(&mut store, "route_ol", &rc, config.predictor_heads(), &mut rng)?)
        } else {
            None
        };
        let timemmd = (config.mode == ModelMode::Timemmd).then(|| {
            TimeMmdFusion::new(
                &mut store,
                "timemmd",
                config.embedding_dim,
                config.fusion_hidden,
                config.targets.len() * config.horizon,
                &mut rng,
            )
        });
        Ok(Self {
            config,
            store,
            backbone,
            description_fusion,
            key_driver_routing,
            outlook_routing,
            timemmd,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_sample(&self, s: &WindowSample) -> Result<()> {
        let c = &self.config;
        if s.x.rows() != c.channels || s.x.cols() != c.lookback {
            return Err(Error::Contract(format!(
                "sample lookback is {:?}, model expects [{}, {}]",
                s.x.shape(),
                c.channels,
                c.lookback
            )));
        }
        Ok(())
    }

    /// Batched forward. `x` rows are sample-major (`B·C × T`).
    pub fn forward_batch(&self, g: &mut Graph<'_>, samples: &[&WindowSample]) -> Result<ForwardOutput> {
        let batch = samples.len();
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        for s in samples {
            self.check_sample(s)?;
        }
        let xs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
        let mut x = g.constant(stack(&xs)?);
        if let Some(fusion) = &self.description_fusion {
            let shared = samples
                .iter()
                .all(|s| Arc::ptr_eq(&s.descriptions, &samples[0].descriptions));
            let desc = if shared {
                (*samples[0].descriptions).clone()
            } else {
                let ds: Vec<&Tensor> = samples.iter().map(|s| s.descriptions.as_ref()).collect();
                stack(&ds)?
            };
            if desc.rows() != self.config.channels && desc.rows() != batch * self.config.channels {
                return Err(Error::Config(format!(
                    "{} description embeddings for {} channels",
                    desc.rows(),
                    self.config.channels
                )));
            }
            let desc = g.constant(desc);
            x = fusion.forward(g, x, desc)?;
        }
        let embed = |g: &mut Graph<'_>, pick: fn(&WindowSample) -> &[f64]| -> Result<Var> {
            let rows: Vec<Vec<f64>> = samples.iter().map(|s| pick(s).to_vec()).collect();
            Ok(g.constant(Tensor::from_rows(&rows)?))
        };
        let mut routes = Routes::default();
        let mut key_driver = None;
        let mut outlook = None;
        if let Some(m) = &self.key_driver_routing {
            let e = embed(g, |s| &s.key_driver)?;
            let r = m.route_batch(g, e)?;
            routes.kd = Some(r.weights.clone());
            key_driver = Some(r);
        }
        if let Some(m) = &self.outlook_routing {
            let e = embed(g, |s| &s.outlook)?;
            let r = m.route_batch(g, e)?;
            routes.ol = Some(r.weights.clone());
            outlook = Some(r);
        }
        let mut prediction = match &self.backbone {
            Backbone::Tsmixer(m) => m.forward(g, x, batch, &routes)?,
            Backbone::Tcn(m) => m.forward(g, x, batch, &routes)?,
            Backbone::Itransformer(m) => m.forward(g, x, batch, &routes)?,
        };
        if let Some(fusion) = &self.timemmd {
            let kd = embed(g, |s| &s.key_driver)?;
            let ol = embed(g, |s| &s.outlook)?;
            prediction = fusion.forward(g, prediction, kd, ol)?;
        }
        let aux_terms: Vec<Var> = [&key_driver, &outlook]
            .into_iter()
            .flatten()
            .filter_map(|r: &BatchRouting| r.aux_loss(g))
            .collect();
        let aux_loss = match aux_terms.as_slice() {
            [] => None,
            [one] => Some(*one),
            [a, b] => Some(g.add(*a, *b)?),
            _ => unreachable!("at most two routing streams"),
        };
        Ok(ForwardOutput {
            prediction,
            aux_loss,
            key_driver,
            outlook,
        })
    }

    /// Predictions for a batch as `B` matrices of `targets × H`.
    pub fn predict_batch(&self, samples: &[&WindowSample]) -> Result<Vec<Tensor>> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward_batch(&mut g, samples)?;
        let v = g.value(out.prediction);
        let (t, h) = (self.config.targets.len(), self.config.horizon);
        (0..samples.len())
            .map(|b| Tensor::matrix(t, h, v.row_slice(b).to_vec()))
            .collect()
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<Tensor> {
        Ok(self.predict_batch(&[sample])?.remove(0))
    }

    pub fn forecast(&self, sample: &WindowSample, model_id: &str, seed: u64) -> Result<Forecast> {
        let p = self.predict(sample)?;
        if !p.is_finite() {
            return Err(Error::Contract("non-finite forecast".into()));
        }
        Ok(Forecast {
            values: (0..p.rows()).map(|r| p.row_slice(r).to_vec()).collect(),
            origin: sample.origin,
            model_id: model_id.to_string(),
            seed,
        })
    }
}

/// Horizon targets of a batch as `B × targets·H`.
pub fn stack_targets(samples: &[&WindowSample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.y.data().to_vec()).collect();
    Tensor::from_rows(&rows)
}
