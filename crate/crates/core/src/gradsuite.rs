//! The finite-difference gradient suite: every routed layer, the routing
//! module through quantization, both fusion heads and every forecaster on a
//! tiny configuration.

use std::sync::Arc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_gradcheck, GradcheckOptions};
use crate::graph::{Graph, Var};
use crate::layers::{RoutedConv1d, RoutedDense, RoutedLatentAttention};
use crate::model::blocks::{DescriptionFusion, TimeMmdFusion};
use crate::model::{Architecture, ForecastModel, ModelConfig, ModelId, Variant};
use crate::params::{ParamId, ParamStore};
use crate::routing::{RoutingConfig, RoutingModule};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Instances discarded for sitting on a ReLU kink before this one.
    pub redraws: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Fixed-weight quadratic readout so every output coordinate reaches the loss.
fn readout(g: &mut Graph<'_>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 5 % 7) as f64) / 7.0).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    let sq = g.mul(p, p)?;
    let lin = g.sum(p);
    let quad = g.sum(sq);
    g.add(lin, quad)
}

fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn routed_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let layer = RoutedDense::new(&mut store, "dense", 5, 3, 4, rng);
    for id in [layer.b1, layer.b2] {
        let n = store.get(id).len();
        *store.get_mut(id) = Tensor::normal(&[n], 0.5, rng);
    }
    let x = store.add("x", Tensor::normal(&[3, 5], 1.0, rng));
    let r = store.add("r", Tensor::normal(&[1, 3], 1.0, rng));
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let (xv, rv) = (g.param(x), g.param(r));
        let y = layer.forward(g, xv, rv)?;
        readout(g, y)
    })
}

fn routed_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let layer = RoutedConv1d::new(&mut store, "conv", 2, 3, 2, 3, 2, rng)?;
    let x = store.add("x", Tensor::normal(&[2, 6], 1.0, rng));
    let r = store.add("r", Tensor::normal(&[1, 3], 1.0, rng));
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let (xv, rv) = (g.param(x), g.param(r));
        let y = layer.forward(g, xv, rv)?;
        readout(g, y)
    })
}

fn routed_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let layer = RoutedLatentAttention::new(&mut store, "attn", 3, 4, 2, 3, 2, rng)?;
    let x = store.add("x", Tensor::normal(&[4, 3], 1.0, rng));
    let r = store.add("r", Tensor::normal(&[1, 3], 1.0, rng));
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let (xv, rv) = (g.param(x), g.param(r));
        let y = layer.forward(g, xv, rv)?;
        readout(g, y)
    })
}

fn vq_routing(rng: &mut ChaCha8Rng) -> (ParamStore, RoutingModule, Tensor) {
    let mut store = ParamStore::new();
    let cfg = RoutingConfig {
        embedding_dim: 5,
        hidden: 6,
        latent: 3,
        codebook_size: 4,
        vq_enabled: true,
        rescale: false,
    };
    let module = RoutingModule::new(&mut store, "route", &cfg, 2, rng).expect("valid routing config");
    let e = Tensor::normal(&[3, 5], 1.0, rng);
    (store, module, e)
}

/// Routing weights through the straight-through quantizer.
fn routing_module(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut store, module, e) = vq_routing(rng);
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let ev = g.constant(e.clone());
        let routed = module.route_batch(g, ev)?;
        let joined = g.concat_cols(&routed.weights)?;
        readout(g, joined)
    })
}

/// The two VQ losses each carry a stop-gradient, so each is checked against
/// the parameters it actually trains: the codebook loss against the
/// codebook, the commitment loss against the generator.
fn vq_losses(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mut store, module, e) = vq_routing(rng);
    let codebook = [module.codebook.as_ref().expect("vq enabled").entries];
    let generator: Vec<ParamId> = store.ids().filter(|&id| id != codebook[0]).collect();
    let opts = GradcheckOptions::default();
    let cb = finite_difference_gradcheck(&mut store, &codebook, &opts, |g| {
        let ev = g.constant(e.clone());
        let routed = module.route_batch(g, ev)?;
        Ok(routed.codebook_loss.expect("vq enabled"))
    })?;
    let cm = finite_difference_gradcheck(&mut store, &generator, &opts, |g| {
        let ev = g.constant(e.clone());
        let routed = module.route_batch(g, ev)?;
        Ok(routed.commitment_loss.expect("vq enabled"))
    })?;
    Ok(cb.max(cm))
}

fn timemmd_fusion(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let fusion = TimeMmdFusion::new(&mut store, "fuse", 3, 5, 4, rng);
    // Nonzero output weights so the hidden layer receives gradient.
    let w = fusion.out.weight;
    *store.get_mut(w) = Tensor::normal(&[4, 5], 0.5, rng);
    let base = store.add("base", Tensor::normal(&[2, 4], 1.0, rng));
    let kd = store.add("kd", Tensor::normal(&[2, 3], 1.0, rng));
    let ol = store.add("ol", Tensor::normal(&[2, 3], 1.0, rng));
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let (b, k, o) = (g.param(base), g.param(kd), g.param(ol));
        let y = fusion.forward(g, b, k, o)?;
        readout(g, y)
    })
}

fn description_fusion(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let fusion = DescriptionFusion::new(&mut store, "describe", 4, 3, 2, rng);
    let w = fusion.fc.weight;
    *store.get_mut(w) = Tensor::normal(&[4, 6], 0.5, rng);
    let x = store.add("x", Tensor::normal(&[6, 4], 1.0, rng));
    let desc = store.add("desc", Tensor::normal(&[3, 3], 1.0, rng));
    let params = all_params(&store);
    finite_difference_gradcheck(&mut store, &params, &GradcheckOptions::default(), |g| {
        let (xv, dv) = (g.param(x), g.param(desc));
        let y = fusion.forward(g, xv, dv)?;
        readout(g, y)
    })
}

/// Configuration used by the full-model checks: C=3, T=4, H=2, L=2, one block.
pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        lookback: 4,
        horizon: 2,
        channels: 3,
        targets: vec![0, 2],
        latent: 2,
        codebook_size: 3,
        blocks: 1,
        d_model: 4,
        attention_heads: 1,
        dilations: vec![1, 2],
        embedding_dim: 5,
        description_dim: 4,
        description_proj: 3,
        generator_hidden: 6,
        fusion_hidden: 5,
        ..ModelConfig::default()
    }
}

/// A random sample matching `cfg`.
pub fn random_sample<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> WindowSample {
    WindowSample {
        x: Tensor::normal(&[cfg.channels, cfg.lookback], 1.0, rng),
        y: Tensor::normal(&[cfg.targets.len(), cfg.horizon], 1.0, rng),
        key_driver: Tensor::normal(&[cfg.embedding_dim], 1.0, rng).into_data(),
        outlook: Tensor::normal(&[cfg.embedding_dim], 1.0, rng).into_data(),
        descriptions: Arc::new(Tensor::normal(&[cfg.channels, cfg.description_dim], 1.0, rng)),
        origin: NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date"),
        origin_index: cfg.lookback,
    }
}

/// Perturbs every zero-initialized parameter so no gradient path is
/// trivially closed.
fn randomize_zeros(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = 0.3 * rng.random_range(-1.0..1.0);
            }
        }
    }
}

/// Forecast MSE of a model on a two-sample batch. The VQ losses are covered
/// by [`vq_losses`]; their stop-gradients make a joint check meaningless.
pub fn full_model(id: ModelId, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = id.configure(&tiny_config(id.architecture));
    let mut model = ForecastModel::new(cfg.clone(), rng.random())?;
    randomize_zeros(&mut model.store, rng);
    let samples = [random_sample(&cfg, rng), random_sample(&cfg, rng)];
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let target = crate::model::stack_targets(&refs)?;
    let params = all_params(&model.store);
    let ForecastModel { store, .. } = &mut model;
    let mut store = std::mem::take(store);
    let skeleton = model.clone();
    let opts = GradcheckOptions {
        max_coords_per_param: Some(12),
        ..GradcheckOptions::default()
    };
    finite_difference_gradcheck(&mut store, &params, &opts, |g| {
        let out = skeleton.forward_batch(g, &refs)?;
        let y = g.constant(target.clone());
        g.mse_loss(out.prediction, y)
    })
}

/// Instance draws allowed per check before giving up on finding a point
/// away from every ReLU kink.
pub const MAX_DRAWS: usize = 50;

fn away_from_kinks(
    name: String,
    rng: &mut ChaCha8Rng,
    mut check: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut redraws = 0;
    loop {
        match check(rng) {
            Err(Error::NearKink { .. }) if redraws + 1 < MAX_DRAWS => redraws += 1,
            r => {
                return r.map(|max_rel_error| SuiteResult {
                    name,
                    max_rel_error,
                    redraws,
                })
            }
        }
    }
}

/// Runs every check. Instances are drawn from `seed`; an instance with a
/// ReLU input near zero is replaced by a fresh draw.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Check = fn(&mut ChaCha8Rng) -> Result<f64>;
    let layer_checks: [(&str, Check); 7] = [
        ("routed_dense", routed_dense),
        ("routed_conv1d", routed_conv),
        ("routed_latent_attention", routed_attention),
        ("routing_module_vq", routing_module),
        ("vq_losses", vq_losses),
        ("timemmd_fusion", timemmd_fusion),
        ("description_fusion", description_fusion),
    ];
    let mut results = Vec::new();
    for (name, check) in layer_checks {
        results.push(away_from_kinks(name.to_string(), &mut rng, check)?);
    }
    for arch in Architecture::ALL {
        for variant in [Variant::Vanilla, Variant::Air, Variant::Timemmd] {
            let id = ModelId {
                variant,
                architecture: arch,
            };
            results.push(away_from_kinks(format!("model:{id}"), &mut rng, |r| {
                full_model(id, r)
            })?);
        }
    }
    Ok(results)
}
