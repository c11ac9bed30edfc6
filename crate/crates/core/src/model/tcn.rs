//! Temporal convolutional forecaster: residual dilated causal convolutions
//! and an FC head over the last time step.

use rand::Rng;

use super::blocks::{ConvLayer, Fc};
use super::{ModelConfig, Routes};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Conv1d, RoutedConv1d};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Tcn {
    /// `C → C` causal convolutions, dilations cycling through the config.
    pub convs: Vec<ConvLayer>,
    /// Last-step features of all channels (`C`) to `targets·H`.
    pub predictor: Fc,
    channels: usize,
    lookback: usize,
}

impl Tcn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let mut convs = Vec::new();
        for b in 0..cfg.blocks {
            for (j, &d) in cfg.dilations.iter().enumerate() {
                let name = format!("tcn{b}.conv{j}");
                convs.push(if cfg.air_on_features {
                    ConvLayer::Routed(RoutedConv1d::new(
                        store,
                        &name,
                        c,
                        cfg.latent,
                        c,
                        cfg.kernel_size,
                        d,
                        rng,
                    )?)
                } else {
                    ConvLayer::Plain(Conv1d::new(store, &name, c, c, cfg.kernel_size, d, rng)?)
                });
            }
        }
        let predictor = Fc::new(
            store,
            "predictor",
            c,
            cfg.targets.len() * cfg.horizon,
            cfg.air_on_predictor,
            cfg.latent,
            rng,
        );
        Ok(Self {
            convs,
            predictor,
            channels: c,
            lookback: cfg.lookback,
        })
    }

    pub fn feature_heads(cfg: &ModelConfig) -> usize {
        cfg.blocks * cfg.dilations.len()
    }

    pub fn predictor_heads(_cfg: &ModelConfig) -> usize {
        1
    }

    /// `x` is `B·C × T`; returns `B × targets·H`.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var, batch: usize, routes: &Routes) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let u = conv.forward(g, h, routes.kd(i))?;
            let u = g.relu(u);
            h = g.add(h, u)?;
        }
        let last = g.slice_cols(h, self.lookback - 1, 1)?;
        let last = g.reshape(last, &[batch, self.channels])?;
        self.predictor.forward(g, last, routes.ol(0))
    }
}
