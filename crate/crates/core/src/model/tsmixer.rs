//! MLP-mixer forecaster: alternating time-mixing and feature-mixing FCs with
//! residual connections, then one FC head per target.

use rand::Rng;

use super::blocks::Fc;
use super::{ModelConfig, Routes};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct MixerBlock {
    /// `T → T`, shared across channels.
    pub time: Fc,
    /// `C → C`, shared across time steps.
    pub feature: Fc,
}

#[derive(Debug, Clone)]
pub struct TsMixer {
    pub blocks: Vec<MixerBlock>,
    /// One `T → H` head per target.
    pub predictors: Vec<Fc>,
    channels: usize,
    targets: Vec<usize>,
}

impl TsMixer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (t, c, l) = (cfg.lookback, cfg.channels, cfg.latent);
        let f = cfg.air_on_features;
        let blocks = (0..cfg.blocks)
            .map(|i| MixerBlock {
                time: Fc::new(store, &format!("mixer{i}.time"), t, t, f, l, rng),
                feature: Fc::new(store, &format!("mixer{i}.feature"), c, c, f, l, rng),
            })
            .collect();
        let predictors = (0..cfg.targets.len())
            .map(|j| {
                Fc::new(
                    store,
                    &format!("predictor{j}"),
                    t,
                    cfg.horizon,
                    cfg.air_on_predictor,
                    l,
                    rng,
                )
            })
            .collect();
        Self {
            blocks,
            predictors,
            channels: c,
            targets: cfg.targets.clone(),
        }
    }

    pub fn feature_heads(cfg: &ModelConfig) -> usize {
        2 * cfg.blocks
    }

    pub fn predictor_heads(cfg: &ModelConfig) -> usize {
        cfg.targets.len()
    }

    /// `x` is `B·C × T`; returns `B × targets·H`.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var, batch: usize, routes: &Routes) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let u = block.time.forward(g, h, routes.kd(2 * i))?;
            let u = g.relu(u);
            h = g.add(h, u)?;
            let ht = g.block_transpose(h, batch)?;
            let u = block.feature.forward(g, ht, routes.kd(2 * i + 1))?;
            let u = g.relu(u);
            let ht = g.add(ht, u)?;
            h = g.block_transpose(ht, batch)?;
        }
        let mut outs = Vec::with_capacity(self.targets.len());
        for (j, (&target, head)) in self.targets.iter().zip(&self.predictors).enumerate() {
            let rows: Vec<usize> = (0..batch).map(|b| b * self.channels + target).collect();
            let xt = g.gather_rows(h, &rows)?;
            outs.push(head.forward(g, xt, routes.ol(j))?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }
}
