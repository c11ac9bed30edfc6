//! Inverted transformer: each variate's lookback becomes one token and
//! attention runs across variates.

use rand::Rng;

use super::blocks::{AttentionLayer, Fc};
use super::{ModelConfig, Routes};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Dense, RoutedLatentAttention, SelfAttention};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: AttentionLayer,
    pub ffn_in: Dense,
    pub ffn_out: Dense,
}

#[derive(Debug, Clone)]
pub struct ITransformer {
    /// `T → d_model`, shared by all variates.
    pub embed: Dense,
    pub blocks: Vec<EncoderBlock>,
    /// One `d_model → H` head per target token.
    pub predictors: Vec<Fc>,
    channels: usize,
    targets: Vec<usize>,
}

impl ITransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Dense::new(store, "embed", cfg.lookback, d, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let name = format!("encoder{i}.attention");
            let attention = if cfg.air_on_features {
                AttentionLayer::Routed(RoutedLatentAttention::new(
                    store,
                    &name,
                    d,
                    d,
                    d,
                    cfg.latent,
                    cfg.attention_heads,
                    rng,
                )?)
            } else {
                AttentionLayer::Plain(SelfAttention::new(store, &name, d, cfg.attention_heads, rng)?)
            };
            blocks.push(EncoderBlock {
                attention,
                ffn_in: Dense::new(store, &format!("encoder{i}.ffn_in"), d, d, rng),
                ffn_out: Dense::new(store, &format!("encoder{i}.ffn_out"), d, d, rng),
            });
        }
        let predictors = (0..cfg.targets.len())
            .map(|j| {
                Fc::new(
                    store,
                    &format!("predictor{j}"),
                    d,
                    cfg.horizon,
                    cfg.air_on_predictor,
                    cfg.latent,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            embed,
            blocks,
            predictors,
            channels: cfg.channels,
            targets: cfg.targets.clone(),
        })
    }

    pub fn feature_heads(cfg: &ModelConfig) -> usize {
        cfg.blocks
    }

    pub fn predictor_heads(cfg: &ModelConfig) -> usize {
        cfg.targets.len()
    }

    /// Token representations after the encoder, `B·C × d_model`.
    pub(crate) fn encode(&self, g: &mut Graph<'_>, x: Var, batch: usize, routes: &Routes) -> Result<Var> {
        let c = self.channels;
        let mut tok = self.embed.forward(g, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut per_sample = Vec::with_capacity(batch);
            for b in 0..batch {
                let xb = if batch == 1 { tok } else { g.slice_rows(tok, b * c, c)? };
                let rb = match routes.kd(i) {
                    Some(r) if batch > 1 => Some(g.slice_rows(r, b, 1)?),
                    other => other,
                };
                per_sample.push(block.attention.forward(g, xb, rb)?);
            }
            let att = if batch == 1 {
                per_sample[0]
            } else {
                g.concat_rows(&per_sample)?
            };
            tok = g.add(tok, att)?;
            let f = block.ffn_in.forward(g, tok)?;
            let f = g.relu(f);
            let f = block.ffn_out.forward(g, f)?;
            tok = g.add(tok, f)?;
        }
        Ok(tok)
    }

    /// `x` is `B·C × T`; returns `B × targets·H`.
    pub(crate) fn forward(&self, g: &mut Graph<'_>, x: Var, batch: usize, routes: &Routes) -> Result<Var> {
        let tok = self.encode(g, x, batch, routes)?;
        let mut outs = Vec::with_capacity(self.targets.len());
        for (j, (&target, head)) in self.targets.iter().zip(&self.predictors).enumerate() {
            let rows: Vec<usize> = (0..batch).map(|b| b * self.channels + target).collect();
            let xt = g.gather_rows(tok, &rows)?;
            outs.push(head.forward(g, xt, routes.ol(j))?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }
}
