//! Text-conditioned routing: embedding → MLP logits → (optional) codebook
//! snap → softmax routing weights.

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{nearest_row, softmax, Graph, Var};
use crate::layers::Dense;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight of the commitment term relative to the codebook term.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    KeyDriver,
    Outlook,
    ChannelDescription,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
    pub date: Option<NaiveDate>,
}

impl TextEmbedding {
    pub fn new(vector: Vec<f64>, source: EmbeddingSource) -> Self {
        Self {
            vector,
            source,
            date: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub codebook_size: usize,
    pub vq_enabled: bool,
    /// Multiply routing weights by `L` so uniform routing is the identity gate.
    #[serde(default)]
    pub rescale: bool,
}

/// MLP trunk (`D → hidden → hidden`, ReLU) with one `hidden → L` head per
/// routed layer.
#[derive(Debug, Clone)]
pub struct WeightGenerator {
    pub trunk: [Dense; 2],
    pub heads: Vec<Dense>,
    pub embedding_dim: usize,
    pub latent: usize,
}

impl WeightGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embedding_dim: usize,
        hidden: usize,
        latent: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let trunk = [
            Dense::new(store, &format!("{name}.trunk0"), embedding_dim, hidden, rng),
            Dense::new(store, &format!("{name}.trunk1"), hidden, hidden, rng),
        ];
        let heads = (0..heads)
            .map(|h| Dense::new(store, &format!("{name}.head{h}"), hidden, latent, rng))
            .collect();
        Self {
            trunk,
            heads,
            embedding_dim,
            latent,
        }
    }

    /// `embeddings` is `[B × D]`; returns one `[B × L]` logit matrix per head.
    pub fn generate_logits(&self, g: &mut Graph<'_>, embeddings: Var) -> Result<Vec<Var>> {
        let d = *g.shape(embeddings).last().unwrap_or(&0);
        if d != self.embedding_dim {
            return Err(Error::Dimension {
                op: "generate_logits (expected embedding dim)",
                lhs: vec![self.embedding_dim],
                rhs: g.shape(embeddings).to_vec(),
            });
        }
        let h = self.trunk[0].forward(g, embeddings)?;
        let h = g.relu(h);
        let h = self.trunk[1].forward(g, h)?;
        let h = g.relu(h);
        self.heads.iter().map(|head| head.forward(g, h)).collect()
    }
}

/// `K` learnable logit vectors of length `L`.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: ParamId,
    pub size: usize,
    pub latent: usize,
}

impl Codebook {
    /// Entries drawn from `N(0, 0.5²)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        latent: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("codebook needs at least one entry".into()));
        }
        let entries = store.add(
            format!("{name}.codebook"),
            Tensor::normal(&[size, latent], 0.5, rng),
        );
        Ok(Self {
            entries,
            size,
            latent,
        })
    }
}

/// Nearest codebook row by squared Euclidean distance, lowest index on ties.
pub fn nearest_codebook_entry(z: &[f64], codebook: &Tensor) -> Result<(Vec<f64>, usize)> {
    if codebook.is_empty() {
        return Err(Error::Config("empty codebook".into()));
    }
    if z.len() != codebook.cols() {
        return Err(Error::dim("nearest_codebook_entry", &[z.len()], codebook.shape()));
    }
    let (idx, _) = nearest_row(z, codebook.data(), z.len())
        .ok_or_else(|| Error::Config("empty codebook".into()))?;
    Ok((codebook.row_slice(idx).to_vec(), idx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    /// `‖stopgrad(z) − e*‖²`, trains the codebook.
    pub codebook: f64,
    /// `‖z − stopgrad(e*)‖²`, trains the generator.
    pub commitment: f64,
}

impl VqLosses {
    pub fn total(&self) -> f64 {
        self.codebook + COMMITMENT_WEIGHT * self.commitment
    }
}

/// Value-level quantization: returns the nearest entry, its index and the
/// auxiliary losses.
pub fn straight_through_quantize(z: &[f64], codebook: &Tensor) -> Result<(Vec<f64>, usize, VqLosses)> {
    let (q, idx) = nearest_codebook_entry(z, codebook)?;
    let d: f64 = z.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((
        q,
        idx,
        VqLosses {
            codebook: d,
            commitment: d,
        },
    ))
}

/// Routing weights for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRouting {
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
    /// Pre-softmax vector actually used (codebook row under VQ).
    pub quantized: Vec<f64>,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutput {
    pub heads: Vec<HeadRouting>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

impl RoutingOutput {
    pub fn aux_loss(&self) -> f64 {
        self.codebook_loss + COMMITMENT_WEIGHT * self.commitment_loss
    }
}

/// Graph-level routing for a batch of `B` embeddings.
#[derive(Debug, Clone)]
pub struct BatchRouting {
    /// Per head, `B × L` routing weights (one row per sample).
    pub weights: Vec<Var>,
    /// Per head, `B × L` generator logits before quantization.
    pub logits: Vec<Var>,
    /// Per head, `B × L` softmax inputs (codebook rows under VQ).
    pub pre_softmax: Vec<Var>,
    /// `indices[h][b]`, the codebook row chosen for sample `b` by head `h`;
    /// empty without VQ.
    pub indices: Vec<Vec<usize>>,
    /// Sum over heads, mean over samples; `None` without VQ.
    pub codebook_loss: Option<Var>,
    pub commitment_loss: Option<Var>,
}

impl BatchRouting {
    /// `codebook + 0.25 · commitment`, or `None` without VQ.
    pub fn aux_loss(&self, g: &mut Graph<'_>) -> Option<Var> {
        let cb = self.codebook_loss?;
        let cm = self.commitment_loss?;
        let scaled = g.scale(cm, COMMITMENT_WEIGHT);
        g.add(cb, scaled).ok()
    }
}

/// Weight generator plus codebook serving one text stream.
#[derive(Debug, Clone)]
pub struct RoutingModule {
    pub generator: WeightGenerator,
    /// Present iff VQ is enabled.
    pub codebook: Option<Codebook>,
    pub rescale: bool,
}

impl RoutingModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &RoutingConfig,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.latent == 0 || cfg.hidden == 0 || cfg.embedding_dim == 0 {
            return Err(Error::Config("routing dimensions must be positive".into()));
        }
        let generator = WeightGenerator::new(
            store,
            name,
            cfg.embedding_dim,
            cfg.hidden,
            cfg.latent,
            heads,
            rng,
        );
        let codebook = if cfg.vq_enabled {
            Some(Codebook::new(store, name, cfg.codebook_size, cfg.latent, rng)?)
        } else {
            None
        };
        Ok(Self {
            generator,
            codebook,
            rescale: cfg.rescale,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.generator.heads.len()
    }

    pub fn latent(&self) -> usize {
        self.generator.latent
    }

    /// Routes a batch of embeddings (`[B × D]`).
    pub fn route_batch(&self, g: &mut Graph<'_>, embeddings: Var) -> Result<BatchRouting> {
        let batch = g.value(embeddings).rows();
        let head_logits = self.generator.generate_logits(g, embeddings)?;
        let latent = self.latent() as f64;
        let codebook = self.codebook.as_ref().map(|c| g.param(c.entries));
        let mut out = BatchRouting {
            weights: Vec::with_capacity(head_logits.len()),
            logits: head_logits.clone(),
            pre_softmax: Vec::with_capacity(head_logits.len()),
            indices: Vec::new(),
            codebook_loss: None,
            commitment_loss: None,
        };
        let mut cb_terms = Vec::new();
        let mut cm_terms = Vec::new();
        for &z in &head_logits {
            let pre = match codebook {
                Some(cb) => {
                    let (q, idx) = g.quantize_rows(z, cb)?;
                    let entries = g.gather_rows(cb, &idx)?;
                    let z_stop = g.detach(z);
                    let e_stop = g.detach(entries);
                    let d_cb = g.sub(z_stop, entries)?;
                    let d_cb = g.mul(d_cb, d_cb)?;
                    cb_terms.push(g.sum(d_cb));
                    let d_cm = g.sub(z, e_stop)?;
                    let d_cm = g.mul(d_cm, d_cm)?;
                    cm_terms.push(g.sum(d_cm));
                    out.indices.push(idx);
                    q
                }
                None => z,
            };
            let mut w = g.softmax(pre);
            if self.rescale {
                w = g.scale(w, latent);
            }
            out.weights.push(w);
            out.pre_softmax.push(pre);
        }
        if !cb_terms.is_empty() {
            let inv = 1.0 / batch as f64;
            let cb = g.concat_cols(&cb_terms)?;
            let cb = g.sum(cb);
            out.codebook_loss = Some(g.scale(cb, inv));
            let cm = g.concat_cols(&cm_terms)?;
            let cm = g.sum(cm);
            out.commitment_loss = Some(g.scale(cm, inv));
        }
        Ok(out)
    }

    /// Value-level routing for a single embedding.
    pub fn route_weights(&self, store: &ParamStore, embedding: &TextEmbedding) -> Result<RoutingOutput> {
        if embedding.dim() != self.generator.embedding_dim {
            return Err(Error::Dimension {
                op: "route_weights (expected embedding dim)",
                lhs: vec![self.generator.embedding_dim],
                rhs: vec![embedding.dim()],
            });
        }
        let mut g = Graph::with_params(store);
        let e = g.constant(Tensor::row(embedding.vector.clone()));
        let routed = self.route_batch(&mut g, e)?;
        let heads = (0..self.num_heads())
            .map(|h| HeadRouting {
                weights: g.value(routed.weights[h]).data().to_vec(),
                logits: g.value(routed.logits[h]).data().to_vec(),
                quantized: g.value(routed.pre_softmax[h]).data().to_vec(),
                index: routed.indices.get(h).map(|idx| idx[0]),
            })
            .collect();
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        Ok(RoutingOutput {
            heads,
            codebook_loss: read(routed.codebook_loss),
            commitment_loss: read(routed.commitment_loss),
        })
    }
}

/// Softmax of the selected pre-softmax vector; exposed for invariant checks.
pub fn routing_from_logits(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}
