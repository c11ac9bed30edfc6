//! Layers that are either plain or routed, plus the two text-fusion heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv1d, Dense, RoutedConv1d, RoutedDense, RoutedLatentAttention, SelfAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn routing_mismatch(routed: bool) -> Error {
    if routed {
        Error::Contract("routed layer called without routing weights".into())
    } else {
        Error::Contract("routing weights supplied to an unrouted layer".into())
    }
}

/// A fully connected layer that may carry a routed latent.
#[derive(Debug, Clone)]
pub enum Fc {
    Plain(Dense),
    Routed(RoutedDense),
}

impl Fc {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        routed: bool,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        if routed {
            Fc::Routed(RoutedDense::new(store, name, in_dim, latent, out_dim, rng))
        } else {
            Fc::Plain(Dense::new(store, name, in_dim, out_dim, rng))
        }
    }

    pub fn is_routed(&self) -> bool {
        matches!(self, Fc::Routed(_))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Option<Var>) -> Result<Var> {
        match (self, r) {
            (Fc::Plain(d), None) => d.forward(g, x),
            (Fc::Routed(d), Some(r)) => d.forward(g, x, r),
            _ => Err(routing_mismatch(self.is_routed())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ConvLayer {
    Plain(Conv1d),
    Routed(RoutedConv1d),
}

impl ConvLayer {
    pub fn is_routed(&self) -> bool {
        matches!(self, ConvLayer::Routed(_))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Option<Var>) -> Result<Var> {
        match (self, r) {
            (ConvLayer::Plain(c), None) => c.forward(g, x),
            (ConvLayer::Routed(c), Some(r)) => c.forward(g, x, r),
            _ => Err(routing_mismatch(self.is_routed())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AttentionLayer {
    Plain(SelfAttention),
    Routed(RoutedLatentAttention),
}

impl AttentionLayer {
    pub fn is_routed(&self) -> bool {
        matches!(self, AttentionLayer::Routed(_))
    }

    /// `x` is one sample's `N × d` tokens and `r` its `1 × L` routing.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Option<Var>) -> Result<Var> {
        match (self, r) {
            (AttentionLayer::Plain(a), None) => a.forward(g, x),
            (AttentionLayer::Routed(a), Some(r)) => a.forward(g, x, r),
            _ => Err(routing_mismatch(self.is_routed())),
        }
    }
}

/// Shared per-channel fusion of the lookback with a description embedding:
/// `x_c ← FC([x_c, P · desc_c])`.
#[derive(Debug, Clone)]
pub struct DescriptionFusion {
    pub projection: Dense,
    pub fc: Dense,
    pub lookback: usize,
    pub description_dim: usize,
}

impl DescriptionFusion {
    /// The FC starts as the identity on the series block and zero on the
    /// description block, so fusion is a no-op at initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        lookback: usize,
        description_dim: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Self {
        let projection = Dense::new(
            store,
            &format!("{name}.proj"),
            description_dim,
            proj_dim,
            rng,
        );
        let fc = Dense::zeros(store, &format!("{name}.fc"), lookback + proj_dim, lookback);
        let w = store.get_mut(fc.weight).data_mut();
        let width = lookback + proj_dim;
        for t in 0..lookback {
            w[t * width + t] = 1.0;
        }
        Self {
            projection,
            fc,
            lookback,
            description_dim,
        }
    }

    /// `x` is `B·C × T`. `desc` is either `C × D` (shared by every sample) or
    /// `B·C × D`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, desc: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        let (dr, dc) = (g.value(desc).rows(), g.value(desc).cols());
        if dc != self.description_dim || dr == 0 || !rows.is_multiple_of(dr) {
            return Err(Error::dim("fuse_channel_descriptions", g.shape(x), g.shape(desc)));
        }
        let p = self.projection.forward(g, desc)?;
        let p = if dr == rows {
            p
        } else {
            let idx: Vec<usize> = (0..rows).map(|i| i % dr).collect();
            g.gather_rows(p, &idx)?
        };
        let joined = g.concat_cols(&[x, p])?;
        self.fc.forward(g, joined)
    }
}

/// Additive text projection: `base + MLP([e_kd, e_ol])`.
#[derive(Debug, Clone)]
pub struct TimeMmdFusion {
    pub hidden: Dense,
    pub out: Dense,
    pub embedding_dim: usize,
}

impl TimeMmdFusion {
    /// The output layer is zero-initialized so the model starts at the
    /// unimodal forecast.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embedding_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::new(store, &format!("{name}.hidden"), 2 * embedding_dim, hidden, rng),
            out: Dense::zeros(store, &format!("{name}.out"), hidden, out_dim),
            embedding_dim,
        }
    }

    /// `base` is `B × targets·H`; `e_kd` and `e_ol` are `B × D`.
    pub fn forward(&self, g: &mut Graph<'_>, base: Var, e_kd: Var, e_ol: Var) -> Result<Var> {
        for e in [e_kd, e_ol] {
            if g.value(e).cols() != self.embedding_dim {
                return Err(Error::Dimension {
                    op: "timemmd_fuse (expected embedding dim)",
                    lhs: vec![self.embedding_dim],
                    rhs: g.shape(e).to_vec(),
                });
            }
        }
        let joined = g.concat_cols(&[e_kd, e_ol])?;
        let h = self.hidden.forward(g, joined)?;
        let h = g.relu(h);
        let proj = self.out.forward(g, h)?;
        g.add(base, proj)
    }
}

/// Stacks equally shaped row-major tensors.
pub(crate) fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (r, c) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(parts.len() * r * c);
    for p in parts {
        if p.rows() != r || p.cols() != c {
            return Err(Error::dim("stack", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(parts.len() * r, c, data)
}
