//! Plain and routed layer primitives.
//!
//! Routed layers factor a layer through an explicit latent of width `L` and
//! scale that latent by a routing vector `r` before the second half:
//!
//! * [`RoutedDense`]: `y = W2 · (r ⊙ (W1 · x + b1)) + b2`
//! * [`RoutedConv1d`]: causal `k`-tap convolution into `L` channels, per-channel
//!   gate, then a 1×1 convolution back to `C_out` channels.
//! * [`RoutedLatentAttention`]: keys attend into learnable latents, the latent
//!   summaries are gated, and queries read them back out.
//!
//! Dense and convolution forwards accept a stack of `B` samples. The routing
//! input is then `B × L`, one routing vector per sample, and each sample's
//! block of rows is gated by its own vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer applied to each row: `y = x · Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_vec(y, b, Axis::Rows)
    }
}

/// Causal dilated convolution with per-output-channel bias.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::Parameter("dilation must be at least 1".into()));
        }
        let kernel = store.add(
            format!("{name}.kernel"),
            Tensor::xavier_uniform(
                &[c_out, c_in, kernel_size],
                c_in * kernel_size,
                c_out * kernel_size,
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Ok(Self {
            kernel,
            bias,
            dilation,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.causal_conv1d(x, k, self.dilation)?;
        g.add_vec(y, b, Axis::Cols)
    }
}

fn check_routing(g: &Graph<'_>, r: Var, latent: usize) -> Result<()> {
    if g.value(r).len() != latent {
        return Err(Error::dim("routing", g.shape(r), &[latent]));
    }
    Ok(())
}

/// Number of samples in a `B × L` routing matrix whose sample blocks tile
/// `rows` rows of input.
fn check_batched_routing(g: &Graph<'_>, r: Var, latent: usize, rows: usize) -> Result<usize> {
    let len = g.value(r).len();
    if latent == 0 || !len.is_multiple_of(latent) {
        return Err(Error::dim("routing", g.shape(r), &[latent]));
    }
    let batch = len / latent;
    if !rows.is_multiple_of(batch) {
        return Err(Error::dim("routing", g.shape(r), &[rows]));
    }
    Ok(batch)
}

/// Dense layer factored as `W2 · diag(r) · W1` with biases.
#[derive(Debug, Clone)]
pub struct RoutedDense {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub latent: usize,
    pub out_dim: usize,
}

impl RoutedDense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        latent: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(
            format!("{name}.w1"),
            Tensor::xavier_uniform(&[latent, in_dim], in_dim, latent, rng),
        );
        let b1 = store.add(format!("{name}.b1"), Tensor::zeros(&[latent]));
        let w2 = store.add(
            format!("{name}.w2"),
            Tensor::xavier_uniform(&[out_dim, latent], latent, out_dim, rng),
        );
        let b2 = store.add(format!("{name}.b2"), Tensor::zeros(&[out_dim]));
        Self {
            w1,
            b1,
            w2,
            b2,
            in_dim,
            latent,
            out_dim,
        }
    }

    /// `x` is `[n × in]` and `r` is `B × L` with `B` dividing `n`: rows are
    /// split into `B` consecutive blocks gated by the matching routing row.
    /// Returns `[n × out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        let batch = check_batched_routing(g, r, self.latent, rows)?;
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.matmul_nt(x, w1)?;
        let h = g.add_vec(h, b1, Axis::Rows)?;
        let h = if batch == 1 {
            g.mul_vec(h, r, Axis::Rows)?
        } else {
            g.group_mul(h, r)?
        };
        let y = g.matmul_nt(h, w2)?;
        g.add_vec(y, b2, Axis::Rows)
    }

    /// The equivalent single dense map for a fixed routing vector:
    /// `(W2 · diag(r) · W1, W2 · (r ⊙ b1) + b2)`.
    pub fn collapse_to_dense(&self, store: &ParamStore, r: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        if r.len() != self.latent {
            return Err(Error::dim("collapse_to_dense", &[self.latent], &[r.len()]));
        }
        let w1 = store.get(self.w1).data();
        let b1 = store.get(self.b1).data();
        let w2 = store.get(self.w2).data();
        let b2 = store.get(self.b2).data();
        let (l, n_in, n_out) = (self.latent, self.in_dim, self.out_dim);
        let mut m = vec![0.0; n_out * n_in];
        let mut bias = b2.to_vec();
        for o in 0..n_out {
            for k in 0..l {
                let coef = w2[o * l + k] * r[k];
                bias[o] += coef * b1[k];
                for i in 0..n_in {
                    m[o * n_in + i] += coef * w1[k * n_in + i];
                }
            }
        }
        Ok((Tensor::matrix(n_out, n_in, m)?, bias))
    }
}

/// Convolution factored into a `k`-tap causal conv into `L` latent channels
/// and a 1×1 conv back out, with per-latent-channel gating in between.
#[derive(Debug, Clone)]
pub struct RoutedConv1d {
    pub conv_in: Conv1d,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub latent: usize,
}

impl RoutedConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        latent: usize,
        c_out: usize,
        kernel_size: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_in = Conv1d::new(
            store,
            &format!("{name}.in"),
            c_in,
            latent,
            kernel_size,
            dilation,
            rng,
        )?;
        let out_weight = store.add(
            format!("{name}.out.weight"),
            Tensor::xavier_uniform(&[c_out, latent], latent, c_out, rng),
        );
        let out_bias = store.add(format!("{name}.out.bias"), Tensor::zeros(&[c_out]));
        Ok(Self {
            conv_in,
            out_weight,
            out_bias,
            latent,
        })
    }

    /// `x` is `B·C_in × T` and `r` is `B × L`; returns `B·C_out × T`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        let batch = check_batched_routing(g, r, self.latent, rows)?;
        let h = self.conv_in.forward(g, x)?;
        // Row b·L + l of h is latent channel l of sample b, which is exactly
        // the row-major position of r[b, l].
        let h = g.mul_vec(h, r, Axis::Cols)?;
        let w = g.param(self.out_weight);
        let b = g.param(self.out_bias);
        let y = if batch == 1 {
            g.matmul(w, h)?
        } else {
            let ht = g.block_transpose(h, batch)?;
            let yt = g.matmul_nt(ht, w)?;
            g.block_transpose(yt, batch)?
        };
        g.add_vec(y, b, Axis::Cols)
    }
}

/// Row-stochastic maps produced by a latent attention forward.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// Per head, `L × N` (latents attending over keys).
    pub latent_from_keys: Vec<Tensor>,
    /// Per head, `N × L` (queries attending over latents).
    pub queries_from_latents: Vec<Tensor>,
}

/// Attention split into two maps through learnable latents `Z`.
#[derive(Debug, Clone)]
pub struct RoutedLatentAttention {
    pub latents: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub latent: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl RoutedLatentAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_model: usize,
        d_out: usize,
        latent: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        // variance 1/sqrt(d)
        let z_std = (d_model as f64).powf(-0.25);
        let latents = store.add(
            format!("{name}.latents"),
            Tensor::normal(&[latent, d_model], z_std, rng),
        );
        let mut proj = |suffix: &str, a: usize, b: usize| {
            store.add(
                format!("{name}.{suffix}"),
                Tensor::xavier_uniform(&[a, b], a, b, rng),
            )
        };
        let wq = proj("wq", d_in, d_model);
        let wk = proj("wk", d_in, d_model);
        let wv = proj("wv", d_in, d_model);
        let wo = proj("wo", d_model, d_out);
        Ok(Self {
            latents,
            wq,
            wk,
            wv,
            wo,
            latent,
            d_model,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, r: Var) -> Result<Var> {
        self.forward_with_maps(g, x, r).map(|(y, _)| y)
    }

    /// `x` is `N × d_in`; returns `N × d_out` and the attention maps.
    pub fn forward_with_maps(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        r: Var,
    ) -> Result<(Var, AttentionMaps)> {
        check_routing(g, r, self.latent)?;
        let (wq, wk, wv, wo) = (
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            g.param(self.wo),
        );
        let z = g.param(self.latents);
        let qp = g.matmul(x, wq)?;
        let kp = g.matmul(x, wk)?;
        let vp = g.matmul(x, wv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut maps = AttentionMaps {
            latent_from_keys: Vec::with_capacity(self.heads),
            queries_from_latents: Vec::with_capacity(self.heads),
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (zh, qh, kh, vh) = if self.heads == 1 {
                (z, qp, kp, vp)
            } else {
                (
                    g.slice_cols(z, h * dh, dh)?,
                    g.slice_cols(qp, h * dh, dh)?,
                    g.slice_cols(kp, h * dh, dh)?,
                    g.slice_cols(vp, h * dh, dh)?,
                )
            };
            let s1 = g.matmul_nt(zh, kh)?;
            let s1 = g.scale(s1, scale);
            let a1 = g.softmax(s1);
            let summaries = g.matmul(a1, vh)?;
            let gated = g.mul_vec(summaries, r, Axis::Cols)?;
            let s2 = g.matmul_nt(qh, zh)?;
            let s2 = g.scale(s2, scale);
            let a2 = g.softmax(s2);
            outs.push(g.matmul(a2, gated)?);
            maps.latent_from_keys.push(g.value(a1).clone());
            maps.queries_from_latents.push(g.value(a2).clone());
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((g.matmul(merged, wo)?, maps))
    }
}

/// Standard scaled dot-product self-attention over rows.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d_model: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let mut proj = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                Tensor::xavier_uniform(&[d_model, d_model], d_model, d_model, rng),
            )
        };
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            d_model,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            g.param(self.wo),
        );
        let qp = g.matmul(x, wq)?;
        let kp = g.matmul(x, wk)?;
        let vp = g.matmul(x, wv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.slice_cols(qp, h * dh, dh)?,
                    g.slice_cols(kp, h * dh, dh)?,
                    g.slice_cols(vp, h * dh, dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(merged, wo)
    }
}
