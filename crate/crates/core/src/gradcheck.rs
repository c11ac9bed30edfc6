//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, QuantizeMode, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Refuse points where some ReLU input lies closer than this to zero:
    /// a central difference straddling the kink measures neither side.
    pub kink_margin: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            kink_margin: 1e-3,
        }
    }
}

/// Maximum over checked coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// `f` must build a deterministic scalar on the supplied graph. Quantization
/// picks from the unperturbed evaluation are replayed for every perturbed
/// evaluation, so the numeric side differentiates the straight-through
/// linearization rather than the piecewise-constant lookup.
///
/// Returns [`Error::NearKink`] when the unperturbed evaluation has a ReLU
/// input within `opts.kink_margin` of zero.
pub fn finite_difference_gradcheck<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: &GradcheckOptions,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let (analytic, picks) = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        if g.relu_margin() < opts.kink_margin {
            return Err(Error::NearKink {
                margin: g.relu_margin(),
            });
        }
        let grads = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| {
                grads
                    .param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect();
        (analytic, g.quant_picks().to_vec())
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_mode(store, QuantizeMode::Replay(picks.clone()));
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst: f64 = 0.0;
    for (pi, &id) in params.iter().enumerate() {
        let n = store.get(id).len();
        let stride = opts
            .max_coords_per_param
            .map_or(1, |cap| n.div_ceil(cap.max(1)));
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = (analytic[pi][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
