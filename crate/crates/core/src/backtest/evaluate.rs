//! Out-of-sample scoring at forecast origins.

use chrono::NaiveDate;

use crate::data::WindowSample;
use crate::error::Result;
use crate::model::ForecastModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OriginScore {
    pub origin: NaiveDate,
    /// MSE over the horizon, one entry per target.
    pub target_mse: Vec<f64>,
    /// MSE over targets × horizon.
    pub mse: f64,
    /// `targets × H`, normalized.
    pub prediction: Tensor,
}

/// Mean squared error of one `targets × H` forecast against the truth, per
/// target row and overall.
pub fn forecast_mse(prediction: &Tensor, truth: &Tensor) -> (Vec<f64>, f64) {
    let h = truth.cols();
    let per: Vec<f64> = (0..truth.rows())
        .map(|r| {
            prediction
                .row_slice(r)
                .iter()
                .zip(truth.row_slice(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / h as f64
        })
        .collect();
    let all = per.iter().sum::<f64>() / per.len() as f64;
    (per, all)
}

/// Scores every sample with a trained model, in sample order.
pub fn evaluate_point(
    model: &ForecastModel,
    samples: &[WindowSample],
    batch_size: usize,
) -> Result<Vec<OriginScore>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        for (s, p) in chunk.iter().zip(model.predict_batch(&refs)?) {
            let (target_mse, mse) = forecast_mse(&p, &s.y);
            out.push(OriginScore {
                origin: s.origin,
                target_mse,
                mse,
                prediction: p,
            });
        }
    }
    Ok(out)
}
