//! Per-channel z-scoring fit on a training span.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-channel mean and population standard deviation on the rows
/// strictly before `cutoff`.
pub fn zscore_fit(dates: &[NaiveDate], values: &[Vec<f64>], cutoff: NaiveDate) -> Result<ZScore> {
    let n = dates.partition_point(|&d| d < cutoff);
    if n == 0 {
        return Err(Error::Data(format!("no training rows before {cutoff}")));
    }
    let (mean, std) = values
        .iter()
        .map(|row| {
            let span = &row[..n];
            let mu = span.iter().sum::<f64>() / n as f64;
            let var = span.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
            (mu, var.sqrt().max(STD_FLOOR))
        })
        .unzip();
    Ok(ZScore { mean, std })
}

impl ZScore {
    pub fn apply(&self, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(c, row)| row.iter().map(|x| self.apply_one(c, *x)).collect())
            .collect()
    }

    pub fn invert(&self, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(c, row)| row.iter().map(|x| self.invert_one(c, *x)).collect())
            .collect()
    }

    pub fn apply_one(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn invert_one(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}
