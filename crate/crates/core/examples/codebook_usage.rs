//! Trains one VQ-routed model on the synthetic benchmark and reports how many
//! codebook entries each routing head actually uses.
//!
//! `cargo run --release -p air-core --example codebook_usage -- [model] [seed]`

use std::collections::BTreeMap;

use air_core::backtest::{build_biweekly_schedule, prepare_point, run_training, Dataset, TrainConfig};
use air_core::data::{synth_generate, IsoWeek, SyntheticSpec, WindowSample};
use air_core::model::{ForecastModel, ModelConfig, ModelId};
use air_core::Graph;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn usage(model: &ForecastModel, samples: &[WindowSample]) -> air_core::Result<Vec<BTreeMap<usize, usize>>> {
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let mut g = Graph::with_params(&model.store);
    let out = model.forward_batch(&mut g, &refs)?;
    let mut heads = Vec::new();
    for r in out.key_driver.iter().chain(out.outlook.iter()) {
        for idx in &r.indices {
            let mut counts = BTreeMap::new();
            for &i in idx {
                *counts.entry(i).or_insert(0) += 1;
            }
            heads.push(counts);
        }
    }
    Ok(heads)
}

fn main() -> air_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let id: ModelId = args.first().map_or("air-tsmixer", |s| s.as_str()).parse()?;
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let spec = SyntheticSpec::default();
    let data = synth_generate(&spec)?;
    let dataset = Dataset::from_synthetic(&data, &data.target_indices(&spec))?;
    let schedule = build_biweekly_schedule(IsoWeek::of(dataset.dates[0]), 6, &dataset.dates, spec.horizon)?
        .last_points(1);
    let base = ModelConfig {
        latent: env("LATENT", 16),
        codebook_size: env("CODEBOOK", 16),
        generator_hidden: env("HIDDEN", 64),
        ..ModelConfig::default()
    };
    let pd = prepare_point(&dataset, 0, &schedule.points[0], base.lookback, base.horizon)?;
    let cfg = id.configure(&dataset.adapt(&base));
    let mut model = ForecastModel::new(cfg, seed)?;
    println!("init   {:?}", usage(&model, &pd.train)?);
    let train = TrainConfig {
        learning_rate: env("LR", 1e-3),
        vq_weight: env("VQ_WEIGHT", 0.01),
        ..TrainConfig::default()
    };
    let trace = run_training(&mut model, &pd.train, &train, seed)?;
    println!("train  {:?}", usage(&model, &pd.train)?);
    println!("best epoch {} loss {:.4}", trace.best_epoch, trace.validation_losses[trace.best_epoch - 1]);
    Ok(())
}
