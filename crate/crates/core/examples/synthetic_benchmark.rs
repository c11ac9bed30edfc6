//! Trains and scores model variants on the synthetic regime benchmark.
//!
//! `cargo run --release -p air-core --example synthetic_benchmark -- \
//!     [models] [seeds] [points] [leak]`, e.g.
//! `vanilla-tsmixer,air-tsmixer 0,1,2 6 oracle`.

use std::time::Instant;

use air_core::backtest::{
    aggregate, build_biweekly_schedule, run_experiment, Dataset, ExperimentSpec, LeafSet,
    TrainConfig,
};
use air_core::data::{synth_generate, IsoWeek, LeakMode, SyntheticSpec};
use air_core::model::{ModelConfig, ModelId};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> air_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let models: Vec<ModelId> = args
        .first()
        .map_or("vanilla-tsmixer,air-tsmixer", |s| s.as_str())
        .split(',')
        .map(str::parse)
        .collect::<air_core::Result<_>>()?;
    let seeds: Vec<u64> = args
        .get(1)
        .map_or("0,1,2", |s| s.as_str())
        .split(',')
        .map(|s| s.parse().expect("seed"))
        .collect();
    let points: usize = args.get(2).map_or(6, |s| s.parse().expect("points"));
    let leak = match args.get(3).map(String::as_str) {
        Some("none") => LeakMode::None,
        _ => LeakMode::Oracle,
    };
    let spec = SyntheticSpec {
        outlook_leak: leak,
        key_driver_signal: leak == LeakMode::Oracle,
        seed: env("DATA_SEED", 0),
        ..SyntheticSpec::default()
    };
    let data = synth_generate(&spec)?;
    let dataset = Dataset::from_synthetic(&data, &data.target_indices(&spec))?;
    let start = IsoWeek::of(dataset.dates[0]);
    let schedule = build_biweekly_schedule(start, 6, &dataset.dates, spec.horizon)?.last_points(points);
    let base = ModelConfig {
        latent: env("LATENT", 16),
        codebook_size: env("CODEBOOK", 16),
        generator_hidden: env("HIDDEN", 64),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: env("LR", 1e-3),
        vq_weight: env("VQ_WEIGHT", 0.01),
        max_epochs: env("EPOCHS", 40),
        batch_size: env("BATCH", 32),
        seeds,
        ..TrainConfig::default()
    };
    let exp = ExperimentSpec {
        models,
        base,
        train,
        workers: env("WORKERS", 0),
        keep_forecasts: false,
    };
    let t0 = Instant::now();
    let out = run_experiment(&dataset, &schedule, &exp)?;
    let secs = t0.elapsed().as_secs_f64();
    let agg = aggregate(
        &[LeafSet {
            config_hash: String::new(),
            leaves: out.leaves.clone(),
        }],
        Some(&exp.models[0].to_string()),
    )?;
    for m in &agg.models {
        let per_seed: Vec<String> = agg
            .seeds
            .iter()
            .filter(|s| s.model == m.model)
            .map(|s| format!("{:.4}", s.mean_mse))
            .collect();
        println!("{:<24} mean {:.4}  seeds [{}]", m.model, m.mean_mse, per_seed.join(", "));
    }
    for r in &agg.relative {
        println!("{:<24} {:+.1}% vs {}", r.model, r.percent, r.baseline);
    }
    let epochs: Vec<usize> = out.runs.iter().map(|r| r.epochs).collect();
    println!("runs {} epochs {:?} failures {} in {secs:.1}s", out.runs.len(), epochs, out.failures.len());
    Ok(())
}
