//! Trains the model with and without positional maps and residual paths on
//! interpolation scenes plus their time reversals and prints a comparison table.
//!
//! `cargo run --release --example ablation -- [steps]`

use convtx::model::ModelConfig;
use convtx::synthdata::{generate_dataset, DataPreset, FrameSequence};
use convtx::training::ablation::{format_results, posenc_residual_variants, run_ablation};
use convtx::training::{Example, Schedule, Task, TrainConfig};

fn main() -> convtx::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let task = Task::Interpolate { inputs: 6 };
    let with_reversals = |count: usize, seed: u64| -> convtx::Result<Vec<FrameSequence>> {
        let seqs = generate_dataset(DataPreset::Interpolate, 16, count, seed)?;
        Ok(seqs.iter().flat_map(|s| [s.clone(), s.time_reversed()]).collect())
    };
    let train = Example::<f32>::from_sequences(&with_reversals(16, 0)?, &task)?;
    let val = Example::<f32>::from_sequences(&with_reversals(4, 1000)?, &task)?;

    let config = TrainConfig {
        steps,
        task,
        schedule: Schedule {
            base_lr: 3e-4,
            ..Schedule::default()
        },
        ..TrainConfig::default()
    };
    let results = run_ablation(&posenc_residual_variants(&ModelConfig::desk()), &config, &train, &val)?;
    print!("{}", format_results(&results));
    Ok(())
}
