//! Fits the desk model to a single sequence and reports the reconstruction.
//!
//! `cargo run --release --example overfit -- [steps]`

use convtx::model::{ConvTransformer, ModelConfig};
use convtx::synthdata::{generate_dataset, DataPreset};
use convtx::training::{evaluate, Example, Schedule, Task, TrainConfig, Trainer};

fn main() -> convtx::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let seqs = generate_dataset(DataPreset::Extrapolate, 16, 1, 0)?;
    let set = Example::<f32>::from_sequences(&seqs, &Task::default())?;

    let config = TrainConfig {
        steps,
        schedule: Schedule {
            base_lr: 3e-4,
            ..Schedule::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ConvTransformer::new(ModelConfig::desk())?, config);
    println!("{} parameters", trainer.model().param_count());
    let chunk = (steps / 10).max(1);
    let mut done = 0;
    while done < steps {
        done = (done + chunk).min(steps);
        let report = trainer.run(&set, &[], done, None)?;
        println!("step {done:>5}  loss {:.3e}", report.losses().last().copied().unwrap_or(f64::NAN));
    }
    let s = evaluate(trainer.model(), trainer.params(), &set)?;
    println!("training MSE {:.3e}, PSNR {:.2} dB", s.mse, s.psnr);
    Ok(())
}
