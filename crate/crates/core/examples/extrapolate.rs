//! Trains next-frame extrapolation and compares it with repeating the last frame.
//!
//! `cargo run --release --example extrapolate -- [steps] [train_count]`

use convtx::metrics::psnr;
use convtx::model::{ConvTransformer, ModelConfig};
use convtx::synthdata::{generate_dataset, DataPreset};
use convtx::training::{evaluate, Example, Schedule, Task, TrainConfig, Trainer};

fn main() -> convtx::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(600);
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);

    let task = Task::default();
    let train = Example::<f32>::from_sequences(&generate_dataset(DataPreset::Extrapolate, 16, count, 0)?, &task)?;
    let val = Example::<f32>::from_sequences(&generate_dataset(DataPreset::Extrapolate, 16, 8, 1000)?, &task)?;

    let mut baseline = 0.0;
    for ex in &val {
        let f = &ex.request.frames;
        baseline += psnr(&f.item_at(f.shape().n - 1), &ex.target)?;
    }
    baseline /= val.len() as f64;

    let config = TrainConfig {
        steps,
        eval_every: (steps / 4).max(1),
        schedule: Schedule {
            base_lr: 3e-4,
            ..Schedule::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ConvTransformer::new(ModelConfig::desk())?, config);
    let report = trainer.run(&train, &val, steps, None)?;
    for r in report.records.iter().filter(|r| r.psnr.is_some()) {
        println!("step {:>5}  loss {:.3e}  val PSNR {:.2} dB", r.step, r.loss, r.psnr.unwrap_or(f64::NAN));
    }
    let s = evaluate(trainer.model(), trainer.params(), &val)?;
    println!("model {:.2} dB, repeat-last-frame {baseline:.2} dB", s.psnr);
    Ok(())
}
