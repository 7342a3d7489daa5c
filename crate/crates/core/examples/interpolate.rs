//! Trains mid-gap interpolation and compares it with averaging the two
//! frames around the gap.
//!
//! `cargo run --release --example interpolate -- [steps] [train_count]`

use convtx::metrics::psnr;
use convtx::model::{ConvTransformer, ModelConfig, SynthesisRequest};
use convtx::synthdata::{generate_dataset, DataPreset};
use convtx::tensor::Tensor;
use convtx::training::{Example, Schedule, Task, TrainConfig, Trainer};

fn main() -> convtx::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(600);
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);

    let task = Task::Interpolate { inputs: 6 };
    let train = Example::<f32>::from_sequences(&generate_dataset(DataPreset::Interpolate, 16, count, 0)?, &task)?;
    let val_seqs = generate_dataset(DataPreset::Interpolate, 16, 8, 1000)?;
    let val = Example::<f32>::from_sequences(&val_seqs, &task)?;

    let config = TrainConfig {
        steps,
        task,
        schedule: Schedule {
            base_lr: 3e-4,
            ..Schedule::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ConvTransformer::new(ModelConfig::desk())?, config);
    trainer.run(&train, &[], steps, None)?;

    let (mut model_db, mut base_db) = (0.0, 0.0);
    for ex in &val {
        let pred = trainer.model().predict(trainer.params(), &ex.request)?;
        let (a, b) = ex.request.gap();
        let (a, b) = (ex.request.frames.item_at(a), ex.request.frames.item_at(b));
        let average = Tensor::from_fn(a.shape(), |n, c, y, x| 0.5 * (a.get(n, c, y, x) + b.get(n, c, y, x)));
        model_db += psnr(&pred.item_at(1), &ex.target.item_at(1))?;
        base_db += psnr(&average, &ex.target.item_at(1))?;
    }
    let n = val.len() as f64;
    println!("mid-frame: model {:.2} dB, neighbour average {:.2} dB", model_db / n, base_db / n);

    // arbitrary fractional times inside the same gap
    let (frames, positions) = val_seqs[0].select(&[0, 2, 4, 8, 10, 12]);
    let request = SynthesisRequest::interpolate(frames.cast::<f32>(), positions, &[0.1, 0.5, 0.9])?;
    println!("query tokens for times 0.1, 0.5, 0.9: {:?}", request.query_positions);
    let frames = trainer.model().predict(trainer.params(), &request)?;
    println!("synthesized {} frames", frames.shape().n);
    Ok(())
}
