//! PSNR and SSIM of a synthetic frame against degraded copies.
//!
//! `cargo run --example metrics`

use convtx::metrics::{psnr, quality, residual_map};
use convtx::synthdata::{generate_dataset, DataPreset};
use convtx::tensor::Tensor;

fn main() -> convtx::Result<()> {
    let seq = &generate_dataset(DataPreset::Cluttered, 32, 1, 5)?[0];
    let frame = seq.frames.item_at(0);
    let s = frame.shape();

    let noisy = Tensor::from_fn(s, |n, c, y, x| {
        let wobble = 0.05 * (((x * 7 + y * 13 + c * 3) % 11) as f64 / 10.0 - 0.5);
        (frame.get(n, c, y, x) + wobble).clamp(0.0, 1.0)
    });
    let shifted = Tensor::from_fn(s, |n, c, y, x| frame.get(n, c, y, x.saturating_sub(1)));
    let next = seq.frames.item_at(1);

    println!("identical: {:.2} dB", psnr(&frame, &frame)?);
    for (name, other) in [("noisy", &noisy), ("shifted one pixel", &shifted), ("next frame", &next)] {
        let q = quality(other, &frame)?;
        let r = residual_map(other, &frame, 0)?;
        println!("{name:<18} PSNR {:6.2} dB  SSIM {:.4}  max residual {:.1}/255", q.psnr_db, q.ssim, r.max);
    }
    Ok(())
}
