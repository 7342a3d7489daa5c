//! Compares analytic gradients of the full model with central differences.
//!
//! `cargo run --example gradcheck -- [preset] [seed]`

use convtx::model::Preset;
use convtx::training::{gradcheck, GradcheckOptions};

fn main() -> convtx::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset: Preset = args.first().map(|s| s.parse()).transpose()?.unwrap_or(Preset::Micro);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);

    let report = gradcheck(&preset.config(), seed, &GradcheckOptions::default())?;
    for (name, err) in &report.per_tensor {
        println!("{name:<40} {err:.2e}");
    }
    let w = &report.worst;
    println!(
        "{} coordinates in {} tensors; worst {}[{}]: analytic {:.6e} numeric {:.6e} (relative {:.2e})",
        report.coords, report.tensors, w.param, w.index, w.analytic, w.numeric, w.rel_error
    );
    Ok(())
}
