//! Runs an untrained model on random frames and writes its decoder
//! cross-attention maps as grayscale PPM images.
//!
//! `cargo run --example attention_maps -- [out_dir]`

use std::path::PathBuf;

use convtx::model::{ConvTransformer, ModelConfig, SynthesisRequest};
use convtx::synthdata::{generate_dataset, write_ppm, DataPreset, Rgb8Image};

fn main() -> convtx::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("convtx_attention"));
    std::fs::create_dir_all(&out).expect("creating the output directory");

    let seq = &generate_dataset(DataPreset::Extrapolate, 16, 1, 3)?[0];
    let (frames, positions) = seq.select(&[0, 1, 2, 3]);
    let request = SynthesisRequest::extrapolate(frames.cast::<f32>(), positions, 2)?;
    let model = ConvTransformer::new(ModelConfig::desk())?;
    let params = model.init_params::<f32>(0);
    let (_, dump) = model.predict_with_attention(&params, &request)?;

    for (kind, layers) in [("encoder", &dump.encoder), ("decoder_self", &dump.decoder_self), ("decoder_cross", &dump.decoder_cross)] {
        for (l, heads) in layers.iter().enumerate() {
            for (h, maps) in heads.iter().enumerate() {
                println!(
                    "{kind} layer {l} head {h}: {} queries x {} keys, worst row-sum error {:.1e}",
                    maps.queries(),
                    maps.keys(),
                    maps.max_normalization_error()
                );
            }
        }
    }
    let cross = &dump.decoder_cross[0][0];
    for q in 0..cross.queries() {
        for k in 0..cross.keys() {
            let m = cross.map(q, k);
            let s = m.shape();
            let values: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
            write_ppm(&out.join(format!("attn_q{q}_k{k}.ppm")), &Rgb8Image::from_gray(s.w, s.h, &values))?;
        }
    }
    println!("wrote cross-attention maps to {}", out.display());
    Ok(())
}
