//! Writes a small moving-shapes dataset as PPM frame directories plus a manifest.
//!
//! `cargo run --example generate_dataset -- [out_dir] [count] [preset]`

use std::path::PathBuf;

use convtx::synthdata::{generate_dataset, write_frames, write_manifest, DataPreset, ManifestEntry};

fn main() -> convtx::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("convtx_dataset"));
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let preset: DataPreset = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(DataPreset::Extrapolate);

    let seqs = generate_dataset(preset, 16, count, 0)?;
    let mut entries = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let dir = format!("seq_{i:04}");
        write_frames(seq, &out.join(&dir))?;
        let split = if i * 5 < seqs.len() * 4 { "train" } else { "val" };
        entries.push(ManifestEntry { dir, split: split.into() });
        println!("seq_{i:04}: {} frames at positions {:?}", seq.len(), seq.positions);
    }
    write_manifest(&out.join("manifest.txt"), &entries)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}
