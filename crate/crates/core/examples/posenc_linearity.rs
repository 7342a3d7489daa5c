//! Shifting a positional map by `m` tokens is a fixed blockwise rotation.
//!
//! `cargo run --example posenc_linearity`

use convtx::posenc::{pos_map, pos_vector, shift_matrix, wavelength};

fn main() -> convtx::Result<()> {
    let d_model = 128;
    println!("shortest wavelength {:.3}, longest {:.1}", wavelength(0, d_model), wavelength(d_model / 2 - 1, d_model));
    println!("first channels of token 3: {:?}", &pos_vector(3.0, d_model)?[..4]);

    for (p, m) in [(0.0, 1.0), (5.0, -2.5), (-40.0, 97.0), (12.25, 0.5)] {
        let rotated = shift_matrix(m, d_model)?.apply_map(&pos_map::<f64>(p, 4, 4, d_model)?.map);
        let direct = pos_map::<f64>(p + m, 4, 4, d_model)?.map;
        println!("p {p:>7} m {m:>6}: |M(m) PosMap(p) - PosMap(p+m)| = {:.2e}", rotated.max_abs_diff(&direct));
    }

    let a = shift_matrix(2.0, d_model)?;
    let b = shift_matrix(3.0, d_model)?;
    let composed = a.compose(&b).apply(&pos_vector(1.0, d_model)?);
    let direct = pos_vector(6.0, d_model)?;
    let err = composed.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("M(2) M(3) PosMap(1) vs PosMap(6): {err:.2e}");
    Ok(())
}
