//! Train several model variants under one seed and budget and compare them
//! on held-out data.

use crate::error::Result;
use crate::model::{ConvTransformer, ModelConfig, PosencMode};
use crate::tensor::Scalar;

use super::{evaluate, Example, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, model: ModelConfig) -> Self {
        Variant {
            name: name.into(),
            model,
        }
    }
}

/// The base model with and without positional maps and residual paths.
pub fn posenc_residual_variants(base: &ModelConfig) -> Vec<Variant> {
    let with = |posenc: bool, residual: bool| ModelConfig {
        posenc: if posenc { base.posenc } else { PosencMode::Off },
        residual,
        ..base.clone()
    };
    vec![
        Variant::new("full", with(true, true)),
        Variant::new("wo-posenc", with(false, true)),
        Variant::new("wo-residual", with(true, false)),
        Variant::new("wo-posenc-residual", with(false, false)),
    ]
}

pub fn head_variants(base: &ModelConfig, heads: &[usize]) -> Vec<Variant> {
    heads
        .iter()
        .map(|&h| Variant::new(format!("heads-{h}"), ModelConfig { heads: h, ..base.clone() }))
        .collect()
}

pub fn layer_variants(base: &ModelConfig, layers: &[usize]) -> Vec<Variant> {
    layers
        .iter()
        .map(|&n| Variant::new(format!("layers-{n}"), ModelConfig { layers: n, ..base.clone() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub val_mse: f64,
    pub val_psnr: f64,
    pub val_ssim: Option<f64>,
}

/// Trains every variant from `config.seed` for `config.steps` steps.
pub fn run_ablation<T: Scalar>(
    variants: &[Variant],
    config: &TrainConfig,
    train: &[Example<T>],
    val: &[Example<T>],
) -> Result<Vec<AblationResult>> {
    variants
        .iter()
        .map(|v| {
            let model = ConvTransformer::new(v.model.clone())?;
            let param_count = model.param_count();
            let mut trainer = Trainer::new(model, config.clone());
            let report = trainer.run(train, &[], config.steps, None)?;
            let s = evaluate(trainer.model(), trainer.params(), val)?;
            Ok(AblationResult {
                name: v.name.clone(),
                param_count,
                final_train_loss: report.losses().last().copied().unwrap_or(f64::NAN),
                val_mse: s.mse,
                val_psnr: s.psnr,
                val_ssim: s.ssim,
            })
        })
        .collect()
}

/// Plain-text table, one variant per line.
pub fn format_results(results: &[AblationResult]) -> String {
    let mut s = format!(
        "{:<22} {:>9} {:>12} {:>12} {:>9} {:>7}\n",
        "variant", "params", "train_loss", "val_mse", "psnr", "ssim"
    );
    for r in results {
        let ssim = r.val_ssim.map_or("-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<22} {:>9} {:>12.4e} {:>12.4e} {:>9.3} {:>7}\n",
            r.name, r.param_count, r.final_train_loss, r.val_mse, r.val_psnr, ssim
        ));
    }
    s
}
