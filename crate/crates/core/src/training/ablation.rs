//! Trains every ablation preset under one seed and dataset.

use std::fmt::Write as _;

use super::{evaluate, train, Dataset, TrainConfig};
use crate::metrics::Psnr;
use crate::model::{AblationConfig, FusionModel, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationMetrics {
    /// Mean training loss of the last epoch.
    pub train_loss: f64,
    pub val_psnr: Psnr,
    pub val_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub preset: &'static str,
    pub label: &'static str,
    pub params: usize,
    /// Failure message when this preset could not be built or trained.
    pub outcome: Result<AblationMetrics, String>,
}

/// Runs all presets in table order. A failing preset is recorded and the
/// rest still run.
pub fn run_ablation(
    width: usize,
    model_seed: u64,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Vec<AblationRow> {
    AblationConfig::PRESETS
        .iter()
        .map(|&preset| {
            let label = AblationConfig::label(preset).unwrap_or(preset);
            log::info!("ablation: {preset} (model seed {model_seed}, train seed {})", cfg.seed);
            let built = AblationConfig::preset(preset)
                .and_then(|ab| ModelConfig::new(width, ab))
                .and_then(|mc| FusionModel::new(mc, model_seed));
            let mut model = match built {
                Ok(m) => m,
                Err(e) => {
                    return AblationRow {
                        preset,
                        label,
                        params: 0,
                        outcome: Err(e.to_string()),
                    }
                }
            };
            let params = model.num_parameters();
            let outcome = train(&mut model, train_set, val, cfg)
                .and_then(|report| {
                    let eval_set = if val.is_empty() { train_set } else { val };
                    let eval = evaluate(&model, eval_set)?;
                    let train_loss = report.history.epochs.last().map_or(f64::NAN, |r| r.train_loss);
                    Ok(AblationMetrics {
                        train_loss,
                        val_psnr: eval.psnr,
                        val_ssim: eval.ssim,
                    })
                })
                .map_err(|e| e.to_string());
            AblationRow {
                preset,
                label,
                params,
                outcome,
            }
        })
        .collect()
}

/// Fixed-width comparison table, one row per preset.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<28} {:>9} {:>12} {:>10} {:>8}\n",
        "configuration", "params", "train_loss", "val_psnr", "val_ssim"
    );
    for r in rows {
        match &r.outcome {
            Ok(m) => writeln!(
                out,
                "{:<28} {:>9} {:>12.6} {:>10} {:>8.4}",
                r.label,
                r.params,
                m.train_loss,
                m.val_psnr.to_string(),
                m.val_ssim
            ),
            Err(e) => writeln!(out, "{:<28} {:>9} FAILED: {e}", r.label, r.params),
        }
        .unwrap();
    }
    out
}
