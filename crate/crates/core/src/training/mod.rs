//! Desk-scale training: synthetic pairs, Adam, early stopping on
//! validation L1, checkpoints of the best epoch.

pub mod ablation;
pub mod adam;
pub mod data;
pub mod degrade;
pub mod loss;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, TrainState};
pub use data::{synthetic_dataset, Dataset, Pair};
pub use degrade::{degrade, DegradationParams};

use crate::checkpoint::save_checkpoint;
use crate::error::{FusionError, Result};
use crate::metrics::{self, Psnr};
use crate::model::FusionModel;
use crate::tape::Tape;
use crate::tensor::ParamStore;

/// Name of the early-stopping metric, written into every history file.
pub const EARLY_STOP_METRIC: &str = "val_l1";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Where the best epoch is saved, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 4,
            adam: AdamConfig::default(),
            patience: 10,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FusionError::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(FusionError::invalid("batch size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(FusionError::invalid("patience must be >= 1"));
        }
        self.adam.validate()
    }
}

/// Turns numerical failures into a training abort, leaving other errors as
/// they are.
fn abort_on_nan(step: u64, e: FusionError) -> FusionError {
    match e {
        FusionError::NonFinite { .. } | FusionError::NanGradient(_) => {
            FusionError::TrainingAborted(format!("step {step}: {e}"))
        }
        other => other,
    }
}

/// Stateful optimizer loop over mini-batches.
pub struct Trainer<'a> {
    pub model: &'a mut FusionModel,
    pub state: TrainState,
    pub adam: AdamConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut FusionModel, adam: AdamConfig, seed: u64) -> Self {
        let state = TrainState::new(model.params(), seed);
        Self { model, state, adam }
    }

    /// One optimizer step on the averaged gradient of `batch`; returns the
    /// mean loss before the update.
    pub fn step(&mut self, batch: &[&Pair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(FusionError::invalid("empty batch"));
        }
        let step = self.state.step + 1;
        self.model.params_mut().zero_grad();
        let mut total = 0.0;
        for pair in batch {
            let mut tape = Tape::new();
            let p = tape.bind(self.model.params());
            let x = tape.constant(pair.degraded.clone());
            let t = tape.constant(pair.clean.clone());
            let loss = self
                .model
                .forward_on(&mut tape, &p, x)
                .and_then(|y| loss::loss_var(&mut tape, y, t))
                .map_err(|e| abort_on_nan(step, e))?;
            total += tape.value(loss).data()[0];
            tape.backward(loss, self.model.params_mut()).map_err(|e| abort_on_nan(step, e))?;
        }
        let mean = total / batch.len() as f64;
        if !mean.is_finite() {
            return Err(FusionError::TrainingAborted(format!("step {step}: loss is {mean}")));
        }
        scale_grads(self.model.params_mut(), 1.0 / batch.len() as f64);
        adam_step(&mut self.state, self.model.params_mut(), &self.adam).map_err(|e| abort_on_nan(step, e))?;
        Ok(mean)
    }
}

fn scale_grads(params: &mut ParamStore, s: f64) {
    for p in params.iter_mut() {
        if let Some(g) = &mut p.tensor.grad {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Quality of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub l1: f64,
    /// PSNR of the pooled MSE over all images.
    pub psnr: Psnr,
    pub ssim: f64,
}

pub fn evaluate(model: &FusionModel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FusionError::invalid("cannot evaluate on an empty dataset"));
    }
    let (mut l, mut l1, mut mse, mut ssim) = (0.0, 0.0, 0.0, 0.0);
    for pair in &data.pairs {
        let y = model.forward(&pair.degraded)?;
        l += loss::loss(&y, &pair.clean)?;
        l1 += loss::l1(&y, &pair.clean)?;
        mse += metrics::mse(&y, &pair.clean)?;
        ssim += metrics::ssim(&y, &pair.clean)?;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: l / n,
        l1: l1 / n,
        psnr: Psnr::from_mse(mse / n, 1.0),
        ssim: ssim / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_l1: f64,
    pub val_psnr: Psnr,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// One line per epoch: `epoch train_loss val_l1 val_psnr`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# epoch train_loss val_l1 val_psnr (early stopping on {EARLY_STOP_METRIC})\n");
        for r in &self.epochs {
            writeln!(out, "{} {:.10} {:.10} {}", r.epoch, r.train_loss, r.val_l1, r.val_psnr).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_l1: f64,
    pub best_val_psnr: Psnr,
    pub stopped_early: bool,
    pub state: TrainState,
}

/// Trains `model` in place and leaves it holding the best-epoch weights.
///
/// `val` may be empty, in which case the training pairs double as the
/// validation set.
pub fn train(model: &mut FusionModel, train_set: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(FusionError::invalid("training set is empty"));
    }
    let val = if val.is_empty() { train_set } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(usize, Psnr, ParamStore)> = None;
    let mut stopped_early = false;

    let mut trainer = Trainer::new(model, cfg.adam, cfg.seed);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train_set.pairs[i]).collect();
            sum += trainer.step(&batch)?;
            batches += 1;
        }
        let eval = evaluate(trainer.model, val).map_err(|e| abort_on_nan(trainer.state.step, e))?;
        let record = EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            val_l1: eval.l1,
            val_psnr: eval.psnr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_l1 {:.6} val_psnr {}",
            record.train_loss,
            record.val_l1,
            record.val_psnr
        );
        history.epochs.push(record);

        if eval.l1 < trainer.state.best_val {
            trainer.state.best_val = eval.l1;
            trainer.state.patience = 0;
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(path, trainer.model, Some(&trainer.state))?;
            }
            best = Some((epoch, eval.psnr, trainer.model.params().clone()));
        } else {
            trainer.state.patience += 1;
            if trainer.state.patience as usize >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let state = trainer.state;
    let (best_epoch, best_val_psnr, params) = best.expect("the first epoch always improves on infinity");
    for (dst, src) in model.params_mut().iter_mut().zip(params.iter()) {
        dst.tensor.data_mut().copy_from_slice(src.tensor.data());
    }
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_l1: state.best_val,
        best_val_psnr,
        stopped_early,
        state,
    })
}
