use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointRecord};
use super::config::TrainConfig;
use super::optim::{sgd_step, OptimizerState, SgdParams};
use crate::data::{augment_flips, batch_tensor, ClassScheme, NormalizationStats, PaddingSpec, SegmentationSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions};
use crate::model::{ForwardCtx, ModelConfig, SegmentationModel};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Validation mean IoU as a fraction in `[0, 1]`.
    pub val_miou: Option<f64>,
    pub lr: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: SegmentationModel<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Drives shuffling, flips and dropout, in that order within a step.
    pub rng: ChaCha8Rng,
    pub best_miou: Option<f64>,
    pub logs: Vec<EpochLog>,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_model(SegmentationModel::new(model)?, seed))
    }

    pub fn from_model(model: SegmentationModel<T>, seed: u64) -> Self {
        let optimizer = OptimizerState::new(model.params());
        TrainState {
            model,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_miou: None,
            logs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Writes `last.ckpt` after every epoch and `best.ckpt` on validation improvement.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete (the schedule still spans `epochs`).
    pub stop_at_epoch: Option<usize>,
    pub scheme: Option<ClassScheme>,
    /// Recorded in every checkpoint written.
    pub padding: Option<PaddingSpec>,
}

/// One forward/backward/update on a batch; returns the batch loss.
pub fn train_step<T: Element>(
    model: &mut SegmentationModel<T>,
    optimizer: &mut OptimizerState<T>,
    x: &Tensor<T>,
    targets: &[u8],
    sgd: SgdParams,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut ctx = ForwardCtx::train(rng);
    let logits = model.forward(&mut tape, &xv, &mut ctx)?;
    let loss = tape.cross_entropy(&logits, targets)?;
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let updates = ctx.into_updates();
    let grads = tape.backward(&loss)?;
    let store = model.params_mut();
    store.zero_grad();
    store.accumulate_grads(&tape, &grads)?;
    drop((tape, grads, logits, loss, xv));
    model.apply_updates(updates)?;
    sgd_step(model.params_mut(), optimizer, sgd)?;
    Ok(value)
}

fn normalized(samples: &[SegmentationSample], stats: &NormalizationStats) -> Result<Vec<SegmentationSample>> {
    samples.iter().map(|s| Ok(SegmentationSample { image: stats.normalize(&s.image)?, ..s.clone() })).collect()
}

/// Runs epochs `state.epoch .. cfg.epochs` (or up to `opts.stop_at_epoch`):
/// seeded shuffle, flips, normalize, SGD at `poly_lr(epoch)`, then validation.
/// Returns the logs of the epochs run by this call.
pub fn fit<T: Element>(
    state: &mut TrainState<T>,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    stats: &NormalizationStats,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let k = state.model.config().num_classes;
    for s in train.iter().chain(val) {
        s.validate(k)?;
    }
    let scheme = opts.scheme.clone().unwrap_or_default();
    let eval_opts = EvalOptions { scheme, ..Default::default() };
    let save = |state: &TrainState<T>, name: &str| -> Result<()> {
        match &opts.checkpoint_dir {
            Some(dir) => save_checkpoint(
                &CheckpointRecord::from_state(state, cfg, Some(stats)).with_padding(opts.padding.clone()),
                &dir.join(name),
            ),
            None => Ok(()),
        }
    };

    let train = normalized(train, stats)?;
    let end = opts.stop_at_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    if state.epoch >= end {
        save(state, "last.ckpt")?;
        return Ok(Vec::new());
    }
    let first_new = state.logs.len();
    for epoch in state.epoch..end {
        let sgd = cfg.sgd(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<SegmentationSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            for s in &mut batch {
                augment_flips(s, cfg.flip_h, cfg.flip_v, &mut state.rng)?;
            }
            let refs: Vec<&SegmentationSample> = batch.iter().collect();
            let (x, y) = batch_tensor::<T>(&refs)?;
            let loss = train_step(&mut state.model, &mut state.optimizer, &x, &y, sgd, &mut state.rng).map_err(
                |e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 },
                    e => e,
                },
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_loss, val_miou) = if val.is_empty() {
            (None, None)
        } else {
            let ev = evaluate_model(&state.model, val, stats, &eval_opts)?;
            (Some(ev.mean_loss), Some(ev.report.mean_iou / 100.0))
        };
        let log =
            EpochLog { epoch: epoch + 1, train_loss: loss_sum / train.len() as f64, val_loss, val_miou, lr: sgd.lr };
        log::info!(
            "epoch {}/{}: train loss {:.5}, val loss {}, val m-IoU {}, lr {:.3e}",
            log.epoch,
            cfg.epochs,
            log.train_loss,
            val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            val_miou.map_or("-".into(), |v| format!("{:.3}%", 100.0 * v)),
            log.lr
        );
        state.logs.push(log);
        state.epoch = epoch + 1;
        let improved = match (val_miou, state.best_miou) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_miou = val_miou;
            save(state, "best.ckpt")?;
        }
        save(state, "last.ckpt")?;
    }
    Ok(state.logs[first_new..].to_vec())
}
