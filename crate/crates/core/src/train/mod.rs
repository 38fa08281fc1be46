//! Loss, SGD with polynomial decay, the epoch loop and checkpoints.

mod checkpoint;
mod config;
mod fit;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointRecord,
    RngState, MAGIC, VERSION,
};
pub use config::TrainConfig;
pub use fit::{fit, train_step, EpochLog, FitOptions, TrainState};
pub use optim::{poly_lr, sgd_step, DecayPolicy, OptimizerState, SgdParams};

use crate::error::Result;
use crate::tensor::{Element, Tape, Var};

/// Mean per-pixel cross-entropy of `logits` against class-index `targets`.
pub fn cross_entropy_loss<T: Element>(tape: &mut Tape<T>, logits: &Var<T>, targets: &[u8]) -> Result<Var<T>> {
    tape.cross_entropy(logits, targets)
}
