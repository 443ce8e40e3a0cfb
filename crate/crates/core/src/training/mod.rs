//! Losses, schedule, optimizer, checkpoints and the training loop.

mod checkpoint;
mod losses;
mod network;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    config_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, OptimizerState,
    RngState,
};
pub use losses::{cross_entropy, seg_loss, total_loss, total_loss_value};
pub use network::{LossTerms, Network};
pub use optim::{clip_grad_norm, global_grad_norm, AdamW};
pub use schedule::{lr_schedule, ModelKind, TrainConfig};
pub use trainer::{read_metrics, step_seed, train, train_step, RunOutput, StepReport};
