//! Optimiser, schedules, the supervised and adaptation loops, and checkpoints.

mod checkpoint;
mod loops;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use loops::{train_supervised, ukt_adapt, AdaptMode, LogRecord, Phase, TrainConfig, TrainLog};
pub use optim::{adam_step, clip_grad_norm, cosine_lr, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
