//! Encoder-decoder segmentation network with optional attention gates,
//! Tversky loss, Adam and a deterministic trainer.

pub mod checkpoint;
pub mod loss;
pub mod net;
pub mod ops;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use loss::{tversky_grad, tversky_loss, TverskyParams};
pub use net::{Attention, ProbabilityMask, UNet, UNetConfig, UNetParams};
pub use train::{train, Adam, EpochLoss, TrainConfig, TrainOutcome};
