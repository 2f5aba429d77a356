//! Conditional GAN: 3D U-Net generator, patch discriminator, adversarial +
//! L1 training, checkpoints and inference.

mod checkpoint;
mod config;
mod infer;
mod loss;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{DiscriminatorConfig, GeneratorConfig, GeneratorLossMode, TrainConfig, DEFAULT_SLOPE};
pub use infer::{infer_block, infer_volume, BlockGenerator};
pub use loss::{discriminator_loss, generator_loss};
pub use model::{Discriminator, Generator};
pub use train::{
    batch_tensor, epoch_checkpoint_name, format_loss_log, noise_tensor, EpochLoss, GeneratorGrads, StepLoss, Trainer, LATEST_CHECKPOINT,
    LOSS_LOG_NAME,
};
