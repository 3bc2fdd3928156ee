//! Loss, optimizers and the training loop.

mod loss;
mod optim;
mod train;

pub use loss::{compute_loss, loss_mask, LossKind};
pub use optim::{clip_gradients, grad_norm, sgd_step, Adam, Optimizer, OptimizerKind};
pub use train::{train, train_with_hook, EpochHook, EpochRecord, TrainConfig, TrainLog, TrainOutcome};

use crate::model::{Architecture, ArchitectureConfig};

/// Settings for the generated "bank" corpus, identical for every
/// architecture so their scores can be compared.
pub fn synthetic_setup(architecture: Architecture) -> (ArchitectureConfig, TrainConfig) {
    let arch = ArchitectureConfig {
        architecture,
        embed_dim: 16,
        hidden_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        ..Default::default()
    };
    let train = TrainConfig {
        learning_rate: 0.01,
        epochs: 300,
        dropout: 0.2,
        optimizer: OptimizerKind::Adam,
        loss: LossKind::TargetOnly,
        ..Default::default()
    };
    (arch, train)
}
