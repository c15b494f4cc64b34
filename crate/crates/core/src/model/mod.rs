//! Tiny decoder-only transformer with score-modulated attention.

mod attention;
mod checkpoint;
mod config;
mod generate;
mod params;
mod train;
mod transformer;

pub use attention::{modulated_attention, modulated_attention_backward, AttentionGrads, AttentionOutput};
pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Modulation};
pub use generate::{argmax, generate, Generation};
pub use params::{Layout, Parameters, TensorSpec};
pub(crate) use params::hex as hex_digest;
pub use train::{mean_loss, train, EpochSummary, Example, LogRow, TrainConfig, TrainOutcome};
pub use transformer::{attention_trace, forward, forward_tokens, last_logits, loss, loss_and_grad, AttentionTrace, Logits, LossGrad};
