//! The backbone, its reward and LM heads, LoRA adapters and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod net;
pub mod weights;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use infer::{decode_caption, Decoder, forward, lm_distribution, lm_logits, response_log_likelihood, DecodeConstraints, ForwardOutput, RewardPrediction};
pub use net::Trainable;
pub use weights::{Group, Weights};
