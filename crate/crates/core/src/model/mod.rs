//! Conditional report generator: per-image patch encoder, projection to
//! decoder width, source-type embeddings and a prefix-LM decoder with
//! rotary positions, RMS normalization and SwiGLU.

pub mod config;
pub mod forward;
pub mod infer;
pub mod params;

pub use config::{ConfigError, EncoderConfig, ModelConfig};
pub use forward::{build_attention_mask, rope_positions, select_images, ModelError, SequenceScores, TapeModel};
pub use infer::{encode_image, prefill, project_prompt, step, DecodeState, PromptCache, Session};
pub use params::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, BlockIdx, CheckpointError, Layout,
    ModelParams, SourceType, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
