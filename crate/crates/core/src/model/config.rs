use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub intermediate: usize,
    /// Patches per image.
    pub patches: usize,
    /// Features per patch.
    pub patch_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub max_new_tokens: usize,
    pub max_images: usize,
    pub rope_base: f64,
    /// When false every prompt position gets rotary index 0 (identity).
    pub rope_prompt: bool,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    fn base(encoder: EncoderConfig, vocab_size: usize) -> Self {
        Self {
            encoder,
            layers: 2,
            hidden: 128,
            heads: 4,
            intermediate: 512,
            max_positions: 1024,
            vocab_size,
            max_new_tokens: 512,
            max_images: 5,
            rope_base: 10_000.0,
            rope_prompt: true,
            tie_embeddings: false,
            norm_eps: 1e-6,
        }
    }

    /// L=2, H=128, A=4, F=512 decoder over a one-layer patch encoder.
    pub fn desk(vocab_size: usize) -> Self {
        Self::base(
            EncoderConfig {
                layers: 1,
                width: 64,
                heads: 2,
                intermediate: 128,
                patches: 16,
                patch_dim: 16,
            },
            vocab_size,
        )
    }

    /// L=6, H=768, A=12, F=3072, 2048 positions.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            layers: 6,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            max_positions: 2048,
            ..Self::base(
                EncoderConfig {
                    layers: 2,
                    width: 256,
                    heads: 4,
                    intermediate: 1024,
                    patches: 16,
                    patch_dim: 16,
                },
                vocab_size,
            )
        }
    }

    /// Minimal shapes for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 1,
            hidden: 16,
            heads: 2,
            intermediate: 32,
            max_positions: 96,
            max_new_tokens: 32,
            max_images: 2,
            ..Self::base(
                EncoderConfig {
                    layers: 1,
                    width: 8,
                    heads: 2,
                    intermediate: 16,
                    patches: 4,
                    patch_dim: 4,
                },
                vocab_size,
            )
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn max_prompt_len(&self) -> usize {
        self.max_images * self.encoder.patches
    }

    pub fn image_len(&self) -> usize {
        self.encoder.patches * self.encoder.patch_dim
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.encoder;
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return err(format!("head dim {} must be even for rotary", self.head_dim()));
        }
        if e.width == 0 || e.heads == 0 || !e.width.is_multiple_of(e.heads) {
            return err(format!("encoder width {} not divisible by heads {}", e.width, e.heads));
        }
        if self.layers == 0 || self.intermediate == 0 || e.intermediate == 0 || e.patches == 0 || e.patch_dim == 0 {
            return err("zero-sized dimension".into());
        }
        if self.vocab_size < 6 {
            return err(format!("vocab size {} below the control-token count", self.vocab_size));
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > 512 {
            return err(format!("max_new_tokens {} outside [1, 512]", self.max_new_tokens));
        }
        if self.max_images == 0 {
            return err("max_images must be positive".into());
        }
        let need = self.max_prompt_len() + self.max_new_tokens;
        if self.max_positions < need {
            return err(format!(
                "max_positions {} < max_images·patches + max_new_tokens = {need}",
                self.max_positions
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
