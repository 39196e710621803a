use serde::{Deserialize, Serialize};

use super::loss::EntropySign;
use super::optim::AdamWConfig;
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Tf,
    Scst,
    East,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tf => "tf",
            Stage::Scst => "scst",
            Stage::East => "east",
        }
    }

    pub fn is_rl(self) -> bool {
        self != Stage::Tf
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tf" => Ok(Stage::Tf),
            "scst" => Ok(Stage::Scst),
            "east" => Ok(Stage::East),
            other => Err(format!("unknown stage {other:?}, expected tf, scst or east")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// TF stops after this many epochs without a validation-loss
    /// improvement; 0 disables early stopping.
    pub patience: usize,
    /// λ; ignored by TF and SCST.
    pub entropy_weight: f64,
    pub entropy_sign: EntropySign,
    pub top_k: usize,
    /// Validation events per RL epoch.
    pub validation_events: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Generation cap for rollouts and validation decodes.
    pub max_new_tokens: usize,
    /// Use only the first `n` training studies.
    pub train_limit: Option<usize>,
    /// Use only the first `n` validation studies.
    pub validation_limit: Option<usize>,
    /// Largest tolerated fraction of skipped (non-finite) batches.
    pub max_skip_fraction: f64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let rl = stage.is_rl();
        Self {
            stage,
            lr: if rl { 5e-6 } else { 5e-5 },
            batch_size: if rl { 8 } else { 16 },
            epochs: if rl { 1 } else { 32 },
            patience: 3,
            entropy_weight: 0.05,
            entropy_sign: EntropySign::Bonus,
            top_k: 50,
            validation_events: 50,
            freeze_encoder: rl,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_new_tokens: 256,
            train_limit: None,
            validation_limit: None,
            max_skip_fraction: 0.01,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// λ actually applied by the loss.
    pub fn effective_entropy_weight(&self) -> f64 {
        if self.stage == Stage::East {
            self.entropy_weight
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.entropy_weight.is_finite() && self.entropy_weight >= 0.0) {
            return bad(format!(
                "entropy_weight must be non-negative, got {}",
                self.entropy_weight
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if self.stage.is_rl() && self.validation_events == 0 {
            return bad("validation_events must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > crate::decoding::MAX_NEW_TOKENS {
            return bad(format!("max_new_tokens {} outside [1, 512]", self.max_new_tokens));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad("max_skip_fraction must lie in [0, 1]".into());
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.validation_limit, Some(0)) {
            return bad("limits must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, TrainError> {
        let c: Self = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
