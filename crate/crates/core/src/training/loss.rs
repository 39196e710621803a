use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::DecodeResult;
use crate::model::SequenceScores;
use crate::tensor::{Scalar, Tape, TensorError, Var};

/// Allowed deviation of a distribution's total mass from 1.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("entropy weight {0} must be finite and non-negative")]
    EntropyWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Direction of the entropy term in the minimized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropySign {
    /// `L_SCST − λ·H`: entropy is rewarded.
    #[default]
    Bonus,
    /// `L_SCST + λ·H`, the printed form, which penalizes entropy.
    PaperLiteral,
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_of_distribution(dist: &[f64]) -> Result<f64, LossError> {
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(LossError::InvalidDistribution(format!("entry {p}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(LossError::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(-dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// A sampled rollout and its greedy baseline for one study.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPair {
    pub sample: DecodeResult,
    pub baseline: DecodeResult,
    pub r_sample: f64,
    pub r_baseline: f64,
    /// Mean full-distribution entropy over the sampled steps.
    pub mean_step_entropy: f64,
}

impl RolloutPair {
    pub fn advantage(&self) -> f64 {
        self.r_sample - self.r_baseline
    }
}

/// `−(r(wˢ) − r(wᵇ)) · meanLogProb(wˢ)`.
pub fn scst_loss<T: Scalar>(tape: &Tape<T>, scores: &SequenceScores, advantage: f64) -> Result<Var, LossError> {
    Ok(tape.scale(scores.mean_log_prob, T::from_f64(-advantage))?)
}

/// SCST loss with `∓ λ·H_seq`, where `H_seq` is the mean entropy of the
/// full distributions at the sampled states. `λ = 0` returns the SCST
/// graph unchanged.
pub fn east_loss<T: Scalar>(
    tape: &Tape<T>,
    scores: &SequenceScores,
    advantage: f64,
    lambda: f64,
    sign: EntropySign,
) -> Result<Var, LossError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(LossError::EntropyWeight(lambda));
    }
    let scst = scst_loss(tape, scores, advantage)?;
    if lambda == 0.0 {
        return Ok(scst);
    }
    let coef = match sign {
        EntropySign::Bonus => -lambda,
        EntropySign::PaperLiteral => lambda,
    };
    Ok(tape.add(scst, tape.scale(scores.mean_entropy, T::from_f64(coef))?)?)
}
