//! Differentiable forward pass on a [`Tape`].

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use super::config::ModelConfig;
use super::params::{BlockIdx, Layout, ModelParams, SourceType};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{section_types, TokenId, BOS};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("study has no images")]
    NoImages,
    #[error("image has {got} values, config expects {expected}")]
    ImageSize { got: usize, expected: usize },
    #[error("sequence of {total} positions exceeds max_positions {max}")]
    TooLong { total: usize, max: usize },
    #[error("sequence must start with [BOS] and hold at least one scored token")]
    BadSequence,
}

/// Which stored images feed the prompt: at most `max_images`, a uniform
/// random subset (kept in stored order) when training, else the first ones.
pub fn select_images<R: Rng + ?Sized>(
    count: usize,
    max_images: usize,
    training: bool,
    rng: &mut R,
) -> Result<Vec<usize>, ModelError> {
    if count == 0 {
        return Err(ModelError::NoImages);
    }
    if count <= max_images {
        return Ok((0..count).collect());
    }
    if !training {
        return Ok((0..max_images).collect());
    }
    let mut idx = sample(rng, count, max_images).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Prefix-LM mask over `p_len` prompt and `r_len` report positions,
/// row-major; `true` means attention is allowed. Prompt rows see the whole
/// prompt and no report column; report row `t` sees the prompt and report
/// columns `≤ t`.
pub fn build_attention_mask(p_len: usize, r_len: usize) -> Vec<bool> {
    let n = p_len + r_len;
    let mut m = vec![false; n * n];
    for i in 0..n {
        let limit = if i < p_len { p_len } else { i + 1 };
        m[i * n..i * n + limit].fill(true);
    }
    m
}

/// Rotary index per position: sequential across prompt then report, or
/// zero on the prompt when `rope_prompt` is off.
pub fn rope_positions(cfg: &ModelConfig, p_len: usize, r_len: usize) -> Vec<usize> {
    (0..p_len + r_len)
        .map(|i| if i < p_len && !cfg.rope_prompt { 0 } else { i })
        .collect()
}

/// Log-probabilities and entropies of a scored sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceScores {
    /// Mean log-probability of the scored tokens, shape `[1]`.
    pub mean_log_prob: Var,
    /// Log-probability of each scored token, shape `[n]`.
    pub token_log_probs: Var,
    /// Full log-distribution at each scored step, shape `[n, vocab]`.
    pub log_dists: Var,
    /// Mean entropy of the scored steps' distributions, shape `[1]`.
    pub mean_entropy: Var,
}

/// Parameters of one model placed on a tape.
pub struct TapeModel<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub vars: Vec<Var>,
    pub config: ModelConfig,
    pub layout: Layout,
}

impl<'t, T: Scalar> TapeModel<'t, T> {
    /// Records every tensor as a leaf; `trainable(i)` decides which ones
    /// receive gradients.
    pub fn new(
        tape: &'t Tape<T>,
        params: &ModelParams<T>,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<Self, ModelError> {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            tape,
            vars,
            config: params.config.clone(),
            layout: params.layout.clone(),
        })
    }

    /// Uses already-recorded vars, e.g. the parameter vars of a
    /// finite-difference check.
    pub fn from_vars(tape: &'t Tape<T>, vars: Vec<Var>, config: &ModelConfig) -> Self {
        Self {
            tape,
            vars,
            config: config.clone(),
            layout: Layout::new(config),
        }
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn block(
        &self,
        x: Var,
        b: &BlockIdx,
        heads: usize,
        mask: Option<&Rc<[bool]>>,
        positions: Option<&[usize]>,
    ) -> Result<Var, ModelError> {
        let t = self.tape;
        let eps = T::from_f64(self.config.norm_eps);
        let h = t.rmsnorm(x, self.v(b.attn_norm), eps)?;
        let mut q = t.matmul(h, self.v(b.wq))?;
        let mut k = t.matmul(h, self.v(b.wk))?;
        let v = t.matmul(h, self.v(b.wv))?;
        if let Some(pos) = positions {
            q = t.rope(q, pos, heads, self.config.rope_base)?;
            k = t.rope(k, pos, heads, self.config.rope_base)?;
        }
        let width = t.shape(x)[1];
        let d = width / heads;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * d, (hd + 1) * d);
            let qh = t.slice_cols(q, lo, hi)?;
            let kh = t.slice_cols(k, lo, hi)?;
            let vh = t.slice_cols(v, lo, hi)?;
            let mut s = t.scale(t.matmul_t(qh, kh)?, scale)?;
            if let Some(m) = mask {
                s = t.mask_fill(s, m.clone())?;
            }
            outs.push(t.matmul(t.softmax(s)?, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
        let x = t.add(x, t.matmul(o, self.v(b.wo))?)?;
        let h = t.rmsnorm(x, self.v(b.mlp_norm), eps)?;
        let g = t.matmul(h, self.v(b.w_gate))?;
        let u = t.matmul(h, self.v(b.w_up))?;
        let m = t.matmul(t.swiglu(g, u)?, self.v(b.w_down))?;
        Ok(t.add(x, m)?)
    }

    /// Encoder output for one image, shape `[patches, encoder width]`.
    pub fn encode_image(&self, image: &[T]) -> Result<Var, ModelError> {
        let e = &self.config.encoder;
        if image.len() != e.patches * e.patch_dim {
            return Err(ModelError::ImageSize {
                got: image.len(),
                expected: e.patches * e.patch_dim,
            });
        }
        let t = self.tape;
        let x = t.constant(Tensor::new(vec![e.patches, e.patch_dim], image.to_vec())?)?;
        let mut h = t.add(
            t.matmul(x, self.v(self.layout.patch_embed))?,
            self.v(self.layout.pos_embed),
        )?;
        for b in &self.layout.enc_layers {
            h = self.block(h, b, e.heads, None, None)?;
        }
        Ok(t.rmsnorm(h, self.v(self.layout.enc_norm), T::from_f64(self.config.norm_eps))?)
    }

    /// Projects per-image encoder states to decoder width and adds the IMAGE
    /// source type. Output `[Σ patches, hidden]`.
    pub fn prompt_from_states(&self, states: &[Var]) -> Result<Var, ModelError> {
        if states.is_empty() {
            return Err(ModelError::NoImages);
        }
        let t = self.tape;
        let enc = if states.len() == 1 {
            states[0]
        } else {
            t.concat_rows(states)?
        };
        let projected = t.matmul(enc, self.v(self.layout.projection))?;
        let rows = t.shape(projected)[0];
        let types = t.embedding(self.v(self.layout.source_type), &vec![SourceType::Image as usize; rows])?;
        Ok(t.add(projected, types)?)
    }

    /// Prompt from raw image grids.
    pub fn prompt(&self, images: &[&[T]]) -> Result<Var, ModelError> {
        let states = images
            .iter()
            .map(|im| self.encode_image(im))
            .collect::<Result<Vec<_>, _>>()?;
        self.prompt_from_states(&states)
    }

    /// Prompt from encoder outputs computed elsewhere (a frozen encoder).
    pub fn prompt_from_encoded(&self, encoded: &[Tensor<T>]) -> Result<Var, ModelError> {
        let states = encoded
            .iter()
            .map(|e| self.tape.constant(e.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.prompt_from_states(&states)
    }

    /// Next-token logits for every position of `inputs`, shape
    /// `[inputs.len(), vocab]`. Section types follow the input tokens.
    pub fn logits(&self, prompt: Var, inputs: &[TokenId]) -> Result<Var, ModelError> {
        let t = self.tape;
        let p_len = t.shape(prompt)[0];
        let r_len = inputs.len();
        let total = p_len + r_len;
        if total > self.config.max_positions {
            return Err(ModelError::TooLong {
                total,
                max: self.config.max_positions,
            });
        }
        if r_len == 0 {
            return Err(ModelError::BadSequence);
        }
        let ids: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
        let types: Vec<usize> = section_types(inputs)
            .into_iter()
            .map(|s| SourceType::from(s) as usize)
            .collect();
        let tok = t.embedding(self.v(self.layout.token_embed), &ids)?;
        let typ = t.embedding(self.v(self.layout.source_type), &types)?;
        let mut x = t.concat_rows(&[prompt, t.add(tok, typ)?])?;
        let mask: Rc<[bool]> = build_attention_mask(p_len, r_len).into();
        let positions = rope_positions(&self.config, p_len, r_len);
        for b in &self.layout.dec_layers {
            x = self.block(x, b, self.config.heads, Some(&mask), Some(&positions))?;
        }
        let h = t.rmsnorm(x, self.v(self.layout.dec_norm), T::from_f64(self.config.norm_eps))?;
        let h = t.slice_rows(h, p_len, total)?;
        Ok(match self.layout.lm_head {
            Some(w) => t.matmul(h, self.v(w))?,
            None => t.matmul_t(h, self.v(self.layout.token_embed))?,
        })
    }

    /// Scores `sequence[scored_from..]` given the tokens before each one.
    /// `sequence` starts with `[BOS]`; `scored_from ≥ 1` is usually the
    /// forced-prefix length.
    pub fn score_sequence(
        &self,
        prompt: Var,
        sequence: &[TokenId],
        scored_from: usize,
    ) -> Result<SequenceScores, ModelError> {
        if sequence.first() != Some(&BOS) || scored_from == 0 || scored_from >= sequence.len() {
            return Err(ModelError::BadSequence);
        }
        let t = self.tape;
        let n = sequence.len() - 1;
        let logits = self.logits(prompt, &sequence[..n])?;
        let logits = if scored_from > 1 {
            t.slice_rows(logits, scored_from - 1, n)?
        } else {
            logits
        };
        let log_dists = t.log_softmax(logits)?;
        let targets: Vec<usize> = sequence[scored_from..].iter().map(|&i| i as usize).collect();
        let token_log_probs = t.pick(log_dists, &targets)?;
        let mean_log_prob = t.mean(token_log_probs)?;
        let plogp = t.mul(t.exp(log_dists)?, log_dists)?;
        let mean_entropy = t.scale(t.mean(t.row_sum(plogp)?)?, -T::one())?;
        Ok(SequenceScores {
            mean_log_prob,
            token_log_probs,
            log_dists,
            mean_entropy,
        })
    }

    /// Mean next-token negative log-likelihood over every target position
    /// after `[BOS]`.
    pub fn nll(&self, prompt: Var, target: &[TokenId]) -> Result<Var, ModelError> {
        let s = self.score_sequence(prompt, target, 1)?;
        Ok(self.tape.scale(s.mean_log_prob, -T::one())?)
    }
}
