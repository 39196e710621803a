//! Greedy, top-k sampling and beam search under section constraints.

use std::collections::BTreeSet;

use rand::{Rng, RngExt};
use thiserror::Error;

use crate::model::{step, DecodeState, ModelError, ModelParams, Session};
use crate::tensor::kernels::log_softmax_row;
use crate::tensor::Scalar;
use crate::tokenizer::{TokenId, BOS, EOS, NF, NI, PAD, SEP};

/// Hard cap on generated tokens.
pub const MAX_NEW_TOKENS: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("invalid constraints: {0}")]
    Constraints(String),
    #[error("top-k with k = {k} but only {allowed} tokens are allowed")]
    TopK { k: usize, allowed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Restrictions applied to every decoding step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeConstraints {
    /// Fed before decoding starts; begins with `[BOS]`.
    pub forced_prefix: Vec<TokenId>,
    /// Never emitted after the prefix. Must not contain `[EOS]`.
    pub forbidden_tokens: BTreeSet<TokenId>,
    /// Appended and decoding stopped as soon as `[SEP]` is emitted; the
    /// last token must be `[EOS]`. Empty disables the rule.
    pub after_sep: Vec<TokenId>,
    pub max_new_tokens: usize,
}

impl DecodeConstraints {
    /// Prefix `[BOS]`; `[PAD]` and `[BOS]` forbidden.
    pub fn report(max_new_tokens: usize) -> Self {
        Self {
            forced_prefix: vec![BOS],
            forbidden_tokens: [PAD, BOS].into_iter().collect(),
            after_sep: Vec::new(),
            max_new_tokens,
        }
    }

    /// Impression only: prefix `[BOS][NF][SEP]`, `[NI]` forbidden.
    pub fn impression_only(max_new_tokens: usize) -> Self {
        let mut c = Self::report(max_new_tokens);
        c.forced_prefix = vec![BOS, NF, SEP];
        c.forbidden_tokens.insert(NI);
        c
    }

    /// Findings only: `[NF]` forbidden, `[NI][EOS]` forced after `[SEP]`.
    pub fn findings_only(max_new_tokens: usize) -> Self {
        let mut c = Self::report(max_new_tokens);
        c.forbidden_tokens.insert(NF);
        c.after_sep = vec![NI, EOS];
        c
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Constraints(m));
        if self.forced_prefix.first() != Some(&BOS) {
            return bad("forced prefix must start with [BOS]".into());
        }
        if self.forbidden_tokens.contains(&EOS) {
            return bad("[EOS] cannot be forbidden".into());
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > MAX_NEW_TOKENS {
            return bad(format!(
                "max_new_tokens {} outside [1, {MAX_NEW_TOKENS}]",
                self.max_new_tokens
            ));
        }
        if !self.after_sep.is_empty() && self.after_sep.last() != Some(&EOS) {
            return bad("after_sep must end with [EOS]".into());
        }
        if let Some(t) = self
            .forced_prefix
            .iter()
            .chain(&self.after_sep)
            .chain(&self.forbidden_tokens)
            .find(|&&t| t as usize >= vocab_size)
        {
            return bad(format!("token {t} outside vocabulary of {vocab_size}"));
        }
        Ok(())
    }

    fn allowed(&self, vocab_size: usize) -> Vec<bool> {
        (0..vocab_size as TokenId)
            .map(|t| !self.forbidden_tokens.contains(&t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Forced prefix followed by generated tokens.
    pub ids: Vec<TokenId>,
    pub prefix_len: usize,
    /// Log-probability of each generated token under the distribution it was
    /// chosen from (renormalized over the kept set for top-k). Forced
    /// suffix tokens record 0.
    pub log_probs: Vec<f64>,
    /// `[EOS]` reached before the length cap.
    pub finished: bool,
}

impl DecodeResult {
    pub fn score(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.ids[self.prefix_len..]
    }
}

/// Anything that yields next-token logits one fed token at a time.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn initial(&self) -> Self::State;
    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>, DecodeError>;
}

impl<T: Scalar> StepModel for Session<'_, T> {
    type State = DecodeState<T>;

    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn initial(&self) -> Self::State {
        self.state()
    }

    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>, DecodeError> {
        let p: &ModelParams<T> = self.params;
        Ok(step(p, state, token)?.into_iter().map(|x| x.to_f64()).collect())
    }
}

/// Log-softmax over the full vocabulary with forbidden entries at −∞.
fn masked_log_probs(mut logits: Vec<f64>, allowed: &[bool]) -> Vec<f64> {
    log_softmax_row(&mut logits);
    for (x, &ok) in logits.iter_mut().zip(allowed) {
        if !ok {
            *x = f64::NEG_INFINITY;
        }
    }
    logits
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn prime<M: StepModel>(model: &M, c: &DecodeConstraints) -> Result<(M::State, Vec<f64>), DecodeError> {
    c.validate(model.vocab_size())?;
    let mut state = model.initial();
    let mut logits = Vec::new();
    for &t in &c.forced_prefix {
        logits = model.advance(&mut state, t)?;
    }
    Ok((state, logits))
}

/// Shared loop for greedy and sampling: `choose` returns the next token and
/// its recorded log-probability.
fn decode_with<M: StepModel>(
    model: &M,
    c: &DecodeConstraints,
    mut choose: impl FnMut(Vec<f64>) -> Result<(usize, f64), DecodeError>,
) -> Result<DecodeResult, DecodeError> {
    let (mut state, mut logits) = prime(model, c)?;
    let mut ids = c.forced_prefix.clone();
    let mut log_probs = Vec::new();
    let mut finished = false;
    let mut produced = 0;
    while produced < c.max_new_tokens {
        let (tok, lp) = choose(std::mem::take(&mut logits))?;
        let tok = tok as TokenId;
        ids.push(tok);
        log_probs.push(lp);
        produced += 1;
        if tok == EOS {
            finished = true;
            break;
        }
        if tok == SEP && !c.after_sep.is_empty() {
            ids.extend_from_slice(&c.after_sep);
            log_probs.extend(std::iter::repeat_n(0.0, c.after_sep.len()));
            finished = true;
            break;
        }
        if produced < c.max_new_tokens {
            logits = model.advance(&mut state, tok)?;
        }
    }
    Ok(DecodeResult {
        ids,
        prefix_len: c.forced_prefix.len(),
        log_probs,
        finished,
    })
}

/// Argmax of the masked log-distribution at each step, lowest id on ties.
pub fn greedy<M: StepModel>(model: &M, c: &DecodeConstraints) -> Result<DecodeResult, DecodeError> {
    let allowed = c.allowed(model.vocab_size());
    decode_with(model, c, |logits| {
        let lp = masked_log_probs(logits, &allowed);
        let t = argmax(&lp);
        Ok((t, lp[t]))
    })
}

/// Kept token ids and their renormalized probabilities for one top-k step.
pub fn top_k_distribution(logits: &[f64], allowed: &[bool], k: usize) -> Result<Vec<(usize, f64)>, DecodeError> {
    let n_allowed = allowed.iter().filter(|&&a| a).count();
    if k == 0 || k > n_allowed {
        return Err(DecodeError::TopK { k, allowed: n_allowed });
    }
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
    // stable sort keeps lower ids first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let mut kept: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    crate::tensor::kernels::softmax_row(&mut kept);
    Ok(order.into_iter().zip(kept).collect())
}

/// Samples from the `k` highest allowed logits at temperature 1.
pub fn sample_top_k<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    c: &DecodeConstraints,
    k: usize,
    rng: &mut R,
) -> Result<DecodeResult, DecodeError> {
    let allowed = c.allowed(model.vocab_size());
    decode_with(model, c, |logits| {
        let dist = top_k_distribution(&logits, &allowed, k)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = dist[dist.len() - 1];
        for &(t, p) in &dist {
            acc += p;
            if u < acc {
                pick = (t, p);
                break;
            }
        }
        Ok((pick.0, pick.1.ln()))
    })
}

struct Beam<S> {
    ids: Vec<TokenId>,
    log_probs: Vec<f64>,
    score: f64,
    state: S,
    logits: Vec<f64>,
    finished: bool,
}

/// Beam search over summed log-probabilities with no length penalty.
/// Finished beams stay in the pool and compete on raw score; the search
/// ends when every kept beam is finished or the cap is hit.
pub fn beam_search<M: StepModel>(model: &M, c: &DecodeConstraints, width: usize) -> Result<DecodeResult, DecodeError> {
    if width == 0 {
        return Err(DecodeError::Constraints("beam width must be positive".into()));
    }
    let allowed = c.allowed(model.vocab_size());
    let (state, logits) = prime(model, c)?;
    let mut beams = vec![Beam {
        ids: c.forced_prefix.clone(),
        log_probs: Vec::new(),
        score: 0.0,
        state,
        logits,
        finished: false,
    }];
    for produced in 0..c.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        // (score, beam index, token); token None keeps a finished beam
        let mut cands: Vec<(f64, usize, Option<usize>, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.finished {
                cands.push((b.score, bi, None, 0.0));
                continue;
            }
            let lp = masked_log_probs(b.logits.clone(), &allowed);
            let mut order: Vec<usize> = (0..lp.len()).filter(|&i| allowed[i]).collect();
            order.sort_by(|&x, &y| lp[y].total_cmp(&lp[x]));
            for &t in order.iter().take(width) {
                cands.push((b.score + lp[t], bi, Some(t), lp[t]));
            }
        }
        // stable: ties keep earlier beams and lower token ids first
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(width);
        let last_step = produced + 1 == c.max_new_tokens;
        let mut next = Vec::with_capacity(cands.len());
        for (score, bi, tok, lp) in cands {
            let parent = &beams[bi];
            let Some(t) = tok else {
                next.push(Beam {
                    ids: parent.ids.clone(),
                    log_probs: parent.log_probs.clone(),
                    score,
                    state: parent.state.clone(),
                    logits: Vec::new(),
                    finished: true,
                });
                continue;
            };
            let t = t as TokenId;
            let mut ids = parent.ids.clone();
            let mut log_probs = parent.log_probs.clone();
            ids.push(t);
            log_probs.push(lp);
            let mut finished = t == EOS;
            if t == SEP && !c.after_sep.is_empty() {
                ids.extend_from_slice(&c.after_sep);
                log_probs.extend(std::iter::repeat_n(0.0, c.after_sep.len()));
                finished = true;
            }
            let mut state = parent.state.clone();
            let logits = if finished || last_step {
                Vec::new()
            } else {
                model.advance(&mut state, t)?
            };
            next.push(Beam {
                ids,
                log_probs,
                score,
                state,
                logits,
                finished,
            });
        }
        beams = next;
    }
    let best = beams
        .iter()
        .filter(|b| b.finished)
        .max_by(|a, b| a.score.total_cmp(&b.score).then(std::cmp::Ordering::Greater))
        .or_else(|| {
            beams
                .iter()
                .max_by(|a, b| a.score.total_cmp(&b.score).then(std::cmp::Ordering::Greater))
        })
        .expect("at least one beam");
    Ok(DecodeResult {
        ids: best.ids.clone(),
        prefix_len: c.forced_prefix.len(),
        log_probs: best.log_probs.clone(),
        finished: best.finished,
    })
}
