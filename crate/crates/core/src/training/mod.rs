//! Teacher forcing, then SCST or EAST, with AdamW and validation-driven
//! checkpoint selection.

pub mod config;
pub mod log;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::StudyRecord;
use crate::decoding::{greedy, sample_top_k, DecodeConstraints, DecodeError, DecodeResult};
use crate::metrics::{EvalSummary, MetricError, Reference, Scorer};
use crate::model::{encode_image, select_images, ModelConfig, ModelError, ModelParams, Session, TapeModel};
use crate::tensor::kernels::log_softmax_row;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{assemble_target, TokenId, TokenizerError};

pub use config::{Stage, TrainConfig};
pub use log::{EventLog, TrainEvent};
pub use loss::{east_loss, entropy_of_distribution, scst_loss, EntropySign, LossError, RolloutPair};
pub use optim::{AdamW, AdamWConfig, OptimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples")]
    Empty,
    #[error("{skipped} of {total} batches skipped, above the {limit} limit")]
    TooManySkipped { skipped: usize, total: usize, limit: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
}

/// A study ready for training: raw images, assembled target, reference.
#[derive(Debug, Clone)]
pub struct Example {
    pub images: Vec<Vec<f32>>,
    pub target: Vec<TokenId>,
    pub reference: Reference,
}

pub fn prepare(studies: &[StudyRecord], scorer: &Scorer) -> Result<Vec<Example>, TrainError> {
    studies
        .iter()
        .map(|s| {
            let reference = scorer.reference(s)?;
            let target = assemble_target(&reference.report)?.ids;
            Ok(Example {
                images: s.images.clone(),
                target,
                reference,
            })
        })
        .collect()
}

impl Example {
    /// Images fed to the prompt, cast to `T`.
    pub fn prompt_images<T: Scalar, R: Rng + ?Sized>(
        &self,
        max_images: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Vec<T>>, ModelError> {
        Ok(select_images(self.images.len(), max_images, training, rng)?
            .into_iter()
            .map(|i| self.images[i].iter().map(|&x| T::from_f64(x as f64)).collect())
            .collect())
    }
}

fn refs<T>(v: &[Vec<T>]) -> Vec<&[T]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Token-weighted mean next-token NLL over a batch of `(images, target)`.
pub fn tf_batch_loss<T: Scalar>(model: &TapeModel<T>, batch: &[(Vec<Vec<T>>, &[TokenId])]) -> Result<Var, TrainError> {
    let t = model.tape;
    let total: usize = batch.iter().map(|(_, tgt)| tgt.len() - 1).sum();
    let mut acc: Option<Var> = None;
    for (images, target) in batch {
        let prompt = model.prompt(&refs(images))?;
        let nll = model.nll(prompt, target)?;
        let w = t.scale(nll, T::from_f64((target.len() - 1) as f64 / total as f64))?;
        acc = Some(match acc {
            None => w,
            Some(a) => t.add(a, w)?,
        });
    }
    acc.ok_or(TrainError::Empty)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome<S> {
    Applied(S),
    /// Non-finite loss or gradient; parameters unchanged.
    Skipped(String),
}

fn apply<T: Scalar>(
    tape: &Tape<T>,
    vars: &[Var],
    loss: Var,
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
) -> Result<Option<String>, TrainError> {
    let value = tape.item(loss).to_f64();
    if !value.is_finite() {
        return Ok(Some(format!("non-finite loss {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| tape.grad(v)).collect();
    match opt.step(&mut params.tensors, &grads) {
        Ok(()) => Ok(None),
        Err(OptimError::NonFinite(i)) => Ok(Some(format!("non-finite gradient in {}", params.layout.specs[i].0))),
        Err(e) => Err(TrainError::Config(e.to_string())),
    }
}

/// One teacher-forcing update; returns the batch loss.
pub fn tf_step<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    batch: &[&Example],
    rng: &mut R,
) -> Result<StepOutcome<f64>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let max_images = params.config.max_images;
    let inputs = batch
        .iter()
        .map(|ex| Ok((ex.prompt_images::<T, R>(max_images, true, rng)?, ex.target.as_slice())))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let tape = Tape::new();
    let model = TapeModel::new(&tape, params, |_| true)?;
    let loss = tf_batch_loss(&model, &inputs)?;
    let value = tape.item(loss).to_f64();
    Ok(match apply(&tape, &model.vars, loss, params, opt)? {
        None => StepOutcome::Applied(value),
        Some(reason) => StepOutcome::Skipped(reason),
    })
}

/// Mean next-token NLL per token over `examples`, tape-free.
pub fn validation_loss<T: Scalar>(params: &ModelParams<T>, examples: &[Example]) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in examples {
        let images = ex.prompt_images::<T, _>(params.config.max_images, false, &mut rng)?;
        let session = Session::from_images(params, &refs(&images))?;
        let n = ex.target.len() - 1;
        for (row, &next) in session.logits(&ex.target[..n])?.into_iter().zip(&ex.target[1..]) {
            let mut lp: Vec<f64> = row.into_iter().map(|x| x.to_f64()).collect();
            log_softmax_row(&mut lp);
            sum -= lp[next as usize];
        }
        count += n;
    }
    Ok(sum / count.max(1) as f64)
}

/// Rollout constraints used identically for the sample and the baseline.
/// The length cap is the smaller of the run's and the model's.
pub fn rollout_constraints(cfg: &TrainConfig, model: &ModelConfig) -> DecodeConstraints {
    DecodeConstraints::report(cfg.max_new_tokens.min(model.max_new_tokens))
}

/// Rejects examples whose target does not fit the model's generation cap.
fn check_targets(examples: &[Example], model: &ModelConfig) -> Result<(), TrainError> {
    if let Some(ex) = examples.iter().find(|e| e.target.len() - 1 > model.max_new_tokens) {
        return Err(TrainError::Config(format!(
            "study {} has a {}-token target, above the model's max_new_tokens {}",
            ex.reference.study_id,
            ex.target.len() - 1,
            model.max_new_tokens
        )));
    }
    Ok(())
}

/// Statistics of one RL update.
#[derive(Debug, Clone, PartialEq)]
pub struct RlStepStats {
    pub loss: f64,
    pub reward_sample: f64,
    pub reward_baseline: f64,
    pub entropy: f64,
    pub rollouts: Vec<RolloutPair>,
}

/// Samples and baselines for a batch from the current parameters. Also
/// returns the prompt images used and, with a frozen encoder, their
/// encodings.
#[allow(clippy::type_complexity)]
pub fn collect_rollouts<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    batch: &[&Example],
    cfg: &TrainConfig,
    scorer: &Scorer,
    rng: &mut R,
) -> Result<Vec<(Vec<Vec<T>>, Vec<Tensor<T>>, RolloutPair)>, TrainError> {
    let c = rollout_constraints(cfg, &params.config);
    let allowed = params.config.vocab_size - c.forbidden_tokens.len();
    let k = cfg.top_k.min(allowed);
    batch
        .iter()
        .map(|ex| {
            let images = ex.prompt_images::<T, R>(params.config.max_images, true, rng)?;
            let encoded = images
                .iter()
                .map(|im| encode_image(params, im))
                .collect::<Result<Vec<_>, _>>()?;
            let session = Session::new(params, &encoded)?;
            let baseline = greedy(&session, &c)?;
            let sample = sample_top_k(&session, &c, k, rng)?;
            let r_sample = scorer.reward(&sample.ids, &ex.reference)?;
            let r_baseline = scorer.reward(&baseline.ids, &ex.reference)?;
            let pair = RolloutPair {
                sample,
                baseline,
                r_sample,
                r_baseline,
                mean_step_entropy: f64::NAN,
            };
            Ok((images, encoded, pair))
        })
        .collect()
}

/// Builds the RL objective for given rollouts on `model`: the batch mean
/// of per-rollout SCST or EAST losses. Fills in each pair's entropy.
pub fn rl_batch_loss<T: Scalar>(
    model: &TapeModel<T>,
    rollouts: &mut [(Vec<Vec<T>>, Vec<Tensor<T>>, RolloutPair)],
    freeze_encoder: bool,
    lambda: f64,
    sign: EntropySign,
) -> Result<Var, TrainError> {
    let t = model.tape;
    let scale = T::from_f64(1.0 / rollouts.len() as f64);
    let mut acc: Option<Var> = None;
    for (images, encoded, pair) in rollouts.iter_mut() {
        let prompt = if freeze_encoder {
            model.prompt_from_encoded(encoded)?
        } else {
            model.prompt(&refs(images))?
        };
        let s = &pair.sample;
        let scores = model.score_sequence(prompt, &s.ids, s.prefix_len)?;
        pair.mean_step_entropy = t.item(scores.mean_entropy).to_f64();
        let l = t.scale(east_loss(t, &scores, pair.advantage(), lambda, sign)?, scale)?;
        acc = Some(match acc {
            None => l,
            Some(a) => t.add(a, l)?,
        });
    }
    acc.ok_or(TrainError::Empty)
}

/// One SCST/EAST update.
pub fn rl_step<T: Scalar, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    batch: &[&Example],
    cfg: &TrainConfig,
    scorer: &Scorer,
    rng: &mut R,
) -> Result<StepOutcome<RlStepStats>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut rollouts = collect_rollouts(params, batch, cfg, scorer, rng)?;
    let tape = Tape::new();
    let frozen = cfg.freeze_encoder;
    let layout = params.layout.clone();
    let model = TapeModel::new(&tape, params, |i| !(frozen && layout.is_encoder(i)))?;
    let loss = rl_batch_loss(
        &model,
        &mut rollouts,
        frozen,
        cfg.effective_entropy_weight(),
        cfg.entropy_sign,
    )?;
    let value = tape.item(loss).to_f64();
    if let Some(reason) = apply(&tape, &model.vars, loss, params, opt)? {
        return Ok(StepOutcome::Skipped(reason));
    }
    let n = rollouts.len() as f64;
    let mean = |f: &dyn Fn(&RolloutPair) -> f64| rollouts.iter().map(|r| f(&r.2)).sum::<f64>() / n;
    Ok(StepOutcome::Applied(RlStepStats {
        loss: value,
        reward_sample: mean(&|r| r.r_sample),
        reward_baseline: mean(&|r| r.r_baseline),
        entropy: mean(&|r| r.mean_step_entropy),
        rollouts: rollouts.into_iter().map(|r| r.2).collect(),
    }))
}

/// Greedy decodes of `examples` with the first `max_images` images.
pub fn greedy_decode_all<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    constraints: &DecodeConstraints,
) -> Result<Vec<DecodeResult>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    examples
        .iter()
        .map(|ex| {
            let images = ex.prompt_images::<T, _>(params.config.max_images, false, &mut rng)?;
            let session = Session::from_images(params, &refs(&images))?;
            Ok(greedy(&session, constraints)?)
        })
        .collect()
}

/// Greedy validation: per-section metrics and macro label F1.
pub fn validate_greedy<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    scorer: &Scorer,
    max_new_tokens: usize,
) -> Result<EvalSummary, TrainError> {
    let cap = max_new_tokens.min(params.config.max_new_tokens);
    let decoded = greedy_decode_all(params, examples, &DecodeConstraints::report(cap))?;
    let hyps: Vec<Vec<TokenId>> = decoded.into_iter().map(|d| d.ids).collect();
    let refs: Vec<Reference> = examples.iter().map(|e| e.reference.clone()).collect();
    Ok(scorer.evaluate(&hyps, &refs)?)
}

/// Result of a training run: the restored best parameters are written
/// back into the caller's params.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub skipped: usize,
    pub best_index: usize,
    pub best_value: f64,
    /// Monitored value at every validation event.
    pub trace: Vec<f64>,
}

fn limited(examples: &[Example], limit: Option<usize>) -> &[Example] {
    &examples[..limit.unwrap_or(usize::MAX).min(examples.len())]
}

fn check_skips(skipped: usize, total: usize, cfg: &TrainConfig) -> Result<(), TrainError> {
    if total > 0 && skipped as f64 > cfg.max_skip_fraction * total as f64 {
        return Err(TrainError::TooManySkipped {
            skipped,
            total,
            limit: cfg.max_skip_fraction,
        });
    }
    Ok(())
}

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    order
}

/// Teacher forcing for up to `cfg.epochs` epochs with one validation-loss
/// event per epoch; keeps the lowest-loss parameters.
pub fn train_tf<T: Scalar>(
    params: &mut ModelParams<T>,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    log: &mut EventLog,
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    let train = limited(train, cfg.train_limit);
    let validation = limited(validation, cfg.validation_limit);
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::Empty);
    }
    check_targets(train, &params.config)?;
    check_targets(validation, &params.config)?;
    let stage = Stage::Tf.name().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let (mut steps, mut skipped, mut total) = (0, 0, 0);
    let mut trace = Vec::new();
    let mut best = (0, f64::INFINITY, params.tensors.clone());
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            total += 1;
            match tf_step(params, &mut opt, &batch, &mut rng)? {
                StepOutcome::Applied(loss) => {
                    steps += 1;
                    log.push(TrainEvent::Step {
                        stage: stage.clone(),
                        epoch,
                        step: steps,
                        loss,
                        reward_sample: None,
                        reward_baseline: None,
                        entropy: None,
                    })?;
                }
                StepOutcome::Skipped(reason) => {
                    skipped += 1;
                    log.push(TrainEvent::Skipped {
                        stage: stage.clone(),
                        step: steps,
                        reason,
                    })?;
                }
            }
        }
        let loss = validation_loss(params, validation)?;
        log.push(TrainEvent::Validation {
            stage: stage.clone(),
            index: epoch,
            step: steps,
            loss: Some(loss),
            label_macro_f1: None,
            er_f1: None,
            rollout_entropy: None,
        })?;
        trace.push(loss);
        if loss < best.1 {
            best = (epoch, loss, params.tensors.clone());
        } else if cfg.patience > 0 && epoch - best.0 >= cfg.patience {
            break;
        }
    }
    check_skips(skipped, total, cfg)?;
    params.tensors = best.2;
    log.push(TrainEvent::Done {
        stage,
        steps,
        skipped,
        best_index: best.0,
        best_value: best.1,
    })?;
    Ok(RunSummary {
        steps,
        skipped,
        best_index: best.0,
        best_value: best.1,
        trace,
    })
}

/// One SCST or EAST pass over the training data with `validation_events`
/// evenly spaced greedy validations; restores the parameters with the best
/// macro label F1 (earliest on ties).
pub fn train_rl<T: Scalar>(
    params: &mut ModelParams<T>,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    scorer: &Scorer,
    log: &mut EventLog,
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    if !cfg.stage.is_rl() {
        return Err(TrainError::Config("train_rl needs stage scst or east".into()));
    }
    let train = limited(train, cfg.train_limit);
    let validation = limited(validation, cfg.validation_limit);
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::Empty);
    }
    let stage = cfg.stage.name().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let mut batches = Vec::new();
    for _ in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        batches.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    let events = cfg.validation_events * cfg.epochs;
    if batches.len() < events {
        return Err(TrainError::Config(format!(
            "{} batches cannot host {events} validation events",
            batches.len()
        )));
    }
    let per_epoch = batches.len() / cfg.epochs;
    let mut next_event = 0;
    let event_after = |j: usize| -> usize {
        // last batch index (exclusive) before event j, evenly within each epoch
        let (epoch, within) = (j / cfg.validation_events, j % cfg.validation_events);
        epoch * per_epoch + ((within + 1) * per_epoch).div_ceil(cfg.validation_events)
    };
    let (mut steps, mut skipped) = (0, 0);
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut window_entropy = (0.0, 0usize);
    for (b, chunk) in batches.iter().enumerate() {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
        match rl_step(params, &mut opt, &batch, cfg, scorer, &mut rng)? {
            StepOutcome::Applied(s) => {
                steps += 1;
                window_entropy.0 += s.entropy;
                window_entropy.1 += 1;
                log.push(TrainEvent::Step {
                    stage: stage.clone(),
                    epoch: b / per_epoch.max(1),
                    step: steps,
                    loss: s.loss,
                    reward_sample: Some(s.reward_sample),
                    reward_baseline: Some(s.reward_baseline),
                    entropy: Some(s.entropy),
                })?;
            }
            StepOutcome::Skipped(reason) => {
                skipped += 1;
                log.push(TrainEvent::Skipped {
                    stage: stage.clone(),
                    step: steps,
                    reason,
                })?;
            }
        }
        while next_event < events && event_after(next_event) == b + 1 {
            let summary = validate_greedy(params, validation, scorer, cfg.max_new_tokens)?;
            let f1 = summary.aggregate.label_macro_f1.unwrap_or(0.0);
            let rollout_entropy = (window_entropy.1 > 0).then(|| window_entropy.0 / window_entropy.1 as f64);
            window_entropy = (0.0, 0);
            log.push(TrainEvent::Validation {
                stage: stage.clone(),
                index: next_event,
                step: steps,
                loss: None,
                label_macro_f1: Some(f1),
                er_f1: Some(summary.mean_er_f1()),
                rollout_entropy,
            })?;
            trace.push(f1);
            if best.as_ref().is_none_or(|(_, v, _)| f1 > *v) {
                best = Some((next_event, f1, params.tensors.clone()));
            }
            next_event += 1;
        }
    }
    check_skips(skipped, batches.len(), cfg)?;
    let (best_index, best_value, tensors) = best.expect("validation events ran");
    params.tensors = tensors;
    log.push(TrainEvent::Done {
        stage,
        steps,
        skipped,
        best_index,
        best_value,
    })?;
    Ok(RunSummary {
        steps,
        skipped,
        best_index,
        best_value,
        trace,
    })
}
