use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

use super::extract::{Entity, EntityGraph, RelationType, ReportGraphs};
use crate::corpus::Label;

/// Zero-count n-gram precisions are floored at this value.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("both reference sections are missing")]
    NoReference,
}

fn counts<T: Hash + Eq, I: IntoIterator<Item = T>>(items: I) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn overlap<T: Hash + Eq>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
}

type RelationKey<'a> = (&'a Entity, &'a Entity, RelationType);

fn relation_keys(g: &EntityGraph) -> impl Iterator<Item = RelationKey<'_>> {
    g.relations
        .iter()
        .map(|r| (&g.entities[r.head], &g.entities[r.tail], r.kind))
}

/// Matched entities plus matched relations, multiset semantics.
pub fn er_matches(hyp: &EntityGraph, reference: &EntityGraph) -> usize {
    let ents = overlap(&counts(hyp.entities.iter()), &counts(reference.entities.iter()));
    let rels = overlap(&counts(relation_keys(hyp)), &counts(relation_keys(reference)));
    ents + rels
}

/// Micro F1 over entities and relations pooled together. Two empty graphs
/// score 1, exactly one empty graph scores 0.
pub fn er_f1(hyp: &EntityGraph, reference: &EntityGraph) -> f64 {
    match (hyp.size(), reference.size()) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let m = er_matches(hyp, reference) as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / hyp.size() as f64;
    let r = m / reference.size() as f64;
    2.0 * p * r / (p + r)
}

/// ER-F1 of one section; `None` when the reference section is missing.
/// A missing hypothesis section counts as an empty graph.
pub fn section_er_f1(hyp: Option<&EntityGraph>, reference: Option<&EntityGraph>) -> Option<f64> {
    let empty = EntityGraph::default();
    reference.map(|r| er_f1(hyp.unwrap_or(&empty), r))
}

/// Mean ER-F1 over the sections whose reference is present.
pub fn report_reward(hyp: &ReportGraphs, reference: &ReportGraphs) -> Result<f64, MetricError> {
    let scores: Vec<f64> = [
        section_er_f1(hyp.findings.as_ref(), reference.findings.as_ref()),
        section_er_f1(hyp.impression.as_ref(), reference.impression.as_ref()),
    ]
    .into_iter()
    .flatten()
    .collect();
    if scores.is_empty() {
        return Err(MetricError::NoReference);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn ngrams<T: Hash + Eq>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    counts(xs.windows(n))
}

/// Sentence BLEU-4: geometric mean of clipped n-gram precisions for n = 1..4
/// times the brevity penalty `exp(min(0, 1 − |ref|/|hyp|))`. A precision
/// with no matches becomes `ε / max(1, total)`.
pub fn bleu4<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngrams(hyp, n);
        let total = hyp.len().saturating_sub(n - 1);
        let matched = overlap(&h, &ngrams(reference, n));
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (num / total.max(1) as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp();
    bp * (log_sum / 4.0).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    /// F1, with 0 when the class never occurs on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Per-condition counts for the positive class "present".
pub fn present_counts(hyp: &[Vec<Label>], reference: &[Vec<Label>]) -> Result<Vec<BinaryCounts>, MetricError> {
    if hyp.len() != reference.len() {
        return Err(MetricError::LengthMismatch(hyp.len(), reference.len()));
    }
    let c = reference.first().map_or(0, Vec::len);
    let mut out = vec![BinaryCounts::default(); c];
    for (h, r) in hyp.iter().zip(reference) {
        if h.len() != c || r.len() != c {
            return Err(MetricError::LengthMismatch(h.len(), r.len()));
        }
        for ((k, &hl), &rl) in out.iter_mut().zip(h).zip(r) {
            match (hl == Label::Present, rl == Label::Present) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(out)
}

/// Macro average over conditions of binary F1 on "present", pooled over a
/// batch of studies.
pub fn label_macro_f1(hyp: &[Vec<Label>], reference: &[Vec<Label>]) -> Result<f64, MetricError> {
    let per = present_counts(hyp, reference)?;
    if per.is_empty() {
        return Ok(0.0);
    }
    Ok(per.iter().map(BinaryCounts::f1).sum::<f64>() / per.len() as f64)
}
