use std::io::Write;

use serde::Serialize;

use super::extract::{Extractor, ReportGraphs};
use super::score::{bleu4, label_macro_f1, report_reward, rouge_l, section_er_f1, MetricError};
use crate::corpus::{Label, StudyRecord};
use crate::tokenizer::{split_sections, Section, SectionedReport, TokenId, TokenizerError, Vocabulary};

/// Text metrics of one section; `None` when the reference section is
/// missing (not applicable, never zero-filled).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SectionMetrics {
    pub er_f1: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionScores {
    pub study_id: String,
    pub findings: SectionMetrics,
    pub impression: SectionMetrics,
    /// Batch-level only; `None` on per-study rows.
    pub label_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub studies: usize,
    pub aggregate: SectionScores,
    pub rows: Vec<SectionScores>,
}

pub const AGGREGATE_ID: &str = "__aggregate__";

/// A reference study in token and graph form, reusable across many
/// hypotheses.
#[derive(Debug, Clone)]
pub struct Reference {
    pub study_id: String,
    pub report: SectionedReport,
    pub graphs: ReportGraphs,
    pub labels: Vec<Label>,
}

/// Scores generated id sequences against reference studies.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub vocab: Vocabulary,
    pub extractor: Extractor,
}

pub struct Scored {
    pub scores: SectionScores,
    pub labels: Vec<Label>,
    pub wellformed: bool,
}

fn section_metrics(hyp: Option<&[TokenId]>, reference: Option<&[TokenId]>, er: Option<f64>) -> SectionMetrics {
    match reference {
        None => SectionMetrics::default(),
        Some(r) => {
            let h = hyp.unwrap_or(&[]);
            SectionMetrics {
                er_f1: er,
                bleu4: Some(bleu4(h, r)),
                rouge_l: Some(rouge_l(h, r)),
            }
        }
    }
}

impl Scorer {
    pub fn new(vocab: Vocabulary, extractor: Extractor) -> Self {
        Self { vocab, extractor }
    }

    pub fn reference(&self, study: &StudyRecord) -> Result<Reference, TokenizerError> {
        let report = SectionedReport::from_texts(
            &self.vocab,
            study.findings_text.as_deref(),
            study.impression_text.as_deref(),
        )?;
        let graphs = self.extractor.report_graphs(&report, &self.vocab);
        Ok(Reference {
            study_id: study.study_id.clone(),
            report,
            graphs,
            labels: study.labels.clone(),
        })
    }

    /// Reward of a generated sequence: mean section ER-F1.
    pub fn reward(&self, hyp_ids: &[TokenId], reference: &Reference) -> Result<f64, MetricError> {
        let hyp = split_sections(hyp_ids).report;
        report_reward(&self.extractor.report_graphs(&hyp, &self.vocab), &reference.graphs)
    }

    pub fn score(&self, hyp_ids: &[TokenId], reference: &Reference) -> Scored {
        let split = split_sections(hyp_ids);
        let graphs = self.extractor.report_graphs(&split.report, &self.vocab);
        let mut per = [SectionMetrics::default(); 2];
        for (slot, s) in per.iter_mut().zip([Section::Findings, Section::Impression]) {
            let (hg, rg) = match s {
                Section::Findings => (graphs.findings.as_ref(), reference.graphs.findings.as_ref()),
                Section::Impression => (graphs.impression.as_ref(), reference.graphs.impression.as_ref()),
            };
            *slot = section_metrics(
                split.report.section(s),
                reference.report.section(s),
                section_er_f1(hg, rg),
            );
        }
        Scored {
            scores: SectionScores {
                study_id: reference.study_id.clone(),
                findings: per[0],
                impression: per[1],
                label_macro_f1: None,
            },
            labels: self.extractor.report_labels(&graphs),
            wellformed: split.wellformed,
        }
    }

    /// Scores a batch and appends the aggregate: per-section means over
    /// applicable studies and batch macro label F1.
    pub fn evaluate(&self, hyps: &[Vec<TokenId>], references: &[Reference]) -> Result<EvalSummary, MetricError> {
        if hyps.len() != references.len() {
            return Err(MetricError::LengthMismatch(hyps.len(), references.len()));
        }
        let scored: Vec<Scored> = hyps.iter().zip(references).map(|(h, r)| self.score(h, r)).collect();
        let hyp_labels: Vec<Vec<Label>> = scored.iter().map(|s| s.labels.clone()).collect();
        let ref_labels: Vec<Vec<Label>> = references.iter().map(|r| r.labels.clone()).collect();
        let macro_f1 = label_macro_f1(&hyp_labels, &ref_labels)?;
        let rows: Vec<SectionScores> = scored.into_iter().map(|s| s.scores).collect();
        let mean = |get: &dyn Fn(&SectionScores) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = rows.iter().filter_map(get).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let aggregate = SectionScores {
            study_id: AGGREGATE_ID.to_string(),
            findings: SectionMetrics {
                er_f1: mean(&|r| r.findings.er_f1),
                bleu4: mean(&|r| r.findings.bleu4),
                rouge_l: mean(&|r| r.findings.rouge_l),
            },
            impression: SectionMetrics {
                er_f1: mean(&|r| r.impression.er_f1),
                bleu4: mean(&|r| r.impression.bleu4),
                rouge_l: mean(&|r| r.impression.rouge_l),
            },
            label_macro_f1: Some(macro_f1),
        };
        Ok(EvalSummary {
            studies: rows.len(),
            aggregate,
            rows,
        })
    }
}

impl EvalSummary {
    /// Mean of the two sections' aggregate ER-F1 over whichever apply.
    pub fn mean_er_f1(&self) -> f64 {
        let v: Vec<f64> = [self.aggregate.findings.er_f1, self.aggregate.impression.er_f1]
            .into_iter()
            .flatten()
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

pub const CSV_HEADER: &str = "study_id,findings_er_f1,findings_bleu4,findings_rouge_l,\
impression_er_f1,impression_bleu4,impression_rouge_l,label_macro_f1";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_else(|| "NA".into())
}

/// One row per study plus the aggregate row. Not-applicable cells are `NA`.
pub fn write_csv<W: Write>(summary: &EvalSummary, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in summary.rows.iter().chain(std::iter::once(&summary.aggregate)) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.study_id,
            cell(r.findings.er_f1),
            cell(r.findings.bleu4),
            cell(r.findings.rouge_l),
            cell(r.impression.er_f1),
            cell(r.impression.bleu4),
            cell(r.impression.rouge_l),
            cell(r.label_macro_f1)
        )?;
    }
    Ok(())
}

/// Same rows as [`write_csv`]; not-applicable values are `null`.
pub fn write_jsonl<W: Write>(summary: &EvalSummary, mut w: W) -> std::io::Result<()> {
    for r in summary.rows.iter().chain(std::iter::once(&summary.aggregate)) {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GenConfig, SplitKind, StudyGenerator};
    use crate::tokenizer::assemble_target;

    fn setup() -> (Scorer, Vec<StudyRecord>) {
        let gen = StudyGenerator::new(GenConfig::default()).unwrap();
        let scorer = Scorer::new(Vocabulary::for_catalog(gen.catalog()), Extractor::new(gen.catalog()));
        (scorer, gen.split(SplitKind::Validation, 60))
    }

    #[test]
    fn references_score_perfectly_against_themselves() {
        let (scorer, studies) = setup();
        let refs: Vec<Reference> = studies.iter().map(|s| scorer.reference(s).unwrap()).collect();
        let hyps: Vec<Vec<TokenId>> = refs.iter().map(|r| assemble_target(&r.report).unwrap().ids).collect();
        let sum = scorer.evaluate(&hyps, &refs).unwrap();
        assert_eq!(sum.aggregate.findings.er_f1, Some(1.0));
        assert_eq!(sum.aggregate.impression.er_f1, Some(1.0));
        assert!((sum.aggregate.findings.bleu4.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sum.aggregate.label_macro_f1, Some(1.0));
        for (h, r) in hyps.iter().zip(&refs) {
            assert_eq!(scorer.reward(h, r), Ok(1.0));
        }
    }

    #[test]
    fn missing_reference_sections_are_not_applicable() {
        let (scorer, studies) = setup();
        let s = studies
            .iter()
            .find(|s| s.impression_text.is_none())
            .expect("some impression missing");
        let r = scorer.reference(s).unwrap();
        let out = scorer.score(&[], &r);
        assert_eq!(out.scores.impression, SectionMetrics::default());
        assert!(out.scores.findings.er_f1.is_some());
        assert!(!out.wellformed);
    }

    #[test]
    fn writers_emit_rows_and_aggregate() {
        let (scorer, studies) = setup();
        let refs: Vec<Reference> = studies[..3].iter().map(|s| scorer.reference(s).unwrap()).collect();
        let hyps = vec![vec![]; 3];
        let sum = scorer.evaluate(&hyps, &refs).unwrap();
        let mut csv = Vec::new();
        write_csv(&sum, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().last().unwrap().starts_with(AGGREGATE_ID));
        let mut js = Vec::new();
        write_jsonl(&sum, &mut js).unwrap();
        let js = String::from_utf8(js).unwrap();
        assert_eq!(js.lines().count(), 4);
        let v: serde_json::Value = serde_json::from_str(js.lines().next().unwrap()).unwrap();
        assert!(v["label_macro_f1"].is_null());
    }
}
