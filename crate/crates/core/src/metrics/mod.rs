//! Grammar-based entity/relation extraction, the ER-F1 reward, label F1,
//! BLEU-4 and ROUGE-L, and metric report files.

pub mod extract;
pub mod report;
pub mod score;

pub use extract::{extract_graph, Category, Entity, EntityGraph, Extractor, Relation, RelationType, ReportGraphs};
pub use report::{write_csv, write_jsonl, EvalSummary, Reference, Scored, Scorer, SectionMetrics, SectionScores};
pub use score::{
    bleu4, er_f1, er_matches, label_macro_f1, lcs_len, present_counts, report_reward, rouge_l, section_er_f1,
    BinaryCounts, MetricError, BLEU_EPSILON,
};
