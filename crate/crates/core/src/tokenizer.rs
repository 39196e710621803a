//! Whole-word vocabulary, control tokens, and the two-section target layout
//! `[BOS] findings [SEP] impression [EOS]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::ConditionCatalog;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
/// Stands in for a missing findings section.
pub const NF: TokenId = 4;
/// Stands in for a missing impression section.
pub const NI: TokenId = 5;

pub const CONTROL_TOKENS: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[NF]", "[NI]"];

/// Longest assembled target, control tokens included.
pub const MAX_TARGET_LEN: usize = 512;

pub const VOCAB_FILE_HEADER: &str = "#eastlab-vocab v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("out-of-vocabulary token {0:?}")]
    OutOfVocabulary(String),
    #[error("{0} section is present but empty")]
    EmptySection(&'static str),
    #[error("control token {0:?} inside a section body")]
    ControlInBody(String),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("vocabulary file: {0}")]
    Io(String),
}

pub fn is_control(id: TokenId) -> bool {
    (id as usize) < CONTROL_TOKENS.len()
}

/// Bijection between words and ids. Id 0 is padding, ids 1..=5 are the
/// control tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Control tokens followed by `words` (deduplicated, order kept).
    pub fn new<I, S>(words: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Format(format!("invalid token {w:?}")));
            }
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len() as TokenId);
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    /// The closed vocabulary of everything the catalog's renderer emits.
    pub fn for_catalog(catalog: &ConditionCatalog) -> Self {
        Self::new(catalog.words()).expect("catalog words are valid tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TokenizerError::OutOfVocabulary(w.to_string())))
            .collect()
    }

    /// Ids to a single-space-joined string. Unknown ids render as `[UNK:n]`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.token(id) {
                Some(t) => out.push_str(t),
                None => {
                    let _ = write!(out, "[UNK:{id}]");
                }
            }
        }
        out
    }

    /// Header line, then one token per line; a token's id is its line index
    /// after the header.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(VOCAB_FILE_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self, TokenizerError> {
        let mut lines = s.lines();
        match lines.next() {
            Some(VOCAB_FILE_HEADER) => {}
            other => {
                return Err(TokenizerError::Format(format!(
                    "expected header {VOCAB_FILE_HEADER:?}, found {other:?}"
                )))
            }
        }
        let tokens: Vec<&str> = lines.collect();
        if tokens.len() < CONTROL_TOKENS.len() || tokens[..CONTROL_TOKENS.len()] != CONTROL_TOKENS {
            return Err(TokenizerError::Format("control tokens must occupy ids 0..=5".into()));
        }
        let vocab = Self::new(tokens[CONTROL_TOKENS.len()..].iter().copied())?;
        if vocab.len() != tokens.len() {
            return Err(TokenizerError::Format("duplicate token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string()).map_err(|e| TokenizerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let s = std::fs::read_to_string(path).map_err(|e| TokenizerError::Io(e.to_string()))?;
        Self::from_file_string(&s)
    }
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Which report section a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Findings,
    Impression,
}

/// A report as two optional token bodies; `None` is a missing section.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SectionedReport {
    pub findings: Option<Vec<TokenId>>,
    pub impression: Option<Vec<TokenId>>,
}

impl SectionedReport {
    pub fn from_texts(
        vocab: &Vocabulary,
        findings: Option<&str>,
        impression: Option<&str>,
    ) -> Result<Self, TokenizerError> {
        Ok(Self {
            findings: findings.map(|t| vocab.encode(t)).transpose()?,
            impression: impression.map(|t| vocab.encode(t)).transpose()?,
        })
    }

    pub fn section(&self, s: Section) -> Option<&[TokenId]> {
        match s {
            Section::Findings => self.findings.as_deref(),
            Section::Impression => self.impression.as_deref(),
        }
    }
}

/// Assembled decoder target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub ids: Vec<TokenId>,
    pub sections: Vec<Section>,
    /// Set when section bodies were cut to fit [`MAX_TARGET_LEN`].
    pub truncated: bool,
}

/// Section of each position: findings up to (not including) the first
/// `[SEP]`, impression from `[SEP]` on.
pub fn section_types(ids: &[TokenId]) -> Vec<Section> {
    let mut seen_sep = false;
    ids.iter()
        .map(|&id| {
            seen_sep |= id == SEP;
            if seen_sep {
                Section::Impression
            } else {
                Section::Findings
            }
        })
        .collect()
}

fn check_body(body: &[TokenId], name: &'static str, vocab: Option<&Vocabulary>) -> Result<(), TokenizerError> {
    if body.is_empty() {
        return Err(TokenizerError::EmptySection(name));
    }
    if let Some(&c) = body.iter().find(|&&id| is_control(id)) {
        let t = vocab
            .and_then(|v| v.token(c))
            .map(str::to_string)
            .unwrap_or_else(|| CONTROL_TOKENS[c as usize].to_string());
        return Err(TokenizerError::ControlInBody(t));
    }
    Ok(())
}

/// Lays out `[BOS] F [SEP] I [EOS]`, substituting `[NF]` / `[NI]` for
/// missing sections. Over-long reports lose impression tokens from the
/// right first, then findings tokens; each body keeps at least one token.
pub fn assemble_target(report: &SectionedReport) -> Result<TargetSequence, TokenizerError> {
    let mut findings = match &report.findings {
        Some(b) => {
            check_body(b, "findings", None)?;
            b.clone()
        }
        None => vec![NF],
    };
    let mut impression = match &report.impression {
        Some(b) => {
            check_body(b, "impression", None)?;
            b.clone()
        }
        None => vec![NI],
    };
    let mut truncated = false;
    let budget = MAX_TARGET_LEN - 3;
    if findings.len() + impression.len() > budget {
        truncated = true;
        let keep_imp = budget.saturating_sub(findings.len()).max(1);
        impression.truncate(keep_imp);
        let keep_find = budget - impression.len();
        findings.truncate(keep_find);
    }
    let mut ids = Vec::with_capacity(findings.len() + impression.len() + 3);
    ids.push(BOS);
    ids.extend_from_slice(&findings);
    ids.push(SEP);
    ids.extend_from_slice(&impression);
    ids.push(EOS);
    let sections = section_types(&ids);
    Ok(TargetSequence {
        ids,
        sections,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitReport {
    pub report: SectionedReport,
    /// False when the layout had to be repaired: missing `[BOS]`, `[SEP]` or
    /// `[EOS]`, stray control tokens, or an empty body.
    pub wellformed: bool,
}

/// Inverse of [`assemble_target`] that accepts arbitrary model output.
///
/// Missing `[SEP]`: everything is findings and impression is missing.
/// Missing `[EOS]`: the sequence end acts as `[EOS]`. Extra `[SEP]`s: the
/// first one governs. Stray control tokens are dropped from bodies.
pub fn split_sections(ids: &[TokenId]) -> SplitReport {
    let mut wellformed = true;
    let start = if ids.first() == Some(&BOS) {
        1
    } else {
        wellformed = false;
        0
    };
    let end = match ids[start..].iter().position(|&t| t == EOS) {
        Some(p) => start + p,
        None => {
            wellformed = false;
            ids.len()
        }
    };
    let body = &ids[start..end];
    let (f_raw, i_raw) = match body.iter().position(|&t| t == SEP) {
        Some(p) => (&body[..p], Some(&body[p + 1..])),
        None => {
            wellformed = false;
            (body, None)
        }
    };
    let mut clean = |raw: &[TokenId], marker: TokenId| -> Option<Vec<TokenId>> {
        if raw == [marker] {
            return None;
        }
        let kept: Vec<TokenId> = raw.iter().copied().filter(|&t| !is_control(t)).collect();
        if kept.len() != raw.len() || kept.is_empty() {
            wellformed = false;
        }
        (!kept.is_empty()).then_some(kept)
    };
    let findings = clean(f_raw, NF);
    let impression = i_raw.and_then(|r| clean(r, NI));
    SplitReport {
        report: SectionedReport { findings, impression },
        wellformed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::for_catalog(&ConditionCatalog::default())
    }

    #[test]
    fn control_tokens_take_lowest_ids() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[BOS]"), Some(BOS));
        assert_eq!(v.id("[EOS]"), Some(EOS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(v.id("[NF]"), Some(NF));
        assert_eq!(v.id("[NI]"), Some(NI));
        assert!(v.len() > CONTROL_TOKENS.len());
    }

    #[test]
    fn encode_by_lookup() {
        let v = vocab();
        assert_eq!(
            v.encode("cardiomegaly present").unwrap(),
            vec![v.id("cardiomegaly").unwrap(), v.id("present").unwrap()]
        );
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(
            v.encode("effusion banana"),
            Err(TokenizerError::OutOfVocabulary("banana".into()))
        );
    }

    #[test]
    fn decode_normalizes_whitespace() {
        let v = vocab();
        let s = "  there  is\tedema .\n";
        assert_eq!(v.decode(&v.encode(s).unwrap()), normalize(s));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab();
        let s = v.to_file_string();
        assert!(s.starts_with(VOCAB_FILE_HEADER));
        assert_eq!(s.lines().nth(1 + BOS as usize), Some("[BOS]"));
        assert_eq!(Vocabulary::from_file_string(&s).unwrap(), v);
        assert!(Vocabulary::from_file_string("[PAD]\n").is_err());
    }

    fn ids(v: &Vocabulary, s: &str) -> Vec<TokenId> {
        s.split_whitespace()
            .map(|w| match w {
                "f1" => 100,
                "f2" => 101,
                "i1" => 102,
                _ => v.id(w).unwrap(),
            })
            .collect()
    }

    #[test]
    fn assemble_layouts() {
        let v = vocab();
        let full = SectionedReport {
            findings: Some(vec![100, 101]),
            impression: Some(vec![102]),
        };
        assert_eq!(
            assemble_target(&full).unwrap().ids,
            ids(&v, "[BOS] f1 f2 [SEP] i1 [EOS]")
        );
        let no_f = SectionedReport {
            findings: None,
            impression: Some(vec![102]),
        };
        assert_eq!(
            assemble_target(&no_f).unwrap().ids,
            ids(&v, "[BOS] [NF] [SEP] i1 [EOS]")
        );
        let none = SectionedReport::default();
        let t = assemble_target(&none).unwrap();
        assert_eq!(t.ids, ids(&v, "[BOS] [NF] [SEP] [NI] [EOS]"));
        use Section::*;
        assert_eq!(t.sections, vec![Findings, Findings, Impression, Impression, Impression]);
    }

    #[test]
    fn assemble_rejects_empty_and_control_bodies() {
        let empty = SectionedReport {
            findings: Some(vec![]),
            impression: None,
        };
        assert_eq!(assemble_target(&empty), Err(TokenizerError::EmptySection("findings")));
        let ctrl = SectionedReport {
            findings: Some(vec![100, SEP]),
            impression: None,
        };
        assert!(matches!(assemble_target(&ctrl), Err(TokenizerError::ControlInBody(_))));
    }

    #[test]
    fn assemble_truncates_impression_first() {
        let r = SectionedReport {
            findings: Some(vec![100; 300]),
            impression: Some(vec![102; 300]),
        };
        let t = assemble_target(&r).unwrap();
        assert!(t.truncated);
        assert_eq!(t.ids.len(), MAX_TARGET_LEN);
        let back = split_sections(&t.ids).report;
        assert_eq!(back.findings.unwrap().len(), 300);
        assert_eq!(back.impression.unwrap().len(), MAX_TARGET_LEN - 303);

        let long_f = SectionedReport {
            findings: Some(vec![100; 600]),
            impression: Some(vec![102; 5]),
        };
        let t = assemble_target(&long_f).unwrap();
        assert_eq!(t.ids.len(), MAX_TARGET_LEN);
        let back = split_sections(&t.ids).report;
        assert_eq!(back.impression.unwrap().len(), 1);
    }

    #[test]
    fn split_examples() {
        let v = vocab();
        let s = split_sections(&ids(&v, "[BOS] f1 f2 [SEP] i1 [EOS]"));
        assert!(s.wellformed);
        assert_eq!(s.report.findings, Some(vec![100, 101]));
        assert_eq!(s.report.impression, Some(vec![102]));

        let s = split_sections(&ids(&v, "[BOS] [NF] [SEP] i1 [EOS]"));
        assert!(s.wellformed);
        assert_eq!(s.report.findings, None);
        assert_eq!(s.report.impression, Some(vec![102]));

        let s = split_sections(&ids(&v, "[BOS] f1 f2 [EOS]"));
        assert!(!s.wellformed);
        assert_eq!(s.report.findings, Some(vec![100, 101]));
        assert_eq!(s.report.impression, None);
    }

    #[test]
    fn split_repairs_malformed_output() {
        let v = vocab();
        // no EOS: sequence end closes the impression
        let s = split_sections(&ids(&v, "[BOS] f1 [SEP] i1"));
        assert!(!s.wellformed);
        assert_eq!(s.report.impression, Some(vec![102]));
        // second SEP is dropped from the impression body
        let s = split_sections(&ids(&v, "[BOS] f1 [SEP] i1 [SEP] i1 [EOS]"));
        assert!(!s.wellformed);
        assert_eq!(s.report.impression, Some(vec![102, 102]));
        // empty input
        let s = split_sections(&[]);
        assert!(!s.wellformed);
        assert_eq!(s.report, SectionedReport::default());
        // tokens after EOS are ignored
        let s = split_sections(&ids(&v, "[BOS] f1 [SEP] [NI] [EOS] i1"));
        assert!(s.wellformed);
        assert_eq!(s.report.impression, None);
    }
}
