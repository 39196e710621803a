//! JSON-lines corpus files.
//!
//! A corpus directory holds `train.jsonl`, `validation.jsonl` and
//! `test.jsonl`. Each file starts with a header object, followed by one
//! study object per line. Every line carries `schema_version`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalog::Label;
use super::generate::{CorpusSplit, SplitKind, StudyRecord};

pub const SCHEMA_VERSION: u32 = 1;
const FORMAT_TAG: &str = "eastlab-corpus";

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{path}: line {line}: schema_version {found}, expected {expected}")]
    SchemaVersion {
        path: PathBuf,
        line: usize,
        found: u32,
        expected: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitHeader {
    pub schema_version: u32,
    pub format: String,
    pub split: SplitKind,
    pub seed: u64,
    pub generator_version: u32,
    pub count: usize,
}

#[derive(Serialize)]
struct StudyLineRef<'a> {
    schema_version: u32,
    study_id: &'a str,
    images: &'a [Vec<f32>],
    findings_text: &'a Option<String>,
    impression_text: &'a Option<String>,
    labels: &'a [Label],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyLine {
    #[allow(dead_code)]
    schema_version: u32,
    study_id: String,
    images: Vec<Vec<f32>>,
    findings_text: Option<String>,
    impression_text: Option<String>,
    labels: Vec<Label>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

pub fn split_path(dir: &Path, kind: SplitKind) -> PathBuf {
    dir.join(format!("{}.jsonl", kind.name()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusIoError + '_ {
    move |source| CorpusIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_split(
    path: &Path,
    kind: SplitKind,
    seed: u64,
    generator_version: u32,
    studies: &[StudyRecord],
) -> Result<(), CorpusIoError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let header = SplitHeader {
        schema_version: SCHEMA_VERSION,
        format: FORMAT_TAG.to_string(),
        split: kind,
        seed,
        generator_version,
        count: studies.len(),
    };
    let mut put = |s: String| -> Result<(), CorpusIoError> {
        w.write_all(s.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))
    };
    put(serde_json::to_string(&header).expect("header serializes"))?;
    for s in studies {
        let line = StudyLineRef {
            schema_version: SCHEMA_VERSION,
            study_id: &s.study_id,
            images: &s.images,
            findings_text: &s.findings_text,
            impression_text: &s.impression_text,
            labels: &s.labels,
        };
        put(serde_json::to_string(&line).expect("study serializes"))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, line_no: usize, text: &str) -> Result<T, CorpusIoError> {
    let malformed = |msg: String| CorpusIoError::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(CorpusIoError::SchemaVersion {
                path: path.to_path_buf(),
                line: line_no,
                found,
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(malformed("missing schema_version".into())),
    }
    serde_json::from_str(text).map_err(|e| malformed(e.to_string()))
}

pub fn read_split(path: &Path) -> Result<(SplitHeader, Vec<StudyRecord>), CorpusIoError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut lines = r.lines().enumerate();
    let header: SplitHeader = match lines.next() {
        Some((_, l)) => parse_line(path, 1, &l.map_err(io_err(path))?)?,
        None => {
            return Err(CorpusIoError::Malformed {
                path: path.to_path_buf(),
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    if header.format != FORMAT_TAG {
        return Err(CorpusIoError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("format {:?}, expected {FORMAT_TAG:?}", header.format),
        });
    }
    let mut studies = Vec::with_capacity(header.count);
    for (i, l) in lines {
        let l = l.map_err(io_err(path))?;
        let s: StudyLine = parse_line(path, i + 1, &l)?;
        studies.push(StudyRecord {
            study_id: s.study_id,
            images: s.images,
            findings_text: s.findings_text,
            impression_text: s.impression_text,
            labels: s.labels,
        });
    }
    if studies.len() != header.count {
        return Err(CorpusIoError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("header count {} but {} studies", header.count, studies.len()),
        });
    }
    Ok((header, studies))
}

/// Writes the three split files into `dir`, creating it if needed.
pub fn write_corpus(corpus: &CorpusSplit, dir: &Path) -> Result<(), CorpusIoError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for kind in SplitKind::ALL {
        write_split(
            &split_path(dir, kind),
            kind,
            corpus.seed,
            corpus.generator_version,
            corpus.get(kind),
        )?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<CorpusSplit, CorpusIoError> {
    let mut parts = Vec::new();
    for kind in SplitKind::ALL {
        let path = split_path(dir, kind);
        let (h, s) = read_split(&path)?;
        if h.split != kind {
            return Err(CorpusIoError::Malformed {
                path,
                line: 1,
                msg: format!("header names split {:?}", h.split),
            });
        }
        parts.push((h, s));
    }
    let (seed, version) = (parts[0].0.seed, parts[0].0.generator_version);
    if parts
        .iter()
        .any(|(h, _)| h.seed != seed || h.generator_version != version)
    {
        return Err(CorpusIoError::Malformed {
            path: dir.to_path_buf(),
            line: 1,
            msg: "split headers disagree on seed or generator version".into(),
        });
    }
    let mut it = parts.into_iter().map(|(_, s)| s);
    Ok(CorpusSplit {
        train: it.next().unwrap(),
        validation: it.next().unwrap(),
        test: it.next().unwrap(),
        seed,
        generator_version: version,
    })
}
