//! Deterministic synthetic studies and their on-disk format.

pub mod catalog;
pub mod generate;
pub mod io;

pub use catalog::{Attribute, ConditionCatalog, Finding, Label, LOCATIONS};
pub use generate::{
    generate_study, ConfigError, CorpusSplit, GenConfig, ImageEncoder, SplitKind, StudyGenerator, StudyRecord,
    GENERATOR_VERSION,
};
pub use io::{read_corpus, read_split, write_corpus, write_split, CorpusIoError, SCHEMA_VERSION};
