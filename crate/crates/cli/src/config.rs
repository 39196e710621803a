//! Layered configuration: built-in defaults, then the config file, then
//! command-line flags. Layers are merged as TOML tables and the result is
//! deserialized once, so unknown keys and bad types are reported by name.

use std::path::Path;

use eastlab::corpus::GenConfig;
use eastlab::model::ModelConfig;
use eastlab::training::{Stage, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

const SECTIONS: [&str; 3] = ["corpus", "model", "train"];

/// The `[corpus]`, `[model]` and `[train]` tables of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub corpus: Table,
    pub model: Table,
    pub train: Table,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config file: {e}")))?;
        let mut out = Self::default();
        for (key, value) in root {
            let Value::Table(t) = value else {
                return Err(CliError::Usage(format!(
                    "config file: top-level key `{key}` must be a table"
                )));
            };
            match key.as_str() {
                "corpus" => out.corpus = t,
                "model" => out.model = t,
                "train" => out.train = t,
                _ => {
                    return Err(CliError::Usage(format!(
                        "config file: unknown table `{key}`, expected one of {SECTIONS:?}"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

/// Recursively overwrites `base` with `over`.
pub fn overlay(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => overlay(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config serializes to a table")
}

fn resolve<T: Serialize + DeserializeOwned>(section: &str, defaults: &T, layers: &[&Table]) -> Result<T, CliError> {
    let mut merged = to_table(defaults);
    for layer in layers {
        overlay(&mut merged, layer);
    }
    Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("[{section}]: {}", e.message())))
}

/// Flag overrides collected as a TOML table.
#[derive(Debug, Default)]
pub struct Flags(pub Table);

impl Flags {
    pub fn set<V: Into<Value>>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }
}

pub fn resolve_gen(file: &ConfigFile, flags: &Flags) -> Result<GenConfig, CliError> {
    let cfg: GenConfig = resolve("corpus", &GenConfig::default(), &[&file.corpus, &flags.0])?;
    cfg.validate().map_err(|e| CliError::Usage(format!("[corpus]: {e}")))?;
    Ok(cfg)
}

pub fn resolve_train(stage: Stage, file: &ConfigFile, flags: &Flags) -> Result<TrainConfig, CliError> {
    let mut fixed = Table::new();
    fixed.insert("stage".into(), Value::String(stage.name().into()));
    let cfg: TrainConfig = resolve(
        "train",
        &TrainConfig::for_stage(stage),
        &[&file.train, &flags.0, &fixed],
    )?;
    cfg.validate().map_err(|e| CliError::Usage(format!("[train]: {e}")))?;
    Ok(cfg)
}

/// Named model preset with the corpus-determined fields filled in.
pub fn preset(name: &str, vocab_size: usize, gen: &GenConfig) -> Result<ModelConfig, CliError> {
    let mut cfg = match name {
        "desk" => ModelConfig::desk(vocab_size),
        "paper" => ModelConfig::paper(vocab_size),
        "tiny" => ModelConfig::tiny(vocab_size),
        other => {
            return Err(CliError::Usage(format!(
                "[model]: unknown preset `{other}`, expected desk, paper or tiny"
            )))
        }
    };
    cfg.encoder.patches = gen.patches_per_image();
    cfg.encoder.patch_dim = gen.patch_dim;
    Ok(cfg)
}

/// Model config from `[model]`: `preset` (default `desk`) plus field
/// overrides, then flags.
pub fn resolve_model(
    file: &ConfigFile,
    flags: &Flags,
    vocab_size: usize,
    gen: &GenConfig,
) -> Result<ModelConfig, CliError> {
    let mut table = file.model.clone();
    let mut flag_table = flags.0.clone();
    let name = match flag_table.remove("preset").or_else(|| table.remove("preset")) {
        None => "desk".to_string(),
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "[model]: preset must be a string, got {other}"
            )))
        }
    };
    table.remove("preset");
    let base = preset(&name, vocab_size, gen)?;
    let cfg: ModelConfig = resolve("model", &base, &[&table, &flag_table])?;
    cfg.validate().map_err(|e| CliError::Usage(format!("[model]: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_defaults_file_flags() {
        let file = ConfigFile::parse("[corpus]\nseed = 5\np_nf = 0.2\n").unwrap();
        let mut flags = Flags::default();
        flags.set("seed", Some(9i64));
        let g = resolve_gen(&file, &flags).unwrap();
        assert_eq!((g.seed, g.p_nf, g.p_ni), (9, 0.2, GenConfig::default().p_ni));
    }

    #[test]
    fn unknown_keys_are_named() {
        let file = ConfigFile::parse("[train]\nlearning_rate = 1.0\n").unwrap();
        let err = resolve_train(Stage::Tf, &file, &Flags::default()).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(ConfigFile::parse("[bogus]\nx = 1\n").is_err());
        let file = ConfigFile::parse("[model]\npreset = \"desk\"\nencoder = { widht = 3 }\n").unwrap();
        let err = resolve_model(&file, &Flags::default(), 41, &GenConfig::default()).unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn stage_flag_wins_and_model_overrides_apply() {
        let file = ConfigFile::parse("[train]\nstage = \"tf\"\nlr = 0.5\n[model]\nlayers = 3\n").unwrap();
        let t = resolve_train(Stage::East, &file, &Flags::default()).unwrap();
        assert_eq!((t.stage, t.lr, t.batch_size), (Stage::East, 0.5, 8));
        let m = resolve_model(&file, &Flags::default(), 41, &GenConfig::default()).unwrap();
        assert_eq!((m.layers, m.hidden, m.vocab_size), (3, 128, 41));
    }
}
