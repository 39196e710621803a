//! Shared fixtures for the benchmarks.

use eastlab::corpus::{GenConfig, SplitKind, StudyGenerator};
use eastlab::metrics::{Extractor, Scorer};
use eastlab::model::{ModelConfig, ModelParams};
use eastlab::tokenizer::Vocabulary;
use eastlab::training::{prepare, Example};

pub struct Fixture {
    pub scorer: Scorer,
    pub params: ModelParams<f32>,
    pub examples: Vec<Example>,
}

/// Untrained desk model plus `n` training examples from the default corpus.
pub fn desk_fixture(n: usize) -> Fixture {
    let gen = StudyGenerator::new(GenConfig::default()).expect("default config is valid");
    let vocab = Vocabulary::for_catalog(gen.catalog());
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.encoder.patches = gen.config().patches_per_image();
    cfg.encoder.patch_dim = gen.config().patch_dim;
    let params = ModelParams::init(&cfg, 0).expect("desk preset is valid");
    let scorer = Scorer::new(vocab, Extractor::new(gen.catalog()));
    let examples = prepare(&gen.split(SplitKind::Train, n), &scorer).expect("generated studies tokenize");
    Fixture {
        scorer,
        params,
        examples,
    }
}
