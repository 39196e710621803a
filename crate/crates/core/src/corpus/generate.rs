use rand::distr::weighted::WeightedIndex;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalog::{Attribute, ConditionCatalog, Finding, Label, LOCATIONS};

/// Bumped whenever the same config would produce different studies.
pub const GENERATOR_VERSION: u32 = 1;

/// Relative weights of study image counts 1..=8; truncated and renormalized
/// when `max_images` is smaller.
pub const IMAGE_COUNT_WEIGHTS: [f64; 8] = [0.35, 0.35, 0.15, 0.03, 0.03, 0.03, 0.03, 0.03];

/// Seed of the fixed latent-to-patch map; independent of the corpus seed so
/// that every split shares one imaging "physics".
const ENCODING_SEED: u64 = 0x5eed_1a7e_f00d;
const ENCODING_SCALE: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} = {value} is outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("p_nf + p_ni = {0} exceeds 1; both sections can never be missing together")]
    MissingRatesTooHigh(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub num_conditions: usize,
    pub p_mention: f64,
    pub noise_sigma: f64,
    /// Patches per grid side.
    pub patch_grid: usize,
    /// Features per patch.
    pub patch_dim: usize,
    pub p_nf: f64,
    pub p_ni: f64,
    pub max_images: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_conditions: 12,
            p_mention: 0.35,
            noise_sigma: 0.1,
            patch_grid: 4,
            patch_dim: 16,
            p_nf: 0.1,
            p_ni: 0.15,
            max_images: 8,
            train_size: 20_000,
            validation_size: 2_000,
            test_size: 2_000,
        }
    }
}

fn check_range(field: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<(), ConfigError> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange { field, value, range })
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let max_c = ConditionCatalog::MAX_CONDITIONS as f64;
        check_range("num_conditions", self.num_conditions as f64, 2.0, max_c, "[2, 12]")?;
        check_range("p_mention", self.p_mention, 0.0, 1.0, "[0, 1]")?;
        check_range("p_nf", self.p_nf, 0.0, 1.0, "[0, 1]")?;
        check_range("p_ni", self.p_ni, 0.0, 1.0, "[0, 1]")?;
        check_range("noise_sigma", self.noise_sigma, 0.0, f64::MAX, "[0, inf)")?;
        check_range("patch_grid", self.patch_grid as f64, 1.0, 64.0, "[1, 64]")?;
        check_range("patch_dim", self.patch_dim as f64, 1.0, 4096.0, "[1, 4096]")?;
        check_range("max_images", self.max_images as f64, 1.0, 8.0, "[1, 8]")?;
        if self.p_nf + self.p_ni > 1.0 {
            return Err(ConfigError::MissingRatesTooHigh(self.p_nf + self.p_ni));
        }
        Ok(())
    }

    pub fn catalog(&self) -> ConditionCatalog {
        ConditionCatalog::with_conditions(self.num_conditions).expect("validated condition count")
    }

    pub fn patches_per_image(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Floats per image grid.
    pub fn image_len(&self) -> usize {
        self.patches_per_image() * self.patch_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRecord {
    pub study_id: String,
    /// K grids, each `patch_grid² × patch_dim` floats, patch-major.
    pub images: Vec<Vec<f32>>,
    pub findings_text: Option<String>,
    pub impression_text: Option<String>,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<StudyRecord>,
    pub validation: Vec<StudyRecord>,
    pub test: Vec<StudyRecord>,
    pub seed: u64,
    pub generator_version: u32,
}

impl CorpusSplit {
    pub fn get(&self, kind: SplitKind) -> &[StudyRecord] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }
}

/// Fixed linear map from the latent label code to patch features.
///
/// Latent layout per condition: three attribute indicators followed by six
/// location indicators; unmentioned conditions are all zero.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    latent_dim: usize,
    out_dim: usize,
    /// `[out_dim, latent_dim]`, row-major.
    weights: Vec<f64>,
}

pub const LATENT_PER_CONDITION: usize = 3 + LOCATIONS.len();

impl ImageEncoder {
    pub fn new(num_conditions: usize, image_len: usize) -> Self {
        let latent_dim = num_conditions * LATENT_PER_CONDITION;
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODING_SEED);
        let weights = (0..image_len * latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * ENCODING_SCALE)
            .collect();
        Self {
            latent_dim,
            out_dim: image_len,
            weights,
        }
    }

    pub fn latent(&self, findings: &[Finding]) -> Vec<f64> {
        let mut z = vec![0.0; self.latent_dim];
        for f in findings {
            let base = f.condition * LATENT_PER_CONDITION;
            z[base + f.attribute.index()] = 1.0;
            if let Some(l) = f.location {
                z[base + 3 + l] = 1.0;
            }
        }
        z
    }

    pub fn encode(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.latent_dim)
            .map(|row| row.iter().zip(z).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Stateless per-study generator; each study draws from its own
/// `(seed, split, index)` ChaCha stream, so studies can be produced in any
/// order or in parallel.
#[derive(Debug, Clone)]
pub struct StudyGenerator {
    config: GenConfig,
    catalog: ConditionCatalog,
    encoder: ImageEncoder,
    image_counts: WeightedIndex<f64>,
}

impl StudyGenerator {
    pub fn new(config: GenConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let catalog = config.catalog();
        let encoder = ImageEncoder::new(config.num_conditions, config.image_len());
        let image_counts = WeightedIndex::new(&IMAGE_COUNT_WEIGHTS[..config.max_images]).expect("positive weights");
        Ok(Self {
            config,
            catalog,
            encoder,
            image_counts,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn catalog(&self) -> &ConditionCatalog {
        &self.catalog
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn stream(&self, split: SplitKind, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((split as u64) << 48) | index);
        rng
    }

    pub fn study(&self, split: SplitKind, index: u64) -> StudyRecord {
        let mut rng = self.stream(split, index);
        let id = format!("{}-{:06}", split.name(), index);
        generate_study(&mut rng, self, id)
    }

    pub fn split(&self, kind: SplitKind, n: usize) -> Vec<StudyRecord> {
        (0..n as u64).map(|i| self.study(kind, i)).collect()
    }

    pub fn corpus(&self) -> CorpusSplit {
        CorpusSplit {
            train: self.split(SplitKind::Train, self.config.train_size),
            validation: self.split(SplitKind::Validation, self.config.validation_size),
            test: self.split(SplitKind::Test, self.config.test_size),
            seed: self.config.seed,
            generator_version: GENERATOR_VERSION,
        }
    }
}

/// Draws one study: labels, then text, then missing sections, then images.
pub fn generate_study<R: Rng + ?Sized>(rng: &mut R, gen: &StudyGenerator, study_id: String) -> StudyRecord {
    let cfg = &gen.config;
    let cat = &gen.catalog;
    let mut findings: Vec<(Finding, usize)> = Vec::new();
    let mut labels = vec![Label::Unmentioned; cat.len()];
    for c in 0..cat.len() {
        if !rng.random_bool(cfg.p_mention) {
            continue;
        }
        let attribute = Attribute::ALL[rng.random_range(0..Attribute::ALL.len())];
        let locs = cat.location_choices(c, attribute);
        let location = (!locs.is_empty()).then(|| locs[rng.random_range(0..locs.len())]);
        let variant = rng.random_range(0..ConditionCatalog::findings_templates(attribute).len());
        labels[c] = attribute.into();
        findings.push((
            Finding {
                condition: c,
                attribute,
                location,
            },
            variant,
        ));
    }
    let plain: Vec<Finding> = findings.iter().map(|(f, _)| *f).collect();
    let mut findings_text = Some(cat.render_findings(&findings));
    let mut impression_text = Some(cat.render_impression(&plain));
    let u: f64 = rng.random();
    if u < cfg.p_nf {
        findings_text = None;
    } else if u < cfg.p_nf + cfg.p_ni {
        impression_text = None;
    }

    let k = rng.sample(&gen.image_counts) + 1;
    let clean = gen.encoder.encode(&gen.encoder.latent(&plain));
    let images = (0..k)
        .map(|_| {
            clean
                .iter()
                .map(|&x| (x + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect();
    StudyRecord {
        study_id,
        images,
        findings_text,
        impression_text,
        labels,
    }
}
