use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eastlab::corpus::{read_corpus, write_corpus, CorpusSplit, GenConfig, SplitKind, StudyGenerator, StudyRecord};
use eastlab::decoding::{beam_search, DecodeConstraints};
use eastlab::metrics::{write_csv, write_jsonl, Extractor, Reference, Scorer};
use eastlab::model::{load_checkpoint, save_checkpoint, select_images, Layout, ModelConfig, ModelParams, Session};
use eastlab::tokenizer::{split_sections, TokenId, Vocabulary};
use eastlab::training::{prepare, train_rl, train_tf, EventLog, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{resolve_gen, resolve_model, resolve_train, ConfigFile, Flags};
use crate::manifest::{corpus_hash, sha256_file, RunManifest};
use crate::{
    Cli, CliError, Command, EntropySignArg, EvaluateArgs, GenDataArgs, GenerateArgs, SectionArg, SplitArg, StageArg,
    TrainArgs,
};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_CONFIG_FILE: &str = "corpus.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a command prints on success.
pub type Outcome = String;

/// Runs a parsed command line. `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::Generate(a) => generate(a),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Run(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn as_int<T: TryInto<i64>>(v: Option<T>) -> Option<i64> {
    v.and_then(|x| x.try_into().ok())
}

fn gen_data(a: &GenDataArgs, argv: Vec<String>) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("seed", as_int(a.seed))
        .set("train_size", as_int(a.train_size))
        .set("validation_size", as_int(a.validation_size))
        .set("test_size", as_int(a.test_size));
    let gen = resolve_gen(&file, &flags)?;
    let corpus = StudyGenerator::new(gen.clone()).map_err(CliError::run)?.corpus();
    create_dir(&a.out)?;
    write_corpus(&corpus, &a.out).map_err(CliError::run)?;
    let vocab = Vocabulary::for_catalog(&gen.catalog());
    vocab.save(&a.out.join(VOCAB_FILE)).map_err(CliError::run)?;
    let gen_toml = toml::to_string(&gen).expect("config serializes");
    std::fs::write(a.out.join(CORPUS_CONFIG_FILE), gen_toml).map_err(io_err(&a.out))?;
    let mut m = RunManifest::new("gen-data", argv).with_config("corpus", &gen);
    m.seeds.insert("corpus".into(), gen.seed);
    m.corpus_hash = Some(corpus_hash(&a.out).map_err(io_err(&a.out))?);
    m.elapsed_seconds = start.elapsed().as_secs_f64();
    m.write(&a.out).map_err(io_err(&a.out))?;
    Ok(format!(
        "wrote {} train / {} validation / {} test studies to {}",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        a.out.display()
    ))
}

/// A corpus directory with its generator config and vocabulary.
pub struct LoadedCorpus {
    pub corpus: CorpusSplit,
    pub gen: GenConfig,
    pub vocab: Vocabulary,
    pub hash: String,
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus, CliError> {
    let cfg_path = dir.join(CORPUS_CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| CliError::Usage(format!("{} is not a corpus directory: {e}", dir.display())))?;
    let gen: GenConfig = toml::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", cfg_path.display())))?;
    let corpus = read_corpus(dir).map_err(CliError::run)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE)).map_err(CliError::run)?;
    let hash = corpus_hash(dir).map_err(io_err(dir))?;
    Ok(LoadedCorpus {
        corpus,
        gen,
        vocab,
        hash,
    })
}

fn load_params(path: &Path) -> Result<ModelParams<f32>, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

/// Rejects a checkpoint whose shapes differ from `expected`, showing both
/// parameter manifests.
fn check_compatible(ckpt: &ModelConfig, expected: &ModelConfig, what: &str) -> Result<(), CliError> {
    let (a, b) = (Layout::new(ckpt), Layout::new(expected));
    if a.specs != b.specs || ckpt != expected {
        return Err(CliError::Usage(format!(
            "checkpoint does not match {what}\n--- checkpoint ---\n{}\n--- {what} ---\n{}",
            a.manifest(),
            b.manifest()
        )));
    }
    Ok(())
}

fn check_corpus_fit(cfg: &ModelConfig, data: &LoadedCorpus) -> Result<(), CliError> {
    let mut expected = cfg.clone();
    expected.vocab_size = data.vocab.len();
    expected.encoder.patches = data.gen.patches_per_image();
    expected.encoder.patch_dim = data.gen.patch_dim;
    check_compatible(cfg, &expected, "the corpus vocabulary and image shape")
}

fn train(a: &TrainArgs, argv: Vec<String>) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let stage = match a.stage {
        StageArg::Tf => Stage::Tf,
        StageArg::Scst => Stage::Scst,
        StageArg::East => Stage::East,
    };
    if stage.is_rl() && a.init.is_none() {
        return Err(CliError::Usage(format!(
            "--stage {} requires --init <checkpoint>",
            stage.name()
        )));
    }
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut flags = Flags::default();
    flags
        .set("seed", as_int(a.seed))
        .set("lr", a.lr)
        .set("epochs", as_int(a.epochs))
        .set("batch_size", as_int(a.batch_size))
        .set("entropy_weight", a.entropy_weight)
        .set(
            "entropy_sign",
            a.entropy_sign.map(|s| match s {
                EntropySignArg::Bonus => "bonus",
                EntropySignArg::PaperLiteral => "paper-literal",
            }),
        )
        .set("top_k", as_int(a.top_k))
        .set("train_limit", as_int(a.train_limit))
        .set("validation_limit", as_int(a.validation_limit));
    let tc = resolve_train(stage, &file, &flags)?;
    let data = load_corpus(&a.corpus)?;
    let mut model_flags = Flags::default();
    model_flags.set("preset", a.preset.clone());
    let (mut params, init_hash) = match &a.init {
        Some(path) => {
            let p = load_params(path)?;
            if !file.model.is_empty() {
                let wanted = resolve_model(&file, &model_flags, data.vocab.len(), &data.gen)?;
                check_compatible(&p.config, &wanted, "the configured model")?;
            }
            check_corpus_fit(&p.config, &data)?;
            (p, Some(sha256_file(path).map_err(io_err(path))?))
        }
        None => {
            let cfg = resolve_model(&file, &model_flags, data.vocab.len(), &data.gen)?;
            (ModelParams::init(&cfg, tc.seed).map_err(CliError::run)?, None)
        }
    };
    let scorer = Scorer::new(data.vocab.clone(), Extractor::new(&data.gen.catalog()));
    let train_ex = prepare(&data.corpus.train, &scorer).map_err(CliError::run)?;
    let val_ex = prepare(&data.corpus.validation, &scorer).map_err(CliError::run)?;
    create_dir(&a.out)?;
    let events_path = a.out.join(EVENTS_FILE);
    let sink = File::create(&events_path).map_err(io_err(&events_path))?;
    let mut log = EventLog::to_writer(Box::new(BufWriter::new(sink)));
    let summary = if stage.is_rl() {
        train_rl(&mut params, &train_ex, &val_ex, &tc, &scorer, &mut log)
    } else {
        train_tf(&mut params, &train_ex, &val_ex, &tc, &mut log)
    }
    .map_err(CliError::run)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&params, &ckpt).map_err(CliError::run)?;
    data.vocab.save(&a.out.join(VOCAB_FILE)).map_err(CliError::run)?;
    let mut m = RunManifest::new("train", argv)
        .with_config("train", &tc)
        .with_config("model", &params.config)
        .with_config("corpus", &data.gen);
    m.seeds.insert("train".into(), tc.seed);
    m.seeds.insert("corpus".into(), data.gen.seed);
    m.corpus_hash = Some(data.hash.clone());
    if let Some(h) = init_hash {
        m.checkpoint_hashes.insert("init".into(), h);
    }
    m.checkpoint_hashes
        .insert("model".into(), sha256_file(&ckpt).map_err(io_err(&ckpt))?);
    m.elapsed_seconds = start.elapsed().as_secs_f64();
    m.write(&a.out).map_err(io_err(&a.out))?;
    let monitor = if stage.is_rl() {
        "label_macro_f1"
    } else {
        "validation loss"
    };
    Ok(format!(
        "{}: {} steps, {} skipped; best {monitor} {:.6} at validation {}; checkpoint {}",
        stage.name(),
        summary.steps,
        summary.skipped,
        summary.best_value,
        summary.best_index,
        ckpt.display()
    ))
}

/// Prompt images for inference: the first `max_images`, cast to f32.
fn inference_images<'s>(params: &ModelParams<f32>, study: &'s StudyRecord) -> Result<Vec<&'s [f32]>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = select_images(study.images.len(), params.config.max_images, false, &mut rng)
        .map_err(|e| CliError::Run(format!("study {}: field `images`: {e}", study.study_id)))?;
    Ok(idx.into_iter().map(|i| study.images[i].as_slice()).collect())
}

pub fn decode_study(
    params: &ModelParams<f32>,
    study: &StudyRecord,
    constraints: &DecodeConstraints,
    beam: usize,
) -> Result<Vec<TokenId>, CliError> {
    let images = inference_images(params, study)?;
    let session = Session::from_images(params, &images)
        .map_err(|e| CliError::Run(format!("study {}: field `images`: {e}", study.study_id)))?;
    Ok(beam_search(&session, constraints, beam).map_err(CliError::run)?.ids)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    split: &'a str,
    studies: usize,
    beam: usize,
    mean_er_f1: f64,
    aggregate: &'a eastlab::metrics::SectionScores,
}

fn evaluate(a: &EvaluateArgs, argv: Vec<String>) -> Result<Outcome, CliError> {
    let start = Instant::now();
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be positive".into()));
    }
    let params = load_params(&a.checkpoint)?;
    let data = load_corpus(&a.corpus)?;
    let file = ConfigFile::load(a.config.as_deref())?;
    if !file.model.is_empty() {
        let wanted = resolve_model(&file, &Flags::default(), data.vocab.len(), &data.gen)?;
        check_compatible(&params.config, &wanted, "the configured model")?;
    }
    check_corpus_fit(&params.config, &data)?;
    let kind = match a.split {
        SplitArg::Train => SplitKind::Train,
        SplitArg::Validation => SplitKind::Validation,
        SplitArg::Test => SplitKind::Test,
    };
    let studies = data.corpus.get(kind);
    let studies = &studies[..a.limit.unwrap_or(usize::MAX).min(studies.len())];
    if studies.is_empty() {
        return Err(CliError::Usage(format!("split {} is empty", kind.name())));
    }
    let constraints = section_constraints(SectionArg::Both, a.max_new_tokens, &params.config);
    constraints
        .validate(params.config.vocab_size)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let scorer = Scorer::new(data.vocab.clone(), Extractor::new(&data.gen.catalog()));
    let mut hyps = Vec::with_capacity(studies.len());
    let mut refs: Vec<Reference> = Vec::with_capacity(studies.len());
    for s in studies {
        hyps.push(decode_study(&params, s, &constraints, a.beam)?);
        refs.push(scorer.reference(s).map_err(CliError::run)?);
    }
    let summary = scorer.evaluate(&hyps, &refs).map_err(CliError::run)?;
    create_dir(&a.out)?;
    let csv = a.out.join("scores.csv");
    write_csv(&summary, BufWriter::new(File::create(&csv).map_err(io_err(&csv))?)).map_err(io_err(&csv))?;
    let jsonl = a.out.join("scores.jsonl");
    write_jsonl(&summary, BufWriter::new(File::create(&jsonl).map_err(io_err(&jsonl))?)).map_err(io_err(&jsonl))?;
    let summary_file = SummaryFile {
        split: kind.name(),
        studies: summary.studies,
        beam: a.beam,
        mean_er_f1: summary.mean_er_f1(),
        aggregate: &summary.aggregate,
    };
    let sp = a.out.join(SUMMARY_FILE);
    std::fs::write(
        &sp,
        serde_json::to_string_pretty(&summary_file).expect("serializes") + "\n",
    )
    .map_err(io_err(&sp))?;
    let mut m = RunManifest::new("evaluate", argv)
        .with_config("model", &params.config)
        .with_config("corpus", &data.gen);
    m.seeds.insert("corpus".into(), data.gen.seed);
    m.corpus_hash = Some(data.hash.clone());
    m.checkpoint_hashes.insert(
        "model".into(),
        sha256_file(&a.checkpoint).map_err(io_err(&a.checkpoint))?,
    );
    m.elapsed_seconds = start.elapsed().as_secs_f64();
    m.write(&a.out).map_err(io_err(&a.out))?;
    let g = &summary.aggregate;
    let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    Ok(format!(
        "{} studies ({}), beam {}\nfindings:   er_f1 {} bleu4 {} rouge_l {}\nimpression: er_f1 {} bleu4 {} rouge_l {}\nlabel_macro_f1 {}",
        summary.studies,
        kind.name(),
        a.beam,
        f(g.findings.er_f1),
        f(g.findings.bleu4),
        f(g.findings.rouge_l),
        f(g.impression.er_f1),
        f(g.impression.bleu4),
        f(g.impression.rouge_l),
        f(g.label_macro_f1)
    ))
}

/// Reads a study record from JSON; a corpus line's `schema_version` is
/// accepted and ignored.
pub fn read_study_file(path: &Path) -> Result<StudyRecord, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(text.trim())
        .map_err(|e| CliError::Usage(format!("{}: malformed study: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("schema_version");
    }
    serde_json::from_value(value.clone()).map_err(|e| {
        let field = bad_study_field(&value).map_or(String::new(), |f| format!("field `{f}`: "));
        CliError::Usage(format!("{}: malformed study: {field}{e}", path.display()))
    })
}

/// First present field whose value has the wrong type.
fn bad_study_field(value: &serde_json::Value) -> Option<&'static str> {
    fn fits<T: serde::de::DeserializeOwned>(v: Option<&serde_json::Value>) -> bool {
        v.is_none_or(|v| serde_json::from_value::<T>(v.clone()).is_ok())
    }
    let obj = value.as_object()?;
    let checks: [(&str, bool); 5] = [
        ("study_id", fits::<String>(obj.get("study_id"))),
        ("images", fits::<Vec<Vec<f32>>>(obj.get("images"))),
        ("findings_text", fits::<Option<String>>(obj.get("findings_text"))),
        ("impression_text", fits::<Option<String>>(obj.get("impression_text"))),
        ("labels", fits::<Vec<eastlab::corpus::Label>>(obj.get("labels"))),
    ];
    checks.into_iter().find(|(_, ok)| !ok).map(|(f, _)| f)
}

/// Section-control constraints. The cap is clamped so that the forced
/// prefix plus generated tokens fit the model's `max_new_tokens`.
pub fn section_constraints(section: SectionArg, max_new_tokens: usize, model: &ModelConfig) -> DecodeConstraints {
    let mut c = match section {
        SectionArg::Both => DecodeConstraints::report(max_new_tokens),
        SectionArg::Findings => DecodeConstraints::findings_only(max_new_tokens),
        SectionArg::Impression => DecodeConstraints::impression_only(max_new_tokens),
    };
    let room = (model.max_new_tokens + 1).saturating_sub(c.forced_prefix.len());
    c.max_new_tokens = c.max_new_tokens.min(room);
    c
}

fn generate(a: &GenerateArgs) -> Result<Outcome, CliError> {
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be positive".into()));
    }
    let params = load_params(&a.checkpoint)?;
    let vocab_path: PathBuf = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(VOCAB_FILE));
    let vocab = Vocabulary::load(&vocab_path).map_err(|e| CliError::Usage(format!("{}: {e}", vocab_path.display())))?;
    if vocab.len() != params.config.vocab_size {
        return Err(CliError::Usage(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let study = read_study_file(&a.study)?;
    let constraints = section_constraints(a.section, a.max_new_tokens, &params.config);
    constraints
        .validate(vocab.len())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ids = decode_study(&params, &study, &constraints, a.beam)?;
    let split = split_sections(&ids);
    let text = |s: Option<&[TokenId]>| s.map_or("(missing)".to_string(), |b| vocab.decode(b));
    Ok(format!(
        "findings: {}\nimpression: {}",
        text(split.report.findings.as_deref()),
        text(split.report.impression.as_deref())
    ))
}
