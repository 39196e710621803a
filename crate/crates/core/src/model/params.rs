use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::config::{ConfigError, ModelConfig};
use crate::tensor::{Scalar, Tensor};

/// Source-type rows of the type embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceType {
    Image = 0,
    Findings = 1,
    Impression = 2,
}

impl From<crate::tokenizer::Section> for SourceType {
    fn from(s: crate::tokenizer::Section) -> Self {
        match s {
            crate::tokenizer::Section::Findings => SourceType::Findings,
            crate::tokenizer::Section::Impression => SourceType::Impression,
        }
    }
}

/// Indices of one transformer block's tensors in the parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIdx {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Where every named tensor lives in the flat, manifest-ordered list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub enc_layers: Vec<BlockIdx>,
    pub enc_norm: usize,
    pub projection: usize,
    pub source_type: usize,
    pub token_embed: usize,
    pub dec_layers: Vec<BlockIdx>,
    pub dec_norm: usize,
    /// `None` when the head is tied to the token embedding.
    pub lm_head: Option<usize>,
    pub specs: Vec<(String, Vec<usize>)>,
}

fn push(specs: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>) -> usize {
    specs.push((name, shape));
    specs.len() - 1
}

fn block(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, width: usize, ff: usize) -> BlockIdx {
    let mut p = |n: &str, s: Vec<usize>| push(specs, format!("{prefix}.{n}"), s);
    BlockIdx {
        attn_norm: p("attn_norm", vec![width]),
        wq: p("wq", vec![width, width]),
        wk: p("wk", vec![width, width]),
        wv: p("wv", vec![width, width]),
        wo: p("wo", vec![width, width]),
        mlp_norm: p("mlp_norm", vec![width]),
        w_gate: p("w_gate", vec![width, ff]),
        w_up: p("w_up", vec![width, ff]),
        w_down: p("w_down", vec![ff, width]),
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let e = &cfg.encoder;
        let mut s = Vec::new();
        let patch_embed = push(&mut s, "encoder.patch_embed".into(), vec![e.patch_dim, e.width]);
        let pos_embed = push(&mut s, "encoder.pos_embed".into(), vec![e.patches, e.width]);
        let enc_layers = (0..e.layers)
            .map(|i| block(&mut s, &format!("encoder.layers.{i}"), e.width, e.intermediate))
            .collect();
        let enc_norm = push(&mut s, "encoder.final_norm".into(), vec![e.width]);
        let projection = push(&mut s, "projection".into(), vec![e.width, cfg.hidden]);
        let source_type = push(&mut s, "source_type_embed".into(), vec![3, cfg.hidden]);
        let token_embed = push(&mut s, "decoder.token_embed".into(), vec![cfg.vocab_size, cfg.hidden]);
        let dec_layers = (0..cfg.layers)
            .map(|i| block(&mut s, &format!("decoder.layers.{i}"), cfg.hidden, cfg.intermediate))
            .collect();
        let dec_norm = push(&mut s, "decoder.final_norm".into(), vec![cfg.hidden]);
        let lm_head = (!cfg.tie_embeddings).then(|| push(&mut s, "lm_head".into(), vec![cfg.hidden, cfg.vocab_size]));
        Self {
            patch_embed,
            pos_embed,
            enc_layers,
            enc_norm,
            projection,
            source_type,
            token_embed,
            dec_layers,
            dec_norm,
            lm_head,
            specs: s,
        }
    }

    /// True for tensors that belong to the image encoder.
    pub fn is_encoder(&self, index: usize) -> bool {
        self.specs[index].0.starts_with("encoder.")
    }

    /// One `name dim0xdim1` line per tensor, in storage order.
    pub fn manifest(&self) -> String {
        self.specs
            .iter()
            .map(|(n, s)| {
                let dims: Vec<String> = s.iter().map(usize::to_string).collect();
                format!("{n} {}\n", dims.join("x"))
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// All learnable tensors of a model, in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Linear maps ~ N(0, 1/fan_in), residual outputs additionally scaled by
    /// 1/sqrt(2·layers); embeddings ~ N(0, 0.02²); norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec_resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let enc_resid = 1.0 / (2.0 * config.encoder.layers.max(1) as f64).sqrt();
        let tensors = layout
            .specs
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let leaf = name.rsplit('.').next().unwrap_or(name);
                let std = if leaf.ends_with("norm") {
                    return Tensor::full(shape, T::one());
                } else if leaf.ends_with("embed") {
                    0.02
                } else {
                    let base = 1.0 / (shape[0] as f64).sqrt();
                    match (leaf, name.starts_with("encoder.")) {
                        ("wo" | "w_down", true) => base * enc_resid,
                        ("wo" | "w_down", false) => base * dec_resid,
                        _ => base,
                    }
                };
                let data = (0..n)
                    .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
                    .collect();
                Tensor::new(shape.clone(), data).expect("spec shape")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .specs
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Checks tensor shapes against the layout.
    pub fn check_shapes(&self) -> Result<(), CheckpointError> {
        if self.tensors.len() != self.layout.specs.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors, layout declares {}",
                self.tensors.len(),
                self.layout.specs.len()
            )));
        }
        for (t, (name, shape)) in self.tensors.iter().zip(&self.layout.specs) {
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: shape {:?}, declared {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EASTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    Version(u32),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

fn write_block<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_block<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(CheckpointError::Mismatch(format!("header block of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Mismatch(e.to_string()))
}

/// Byte layout: 8-byte magic, u32 LE version, u64 LE length + TOML model
/// config, u64 LE length + manifest text, then every tensor as LE f32 in
/// manifest order.
pub fn write_checkpoint<W: Write>(params: &ModelParams<f32>, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_block(&mut w, params.config.to_toml().as_bytes())?;
    write_block(&mut w, params.layout.manifest().as_bytes())?;
    for t in &params.tensors {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams<f32>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = ModelConfig::from_toml(&read_block(&mut r)?)?;
    let manifest = read_block(&mut r)?;
    let layout = Layout::new(&config);
    if manifest != layout.manifest() {
        return Err(CheckpointError::Mismatch(format!(
            "stored manifest:\n{manifest}config manifest:\n{}",
            layout.manifest()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.specs.len());
    for (_, shape) in &layout.specs {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data).expect("manifest shape"));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Mismatch(format!("{} trailing bytes", rest.len())));
    }
    Ok(ModelParams {
        config,
        layout,
        tensors,
    })
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
