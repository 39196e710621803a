//! Tape-free forward pass with a key/value cache for decoding.
//!
//! Prompt rows never attend to report rows, so the prompt's keys and values
//! are computed once and shared by every continuation.

use std::sync::Arc;

use super::config::ModelConfig;
use super::forward::{rope_positions, ModelError};
use super::params::{BlockIdx, ModelParams, SourceType};
use crate::tensor::kernels::{rmsnorm_row, rope_row, silu, softmax_row};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenId, SEP};

fn matmul<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); rows * n];
    if rows == 1 {
        // row-vector times matrix as a sum of scaled weight rows; avoids gemm packing
        for (&xi, wrow) in x.iter().zip(w.data().chunks_exact(n)) {
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    } else {
        T::gemm(rows, k, n, x, false, w.data(), false, &mut out, false);
    }
    out
}

fn rmsnorm<T: Scalar>(x: &[T], gain: &Tensor<T>, eps: T) -> Vec<T> {
    let c = gain.len();
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        rmsnorm_row(row, gain.data(), eps, o);
    }
    out
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn head_cols<T: Scalar>(x: &[T], rows: usize, width: usize, lo: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + lo..r * width + lo + d]);
    }
    out
}

fn mlp<T: Scalar>(p: &ModelParams<T>, b: &BlockIdx, x: &mut [T], rows: usize, eps: T) {
    let t = &p.tensors;
    let h = rmsnorm(x, &t[b.mlp_norm], eps);
    let g = matmul(&h, rows, &t[b.w_gate]);
    let u = matmul(&h, rows, &t[b.w_up]);
    let a: Vec<T> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
    add_into(x, &matmul(&a, rows, &t[b.w_down]));
}

/// Block over `rows` positions that all attend to each other. Returns the
/// rotated keys and the values for caching.
fn full_block<T: Scalar>(
    p: &ModelParams<T>,
    b: &BlockIdx,
    x: &mut [T],
    rows: usize,
    heads: usize,
    positions: Option<&[usize]>,
) -> (Vec<T>, Vec<T>) {
    let t = &p.tensors;
    let width = t[b.attn_norm].len();
    let eps = T::from_f64(p.config.norm_eps);
    let h = rmsnorm(x, &t[b.attn_norm], eps);
    let mut q = matmul(&h, rows, &t[b.wq]);
    let mut k = matmul(&h, rows, &t[b.wk]);
    let v = matmul(&h, rows, &t[b.wv]);
    if let Some(pos) = positions {
        for (r, &ps) in pos.iter().enumerate() {
            rope_row(&mut q[r * width..(r + 1) * width], ps, heads, p.config.rope_base, false);
            rope_row(&mut k[r * width..(r + 1) * width], ps, heads, p.config.rope_base, false);
        }
    }
    let d = width / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut o = vec![T::zero(); rows * width];
    for hd in 0..heads {
        let lo = hd * d;
        let (qh, kh, vh) = (
            head_cols(&q, rows, width, lo, d),
            head_cols(&k, rows, width, lo, d),
            head_cols(&v, rows, width, lo, d),
        );
        let mut s = vec![T::zero(); rows * rows];
        T::gemm(rows, d, rows, &qh, false, &kh, true, &mut s, false);
        for row in s.chunks_mut(rows) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_row(row);
        }
        let mut oh = vec![T::zero(); rows * d];
        T::gemm(rows, rows, d, &s, false, &vh, false, &mut oh, false);
        for r in 0..rows {
            o[r * width + lo..r * width + lo + d].copy_from_slice(&oh[r * d..(r + 1) * d]);
        }
    }
    add_into(x, &matmul(&o, rows, &t[b.wo]));
    mlp(p, b, x, rows, eps);
    (k, v)
}

/// Encoder output of one image, `[patches, encoder width]`.
pub fn encode_image<T: Scalar>(p: &ModelParams<T>, image: &[T]) -> Result<Tensor<T>, ModelError> {
    let e = &p.config.encoder;
    if image.len() != e.patches * e.patch_dim {
        return Err(ModelError::ImageSize {
            got: image.len(),
            expected: e.patches * e.patch_dim,
        });
    }
    let l = &p.layout;
    let mut x = matmul(image, e.patches, &p.tensors[l.patch_embed]);
    add_into(&mut x, p.tensors[l.pos_embed].data());
    for b in &l.enc_layers {
        full_block(p, b, &mut x, e.patches, e.heads, None);
    }
    let out = rmsnorm(&x, &p.tensors[l.enc_norm], T::from_f64(p.config.norm_eps));
    Ok(Tensor::new(vec![e.patches, e.width], out)?)
}

/// Projected prompt `[Σ patches, hidden]` with the IMAGE source type added.
pub fn project_prompt<T: Scalar>(p: &ModelParams<T>, encoded: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
    if encoded.is_empty() {
        return Err(ModelError::NoImages);
    }
    let l = &p.layout;
    let rows: usize = encoded.iter().map(Tensor::rows).sum();
    let enc: Vec<T> = encoded.iter().flat_map(|e| e.data().iter().copied()).collect();
    let mut x = matmul(&enc, rows, &p.tensors[l.projection]);
    let h = p.config.hidden;
    let image_type = p.tensors[l.source_type].row(SourceType::Image as usize);
    for row in x.chunks_mut(h) {
        add_into(row, image_type);
    }
    Ok(Tensor::new(vec![rows, h], x)?)
}

/// Per-layer rotated keys and values of the prompt rows.
#[derive(Debug)]
pub struct PromptCache<T> {
    pub len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

pub fn prefill<T: Scalar>(p: &ModelParams<T>, prompt: &Tensor<T>) -> Result<PromptCache<T>, ModelError> {
    let cfg = &p.config;
    let rows = prompt.rows();
    if rows == 0 {
        return Err(ModelError::NoImages);
    }
    if rows >= cfg.max_positions {
        return Err(ModelError::TooLong {
            total: rows + 1,
            max: cfg.max_positions,
        });
    }
    let positions = rope_positions(cfg, rows, 0);
    let mut x = prompt.data().to_vec();
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    for b in &p.layout.dec_layers {
        let (k, v) = full_block(p, b, &mut x, rows, cfg.heads, Some(&positions));
        keys.push(k);
        values.push(v);
    }
    Ok(PromptCache {
        len: rows,
        keys,
        values,
    })
}

/// Report-side cache of one continuation; cheap to clone for beams.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    prompt: Arc<PromptCache<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    seen_sep: bool,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(prompt: Arc<PromptCache<T>>) -> Self {
        let layers = prompt.keys.len();
        Self {
            prompt,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
            seen_sep: false,
        }
    }

    /// Report tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total_positions(&self) -> usize {
        self.prompt.len + self.len
    }
}

/// Feeds one report token and returns next-token logits.
pub fn step<T: Scalar>(p: &ModelParams<T>, state: &mut DecodeState<T>, token: TokenId) -> Result<Vec<T>, ModelError> {
    let cfg: &ModelConfig = &p.config;
    let l = &p.layout;
    let t = &p.tensors;
    let pos = state.prompt.len + state.len;
    if pos >= cfg.max_positions {
        return Err(ModelError::TooLong {
            total: pos + 1,
            max: cfg.max_positions,
        });
    }
    if token as usize >= cfg.vocab_size {
        return Err(ModelError::BadSequence);
    }
    state.seen_sep |= token == SEP;
    let section = if state.seen_sep {
        SourceType::Impression
    } else {
        SourceType::Findings
    };
    let h = cfg.hidden;
    let mut x = t[l.token_embed].row(token as usize).to_vec();
    add_into(&mut x, t[l.source_type].row(section as usize));
    let eps = T::from_f64(cfg.norm_eps);
    let heads = cfg.heads;
    let d = h / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let n_prompt = state.prompt.len;
    for (li, b) in l.dec_layers.iter().enumerate() {
        let hn = rmsnorm(&x, &t[b.attn_norm], eps);
        let mut q = matmul(&hn, 1, &t[b.wq]);
        let mut k = matmul(&hn, 1, &t[b.wk]);
        let v = matmul(&hn, 1, &t[b.wv]);
        rope_row(&mut q, pos, heads, cfg.rope_base, false);
        rope_row(&mut k, pos, heads, cfg.rope_base, false);
        state.keys[li].extend_from_slice(&k);
        state.values[li].extend_from_slice(&v);
        let (pk, pv) = (&state.prompt.keys[li], &state.prompt.values[li]);
        let (rk, rv) = (&state.keys[li], &state.values[li]);
        let n_report = state.len + 1;
        let mut o = vec![T::zero(); h];
        let mut s = vec![T::zero(); n_prompt + n_report];
        for hd in 0..heads {
            let lo = hd * d;
            let qh = &q[lo..lo + d];
            let key = |j: usize| -> &[T] {
                if j < n_prompt {
                    &pk[j * h + lo..j * h + lo + d]
                } else {
                    let r = j - n_prompt;
                    &rk[r * h + lo..r * h + lo + d]
                }
            };
            for (j, sj) in s.iter_mut().enumerate() {
                let dot: T = qh.iter().zip(key(j)).map(|(&a, &b)| a * b).sum();
                *sj = dot * scale;
            }
            softmax_row(&mut s);
            let oh = &mut o[lo..lo + d];
            for (j, &w) in s.iter().enumerate() {
                let val = if j < n_prompt {
                    &pv[j * h + lo..j * h + lo + d]
                } else {
                    let r = j - n_prompt;
                    &rv[r * h + lo..r * h + lo + d]
                };
                for (a, &b) in oh.iter_mut().zip(val) {
                    *a += w * b;
                }
            }
        }
        add_into(&mut x, &matmul(&o, 1, &t[b.wo]));
        mlp(p, b, &mut x, 1, eps);
    }
    state.len += 1;
    let hf = rmsnorm(&x, &t[l.dec_norm], eps);
    Ok(match l.lm_head {
        Some(w) => matmul(&hf, 1, &t[w]),
        None => {
            let mut out = vec![T::zero(); cfg.vocab_size];
            T::gemm(
                1,
                h,
                cfg.vocab_size,
                &hf,
                false,
                t[l.token_embed].data(),
                true,
                &mut out,
                false,
            );
            out
        }
    })
}

/// A prepared prompt for one study, ready to decode from.
#[derive(Debug, Clone)]
pub struct Session<'a, T> {
    pub params: &'a ModelParams<T>,
    pub cache: Arc<PromptCache<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a ModelParams<T>, encoded: &[Tensor<T>]) -> Result<Self, ModelError> {
        let prompt = project_prompt(params, encoded)?;
        Ok(Self {
            params,
            cache: Arc::new(prefill(params, &prompt)?),
        })
    }

    pub fn from_images(params: &'a ModelParams<T>, images: &[&[T]]) -> Result<Self, ModelError> {
        let encoded = images
            .iter()
            .map(|im| encode_image(params, im))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(params, &encoded)
    }

    pub fn state(&self) -> DecodeState<T> {
        DecodeState::new(self.cache.clone())
    }

    /// Logits for every position of `inputs`, fed one at a time.
    pub fn logits(&self, inputs: &[TokenId]) -> Result<Vec<Vec<T>>, ModelError> {
        let mut st = self.state();
        inputs.iter().map(|&tok| step(self.params, &mut st, tok)).collect()
    }
}
