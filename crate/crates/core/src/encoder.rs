//! Miniature spectrogram transformer: non-overlapping patch projection,
//! trainable positional embeddings, pre-norm multi-head attention blocks and
//! mean pooling over patch tokens (no class token).
//!
//! Parameter names:
//!
//! ```text
//! patch.w [P, d]   patch.b [d]   pos [n_patches, d]
//! blocks.{i}.ln1.g / ln1.b [d]
//! blocks.{i}.attn.qkv.w [d, 3d]  attn.qkv.b [3d]
//! blocks.{i}.attn.proj.w [d, d]  attn.proj.b [d]
//! blocks.{i}.ln2.g / ln2.b [d]
//! blocks.{i}.mlp.fc1.w [d, h]    mlp.fc1.b [h]
//! blocks.{i}.mlp.fc2.w [h, d]    mlp.fc2.b [d]
//! ```

use std::cell::Cell;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpec;
use crate::autodiff::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Tensor};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    /// tanh approximation
    #[default]
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input grid (mel bins × frames); smaller spectrograms are zero-padded.
    pub input_mels: usize,
    pub input_frames: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Blocks `[0, split)` form the shallow stack; `None` means `depth - 1`.
    pub split_index: Option<usize>,
    pub activation: Activation,
    /// Log-mel inputs are standardized as `(x - input_mean) / input_std`.
    pub input_mean: f32,
    pub input_std: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_mels: 128,
            input_frames: 32,
            patch_h: 16,
            patch_w: 16,
            model_dim: 64,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 2.0,
            split_index: None,
            activation: Activation::Gelu,
            input_mean: -8.0,
            input_std: 4.0,
        }
    }
}

impl EncoderConfig {
    /// The published AST geometry; documented, not exercised by tests.
    pub fn paper_scale() -> Self {
        Self {
            input_frames: 1024,
            model_dim: 768,
            depth: 12,
            n_heads: 12,
            mlp_ratio: 4.0,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_mels.div_ceil(self.patch_h), self.input_frames.div_ceil(self.patch_w))
    }

    pub fn n_patches(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.model_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn split(&self) -> Result<usize> {
        let s = self.split_index.unwrap_or(self.depth.saturating_sub(1));
        if s < 1 || s >= self.depth {
            return Err(Error::InvalidConfig(format!("split_index {s} must satisfy 1 <= split < depth={}", self.depth)));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return bad("patch size must be positive".into());
        }
        if self.patch_h > self.input_mels || self.patch_w > self.input_frames {
            return bad(format!(
                "patch {}x{} larger than input {}x{}",
                self.patch_h, self.patch_w, self.input_mels, self.input_frames
            ));
        }
        if !(self.input_std > 0.0) || !(self.mlp_ratio > 0.0) {
            return bad("input_std and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        crate::audio::digest_json(self)
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}.")
}

/// Randomly initialized parameters (Xavier-normal linear weights, unit
/// layer-norm gains, N(0, 0.02²) positional embeddings).
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim;
    let h = cfg.hidden_dim();
    let mut p = ParamSet::new();
    let mut normal = |shape: Vec<usize>, std: f64| {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std");
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng) as f32).collect())
    };
    let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
    let pl = cfg.patch_len();
    p.insert("patch.w", normal(vec![pl, d], xavier(pl, d)))?;
    p.insert("patch.b", Tensor::zeros(vec![d]))?;
    p.insert("pos", normal(vec![cfg.n_patches(), d], 0.02))?;
    for i in 0..cfg.depth {
        let pre = block_prefix(i);
        p.insert(format!("{pre}ln1.g"), Tensor::new(vec![d], vec![1.0; d]))?;
        p.insert(format!("{pre}ln1.b"), Tensor::zeros(vec![d]))?;
        p.insert(format!("{pre}attn.qkv.w"), normal(vec![d, 3 * d], xavier(d, d)))?;
        p.insert(format!("{pre}attn.qkv.b"), Tensor::zeros(vec![3 * d]))?;
        p.insert(format!("{pre}attn.proj.w"), normal(vec![d, d], xavier(d, d)))?;
        p.insert(format!("{pre}attn.proj.b"), Tensor::zeros(vec![d]))?;
        p.insert(format!("{pre}ln2.g"), Tensor::new(vec![d], vec![1.0; d]))?;
        p.insert(format!("{pre}ln2.b"), Tensor::zeros(vec![d]))?;
        p.insert(format!("{pre}mlp.fc1.w"), normal(vec![d, h], xavier(d, h)))?;
        p.insert(format!("{pre}mlp.fc1.b"), Tensor::zeros(vec![h]))?;
        p.insert(format!("{pre}mlp.fc2.w"), normal(vec![h, d], xavier(h, d)))?;
        p.insert(format!("{pre}mlp.fc2.b"), Tensor::zeros(vec![d]))?;
    }
    Ok(p)
}

/// Fails with `IncompatibleBranch` unless `params` has exactly the names and
/// shapes `init_params(cfg, _)` would produce.
pub fn check_layout<T: Real>(params: &ParamSet<T>, cfg: &EncoderConfig, what: &str) -> Result<()> {
    let expected = init_params(cfg, 0)?;
    if expected.same_layout(params) {
        return Ok(());
    }
    let detail = expected
        .iter()
        .find(|(n, t)| params.get(n).map(|p| &p.shape) != Some(&t.shape))
        .map(|(n, t)| format!("{n} expected shape {:?}", t.shape))
        .unwrap_or_else(|| "unexpected extra tensors".into());
    Err(Error::IncompatibleBranch(format!("{what}: {detail}")))
}

/// Shallow stack ψ_g (patch projection, positions, blocks `[0, split)`) and
/// the specialized blocks `[split, depth)`.
pub fn decompose<T: Real>(params: &ParamSet<T>, cfg: &EncoderConfig) -> Result<(ParamSet<T>, ParamSet<T>)> {
    let split = cfg.split()?;
    let is_deep = |name: &str| {
        name.strip_prefix("blocks.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .is_some_and(|i| i >= split)
    };
    Ok((params.filter(|n| !is_deep(n)), params.filter(is_deep)))
}

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of encoder stage evaluations (patch embedding or block stack) run
/// on this thread so far.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

fn count_forward() {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
}

/// Standardized, zero-padded patches as an n_patches × (patch_h·patch_w)
/// matrix. Token order is mel-major: token `r * grid_w + c` covers mel rows
/// `r·patch_h..` and frames `c·patch_w..`.
pub fn patch_matrix<T: Real>(spec: &LogMelSpec, cfg: &EncoderConfig) -> Result<Mat<T>> {
    cfg.validate()?;
    if spec.n_mels() > cfg.input_mels || spec.frames() > cfg.input_frames {
        return Err(Error::InvalidConfig(format!(
            "spectrogram {}x{} (frames x mels) exceeds encoder input {}x{}",
            spec.frames(),
            spec.n_mels(),
            cfg.input_frames,
            cfg.input_mels
        )));
    }
    let (gh, gw) = cfg.grid();
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let mut out = Mat::zeros(gh * gw, ph * pw);
    let mean = cfg.input_mean;
    let inv_std = 1.0 / cfg.input_std;
    for r in 0..gh {
        for c in 0..gw {
            let row = out.row_mut(r * gw + c);
            for a in 0..ph {
                let mel = r * ph + a;
                if mel >= spec.n_mels() {
                    break;
                }
                for b in 0..pw {
                    let frame = c * pw + b;
                    if frame >= spec.frames() {
                        break;
                    }
                    row[a * pw + b] = T::of_f32((spec.values.get(frame, mel) - mean) * inv_std);
                }
            }
        }
    }
    Ok(out)
}

fn check_finite<T: Real>(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NumericalError(layer.to_string()))
    }
}

/// Tokens = patches · patch.w + patch.b + pos.
pub fn embed_patches<T: Real>(tape: &mut Tape<T>, bound: &Bound, patches: Var) -> Result<Var> {
    count_forward();
    let proj = tape.matmul(patches, bound.var("patch.w")?);
    let proj = tape.add_row(proj, bound.var("patch.b")?);
    let tokens = tape.add(proj, bound.var("pos")?);
    check_finite(tape, tokens, "patch")?;
    Ok(tokens)
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ MLP(LN(·))`.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &EncoderConfig,
    index: usize,
    x: Var,
) -> Result<Var> {
    let pre = block_prefix(index);
    let p = |name: &str| bound.var(&format!("{pre}{name}"));
    let d = cfg.model_dim;
    if tape.value(x).cols != d {
        return Err(Error::ShapeError(format!("block {index} expects width {d}, got {}", tape.value(x).cols)));
    }
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();

    let h = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?);
    let qkv = tape.matmul(h, p("attn.qkv.w")?);
    let qkv = tape.add_row(qkv, p("attn.qkv.b")?);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let q = tape.slice_cols(qkv, hd * dh, dh);
        let k = tape.slice_cols(qkv, d + hd * dh, dh);
        let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, v));
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let proj = tape.matmul(cat, p("attn.proj.w")?);
    let proj = tape.add_row(proj, p("attn.proj.b")?);
    let x = tape.add(x, proj);

    let h = tape.layer_norm(x, p("ln2.g")?, p("ln2.b")?);
    let h = tape.matmul(h, p("mlp.fc1.w")?);
    let h = tape.add_row(h, p("mlp.fc1.b")?);
    let h = match cfg.activation {
        Activation::Gelu => tape.gelu(h),
    };
    let h = tape.matmul(h, p("mlp.fc2.w")?);
    let h = tape.add_row(h, p("mlp.fc2.b")?);
    let out = tape.add(x, h);
    check_finite(tape, out, &format!("blocks.{index}"))?;
    Ok(out)
}

/// Applies blocks `range` in order.
pub fn blocks_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &EncoderConfig,
    range: Range<usize>,
    mut x: Var,
) -> Result<Var> {
    if !range.is_empty() {
        count_forward();
    }
    for i in range {
        x = block_forward(tape, bound, cfg, i, x)?;
    }
    Ok(x)
}

/// Full encoder on the tape: patches → blocks `[0, depth)` → mean pool.
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &EncoderConfig,
    spec: &LogMelSpec,
) -> Result<Var> {
    let patches = tape.constant(patch_matrix(spec, cfg)?);
    let tokens = embed_patches(tape, bound, patches)?;
    let out = blocks_forward(tape, bound, cfg, 0..cfg.depth, tokens)?;
    Ok(tape.mean_rows(out))
}

/// Token sequence after patch projection and positional embedding.
pub fn patchify(spec: &LogMelSpec, params: &ParamSet, cfg: &EncoderConfig) -> Result<Mat<f32>> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let patches = tape.constant(patch_matrix(spec, cfg)?);
    let t = embed_patches(&mut tape, &bound, patches)?;
    Ok(tape.value(t).clone())
}

/// Embedding of one spectrogram: the mean over token rows after the last
/// block.
pub fn encode(spec: &LogMelSpec, params: &ParamSet, cfg: &EncoderConfig) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let e = encode_on_tape(&mut tape, &bound, cfg, spec)?;
    Ok(tape.value(e).data.clone())
}

const CHUNK: usize = 32;

/// `encode` over many inputs, sharing parameter bindings per chunk.
pub fn encode_batch(specs: &[&LogMelSpec], params: &ParamSet, cfg: &EncoderConfig) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        for spec in chunk {
            let e = encode_on_tape(&mut tape, &bound, cfg, spec)?;
            out.push(tape.value(e).data.clone());
        }
    }
    Ok(out)
}

/// Output tokens of the shallow stack (patch embedding plus blocks
/// `[0, split)`), one matrix per input.
pub fn shallow_tokens(specs: &[&LogMelSpec], shallow: &ParamSet, cfg: &EncoderConfig) -> Result<Vec<Mat<f32>>> {
    let split = cfg.split()?;
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = tape.bind(shallow);
        for spec in chunk {
            let patches = tape.constant(patch_matrix(spec, cfg)?);
            let t = embed_patches(&mut tape, &bound, patches)?;
            let t = blocks_forward(&mut tape, &bound, cfg, 0..split, t)?;
            out.push(tape.value(t).clone());
        }
    }
    Ok(out)
}

/// Specialized blocks `[split, depth)` plus pooling applied to cached
/// shallow tokens.
pub fn deep_embed(tokens: &[Mat<f32>], deep: &ParamSet, cfg: &EncoderConfig) -> Result<Vec<Vec<f32>>> {
    let split = cfg.split()?;
    let mut out = Vec::with_capacity(tokens.len());
    for chunk in tokens.chunks(CHUNK) {
        let mut tape = Tape::new();
        let bound = tape.bind(deep);
        for t in chunk {
            let x = tape.constant(t.clone());
            let y = blocks_forward(&mut tape, &bound, cfg, split..cfg.depth, x)?;
            let e = tape.mean_rows(y);
            out.push(tape.value(e).data.clone());
        }
    }
    Ok(out)
}
