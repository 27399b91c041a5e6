//! Expandable dual-embedding extractor: a frozen pretrained encoder next to
//! a finetuned encoder whose last blocks are cloned into a new trainable
//! branch every incremental session.

use std::cell::Cell;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpec;
use crate::encoder::{self, check_layout, decompose, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, write_atomic, ParamSet};
use crate::tensor::Mat;

/// Which embedding halves feed the classifier and whether branches expand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    #[serde(rename = "P_ONLY")]
    POnly,
    #[serde(rename = "F_ONLY")]
    FOnly,
    #[serde(rename = "P_PLUS_F")]
    PPlusF,
    #[default]
    #[serde(rename = "P_PLUS_EXPANDED_F")]
    PPlusExpandedF,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::POnly, Variant::FOnly, Variant::PPlusF, Variant::PPlusExpandedF];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::POnly => "P_ONLY",
            Variant::FOnly => "F_ONLY",
            Variant::PPlusF => "P_PLUS_F",
            Variant::PPlusExpandedF => "P_PLUS_EXPANDED_F",
        }
    }

    pub fn uses_pretrained(self) -> bool {
        self != Variant::FOnly
    }

    pub fn uses_finetuned(self) -> bool {
        self != Variant::POnly
    }

    pub fn expands(self) -> bool {
        self == Variant::PPlusExpandedF
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidVariant(s.to_string()))
    }
}

thread_local! {
    static PRETRAINED_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of pretrained-branch evaluations on this thread.
pub fn pretrained_calls() -> u64 {
    PRETRAINED_CALLS.with(|c| c.get())
}

pub(crate) fn note_pretrained_call() {
    PRETRAINED_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdeState {
    pub cfg: EncoderConfig,
    pub variant: Variant,
    /// ψ_pre, always frozen.
    pub pretrained: ParamSet,
    /// ψ_g: patch embedding and blocks before the split, frozen.
    pub shallow: ParamSet,
    /// ψ_{s_0} .. ψ_{s_m}; only the last is trainable.
    pub branches: Vec<ParamSet>,
}

impl EdeState {
    /// Merges the pretrained encoder with the session-0 finetuned encoder.
    pub fn build_base(pretrained: &ParamSet, finetuned: &ParamSet, cfg: &EncoderConfig, variant: Variant) -> Result<Self> {
        check_layout(pretrained, cfg, "pretrained")?;
        check_layout(finetuned, cfg, "finetuned")?;
        let mut pretrained = pretrained.clone();
        pretrained.set_frozen(true);
        let (mut shallow, mut branch) = decompose(finetuned, cfg)?;
        shallow.set_frozen(true);
        branch.set_frozen(false);
        Ok(Self { cfg: cfg.clone(), variant, pretrained, shallow, branches: vec![branch] })
    }

    pub fn active(&self) -> usize {
        self.branches.len() - 1
    }

    pub fn d_pre(&self) -> usize {
        self.cfg.model_dim
    }

    pub fn d_s(&self) -> usize {
        self.cfg.model_dim
    }

    pub fn dim(&self) -> usize {
        self.variant_dim(Variant::PPlusExpandedF)
    }

    pub fn variant_dim(&self, v: Variant) -> usize {
        let mut d = 0;
        if v.uses_pretrained() {
            d += self.d_pre();
        }
        if v.uses_finetuned() {
            d += self.d_s();
        }
        d
    }

    pub fn active_branch(&self) -> &ParamSet {
        self.branches.last().expect("at least one branch")
    }

    pub fn active_branch_mut(&mut self) -> &mut ParamSet {
        self.branches.last_mut().expect("at least one branch")
    }

    /// Freezes the active branch and appends a trainable copy of it.
    pub fn expand(&self) -> EdeState {
        let mut next = self.clone();
        let mut clone = self.active_branch().clone();
        next.active_branch_mut().set_frozen(true);
        clone.set_frozen(false);
        next.branches.push(clone);
        next
    }

    /// ψ_pre(x) for each input.
    pub fn pretrained_embed(&self, specs: &[&LogMelSpec]) -> Result<Vec<Vec<f32>>> {
        PRETRAINED_CALLS.with(|c| c.set(c.get() + 1));
        encoder::encode_batch(specs, &self.pretrained, &self.cfg)
    }

    /// ψ_g(x) tokens for each input.
    pub fn shallow_tokens(&self, specs: &[&LogMelSpec]) -> Result<Vec<Mat<f32>>> {
        encoder::shallow_tokens(specs, &self.shallow, &self.cfg)
    }

    /// ψ_{s_index}(tokens) for each token matrix.
    pub fn branch_from_tokens(&self, tokens: &[Mat<f32>], index: usize) -> Result<Vec<Vec<f32>>> {
        let branch = self
            .branches
            .get(index)
            .ok_or(Error::NoSuchBranch { index, count: self.branches.len() })?;
        encoder::deep_embed(tokens, branch, &self.cfg)
    }

    /// ψ_{s_index}(ψ_g(x)).
    pub fn embed_branch(&self, spec: &LogMelSpec, index: usize) -> Result<Vec<f32>> {
        if index >= self.branches.len() {
            return Err(Error::NoSuchBranch { index, count: self.branches.len() });
        }
        let tokens = self.shallow_tokens(&[spec])?;
        Ok(self.branch_from_tokens(&tokens, index)?.remove(0))
    }

    /// `[ψ_pre(x); ψ_{s_active}(ψ_g(x))]`.
    pub fn embed(&self, spec: &LogMelSpec) -> Result<Vec<f32>> {
        self.variant_embed(spec, Variant::PPlusExpandedF)
    }

    /// The embedding a variant classifies with.
    pub fn variant_embed(&self, spec: &LogMelSpec, variant: Variant) -> Result<Vec<f32>> {
        Ok(self.variant_embed_batch(&[spec], variant)?.remove(0))
    }

    pub fn variant_embed_batch(&self, specs: &[&LogMelSpec], variant: Variant) -> Result<Vec<Vec<f32>>> {
        let pre = if variant.uses_pretrained() { Some(self.pretrained_embed(specs)?) } else { None };
        let fin = if variant.uses_finetuned() {
            let tokens = self.shallow_tokens(specs)?;
            Some(self.branch_from_tokens(&tokens, self.active())?)
        } else {
            None
        };
        Ok((0..specs.len()).map(|i| combine(pre.as_ref().map(|p| &p[i][..]), fin.as_ref().map(|f| &f[i][..]))).collect())
    }

    /// Writes `manifest.json`, `pretrained.ffck`, `shallow.ffck` and one
    /// `branch_<i>.ffck` per branch into `dir`.
    pub fn save_bundle(&self, dir: &Path, digest: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.pretrained, digest, &dir.join("pretrained.ffck"))?;
        save_checkpoint(&self.shallow, digest, &dir.join("shallow.ffck"))?;
        let mut files = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            let name = format!("branch_{i}.ffck");
            save_checkpoint(b, digest, &dir.join(&name))?;
            files.push(name);
        }
        let manifest = BundleManifest {
            branches: files,
            active: self.active(),
            d_pre: self.d_pre(),
            d_s: self.d_s(),
            variant: self.variant,
            encoder: self.cfg.clone(),
            digest: digest.to_string(),
        };
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load_bundle(dir: &Path) -> Result<(Self, String)> {
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let load = |name: &str| -> Result<ParamSet> {
            let (p, d) = load_checkpoint(&dir.join(name))?;
            if d != manifest.digest {
                return Err(Error::IncompatibleCheckpoint(format!("{name}: digest {d} != bundle digest {}", manifest.digest)));
            }
            Ok(p)
        };
        if manifest.branches.is_empty() || manifest.active + 1 != manifest.branches.len() {
            return Err(Error::IncompatibleCheckpoint("active branch must be the last one".into()));
        }
        let state = EdeState {
            cfg: manifest.encoder.clone(),
            variant: manifest.variant,
            pretrained: load("pretrained.ffck")?,
            shallow: load("shallow.ffck")?,
            branches: manifest.branches.iter().map(|b| load(b)).collect::<Result<_>>()?,
        };
        if state.d_pre() != manifest.d_pre || state.d_s() != manifest.d_s {
            return Err(Error::IncompatibleBranch("bundle dims disagree with encoder config".into()));
        }
        Ok((state, manifest.digest))
    }
}

/// Concatenates whichever halves are present.
pub fn combine(pre: Option<&[f32]>, fin: Option<&[f32]>) -> Vec<f32> {
    let mut out = Vec::with_capacity(pre.map_or(0, <[f32]>::len) + fin.map_or(0, <[f32]>::len));
    out.extend_from_slice(pre.unwrap_or(&[]));
    out.extend_from_slice(fin.unwrap_or(&[]));
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    branches: Vec<String>,
    active: usize,
    d_pre: usize,
    d_s: usize,
    variant: Variant,
    encoder: EncoderConfig,
    digest: String,
}
