//! The TOML run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::FrontendConfig;
use crate::classifier::ReconstructionConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::protocol::ProtocolConfig;
use crate::training::{PretrainConfig, TrainConfig};

/// Input locations. Relative paths are resolved against the config file's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub protocol_manifest: PathBuf,
    pub pretrain_manifest: PathBuf,
    /// Pretrained encoder checkpoint; defaults to `<output root>/pretrain/encoder.ffck`.
    pub pretrained: Option<PathBuf>,
    /// Keep log-mel features under `<output root>/cache`.
    pub feature_cache: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            protocol_manifest: PathBuf::from("corpus/protocol/manifest.jsonl"),
            pretrain_manifest: PathBuf::from("corpus/pretrain/manifest.jsonl"),
            pretrained: None,
            feature_cache: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Defaults to `$FFCAC_OUTPUT_ROOT`, then `runs`.
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub protocol: ProtocolConfig,
    pub training: TrainConfig,
    pub reconstruction: ReconstructionConfig,
    pub pretrain: PretrainConfig,
    pub output: OutputConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.protocol_manifest);
        resolve(&mut cfg.data.pretrain_manifest);
        if let Some(p) = cfg.data.pretrained.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output.root.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.split()?;
        self.protocol.validate()?;
        self.training.validate()?;
        self.reconstruction.validate()?;
        self.pretrain.validate()?;
        if self.frontend.n_mels != self.encoder.input_mels {
            return Err(Error::InvalidConfig(format!(
                "frontend.n_mels {} differs from encoder.input_mels {}",
                self.frontend.n_mels, self.encoder.input_mels
            )));
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.output.root.clone().unwrap_or_else(crate::protocol::output_root)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.output_root().join("pretrain")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.data.pretrained.clone().unwrap_or_else(|| self.pretrain_dir().join("encoder.ffck"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical (key-sorted) JSON form of every section
    /// except `output`, so the same experiment hashes the same wherever it
    /// writes.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }

    /// Digest of the sections that determine the pretrained encoder.
    pub fn pretrain_digest(&self) -> String {
        let v = serde_json::json!({
            "frontend": self.frontend,
            "encoder": self.encoder,
            "pretrain": self.pretrain,
            "manifest": self.data.pretrain_manifest,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("value serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfigFile::parse("").unwrap();
        assert_eq!(c, RunConfigFile::default());
        assert_eq!(c.protocol.sessions, 5);
        assert_eq!(c.training.epochs, 100);
        assert_eq!(c.training.lr0, 0.001);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfigFile::parse("[training]\nepochz = 3\n").unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        assert!(RunConfigFile::parse("[trainin]\n").is_err());
    }

    #[test]
    fn digest_tracks_content_not_layout() {
        let a = RunConfigFile::parse("[training]\nepochs = 7\nlambda = 0.5\n").unwrap();
        let b = RunConfigFile::parse("[training]\nlambda = 0.5\nepochs = 7\n\n[output]\nroot = \"elsewhere\"\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), RunConfigFile::default().digest());
        assert_eq!(RunConfigFile::parse(&a.to_toml()).unwrap(), a);
    }

    #[test]
    fn variant_parses_by_name() {
        let c = RunConfigFile::parse("[protocol]\nvariant = \"P_ONLY\"\n").unwrap();
        assert_eq!(c.protocol.variant, crate::ede::Variant::POnly);
        assert!(RunConfigFile::parse("[protocol]\nvariant = \"P\"\n").is_err());
    }

    #[test]
    fn mismatched_mels_fail_validation() {
        let c = RunConfigFile::parse("[frontend]\nn_mels = 64\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
