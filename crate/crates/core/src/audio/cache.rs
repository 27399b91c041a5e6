//! Binary feature cache.
//!
//! ```text
//! magic   b"FFMC"
//! version u32
//! config  u32 length + utf-8 frontend config digest
//! entries u32 length + utf-8 digest of the manifest entries
//! count   u32
//! dims    count × (u32 frames, u32 n_mels)
//! payload little-endian f32, record by record, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{digest_json, logmel, read_wav, FrontendConfig, LogMelSpec, ManifestEntry};
use crate::error::{Error, Result};
use crate::params::{write_atomic, Reader};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"FFMC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Created,
    /// A cache existed but its digests did not match; it was rebuilt.
    Rebuilt,
}

fn entries_digest(entries: &[ManifestEntry]) -> String {
    let keys: Vec<(&Path, &str)> = entries.iter().map(|e| (e.path.as_path(), e.label.as_str())).collect();
    digest_json(&keys)
}

pub fn write_feature_cache(path: &Path, entries: &[ManifestEntry], cfg: &FrontendConfig, specs: &[LogMelSpec]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in [cfg.digest(), entries_digest(entries)] {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for s in specs {
        out.extend_from_slice(&(s.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(s.n_mels() as u32).to_le_bytes());
    }
    for s in specs {
        for v in &s.values.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

/// Loads a cache, failing with `CacheInvalidated` when it was built for a
/// different config or manifest.
pub fn read_feature_cache(path: &Path, entries: &[ManifestEntry], cfg: &FrontendConfig) -> Result<Vec<LogMelSpec>> {
    let bytes = fs::read(path)?;
    let invalid = |m: &str| Error::CacheInvalidated(format!("{}: {m}", path.display()));
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let parse = |r: &mut Reader| -> Result<Vec<LogMelSpec>> {
        if r.take(4)? != MAGIC || r.u32()? != VERSION {
            return Err(invalid("unrecognized header"));
        }
        let digest = r.string()?;
        if digest != cfg.digest() {
            return Err(invalid("frontend config changed"));
        }
        if r.string()? != entries_digest(entries) {
            return Err(invalid("manifest changed"));
        }
        let count = r.u32()? as usize;
        if count != entries.len() {
            return Err(invalid("record count mismatch"));
        }
        let dims = (0..count).map(|_| Ok((r.u32()? as usize, r.u32()? as usize))).collect::<Result<Vec<_>>>()?;
        let mut specs = Vec::with_capacity(count);
        for (frames, mels) in dims {
            let data = (0..frames * mels).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            specs.push(LogMelSpec { values: Mat::from_vec(frames, mels, data), config_digest: digest.clone() });
        }
        Ok(specs)
    };
    match parse(&mut r) {
        Ok(specs) if r.pos == bytes.len() => Ok(specs),
        Ok(_) => Err(invalid("trailing bytes")),
        Err(Error::CorruptCheckpoint(m)) => Err(invalid(&m)),
        Err(e) => Err(e),
    }
}

/// Returns log-mel features for every entry, reading them from `cache` when
/// its digests match and recomputing (and rewriting it) otherwise.
pub fn cache_features(
    entries: &[ManifestEntry],
    cfg: &FrontendConfig,
    cache: &Path,
) -> Result<(Vec<LogMelSpec>, CacheStatus)> {
    let existed = cache.exists();
    if existed {
        match read_feature_cache(cache, entries, cfg) {
            Ok(specs) => return Ok((specs, CacheStatus::Hit)),
            Err(Error::CacheInvalidated(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let specs = entries.iter().map(|e| logmel(&read_wav(&e.path)?, cfg)).collect::<Result<Vec<_>>>()?;
    write_feature_cache(cache, entries, cfg, &specs)?;
    Ok((specs, if existed { CacheStatus::Rebuilt } else { CacheStatus::Created }))
}
