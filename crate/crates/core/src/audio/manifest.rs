use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

/// Reads a line-delimited JSON manifest. Relative paths are resolved against
/// the manifest's directory, and every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::InvalidInput(format!("{}:{}: {err}", path.display(), i + 1)))?;
        if e.label.is_empty() {
            return Err(Error::InvalidInput(format!("{}:{}: empty label", path.display(), i + 1)));
        }
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if !e.path.is_file() {
            return Err(Error::MissingAudio(e.path));
        }
        out.push(e);
    }
    Ok(out)
}

/// Writes entries one JSON object per line, paths as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    crate::params::write_atomic(path, text.as_bytes())
}

/// Reads a PCM or float WAV, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.is_file() {
        return Err(Error::MissingAudio(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let samples =
        interleaved.chunks(channels).map(|fr| fr.iter().sum::<f32>() / channels as f32).collect::<Vec<_>>();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV (lossless for our f32 samples).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
