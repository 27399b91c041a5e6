//! Waveforms to 128-bin log mel spectrograms, plus corpus generation,
//! manifest ingestion and the binary feature cache.

mod cache;
mod manifest;
mod mel;
mod stft;
mod synth;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{cache_features, read_feature_cache, write_feature_cache, CacheStatus};
pub use manifest::{load_manifest, read_wav, write_manifest, write_wav, ManifestEntry};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use stft::{frame_count, stft_magnitude, stft_power};
pub use synth::{default_corpora, synth_corpus, ClassParams, CorpusPreset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NumericalError(format!("waveform sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or truncates to exactly `seconds`.
    pub fn fit_to(&self, seconds: f64) -> Waveform {
        let n = (seconds * self.sample_rate as f64).round() as usize;
        let mut samples = self.samples.clone();
        samples.resize(n.max(1), 0.0);
        Waveform { samples, sample_rate: self.sample_rate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        use std::f64::consts::PI;
        let denom = (n.max(2) - 1) as f64;
        (0..n)
            .map(|i| match self {
                Window::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos(),
                Window::Hamming => 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos(),
                Window::Rectangular => 1.0,
            })
            .collect()
    }
}

/// STFT and mel settings. The defaults are 25 ms Hann frames, 10 ms hop,
/// HTK triangular filters over the power spectrum and a natural log floored
/// at 1e-10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub fmin: f64,
    /// Upper filter edge; `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    pub window: Window,
    /// FFT size; `None` picks the smallest power of two that covers a frame
    /// and leaves no mel filter without support.
    pub n_fft: Option<usize>,
    /// Clips are zero-padded or truncated to this length before analysis.
    pub clip_len_s: Option<f64>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            fmin: 20.0,
            fmax: None,
            log_floor: 1e-10,
            window: Window::Hann,
            n_fft: None,
            clip_len_s: Some(0.32),
        }
    }
}

impl FrontendConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fmax_for(&self, sample_rate: u32) -> f64 {
        self.fmax.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.fmax_for(sample_rate);
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if !(self.fmin >= 0.0 && self.fmin < fmax) {
            return bad(format!("need 0 <= fmin < fmax, got fmin={} fmax={fmax}", self.fmin));
        }
        if fmax > nyquist {
            return bad(format!("fmax {fmax} exceeds Nyquist {nyquist}"));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        if self.frame_len(sample_rate) == 0 || self.hop(sample_rate) == 0 {
            return bad("frame and hop must span at least one sample".into());
        }
        if let Some(c) = self.clip_len_s {
            if !(c > 0.0) {
                return bad("clip_len_s must be positive".into());
            }
        }
        Ok(())
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

pub(crate) fn digest_json<S: Serialize>(value: &S) -> String {
    let canonical = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Frames × mel-bins log energies.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpec {
    pub values: Mat<f32>,
    pub config_digest: String,
}

impl LogMelSpec {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols
    }
}

/// Log mel spectrogram of a waveform: `log(max(mel_energy, log_floor))`.
pub fn logmel(w: &Waveform, cfg: &FrontendConfig) -> Result<LogMelSpec> {
    cfg.validate(w.sample_rate)?;
    let fitted;
    let w = match cfg.clip_len_s {
        Some(sec) => {
            fitted = w.fit_to(sec);
            &fitted
        }
        None => w,
    };
    let bank = mel_filterbank(cfg, w.sample_rate)?;
    let power = stft_power(w, cfg, bank.n_fft)?;
    let floor = cfg.log_floor;
    let mut values = Mat::zeros(power.len(), cfg.n_mels);
    for (t, frame) in power.iter().enumerate() {
        let row = values.row_mut(t);
        for (m, filt) in bank.filters.iter().enumerate() {
            let e: f64 = filt.iter().map(|&(k, wt)| wt * frame[k]).sum();
            row[m] = e.max(floor).ln() as f32;
        }
    }
    Ok(LogMelSpec { values, config_digest: cfg.digest() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn raw_cfg() -> FrontendConfig {
        FrontendConfig { clip_len_s: None, ..FrontendConfig::default() }
    }

    #[test]
    fn zeros_give_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let cfg = raw_cfg();
        let spec = logmel(&w, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(spec.values.data.iter().all(|&v| v == floor));
        assert_eq!(spec.n_mels(), 128);
    }

    #[test]
    fn sine_peaks_in_nearest_filter() {
        let sr = 16000;
        let w = sine(440.0, sr, 16000, 0.5);
        let cfg = raw_cfg();
        let spec = logmel(&w, &cfg).unwrap();
        // Centers recomputed here from the HTK formula.
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let (lo, hi) = (mel(cfg.fmin), mel(sr as f64 / 2.0));
        let centers: Vec<f64> =
            (1..=cfg.n_mels).map(|i| hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        for t in 0..spec.frames() {
            let row = spec.values.row(t);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn logmel_is_deterministic() {
        let w = sine(523.0, 16000, 6000, 0.3);
        let a = logmel(&w, &FrontendConfig::default()).unwrap();
        let b = logmel(&w, &FrontendConfig::default()).unwrap();
        assert_eq!(a, b);
        let bits = |s: &LogMelSpec| s.values.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn fmax_above_nyquist_is_invalid() {
        let w = sine(440.0, 16000, 4000, 0.5);
        let cfg = FrontendConfig { fmax: Some(9000.0), ..raw_cfg() };
        assert!(matches!(logmel(&w, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn short_waveform_propagates_input_too_short() {
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(logmel(&w, &raw_cfg()), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn scaling_shifts_unclamped_entries_by_two_log_c() {
        let w = sine(700.0, 16000, 8000, 0.2);
        let c = 3.0f32;
        let scaled = Waveform::new(w.samples.iter().map(|s| s * c).collect(), 16000).unwrap();
        let cfg = raw_cfg();
        let a = logmel(&w, &cfg).unwrap();
        let b = logmel(&scaled, &cfg).unwrap();
        // Bins far below the peak are dominated by f32 sample rounding, which
        // does not scale with the signal.
        let peak = a.values.data.iter().copied().fold(f32::MIN, f32::max);
        let shift = 2.0 * c.ln();
        let mut checked = 0;
        for (&x, &y) in a.values.data.iter().zip(&b.values.data) {
            if x > peak - 16.0 {
                assert!((y - x - shift).abs() < 1e-3, "{x} -> {y}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn digest_changes_with_config() {
        let a = FrontendConfig::default();
        let b = FrontendConfig { n_mels: 64, ..a.clone() };
        assert_eq!(a.digest(), FrontendConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn clip_length_is_fixed() {
        let cfg = FrontendConfig::default();
        let short = logmel(&sine(300.0, 16000, 3000, 0.5), &cfg).unwrap();
        let long = logmel(&sine(300.0, 16000, 9000, 0.5), &cfg).unwrap();
        assert_eq!(short.frames(), 30);
        assert_eq!(long.frames(), 30);
    }
}
