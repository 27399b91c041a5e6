//! Desk-scale synthetic corpora. Class identity lives in the fundamental
//! frequency and harmonic profile; clips vary by gain, phase, a small pitch
//! jitter and additive noise.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ManifestEntry, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub label: String,
    pub fundamental_hz: f64,
    /// Relative amplitude of harmonic 1, 2, ...
    pub harmonic_weights: Vec<f64>,
    /// Standard deviation of additive white noise.
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub classes: Vec<ClassParams>,
    pub clip_len_s: f64,
    pub clips_per_class: usize,
    pub sample_rate: u32,
    /// Per-clip relative pitch deviation, uniform in ±`f0_jitter`.
    pub f0_jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes.len() != self.n_classes {
            return bad(format!("n_classes is {} but {} classes given", self.n_classes, self.classes.len()));
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be at least 1".into());
        }
        if !(self.clip_len_s > 0.0) || self.sample_rate == 0 {
            return bad("clip_len_s and sample_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.f0_jitter) {
            return bad(format!("f0_jitter {} outside [0, 1)", self.f0_jitter));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, c) in self.classes.iter().enumerate() {
            if c.label.is_empty() {
                return bad(format!("class {i} has an empty label"));
            }
            if !(c.noise_level >= 0.0) {
                return bad(format!("class {}: noise_level must be >= 0", c.label));
            }
            if c.harmonic_weights.is_empty() || c.harmonic_weights.iter().any(|w| !(*w >= 0.0)) {
                return bad(format!("class {}: harmonic_weights must be non-empty and >= 0", c.label));
            }
            if !(c.fundamental_hz > 0.0 && c.fundamental_hz < nyquist) {
                return bad(format!("class {}: fundamental_hz {} outside (0, {nyquist})", c.label, c.fundamental_hz));
            }
            for other in &self.classes[..i] {
                if other.label == c.label {
                    return bad(format!("duplicate label {}", c.label));
                }
                if other.fundamental_hz == c.fundamental_hz {
                    return bad(format!(
                        "duplicate fundamental {} Hz ({} and {})",
                        c.fundamental_hz, other.label, c.label
                    ));
                }
            }
        }
        Ok(())
    }
}

fn clip(spec: &SynthSpec, class_idx: usize, clip_idx: usize) -> Waveform {
    let c = &spec.classes[class_idx];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class_idx * spec.clips_per_class + clip_idx) as u64);
    let n = (spec.clip_len_s * spec.sample_rate as f64).round().max(1.0) as usize;
    let f0 = c.fundamental_hz * (1.0 + spec.f0_jitter * rng.gen_range(-1.0..=1.0));
    let gain = rng.gen_range(0.5..=1.0);
    let nyquist = spec.sample_rate as f64 / 2.0;
    let total: f64 = c.harmonic_weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let partials: Vec<(f64, f64, f64)> = c
        .harmonic_weights
        .iter()
        .enumerate()
        .map(|(h, &w)| (f0 * (h + 1) as f64, gain * w / total, rng.gen_range(0.0..std::f64::consts::TAU)))
        .filter(|&(f, _, _)| f < nyquist)
        .collect();
    let noise = Normal::new(0.0, c.noise_level.max(0.0)).expect("valid std");
    let dt = 1.0 / spec.sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let tone: f64 = partials.iter().map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin()).sum();
            let eps = if c.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (tone + eps).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform { samples, sample_rate: spec.sample_rate }
}

/// Generates `n_classes × clips_per_class` clips, class-major, with relative
/// paths `<label>/<label>_<i>.wav`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Vec<ManifestEntry>, Vec<Waveform>)> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.n_classes * spec.clips_per_class);
    let mut waves = Vec::with_capacity(entries.capacity());
    for (ci, c) in spec.classes.iter().enumerate() {
        for k in 0..spec.clips_per_class {
            let w = clip(spec, ci, k);
            entries.push(ManifestEntry {
                path: PathBuf::from(&c.label).join(format!("{}_{k:03}.wav", c.label)),
                label: c.label.clone(),
                duration_s: Some(w.duration_s()),
            });
            waves.push(w);
        }
    }
    Ok((entries, waves))
}

/// Knobs for the default pair of corpora: a protocol corpus and a disjoint
/// pretraining corpus drawn from one pool of log-spaced fundamentals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusPreset {
    pub seed: u64,
    pub protocol_classes: usize,
    pub pretrain_classes: usize,
    pub clips_per_class: usize,
    pub pretrain_clips_per_class: usize,
    pub clip_len_s: f64,
    pub sample_rate: u32,
    pub f_lo: f64,
    pub f_hi: f64,
    pub max_harmonics: usize,
    pub f0_jitter: f64,
    pub noise_level: f64,
}

impl Default for CorpusPreset {
    fn default() -> Self {
        Self {
            seed: 7,
            protocol_classes: 25,
            pretrain_classes: 15,
            clips_per_class: 40,
            pretrain_clips_per_class: 40,
            clip_len_s: 0.32,
            sample_rate: 16000,
            f_lo: 150.0,
            f_hi: 1500.0,
            max_harmonics: 6,
            f0_jitter: 0.01,
            noise_level: 0.05,
        }
    }
}

impl CorpusPreset {
    /// Returns `(protocol, pretrain)` specs with disjoint classes.
    pub fn build(&self) -> Result<(SynthSpec, SynthSpec)> {
        let total = self.protocol_classes + self.pretrain_classes;
        if total == 0 || self.max_harmonics == 0 || !(self.f_lo > 0.0 && self.f_hi > self.f_lo) {
            return Err(Error::InvalidSpec("preset needs classes, harmonics and 0 < f_lo < f_hi".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ratio = (self.f_hi / self.f_lo).ln();
        let mut pool: Vec<(f64, Vec<f64>)> = (0..total)
            .map(|i| {
                let f = self.f_lo * (ratio * i as f64 / (total.max(2) - 1) as f64).exp();
                let n_h = rng.gen_range(1..=self.max_harmonics);
                let weights = (0..n_h).map(|_| rng.gen_range(0.2..1.0)).collect();
                (f, weights)
            })
            .collect();
        // Fisher-Yates so both corpora span the whole pitch range.
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        let make = |items: &[(f64, Vec<f64>)], prefix: &str, clips: usize, seed: u64| SynthSpec {
            n_classes: items.len(),
            classes: items
                .iter()
                .enumerate()
                .map(|(i, (f, w))| ClassParams {
                    label: format!("{prefix}{i:02}"),
                    fundamental_hz: *f,
                    harmonic_weights: w.clone(),
                    noise_level: self.noise_level,
                })
                .collect(),
            clip_len_s: self.clip_len_s,
            clips_per_class: clips,
            sample_rate: self.sample_rate,
            f0_jitter: self.f0_jitter,
            seed,
        };
        let protocol = make(&pool[..self.protocol_classes], "c", self.clips_per_class, self.seed);
        let pretrain =
            make(&pool[self.protocol_classes..], "pre", self.pretrain_clips_per_class, self.seed.wrapping_add(1));
        protocol.validate()?;
        pretrain.validate()?;
        Ok((protocol, pretrain))
    }
}

/// The default 25-class protocol corpus and 15-class pretraining corpus.
pub fn default_corpora(seed: u64) -> Result<(SynthSpec, SynthSpec)> {
    CorpusPreset { seed, ..CorpusPreset::default() }.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::stft_magnitude;
    use crate::audio::FrontendConfig;

    #[test]
    fn counting_contract() {
        let (spec, _) = default_corpora(3).unwrap();
        assert_eq!(spec.n_classes, 25);
        let (entries, waves) = synth_corpus(&spec).unwrap();
        assert_eq!(entries.len(), 1000);
        assert_eq!(waves.len(), 1000);
        for c in &spec.classes {
            assert_eq!(entries.iter().filter(|e| e.label == c.label).count(), 40);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let (spec, _) = default_corpora(11).unwrap();
        let small = SynthSpec { clips_per_class: 2, ..spec };
        assert_eq!(synth_corpus(&small).unwrap().1, synth_corpus(&small).unwrap().1);
    }

    #[test]
    fn corpora_are_disjoint() {
        let (p, q) = default_corpora(5).unwrap();
        for a in &p.classes {
            for b in &q.classes {
                assert_ne!(a.fundamental_hz, b.fundamental_hz);
                assert_ne!(a.label, b.label);
            }
        }
    }

    #[test]
    fn duplicate_fundamentals_rejected() {
        let (mut spec, _) = default_corpora(1).unwrap();
        spec.classes[3].fundamental_hz = spec.classes[7].fundamental_hz;
        assert!(matches!(synth_corpus(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn noiseless_single_harmonic_is_pure_sine() {
        let spec = SynthSpec {
            n_classes: 1,
            classes: vec![ClassParams {
                label: "tone".into(),
                fundamental_hz: 500.0,
                harmonic_weights: vec![1.0],
                noise_level: 0.0,
            }],
            clip_len_s: 0.25,
            clips_per_class: 3,
            sample_rate: 16000,
            f0_jitter: 0.0,
            seed: 9,
        };
        let (_, waves) = synth_corpus(&spec).unwrap();
        for w in &waves {
            // A pure sinusoid satisfies x[n+1] + x[n-1] = 2 cos(w) x[n].
            let k = 2.0 * (std::f64::consts::TAU * 500.0 / 16000.0).cos();
            for n in 1..w.samples.len() - 1 {
                let lhs = w.samples[n + 1] as f64 + w.samples[n - 1] as f64;
                assert!((lhs - k * w.samples[n] as f64).abs() < 1e-5);
            }
            let cfg = FrontendConfig { clip_len_s: None, n_fft: Some(1600), ..FrontendConfig::default() };
            let m = stft_magnitude(w, &cfg).unwrap();
            let row = m.row(0);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, 50); // 500 Hz at 10 Hz per bin
        }
    }
}
