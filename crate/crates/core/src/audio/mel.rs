use super::FrontendConfig;
use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Sparse triangular filters: for each mel band, `(fft_bin, weight)` pairs
/// with non-zero weight.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_fft: usize,
    pub centers_hz: Vec<f64>,
    pub filters: Vec<Vec<(usize, f64)>>,
}

impl MelFilterbank {
    /// Dense n_mels × (n_fft/2 + 1) weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let bins = self.n_fft / 2 + 1;
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; bins];
                for &(k, w) in f {
                    row[k] = w;
                }
                row
            })
            .collect()
    }
}

fn build(n_mels: usize, fmin: f64, fmax: f64, sample_rate: u32, n_fft: usize) -> MelFilterbank {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> =
        (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let filters = (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let first = (l / bin_hz).floor() as usize;
            let last = ((r / bin_hz).ceil() as usize).min(bins - 1);
            (first..=last)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                    (w > 0.0).then_some((k, w))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    MelFilterbank { n_fft, centers_hz: edges[1..=n_mels].to_vec(), filters }
}

/// HTK-style filterbank for `cfg` at `sample_rate`.
///
/// With `n_fft` unset, doubles from the frame length until every filter has
/// at least one FFT bin inside its triangle.
pub fn mel_filterbank(cfg: &FrontendConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let fmax = cfg.fmax_for(sample_rate);
    let frame = cfg.frame_len(sample_rate);
    let empty = |b: &MelFilterbank| b.filters.iter().position(|f| f.is_empty());
    match cfg.n_fft {
        Some(n_fft) => {
            if n_fft < frame {
                return Err(Error::InvalidConfig(format!("n_fft {n_fft} shorter than frame {frame}")));
            }
            let bank = build(cfg.n_mels, cfg.fmin, fmax, sample_rate, n_fft);
            match empty(&bank) {
                Some(m) => Err(Error::InvalidConfig(format!(
                    "mel filter {m} has no FFT bin with n_fft={n_fft}; raise n_fft or lower n_mels"
                ))),
                None => Ok(bank),
            }
        }
        None => {
            let mut n_fft = frame.next_power_of_two();
            loop {
                let bank = build(cfg.n_mels, cfg.fmin, fmax, sample_rate, n_fft);
                if empty(&bank).is_none() {
                    return Ok(bank);
                }
                if n_fft >= 1 << 18 {
                    return Err(Error::InvalidConfig("mel filters too narrow for any FFT size".into()));
                }
                n_fft *= 2;
            }
        }
    }
}
