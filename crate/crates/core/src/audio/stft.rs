use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FrontendConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// `floor((len - frame) / hop) + 1`, or `None` when `len < frame`.
pub fn frame_count(len: usize, frame: usize, hop: usize) -> Option<usize> {
    (len >= frame && frame > 0 && hop > 0).then(|| (len - frame) / hop + 1)
}

/// Per-frame power spectrum `|X_k|^2`, frames × (n_fft/2 + 1).
pub fn stft_power(w: &Waveform, cfg: &FrontendConfig, n_fft: usize) -> Result<Vec<Vec<f64>>> {
    let frame = cfg.frame_len(w.sample_rate);
    let hop = cfg.hop(w.sample_rate);
    let frames = frame_count(w.samples.len(), frame, hop)
        .ok_or(Error::InputTooShort { len: w.samples.len(), frame })?;
    if n_fft < frame {
        return Err(Error::InvalidConfig(format!("n_fft {n_fft} shorter than frame {frame}")));
    }
    let window = cfg.window.coefficients(frame);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < frame {
                Complex::new(w.samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..bins].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

/// Magnitude spectrogram, frames × (n_fft/2 + 1), with `n_fft` the smallest
/// power of two covering one frame.
pub fn stft_magnitude(w: &Waveform, cfg: &FrontendConfig) -> Result<Mat<f32>> {
    let n_fft = cfg.n_fft.unwrap_or_else(|| cfg.frame_len(w.sample_rate).next_power_of_two());
    let power = stft_power(w, cfg, n_fft)?;
    let bins = n_fft / 2 + 1;
    let data = power.iter().flat_map(|f| f.iter().map(|p| p.sqrt() as f32)).collect();
    Ok(Mat::from_vec(power.len(), bins, data))
}
