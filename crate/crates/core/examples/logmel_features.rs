//! Computes a 128-bin log-mel spectrogram for a synthetic two-partial tone
//! (or a WAV given on the command line) and prints where the energy sits.
//!
//!     cargo run --release --example logmel_features -- [clip.wav]

use ffcac::audio::{hz_to_mel, logmel, mel_filterbank, read_wav, FrontendConfig, Waveform};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = FrontendConfig::default();
    let wave = match std::env::args().nth(1) {
        Some(path) => read_wav(path.as_ref())?,
        None => {
            let sr = 16000;
            let samples = (0..sr / 2)
                .map(|i| {
                    let t = i as f64 / sr as f64;
                    (0.6 * (std::f64::consts::TAU * 440.0 * t).sin() + 0.3 * (std::f64::consts::TAU * 880.0 * t).sin())
                        as f32
                })
                .collect();
            Waveform::new(samples, sr)?
        }
    };
    let spec = logmel(&wave, &cfg)?;
    println!(
        "{:.2}s at {} Hz -> {} frames x {} mel bins (frame {} samples, hop {})",
        wave.duration_s(),
        wave.sample_rate,
        spec.frames(),
        spec.n_mels(),
        cfg.frame_len(wave.sample_rate),
        cfg.hop(wave.sample_rate)
    );

    let bank = mel_filterbank(&cfg, wave.sample_rate)?;
    let mid = spec.frames() / 2;
    let row: Vec<f32> = (0..spec.n_mels()).map(|m| spec.values.get(mid, m)).collect();
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    println!("loudest bins in the middle frame:");
    for &m in order.iter().take(4) {
        println!("  bin {m:>3}  centre {:>7.1} Hz  {:>7.2} log-energy", bank.centers_hz[m], row[m]);
    }
    println!("440 Hz is {:.1} mel; 880 Hz is {:.1} mel", hz_to_mel(440.0), hz_to_mel(880.0));
    println!("frontend digest {}", &cfg.digest()[..16]);
    Ok(())
}
