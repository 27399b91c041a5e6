//! Times forward and forward+backward passes of the default encoder on a
//! batch of random spectrograms.
//!
//! cargo run --release --example encoder_throughput -- [batch]

use std::time::Instant;

use ffcac::audio::LogMelSpec;
use ffcac::autodiff::grad;
use ffcac::encoder::{encode_batch, encode_on_tape, init_params, EncoderConfig};
use ffcac::tensor::Mat;
use rand::{Rng, SeedableRng};

fn main() -> ffcac::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, 0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let specs: Vec<LogMelSpec> = (0..batch)
        .map(|_| LogMelSpec {
            values: Mat::from_vec(30, 128, (0..30 * 128).map(|_| rng.gen_range(-20.0..0.0)).collect()),
            config_digest: String::new(),
        })
        .collect();
    let refs: Vec<&LogMelSpec> = specs.iter().collect();

    let t = Instant::now();
    let emb = encode_batch(&refs, &params, &cfg)?;
    let fwd = t.elapsed();

    let t = Instant::now();
    let (loss, _) = grad(&params, |tape, bound| {
        let mut total = None;
        for s in &specs {
            let e = encode_on_tape(tape, bound, &cfg, s)?;
            let sq = tape.sum_squares(e);
            total = Some(match total {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });
        }
        Ok(total.expect("non-empty batch"))
    })?;
    let both = t.elapsed();

    println!("tokens per input: {}", cfg.n_patches());
    println!("parameters: {}", params.numel());
    println!("embedding dim: {}", emb[0].len());
    println!("forward  {batch} inputs: {:?} ({:?} per input)", fwd, fwd / batch as u32);
    println!("fwd+bwd  {batch} inputs: {:?} ({:?} per input), loss {loss:.4}", both, both / batch as u32);
    Ok(())
}
