//! Builds a dual-embedding extractor from two encoders, expands it twice and
//! shows that expansion leaves embeddings unchanged while only the newest
//! branch stays trainable. Also round-trips the state through a bundle.
//!
//!     cargo run --release --example ede_expansion

use ffcac::audio::LogMelSpec;
use ffcac::ede::{EdeState, Variant};
use ffcac::encoder::{init_params, EncoderConfig};
use ffcac::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EncoderConfig { model_dim: 32, depth: 3, n_heads: 4, ..EncoderConfig::default() };
    let pretrained = init_params(&cfg, 1)?;
    let finetuned = init_params(&cfg, 2)?;
    let mut state = EdeState::build_base(&pretrained, &finetuned, &cfg, Variant::PPlusExpandedF)?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probe = LogMelSpec {
        values: Mat::from_vec(cfg.input_frames, cfg.input_mels, (0..cfg.input_frames * cfg.input_mels).map(|_| rng.gen_range(-12.0..-4.0)).collect()),
        config_digest: String::new(),
    };
    println!("split after block {}; embedding dim {} (pretrained {} + branch {})", cfg.split()?, state.dim(), state.d_pre(), state.d_s());
    for v in Variant::ALL {
        println!("  {v:<18} classifies in {} dims", state.variant_dim(v));
    }

    let before = state.embed(&probe)?;
    for _ in 0..2 {
        state = state.expand();
        let after = state.embed(&probe)?;
        let frozen: Vec<bool> = state.branches.iter().map(|b| b.all_frozen()).collect();
        println!(
            "expanded to {} branches, embedding unchanged: {}, branch frozen flags {frozen:?}",
            state.branches.len(),
            after == before
        );
    }

    let dir = tempfile::tempdir()?;
    state.save_bundle(dir.path(), "example")?;
    let (loaded, digest) = EdeState::load_bundle(dir.path())?;
    println!("bundle round trip equal: {}, digest {digest}", loaded == state);
    Ok(())
}
