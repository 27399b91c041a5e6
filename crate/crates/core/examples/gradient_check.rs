//! Finite-difference check of the base and incremental losses on a
//! miniature encoder (d = 8, two blocks, six tokens) in f64.
//!
//!     cargo run --release --example gradient_check -- [seed]

use ffcac::gradcheck::{base_loss_check, inc_loss_check, miniature_config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let cfg = miniature_config();
    println!("miniature encoder: d={} depth={} tokens={}", cfg.model_dim, cfg.depth, cfg.n_patches());
    let runs = [
        ("base loss, eta 4", base_loss_check(seed, 4.0)?),
        ("base loss, eta 16", base_loss_check(seed, 16.0)?),
        ("incremental, lambda 1", inc_loss_check(seed, 4.0, 1.0)?),
        ("incremental, lambda 0", inc_loss_check(seed, 4.0, 0.0)?),
    ];
    for (name, r) in runs {
        println!(
            "{name:<24} {:>5} coords  max rel err {:.2e}  (worst {}[{}]: {:.6e} vs {:.6e})",
            r.checked, r.max_rel_err, r.worst_param, r.worst_index, r.analytic, r.numeric
        );
    }
    Ok(())
}
