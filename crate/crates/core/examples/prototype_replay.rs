//! Class statistics, covariance-shaped reconstruction and the nearest
//! prototype classifier on hand-made embeddings.
//!
//!     cargo run --release --example prototype_replay

use ffcac::classifier::{reconstruct, ClassStats, PrototypeClassifier, ReconstructionConfig, Transform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cluster(center: &[f32], spread: f32, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).unwrap();
    (0..n).map(|_| center.iter().map(|c| c + noise.sample(&mut rng)).collect()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = ClassStats::from_embeddings("a", &cluster(&[1.0, 0.0, 0.0, 0.2], 0.1, 5, 1))?;
    let b = ClassStats::from_embeddings("b", &cluster(&[0.0, 1.0, 0.1, 0.0], 0.1, 5, 2))?;
    let clf = PrototypeClassifier::new(4).extend(&[a.clone(), b.clone()])?;
    println!("classes {:?}", clf.class_ids().collect::<Vec<_>>());

    for transform in [Transform::Inverse, Transform::Sqrt] {
        let cfg = ReconstructionConfig { transform, samples_per_class: 200, ..ReconstructionConfig::default() };
        for stats in [&a, &b] {
            let samples = reconstruct(stats, &cfg, 7)?;
            let hits = samples.iter().filter(|e| clf.predict_id(e).is_ok_and(|id| id == stats.class_id)).count();
            let spread: f32 = samples
                .iter()
                .map(|e| e.iter().zip(&stats.prototype).map(|(x, p)| (x - p).powi(2)).sum::<f32>().sqrt())
                .sum::<f32>()
                / samples.len() as f32;
            println!(
                "{transform:?} class {}: {} of {} reconstructions classified back, mean distance to prototype {spread:.3}",
                stats.class_id,
                hits,
                samples.len()
            );
        }
    }

    let c = ClassStats::from_embeddings("c", &cluster(&[0.0, 0.0, 1.0, 1.0], 0.1, 5, 3))?;
    let grown = clf.extend(&[c])?;
    println!("after extension: {} classes, query [0,0,1,1] -> {}", grown.len(), grown.predict_id(&[0.0, 0.0, 1.0, 1.0])?);
    Ok(())
}
