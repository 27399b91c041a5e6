//! Cosine heads, class prototypes, per-class covariance statistics and
//! embedding reconstruction for replay.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::NORM_FLOOR;
use crate::error::{Error, Result};
use crate::params::{write_atomic, Reader};
use crate::tensor::Mat;

pub const DEFAULT_ETA: f64 = 16.0;

/// η-scaled cosine classifier with one weight row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    pub weights: Mat<f32>,
    pub eta: f64,
}

impl CosineHead {
    pub fn new(weights: Mat<f32>, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
        }
        Ok(Self { weights, eta })
    }

    /// Rows initialized to the given prototypes.
    pub fn from_prototypes(prototypes: &[&[f32]], eta: f64) -> Result<Self> {
        let dim = prototypes.first().ok_or(Error::NoClasses)?.len();
        if prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::ShapeError("prototypes differ in length".into()));
        }
        let data = prototypes.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(Mat::from_vec(prototypes.len(), dim, data), eta)
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineLogits {
    pub logits: Vec<f64>,
    /// Set when the embedding or some weight row had (near) zero norm and the
    /// norm floor was applied.
    pub degenerate_norm: bool,
}

fn norm64(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `η · cos(e, w_n)` for every class row.
pub fn cosine_logits(e: &[f32], head: &CosineHead) -> Result<CosineLogits> {
    if e.len() != head.dim() {
        return Err(Error::ShapeError(format!("embedding has {} dims, head expects {}", e.len(), head.dim())));
    }
    let ne = norm64(e);
    let mut degenerate = ne < NORM_FLOOR;
    let logits = (0..head.n_classes())
        .map(|n| {
            let w = head.weights.row(n);
            let nw = norm64(w);
            degenerate |= nw < NORM_FLOOR;
            let cos = dot64(e, w) / (ne.max(NORM_FLOOR) * nw.max(NORM_FLOOR));
            head.eta * cos.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(CosineLogits { logits, degenerate_norm: degenerate })
}

/// Cosine similarity with the norm floor applied.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm64(a).max(NORM_FLOOR) * norm64(b).max(NORM_FLOOR);
    (dot64(a, b) / denom).clamp(-1.0, 1.0)
}

fn check_dims(embeddings: &[Vec<f32>]) -> Result<usize> {
    let dim = embeddings.first().ok_or_else(|| Error::EmptyClass(String::new()))?.len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeError("embeddings differ in length".into()));
    }
    Ok(dim)
}

/// Mean embedding.
pub fn compute_prototype(embeddings: &[Vec<f32>]) -> Result<Vec<f32>> {
    Ok(mean64(embeddings)?.into_iter().map(|v| v as f32).collect())
}

fn mean64(embeddings: &[Vec<f32>]) -> Result<Vec<f64>> {
    let dim = check_dims(embeddings)?;
    let mut acc = vec![0.0f64; dim];
    for e in embeddings {
        for (a, &v) in acc.iter_mut().zip(e) {
            *a += v as f64;
        }
    }
    let k = embeddings.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// Population covariance (divided by K) around the mean.
pub fn compute_covariance(embeddings: &[Vec<f32>]) -> Result<Mat<f64>> {
    let mean = mean64(embeddings)?;
    let dim = mean.len();
    let mut cov = Mat::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for e in embeddings {
        for (c, (&v, &m)) in centered.iter_mut().zip(e.iter().zip(&mean)) {
            *c = v as f64 - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            let row = cov.row_mut(i);
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    let k = embeddings.len() as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov.get(i, j) / k;
            cov.data[i * dim + j] = v;
            cov.data[j * dim + i] = v;
        }
    }
    Ok(cov)
}

/// Statistics kept for each class once its session ends.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class_id: String,
    pub prototype: Vec<f32>,
    pub covariance: Mat<f64>,
    pub count: usize,
}

impl ClassStats {
    pub fn from_embeddings(class_id: &str, embeddings: &[Vec<f32>]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyClass(class_id.to_string()));
        }
        Ok(Self {
            class_id: class_id.to_string(),
            prototype: compute_prototype(embeddings)?,
            covariance: compute_covariance(embeddings)?,
            count: embeddings.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.prototype.len()
    }
}

const STATS_MAGIC: &[u8; 4] = b"FFCS";
const STATS_VERSION: u32 = 1;

/// Binary record: magic, version, count, then per class the id, dim, K,
/// `dim` f32 prototype values and `dim²` f64 covariance values (row-major).
pub fn stats_to_bytes(stats: &[ClassStats]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STATS_MAGIC);
    out.extend_from_slice(&STATS_VERSION.to_le_bytes());
    out.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for s in stats {
        out.extend_from_slice(&(s.class_id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.class_id.as_bytes());
        out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(s.count as u32).to_le_bytes());
        for v in &s.prototype {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &s.covariance.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn stats_from_bytes(bytes: &[u8]) -> Result<Vec<ClassStats>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != STATS_MAGIC {
        return Err(Error::CorruptCheckpoint("not a class statistics record".into()));
    }
    let version = r.u32()?;
    if version != STATS_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("class statistics version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = r.string()?;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let prototype = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let cov = (0..dim * dim)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        out.push(ClassStats { class_id, prototype, covariance: Mat::from_vec(dim, dim, cov), count });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after class statistics".into()));
    }
    Ok(out)
}

pub fn save_stats(path: &Path, stats: &[ClassStats]) -> Result<()> {
    write_atomic(path, &stats_to_bytes(stats))
}

pub fn load_stats(path: &Path) -> Result<Vec<ClassStats>> {
    stats_from_bytes(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// `e' = p + ε·σ_reg⁻¹`
    #[default]
    Inverse,
    /// `e' = p + ε·σ_reg^{1/2}`
    Sqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    /// Shrinkage γ: `σ_reg = σ + γ·(tr(σ)/dim + 1e-8)·I`.
    pub reg_gamma: f64,
    pub transform: Transform,
    pub samples_per_class: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { reg_gamma: 0.01, transform: Transform::Inverse, samples_per_class: 5 }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg_gamma >= 0.0) || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("reg_gamma must be >= 0 and samples_per_class >= 1".into()));
        }
        Ok(())
    }
}

const EPS_ABS: f64 = 1e-8;
const SINGULAR_RCOND: f64 = 1e-12;

/// The matrix applied to ε: `σ_reg⁻¹` or `σ_reg^{1/2}`.
pub fn noise_transform(stats: &ClassStats, cfg: &ReconstructionConfig) -> Result<Mat<f64>> {
    cfg.validate()?;
    let dim = stats.dim();
    let sigma = &stats.covariance;
    if sigma.rows != dim || sigma.cols != dim {
        return Err(Error::ShapeError(format!("covariance {}x{} for dim {dim}", sigma.rows, sigma.cols)));
    }
    let trace: f64 = (0..dim).map(|i| sigma.get(i, i)).sum();
    let shift = cfg.reg_gamma * (trace / dim as f64 + EPS_ABS);
    let mut reg = sigma.clone();
    for i in 0..dim {
        reg.data[i * dim + i] += shift;
    }
    let apply = |lambda: f64, max: f64| -> Result<f64> {
        match cfg.transform {
            Transform::Inverse if lambda <= max.max(f64::MIN_POSITIVE) * SINGULAR_RCOND => Err(Error::SingularCovariance),
            Transform::Inverse => Ok(1.0 / lambda),
            Transform::Sqrt => Ok(lambda.max(0.0).sqrt()),
        }
    };
    let diagonal = (0..dim).all(|i| (0..dim).all(|j| i == j || reg.get(i, j) == 0.0));
    if diagonal {
        let max = (0..dim).map(|i| reg.get(i, i)).fold(0.0, f64::max);
        let mut out = Mat::zeros(dim, dim);
        for i in 0..dim {
            out.data[i * dim + i] = apply(reg.get(i, i), max)?;
        }
        return Ok(out);
    }
    let eig = DMatrix::from_row_slice(dim, dim, &reg.data).symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let f = eig.eigenvalues.iter().map(|&l| apply(l, max)).collect::<Result<Vec<_>>>()?;
    let v = &eig.eigenvectors;
    let mut out = Mat::zeros(dim, dim);
    for i in 0..dim {
        for j in i..dim {
            let s: f64 = (0..dim).map(|k| v[(i, k)] * f[k] * v[(j, k)]).sum();
            out.data[i * dim + j] = s;
            out.data[j * dim + i] = s;
        }
    }
    Ok(out)
}

/// `p + ε·A` for each given noise row (A from [`noise_transform`]).
pub fn reconstruct_with_noise(stats: &ClassStats, transform: &Mat<f64>, noise: &[Vec<f64>]) -> Vec<Vec<f32>> {
    let dim = stats.dim();
    noise
        .iter()
        .map(|eps| {
            (0..dim)
                .map(|j| {
                    let shift: f64 = (0..dim).map(|i| eps[i] * transform.get(i, j)).sum();
                    (stats.prototype[j] as f64 + shift) as f32
                })
                .collect()
        })
        .collect()
}

/// Standard-normal noise rows, deterministic per seed.
pub fn standard_normal_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

/// `samples_per_class` pseudo-embeddings drawn around the prototype.
pub fn reconstruct(stats: &ClassStats, cfg: &ReconstructionConfig, seed: u64) -> Result<Vec<Vec<f32>>> {
    let a = noise_transform(stats, cfg)?;
    let noise = standard_normal_rows(cfg.samples_per_class, stats.dim(), seed);
    Ok(reconstruct_with_noise(stats, &a, &noise))
}

/// Nearest-prototype classifier under cosine similarity.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PrototypeClassifier {
    pub dim: usize,
    pub classes: Vec<(String, Vec<f32>)>,
}

impl PrototypeClassifier {
    pub fn new(dim: usize) -> Self {
        Self { dim, classes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(c, _)| c.as_str())
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.classes.iter().position(|(c, _)| c == class_id)
    }

    /// Index of the most cosine-similar prototype; ties go to the lowest
    /// index.
    pub fn predict(&self, e: &[f32]) -> Result<usize> {
        if self.classes.is_empty() {
            return Err(Error::NoClasses);
        }
        if e.len() != self.dim {
            return Err(Error::ShapeError(format!("embedding has {} dims, classifier {}", e.len(), self.dim)));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (_, p)) in self.classes.iter().enumerate() {
            let s = cosine(e, p);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(best.0)
    }

    pub fn predict_id(&self, e: &[f32]) -> Result<&str> {
        Ok(&self.classes[self.predict(e)?].0)
    }

    /// Appends new classes after the existing ones.
    pub fn extend(&self, new: &[ClassStats]) -> Result<Self> {
        let mut out = self.clone();
        for s in new {
            if s.dim() != self.dim {
                return Err(Error::ShapeError(format!("class {} has dim {}, classifier {}", s.class_id, s.dim(), self.dim)));
            }
            if out.index_of(&s.class_id).is_some() {
                return Err(Error::DuplicateClass(s.class_id.clone()));
            }
            out.classes.push((s.class_id.clone(), s.prototype.clone()));
        }
        Ok(out)
    }
}

/// Free-function form of [`PrototypeClassifier::extend`].
pub fn extend_classifier(clf: &PrototypeClassifier, new: &[ClassStats]) -> Result<PrototypeClassifier> {
    clf.extend(new)
}

/// Free-function form of [`PrototypeClassifier::predict`].
pub fn predict(e: &[f32], clf: &PrototypeClassifier) -> Result<usize> {
    clf.predict(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn head(rows: Vec<Vec<f32>>, eta: f64) -> CosineHead {
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        CosineHead::from_prototypes(&refs, eta).unwrap()
    }

    #[test]
    fn cosine_logit_trivia() {
        let w1 = vec![0.3f32, -1.2, 2.0];
        let h = head(vec![w1.clone(), vec![1.0, 0.0, 0.0]], 1.0);
        let self_sim = cosine_logits(&w1, &h).unwrap().logits[0];
        assert!((self_sim - 1.0).abs() < 1e-12);
        let neg: Vec<f32> = w1.iter().map(|v| -v).collect();
        assert!((cosine_logits(&neg, &h).unwrap().logits[0] + 1.0).abs() < 1e-12);
        let ortho = vec![2.0f32, 0.5, 0.0];
        assert!(cosine_logits(&ortho, &h).unwrap().logits[0].abs() < 1e-12);
        let zero = cosine_logits(&[0.0, 0.0, 0.0], &h).unwrap();
        assert!(zero.degenerate_norm && zero.logits.iter().all(|&l| l == 0.0));
        assert!(matches!(CosineHead::new(Mat::zeros(1, 1), 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn prototype_trivia() {
        assert_eq!(compute_prototype(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(compute_prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(compute_prototype(&[]), Err(Error::EmptyClass(_))));
        assert!(matches!(ClassStats::from_embeddings("x", &[]), Err(Error::EmptyClass(c)) if c == "x"));
    }

    #[test]
    fn covariance_trivia() {
        let same = compute_covariance(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
        let two = compute_covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(two.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    fn stats(p: Vec<f32>, cov: Vec<f64>) -> ClassStats {
        let d = p.len();
        ClassStats { class_id: "c".into(), prototype: p, covariance: Mat::from_vec(d, d, cov), count: 5 }
    }

    #[test]
    fn reconstruction_trivia() {
        let s = stats(vec![0.5, -1.0, 2.0], vec![1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]);
        let cfg = ReconstructionConfig::default();
        let a = noise_transform(&s, &cfg).unwrap();
        assert_eq!(reconstruct_with_noise(&s, &a, &[vec![0.0; 3]]), vec![s.prototype.clone()]);

        let id = stats(vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let cfg0 = ReconstructionConfig { reg_gamma: 0.0, ..cfg.clone() };
        let eps = vec![0.3, -1.1, 0.7];
        let out = reconstruct_with_noise(&id, &noise_transform(&id, &cfg0).unwrap(), &[eps.clone()]);
        let expect: Vec<f32> = id.prototype.iter().zip(&eps).map(|(&p, &e)| (p as f64 + e) as f32).collect();
        assert_eq!(out[0], expect);

        let one = stats(vec![1.5], vec![4.0]);
        let out = reconstruct_with_noise(&one, &noise_transform(&one, &cfg0).unwrap(), &[vec![1.0]]);
        assert_eq!(out[0], vec![1.75]);

        let sqrt = ReconstructionConfig { transform: Transform::Sqrt, ..cfg0 };
        let out = reconstruct_with_noise(&one, &noise_transform(&one, &sqrt).unwrap(), &[vec![1.0]]);
        assert_eq!(out[0], vec![3.5]);
    }

    #[test]
    fn singular_without_shrinkage() {
        let s = stats(vec![0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]);
        let cfg = ReconstructionConfig { reg_gamma: 0.0, ..Default::default() };
        assert!(matches!(noise_transform(&s, &cfg), Err(Error::SingularCovariance)));
        assert!(noise_transform(&s, &ReconstructionConfig::default()).is_ok());
    }

    #[test]
    fn inverse_transform_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let embs: Vec<Vec<f32>> = (0..12).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let s = ClassStats::from_embeddings("c", &embs).unwrap();
        let cfg = ReconstructionConfig { reg_gamma: 0.0, ..Default::default() };
        let inv = noise_transform(&s, &cfg).unwrap();
        let prod = s.covariance.matmul(&inv);
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - e).abs() < 1e-8);
            }
        }
        let sq = noise_transform(&s, &ReconstructionConfig { transform: Transform::Sqrt, ..cfg }).unwrap();
        let back = sq.matmul(&sq);
        for (a, b) in back.data.iter().zip(&s.covariance.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_mean_converges_to_prototype() {
        let s = stats(vec![1.0, -2.0], vec![0.5, 0.1, 0.1, 0.3]);
        let cfg = ReconstructionConfig { samples_per_class: 10_000, transform: Transform::Sqrt, ..Default::default() };
        let draws = reconstruct(&s, &cfg, 99).unwrap();
        for j in 0..2 {
            let mean = draws.iter().map(|d| d[j] as f64).sum::<f64>() / draws.len() as f64;
            let var = s.covariance.get(j, j) * (1.0 + 0.01);
            let se = (var / draws.len() as f64).sqrt();
            assert!((mean - s.prototype[j] as f64).abs() < 3.0 * se, "dim {j}: {mean}");
        }
        assert_eq!(reconstruct(&s, &cfg, 99).unwrap(), draws);
    }

    #[test]
    fn predict_trivia() {
        let clf = PrototypeClassifier::new(2)
            .extend(&[stats(vec![1.0, 0.0], vec![0.0; 4]), ClassStats { class_id: "d".into(), ..stats(vec![0.0, 1.0], vec![0.0; 4]) }])
            .unwrap();
        assert_eq!(clf.predict(&[0.9, 0.1]).unwrap(), 0);
        assert_eq!(clf.predict(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(clf.predict(&[0.0, 1.0]).unwrap(), 1);
        assert!(matches!(PrototypeClassifier::new(2).predict(&[1.0, 0.0]), Err(Error::NoClasses)));
    }

    #[test]
    fn extend_contract() {
        let mk = |i: usize| ClassStats { class_id: format!("k{i}"), ..stats(vec![i as f32, 1.0], vec![0.0; 4]) };
        let five = PrototypeClassifier::new(2).extend(&(0..5).map(mk).collect::<Vec<_>>()).unwrap();
        let ten = five.extend(&(5..10).map(mk).collect::<Vec<_>>()).unwrap();
        assert_eq!(ten.len(), 10);
        assert_eq!(ten.classes[..5], five.classes[..]);
        assert_eq!(five.extend(&[]).unwrap(), five);
        assert!(matches!(five.extend(&[mk(3)]), Err(Error::DuplicateClass(c)) if c == "k3"));
    }

    #[test]
    fn stats_record_round_trip() {
        let s = vec![stats(vec![1.0, 2.0], vec![0.5, 0.25, 0.25, 1.0 / 3.0]), ClassStats { class_id: "zz".into(), ..stats(vec![3.0], vec![7.0]) }];
        let bytes = stats_to_bytes(&s);
        assert_eq!(stats_from_bytes(&bytes).unwrap(), s);
        assert!(stats_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn decisions_are_scale_invariant(e in prop::collection::vec(-5.0f32..5.0, 3), c in 0.01f32..100.0) {
            let clf = PrototypeClassifier::new(3).extend(&[
                ClassStats { class_id: "a".into(), ..stats(vec![1.0, 0.2, -0.3], vec![0.0; 9]) },
                ClassStats { class_id: "b".into(), ..stats(vec![-0.4, 1.0, 0.1], vec![0.0; 9]) },
                ClassStats { class_id: "c".into(), ..stats(vec![0.1, -0.2, 1.0], vec![0.0; 9]) },
            ]).unwrap();
            prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
            let scaled: Vec<f32> = e.iter().map(|v| v * c).collect();
            let a = clf.predict(&e).unwrap();
            let b = clf.predict(&scaled).unwrap();
            // exact ties can flip under rounding; require a clear margin
            let sims: Vec<f64> = clf.classes.iter().map(|(_, p)| cosine(&e, p)).collect();
            let mut sorted = sims.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(sorted[0] - sorted[1] > 1e-5);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn prototype_is_order_invariant(mut rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 4), 1..8)) {
            let p = compute_prototype(&rows).unwrap();
            rows.reverse();
            let q = compute_prototype(&rows).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn shrinkage_handles_rank_deficiency(seed in 0u64..1000, dim in 6usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let embs: Vec<Vec<f32>> = (0..5).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let s = ClassStats::from_embeddings("c", &embs).unwrap();
            let out = reconstruct(&s, &ReconstructionConfig::default(), seed).unwrap();
            prop_assert!(out.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
