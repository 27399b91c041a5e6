//! Losses, the cosine-annealed optimizer and the training loops: base
//! session finetuning, incremental branch training with embedding replay,
//! and supervised pretraining.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::LogMelSpec;
use crate::autodiff::{grad, Bound, Gradients, Tape, Var};
use crate::classifier::{compute_prototype, noise_transform, reconstruct_with_noise, standard_normal_rows, ClassStats, CosineHead, ReconstructionConfig};
use crate::ede::EdeState;
use crate::encoder::{self, blocks_forward, embed_patches, patch_matrix, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, write_atomic, ParamSet, Tensor};
use crate::tensor::{Mat, Real};

pub const HEAD: &str = "head.w";
pub const AUX_HEAD: &str = "aux.w";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight λ of the auxiliary loss.
    pub lambda: f64,
    /// Cosine-head scale η.
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 0.001,
            lr_min: 0.0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1.0,
            eta: crate::classifier::DEFAULT_ETA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        self.validate_rates()
    }

    fn validate_rates(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return bad("learning rates must satisfy lr0 > lr_min >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidStep { step, total: total_steps });
    }
    if total_steps == 0 {
        return Ok(cfg.lr0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + phase.cos()))
}

/// Per-tensor optimizer state, aligned with the parameter set it updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum as f32,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            first: zeros(),
            second: if cfg.optimizer == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every non-frozen tensor. Frozen tensors are untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        if !params.same_layout(&grads.tensors) || self.first.len() != params.len() {
            return Err(Error::ShapeError("gradients do not match parameters".into()));
        }
        for (name, g) in grads.tensors.iter() {
            if !g.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalError(format!("gradient of {name}")));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads.tensors.iter()).enumerate() {
            if p.frozen {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    let lr = lr as f32;
                    for ((w, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                        *vi = self.momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (j, (w, &gi)) in p.data.iter_mut().zip(&g.data).enumerate() {
                        let gi = gi as f64;
                        let m = b1 * self.first[i][j] as f64 + (1.0 - b1) * gi;
                        let v = b2 * self.second[i][j] as f64 + (1.0 - b2) * gi * gi;
                        self.first[i][j] = m as f32;
                        self.second[i][j] = v as f32;
                        let upd = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
                        *w = (*w as f64 - upd) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    /// Moments as a parameter set (`m.<i>`, `v.<i>`) plus the step count.
    pub fn to_params(&self) -> Result<(ParamSet, u64)> {
        let mut p = ParamSet::new();
        for (i, m) in self.first.iter().enumerate() {
            p.insert(format!("m.{i}"), Tensor::new(vec![m.len()], m.clone()))?;
        }
        for (i, v) in self.second.iter().enumerate() {
            p.insert(format!("v.{i}"), Tensor::new(vec![v.len()], v.clone()))?;
        }
        Ok((p, self.steps))
    }

    pub fn restore(cfg: &TrainConfig, params: &ParamSet, state: &ParamSet, steps: u64) -> Result<Self> {
        let mut opt = Self::new(cfg, params);
        let fill = |prefix: &str, dst: &mut Vec<Vec<f32>>| -> Result<()> {
            for (i, slot) in dst.iter_mut().enumerate() {
                let t = state
                    .get(&format!("{prefix}.{i}"))
                    .filter(|t| t.data.len() == slot.len())
                    .ok_or_else(|| Error::IncompatibleCheckpoint(format!("optimizer state {prefix}.{i}")))?;
                slot.copy_from_slice(&t.data);
            }
            Ok(())
        };
        fill("m", &mut opt.first)?;
        fill("v", &mut opt.second)?;
        opt.steps = steps;
        Ok(opt)
    }
}

/// Cross-entropy over η-scaled cosine logits of `e` against the rows of `w`.
pub fn base_loss_on_tape<T: Real>(tape: &mut Tape<T>, e: Var, w: Var, eta: T, label: usize) -> Result<Var> {
    let logits = tape.cosine_logits(e, w, eta);
    tape.cross_entropy(logits, label)
}

/// Base loss on the main embedding plus λ times the auxiliary-head loss on
/// the new-branch embedding. With λ = 0 the auxiliary term is not built.
#[allow(clippy::too_many_arguments)]
pub fn inc_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    main_e: Var,
    aux_e: Var,
    w: Var,
    aux_w: Var,
    eta: T,
    label: usize,
    aux_label: usize,
    lambda: T,
) -> Result<Var> {
    if lambda < T::zero() {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    let base = base_loss_on_tape(tape, main_e, w, eta, label)?;
    if lambda == T::zero() {
        return Ok(base);
    }
    let aux = base_loss_on_tape(tape, aux_e, aux_w, eta, aux_label)?;
    let aux = tape.scale(aux, lambda);
    Ok(tape.add(base, aux))
}

fn vector_param(name: &str, v: &[f64], set: &mut ParamSet<f64>) -> Result<()> {
    set.insert(name, Tensor::new(vec![v.len()], v.to_vec()))
}

fn matrix_param(name: &str, m: &Mat<f64>, set: &mut ParamSet<f64>) -> Result<()> {
    set.insert(name, Tensor::new(vec![m.rows, m.cols], m.data.clone()))
}

/// Eq. 1 loss for one embedding; gradients are keyed `e` and `head.w`.
pub fn base_loss(e: &[f64], label: usize, w: &Mat<f64>, eta: f64) -> Result<(f64, Gradients<f64>)> {
    let mut p = ParamSet::new();
    vector_param("e", e, &mut p)?;
    matrix_param(HEAD, w, &mut p)?;
    grad(&p, |tape, b| base_loss_on_tape(tape, b.var("e")?, b.var(HEAD)?, eta, label))
}

/// Incremental loss for one sample; gradients are keyed `e`, `e.aux`,
/// `head.w` and `aux.w`.
#[allow(clippy::too_many_arguments)]
pub fn inc_loss(
    main_e: &[f64],
    aux_e: &[f64],
    label: usize,
    aux_label: usize,
    w: &Mat<f64>,
    aux_w: &Mat<f64>,
    eta: f64,
    lambda: f64,
) -> Result<(f64, Gradients<f64>)> {
    let mut p = ParamSet::new();
    vector_param("e", main_e, &mut p)?;
    vector_param("e.aux", aux_e, &mut p)?;
    matrix_param(HEAD, w, &mut p)?;
    matrix_param(AUX_HEAD, aux_w, &mut p)?;
    grad(&p, |tape, b| {
        inc_loss_on_tape(tape, b.var("e")?, b.var("e.aux")?, b.var(HEAD)?, b.var(AUX_HEAD)?, eta, label, aux_label, lambda)
    })
}

/// One line of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub session: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or(Error::EmptyInput)?;
    for t in it {
        acc = tape.add(acc, t);
    }
    Ok(tape.scale(acc, T::one() / T::lit(n as f64)))
}

/// Mean base loss of full-encoder embeddings over an episode. The bound set
/// holds the encoder and [`HEAD`].
pub fn episode_base_loss<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    enc: &EncoderConfig,
    patches: &[Mat<T>],
    labels: &[usize],
    eta: T,
) -> Result<Var> {
    let w = b.var(HEAD)?;
    let mut terms = Vec::with_capacity(patches.len());
    for (p, &y) in patches.iter().zip(labels) {
        let x = tape.constant(p.clone());
        let e = encode_tokens(tape, b, enc, x)?;
        terms.push(base_loss_on_tape(tape, e, w, eta, y)?);
    }
    mean_of(tape, terms)
}

/// Inputs of one incremental training step, generic over precision.
pub struct IncrementalEpisode<'a, T> {
    pub pretrained: Option<&'a [Vec<T>]>,
    pub tokens: &'a [Mat<T>],
    pub labels: &'a [usize],
    pub aux_labels: &'a [usize],
    /// Reconstructed embeddings with their head index.
    pub replay: &'a [(Vec<T>, usize)],
}

/// Mean incremental loss: new samples run through the specialized blocks and
/// contribute the base and auxiliary terms; replayed embeddings contribute
/// the base term only. The bound set holds the active branch, [`HEAD`] and
/// [`AUX_HEAD`].
pub fn episode_inc_loss<T: Real>(
    tape: &mut Tape<T>,
    b: &Bound,
    enc: &EncoderConfig,
    ep: &IncrementalEpisode<'_, T>,
    eta: T,
    lambda: T,
) -> Result<Var> {
    let split = enc.split()?;
    let w = b.var(HEAD)?;
    let aw = b.var(AUX_HEAD)?;
    let mut terms = Vec::with_capacity(ep.tokens.len() + ep.replay.len());
    for (i, tok) in ep.tokens.iter().enumerate() {
        let x = tape.constant(tok.clone());
        let y = blocks_forward(tape, b, enc, split..enc.depth, x)?;
        let e_m = tape.mean_rows(y);
        let main = match ep.pretrained {
            Some(pre) => {
                let p = tape.constant(Mat::row_vector(pre[i].clone()));
                tape.concat_cols(&[p, e_m])
            }
            None => e_m,
        };
        terms.push(inc_loss_on_tape(tape, main, e_m, w, aw, eta, ep.labels[i], ep.aux_labels[i], lambda)?);
    }
    for (e, label) in ep.replay {
        let e = tape.constant(Mat::row_vector(e.clone()));
        terms.push(base_loss_on_tape(tape, e, w, eta, *label)?);
    }
    mean_of(tape, terms)
}

fn class_prototypes(embeddings: &[Vec<f32>], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<f32>>> {
    (0..n_classes)
        .map(|c| {
            let members: Vec<Vec<f32>> =
                embeddings.iter().zip(labels).filter(|(_, &l)| l == c).map(|(e, _)| e.clone()).collect();
            if members.is_empty() {
                return Err(Error::EmptyClass(format!("#{c}")));
            }
            compute_prototype(&members)
        })
        .collect()
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, n_classes }),
        None => Ok(()),
    }
}

/// Result of whole-encoder finetuning.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub params: ParamSet,
    pub head: CosineHead,
    /// Optimizer steps applied to encoder parameters.
    pub encoder_updates: u64,
}

/// Finetunes every non-frozen encoder tensor plus a cosine head (rows
/// initialized to the class prototypes under `params`) with the base loss,
/// one full-batch step per epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_full(
    params: &ParamSet,
    specs: &[&LogMelSpec],
    labels: &[usize],
    n_classes: usize,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    log: &mut Vec<EpochRecord>,
    phase: &str,
    session: usize,
) -> Result<Finetuned> {
    cfg.validate_rates()?;
    if specs.len() != labels.len() || specs.is_empty() {
        return Err(Error::ShapeError(format!("{} inputs for {} labels", specs.len(), labels.len())));
    }
    check_labels(labels, n_classes)?;
    let initial = encoder::encode_batch(specs, params, enc)?;
    let protos = class_prototypes(&initial, labels, n_classes)?;
    let head = CosineHead::from_prototypes(&protos.iter().map(Vec::as_slice).collect::<Vec<_>>(), cfg.eta)?;
    if cfg.epochs == 0 {
        return Ok(Finetuned { params: params.clone(), head, encoder_updates: 0 });
    }
    let patches = specs.iter().map(|s| patch_matrix::<f32>(s, enc)).collect::<Result<Vec<_>>>()?;
    let mut train = params.clone();
    train.insert(HEAD, Tensor::new(vec![n_classes, head.dim()], head.weights.data.clone()))?;
    let mut opt = Optimizer::new(cfg, &train);
    let eta = cfg.eta as f32;
    let trains_encoder = params.iter().any(|(_, t)| !t.frozen);
    let mut updates = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg)?;
        let (loss, g) = grad(&train, |tape, b| episode_base_loss(tape, b, enc, &patches, labels, eta))?;
        opt.step(&mut train, &g, lr)?;
        if trains_encoder {
            updates += 1;
        }
        log.push(EpochRecord { phase: phase.into(), session, epoch, loss: loss as f64, lr });
    }
    let w = train.get(HEAD).expect("head inserted").data.clone();
    let head = CosineHead::new(Mat::from_vec(n_classes, head.dim(), w), cfg.eta)?;
    Ok(Finetuned { params: train.filter(|n| n != HEAD), head, encoder_updates: updates })
}

fn encode_tokens<T: Real>(tape: &mut Tape<T>, b: &Bound, enc: &EncoderConfig, patches: Var) -> Result<Var> {
    let t = embed_patches(tape, b, patches)?;
    let t = blocks_forward(tape, b, enc, 0..enc.depth, t)?;
    Ok(tape.mean_rows(t))
}

/// Session-0 finetuning of the pretrained encoder with the base loss.
pub fn finetune_base(
    pretrained: &ParamSet,
    specs: &[&LogMelSpec],
    labels: &[usize],
    n_classes: usize,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    log: &mut Vec<EpochRecord>,
) -> Result<Finetuned> {
    finetune_full(pretrained, specs, labels, n_classes, enc, cfg, log, "base", 0)
}

/// One naive finetuning session of the single-branch baseline: the whole
/// model trains on the new classes only, with no replay and no freezing.
pub fn finetune_baseline_step(
    params: &ParamSet,
    specs: &[&LogMelSpec],
    labels: &[usize],
    n_classes: usize,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    log: &mut Vec<EpochRecord>,
    session: usize,
) -> Result<Finetuned> {
    let mut p = params.clone();
    p.set_frozen(false);
    finetune_full(&p, specs, labels, n_classes, enc, cfg, log, "finetune", session)
}

/// Old-class statistics with their noise transforms precomputed.
#[derive(Clone, Debug)]
pub struct ReplayStore {
    pub stats: Vec<ClassStats>,
    transforms: Vec<Mat<f64>>,
    cfg: ReconstructionConfig,
}

impl ReplayStore {
    pub fn new(cfg: &ReconstructionConfig) -> Self {
        Self { stats: Vec::new(), transforms: Vec::new(), cfg: cfg.clone() }
    }

    pub fn add(&mut self, stats: &[ClassStats]) -> Result<()> {
        for s in stats {
            if self.stats.iter().any(|o| o.class_id == s.class_id) {
                return Err(Error::DuplicateClass(s.class_id.clone()));
            }
            self.transforms.push(noise_transform(s, &self.cfg)?);
            self.stats.push(s.clone());
        }
        Ok(())
    }

    pub fn config(&self) -> &ReconstructionConfig {
        &self.cfg
    }

    /// `samples_per_class` reconstructed embeddings of `class_id`.
    pub fn sample(&self, class_id: &str, seed: u64) -> Result<Vec<Vec<f32>>> {
        let i = self
            .stats
            .iter()
            .position(|s| s.class_id == class_id)
            .ok_or_else(|| Error::IncompleteReplayStore(class_id.to_string()))?;
        let s = &self.stats[i];
        let noise = standard_normal_rows(self.cfg.samples_per_class, s.dim(), seed);
        Ok(reconstruct_with_noise(s, &self.transforms[i], &noise))
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// New-class training data of an incremental session, already passed
/// through the frozen parts of the extractor.
pub struct IncrementalData<'a> {
    /// ψ_pre embeddings, or `None` when the variant has no pretrained half.
    pub pretrained: Option<&'a [Vec<f32>]>,
    /// ψ_g token matrices.
    pub tokens: &'a [Mat<f32>],
    /// Index into the head (all classes seen so far, old ones first).
    pub labels: &'a [usize],
    /// Index into the auxiliary head (this session's classes).
    pub aux_labels: &'a [usize],
}

/// Heads and bookkeeping returned by [`train_incremental`].
#[derive(Clone, Debug)]
pub struct IncrementalOutcome {
    pub head: CosineHead,
    pub aux_head: CosineHead,
    pub encoder_updates: u64,
}

/// Trains the active branch, the head over all seen classes and the
/// auxiliary head over the new classes. Each epoch mixes the new samples
/// with `samples_per_class` reconstructed embeddings of every old class,
/// which enter at the head (they never pass through the encoder).
#[allow(clippy::too_many_arguments)]
pub fn train_incremental(
    state: &mut EdeState,
    head: &CosineHead,
    aux_head: &CosineHead,
    data: &IncrementalData<'_>,
    old_classes: &[String],
    replay: &ReplayStore,
    cfg: &TrainConfig,
    log: &mut Vec<EpochRecord>,
    session: usize,
) -> Result<IncrementalOutcome> {
    cfg.validate_rates()?;
    let n = data.tokens.len();
    if data.labels.len() != n || data.aux_labels.len() != n || data.pretrained.is_some_and(|p| p.len() != n) {
        return Err(Error::ShapeError("incremental inputs differ in length".into()));
    }
    check_labels(data.labels, head.n_classes())?;
    check_labels(data.aux_labels, aux_head.n_classes())?;
    if old_classes.len() > head.n_classes() {
        return Err(Error::ShapeError("more old classes than head rows".into()));
    }
    for c in old_classes {
        if !replay.stats.iter().any(|s| &s.class_id == c) {
            return Err(Error::IncompleteReplayStore(c.clone()));
        }
    }
    let mut train = state.active_branch().clone();
    train.insert(HEAD, Tensor::new(vec![head.n_classes(), head.dim()], head.weights.data.clone()))?;
    train.insert(AUX_HEAD, Tensor::new(vec![aux_head.n_classes(), aux_head.dim()], aux_head.weights.data.clone()))?;
    let mut opt = Optimizer::new(cfg, &train);
    let eta = cfg.eta as f32;
    let lambda = cfg.lambda as f32;
    let enc = state.cfg.clone();
    let mut updates = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg)?;
        let mut replayed = Vec::new();
        for (ci, c) in old_classes.iter().enumerate() {
            for e in replay.sample(c, mix_seed(&[cfg.seed, session as u64, epoch as u64, ci as u64]))? {
                replayed.push((e, ci));
            }
        }
        let ep = IncrementalEpisode {
            pretrained: data.pretrained,
            tokens: data.tokens,
            labels: data.labels,
            aux_labels: data.aux_labels,
            replay: &replayed,
        };
        let (loss, g) = grad(&train, |tape, b| episode_inc_loss(tape, b, &enc, &ep, eta, lambda))?;
        opt.step(&mut train, &g, lr)?;
        updates += 1;
        log.push(EpochRecord { phase: "incremental".into(), session, epoch, loss: loss as f64, lr });
    }
    let take = |name: &str, rows: usize, dim: usize| {
        CosineHead::new(Mat::from_vec(rows, dim, train.get(name).expect("inserted").data.clone()), cfg.eta)
    };
    let new_head = take(HEAD, head.n_classes(), head.dim())?;
    let new_aux = take(AUX_HEAD, aux_head.n_classes(), aux_head.dim())?;
    *state.active_branch_mut() = train.filter(|n| n != HEAD && n != AUX_HEAD);
    Ok(IncrementalOutcome { head: new_head, aux_head: new_aux, encoder_updates: updates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, lr0: 0.001, lr_min: 0.0, optimizer: OptimizerKind::Adam, eta: 16.0, seed: 0 }
    }
}

impl PretrainConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            lr_min: self.lr_min,
            optimizer: self.optimizer,
            eta: self.eta,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.train_config().validate()
    }
}

/// Everything needed to continue pretraining after `epochs_done` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainCheckpoint {
    /// Encoder parameters plus the head under [`HEAD`].
    pub params: ParamSet,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct PretrainMeta {
    epochs_done: usize,
    optimizer_steps: u64,
    digest: String,
}

impl PretrainCheckpoint {
    /// Encoder parameters without the head.
    pub fn encoder(&self) -> ParamSet {
        self.params.filter(|n| n != HEAD)
    }

    pub fn save(&self, dir: &Path, digest: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.params, digest, &dir.join("state.ffck"))?;
        let (opt, steps) = self.optimizer.to_params()?;
        save_checkpoint(&opt, digest, &dir.join("optimizer.ffck"))?;
        let meta = PretrainMeta { epochs_done: self.epochs_done, optimizer_steps: steps, digest: digest.into() };
        write_atomic(&dir.join("progress.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn load(dir: &Path, cfg: &PretrainConfig, digest: &str) -> Result<Self> {
        let meta: PretrainMeta = serde_json::from_slice(&fs::read(dir.join("progress.json"))?)?;
        if meta.digest != digest {
            return Err(Error::IncompatibleCheckpoint(format!("resume digest {} != config digest {digest}", meta.digest)));
        }
        let (params, _) = load_checkpoint(&dir.join("state.ffck"))?;
        let (opt, _) = load_checkpoint(&dir.join("optimizer.ffck"))?;
        let optimizer = Optimizer::restore(&cfg.train_config(), &params, &opt, meta.optimizer_steps)?;
        Ok(Self { params, optimizer, epochs_done: meta.epochs_done })
    }
}

/// Supervised pretraining of a fresh encoder with the base loss over
/// shuffled minibatches. `resume` continues a saved run; `on_epoch` sees the
/// state after every epoch (for checkpointing and logging).
pub fn pretrain(
    specs: &[&LogMelSpec],
    labels: &[usize],
    n_classes: usize,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    resume: Option<PretrainCheckpoint>,
    mut on_epoch: impl FnMut(&PretrainCheckpoint, &EpochRecord) -> Result<()>,
) -> Result<PretrainCheckpoint> {
    cfg.validate()?;
    check_labels(labels, n_classes)?;
    if specs.len() != labels.len() || specs.is_empty() {
        return Err(Error::ShapeError(format!("{} inputs for {} labels", specs.len(), labels.len())));
    }
    let tcfg = cfg.train_config();
    let mut state = match resume {
        Some(s) => s,
        None => {
            let params = encoder::init_params(enc, cfg.seed)?;
            let init = encoder::encode_batch(specs, &params, enc)?;
            let protos = class_prototypes(&init, labels, n_classes)?;
            let mut p = params;
            p.insert(HEAD, Tensor::new(vec![n_classes, enc.model_dim], protos.concat()))?;
            let optimizer = Optimizer::new(&tcfg, &p);
            PretrainCheckpoint { params: p, optimizer, epochs_done: 0 }
        }
    };
    let patches = specs.iter().map(|s| patch_matrix::<f32>(s, enc)).collect::<Result<Vec<_>>>()?;
    let per_epoch = specs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let eta = cfg.eta as f32;
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(epoch * per_epoch + bi, total, &tcfg)?;
            let batch_patches: Vec<Mat<f32>> = batch.iter().map(|&i| patches[i].clone()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, g) =
                grad(&state.params, |tape, b| episode_base_loss(tape, b, enc, &batch_patches, &batch_labels, eta))?;
            state.optimizer.step(&mut state.params, &g, lr)?;
            epoch_loss += loss as f64 * batch.len() as f64;
        }
        state.epochs_done = epoch + 1;
        let rec = EpochRecord { phase: "pretrain".into(), session: 0, epoch, loss: epoch_loss / specs.len() as f64, lr };
        on_epoch(&state, &rec)?;
    }
    Ok(state)
}
