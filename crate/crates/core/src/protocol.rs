//! Session orchestration: class splits, N-way K-shot episodes, the
//! base → incremental pipeline and cumulative evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{cache_features, logmel, synth_corpus, FrontendConfig, LogMelSpec, ManifestEntry, SynthSpec};
use crate::classifier::{save_stats, ClassStats, CosineHead, PrototypeClassifier, ReconstructionConfig};
use crate::ede::{combine, EdeState, Variant};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{save_checkpoint, write_atomic, ParamSet};
use crate::stats::{accuracy, average_accuracy};
use crate::tensor::Mat;
use crate::training::{
    finetune_base, finetune_baseline_step, mix_seed, train_incremental, write_metrics, EpochRecord, Finetuned,
    IncrementalData, ReplayStore, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Session count M.
    pub sessions: usize,
    /// Classes per session N.
    pub ways: usize,
    /// Training samples per class K.
    pub shots: usize,
    pub test_per_class: usize,
    pub variant: Variant,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { sessions: 5, ways: 5, shots: 5, test_per_class: 20, variant: Variant::PPlusExpandedF, repeats: 100, seed: 0 }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sessions == 0 || self.ways == 0 || self.shots == 0 || self.test_per_class == 0 || self.repeats == 0 {
            return Err(Error::InvalidConfig("sessions, ways, shots, test_per_class and repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Labelled log-mel features, indexed by item.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub specs: Vec<LogMelSpec>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        let mut c = self.labels.clone();
        c.sort();
        c.dedup();
        c
    }

    /// Features for manifest entries, read from or written to `cache`.
    pub fn from_manifest(entries: &[ManifestEntry], frontend: &FrontendConfig, cache: Option<&Path>) -> Result<Self> {
        let specs = match cache {
            Some(path) => cache_features(entries, frontend, path)?.0,
            None => entries
                .iter()
                .map(|e| logmel(&crate::audio::read_wav(&e.path)?, frontend))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            ids: entries.iter().map(|e| e.path.display().to_string()).collect(),
            labels: entries.iter().map(|e| e.label.clone()).collect(),
            specs,
        })
    }

    /// Synthesizes the corpus in memory.
    pub fn synthesize(spec: &SynthSpec, frontend: &FrontendConfig) -> Result<Self> {
        let (entries, waves) = synth_corpus(spec)?;
        let specs = waves.par_iter().map(|w| logmel(w, frontend)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: entries.iter().map(|e| e.path.display().to_string()).collect(),
            labels: entries.into_iter().map(|e| e.label).collect(),
            specs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionData {
    pub classes: Vec<String>,
    /// The N·K-sample training episode (item indices, class-major).
    pub train: Vec<usize>,
    /// Remaining non-test items of the session's classes.
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSplit {
    pub seed: u64,
    pub sessions: Vec<SessionData>,
}

impl SessionSplit {
    /// Split with item ids in place of indices, for the run directory.
    pub fn record(&self, corpus: &Corpus) -> serde_json::Value {
        let ids = |v: &[usize]| v.iter().map(|&i| corpus.ids[i].clone()).collect::<Vec<_>>();
        serde_json::json!({
            "seed": self.seed,
            "sessions": self.sessions.iter().map(|s| serde_json::json!({
                "classes": s.classes,
                "train": ids(&s.train),
                "test": ids(&s.test),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Picks `shots` items of each class from `pool`. With `shots` equal to a
/// class's pool size the whole pool is returned in pool order; otherwise
/// the picks keep their relative pool order.
pub fn sample_episode(
    pool: &[usize],
    labels: &[String],
    classes: &[String],
    shots: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes.len() * shots);
    for c in classes {
        let members: Vec<usize> = pool.iter().copied().filter(|&i| &labels[i] == c).collect();
        if members.len() < shots {
            return Err(Error::InsufficientData(format!("class {c} has {} pool items, {shots} shots requested", members.len())));
        }
        let mut pos: Vec<usize> = (0..members.len()).collect();
        let (picked, _) = pos.partial_shuffle(&mut rng, shots);
        let mut picked = picked.to_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|p| members[p]));
    }
    Ok(out)
}

/// Assigns `sessions × ways` randomly chosen classes to sessions, holds out
/// `test_per_class` items per class and samples each session's episode.
pub fn build_splits(labels: &[String], cfg: &ProtocolConfig, seed: u64) -> Result<SessionSplit> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let needed = cfg.sessions * cfg.ways;
    if by_class.len() < needed {
        return Err(Error::InsufficientData(format!("{needed} classes needed, {} available", by_class.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<&str> = by_class.keys().copied().collect();
    classes.shuffle(&mut rng);
    classes.truncate(needed);
    let mut sessions = Vec::with_capacity(cfg.sessions);
    for (m, chunk) in classes.chunks(cfg.ways).enumerate() {
        let mut pool = Vec::new();
        let mut test = Vec::new();
        for &c in chunk {
            let mut items = by_class[c].clone();
            if items.len() < cfg.shots + cfg.test_per_class {
                return Err(Error::InsufficientData(format!(
                    "class {c} has {} items, {} needed",
                    items.len(),
                    cfg.shots + cfg.test_per_class
                )));
            }
            items.shuffle(&mut rng);
            test.extend_from_slice(&items[..cfg.test_per_class]);
            pool.extend_from_slice(&items[cfg.test_per_class..]);
        }
        let names: Vec<String> = chunk.iter().map(|c| c.to_string()).collect();
        let train = sample_episode(&pool, labels, &names, cfg.shots, mix_seed(&[seed, m as u64]))?;
        sessions.push(SessionData { classes: names, train, pool, test });
    }
    Ok(SessionSplit { seed, sessions })
}

/// Test items of sessions `0..=m`.
pub fn cumulative_test_set(split: &SessionSplit, m: usize) -> Vec<usize> {
    split.sessions.iter().take(m + 1).flat_map(|s| s.test.iter().copied()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// The expandable dual-embedding extractor (any variant).
    Ede,
    /// Naive whole-model finetuning each session with stale old prototypes.
    Finetune,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ede" => Ok(Method::Ede),
            "finetune" => Ok(Method::Finetune),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?} (expected ede or finetune)"))),
        }
    }
}

impl Method {
    pub fn name(self, variant: Variant) -> String {
        match self {
            Method::Ede => format!("ede:{variant}"),
            Method::Finetune => "finetune".into(),
        }
    }
}

/// Outcome of one protocol run. Wall-clock timings are kept out of the
/// serialized record so identical runs produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub variant: Option<Variant>,
    pub repeat: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Cumulative-test accuracy A_m after each completed session.
    pub accuracies: Vec<f64>,
    pub aa: f64,
    /// Accuracy on classes of earlier sessions (absent for session 0).
    pub old_class_accuracies: Vec<Option<f64>>,
    pub completed: bool,
    pub error: Option<String>,
    pub encoder_updates: u64,
    pub branch_count: usize,
    #[serde(skip)]
    pub session_seconds: Vec<f64>,
}

impl RunReport {
    fn new(method: Method, variant: Variant, repeat: usize, seed: u64, digest: &str) -> Self {
        Self {
            method: method.name(variant),
            variant: (method == Method::Ede).then_some(variant),
            repeat,
            seed,
            config_digest: digest.into(),
            accuracies: Vec::new(),
            aa: 0.0,
            old_class_accuracies: Vec::new(),
            completed: false,
            error: None,
            encoder_updates: 0,
            branch_count: 0,
            session_seconds: Vec::new(),
        }
    }
}

/// Shared, read-only inputs of every run plus caches that depend only on
/// them: pretrained embeddings of every item and base-session finetuning
/// results per split seed.
pub struct Workbench {
    pub corpus: Arc<Corpus>,
    pub pretrained: ParamSet,
    pub encoder: EncoderConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub reconstruction: ReconstructionConfig,
    pub digest: String,
    pretrained_embeddings: OnceLock<Vec<Vec<f32>>>,
    base_cache: Mutex<HashMap<u64, Arc<(Finetuned, Vec<EpochRecord>)>>>,
}

impl Workbench {
    pub fn new(
        corpus: Arc<Corpus>,
        pretrained: ParamSet,
        encoder: EncoderConfig,
        protocol: ProtocolConfig,
        train: TrainConfig,
        reconstruction: ReconstructionConfig,
        digest: String,
    ) -> Result<Self> {
        encoder.validate()?;
        encoder.split()?;
        protocol.validate()?;
        train.validate()?;
        reconstruction.validate()?;
        encoder::check_layout(&pretrained, &encoder, "pretrained")?;
        Ok(Self {
            corpus,
            pretrained,
            encoder,
            protocol,
            train,
            reconstruction,
            digest,
            pretrained_embeddings: OnceLock::new(),
            base_cache: Mutex::new(HashMap::new()),
        })
    }

    /// ψ_pre of every corpus item, computed on first use.
    fn pretrained_embeddings(&self) -> Result<&Vec<Vec<f32>>> {
        if let Some(e) = self.pretrained_embeddings.get() {
            return Ok(e);
        }
        let refs: Vec<&LogMelSpec> = self.corpus.specs.iter().collect();
        let chunks: Vec<Vec<Vec<f32>>> = refs
            .par_chunks(64)
            .map(|c| {
                crate::ede::note_pretrained_call();
                encoder::encode_batch(c, &self.pretrained, &self.encoder)
            })
            .collect::<Result<_>>()?;
        Ok(self.pretrained_embeddings.get_or_init(|| chunks.concat()))
    }

    fn base_session(&self, split: &SessionSplit) -> Result<Arc<(Finetuned, Vec<EpochRecord>)>> {
        if let Some(hit) = self.base_cache.lock().expect("cache lock").get(&split.seed) {
            return Ok(hit.clone());
        }
        let s0 = &split.sessions[0];
        let specs: Vec<&LogMelSpec> = s0.train.iter().map(|&i| &self.corpus.specs[i]).collect();
        let labels = local_labels(&self.corpus.labels, &s0.train, &s0.classes);
        let mut log = Vec::new();
        let ft = finetune_base(&self.pretrained, &specs, &labels, s0.classes.len(), &self.encoder, &self.train, &mut log)?;
        let entry = Arc::new((ft, log));
        self.base_cache.lock().expect("cache lock").insert(split.seed, entry.clone());
        Ok(entry)
    }

    pub fn split(&self, seed: u64) -> Result<SessionSplit> {
        build_splits(&self.corpus.labels, &self.protocol, seed)
    }
}

fn local_labels(labels: &[String], items: &[usize], classes: &[String]) -> Vec<usize> {
    items.iter().map(|&i| classes.iter().position(|c| c == &labels[i]).expect("item of session class")).collect()
}

fn stats_for(classes: &[String], items: &[usize], labels: &[String], embeddings: &[Vec<f32>]) -> Result<Vec<ClassStats>> {
    classes
        .iter()
        .map(|c| {
            let members: Vec<Vec<f32>> = items
                .iter()
                .zip(embeddings)
                .filter(|(&i, _)| &labels[i] == c)
                .map(|(_, e)| e.clone())
                .collect();
            ClassStats::from_embeddings(c, &members)
        })
        .collect()
}

struct Evaluation {
    accuracy: f64,
    old_accuracy: Option<f64>,
}

fn evaluate(
    clf: &PrototypeClassifier,
    items: &[usize],
    embeddings: &[Vec<f32>],
    labels: &[String],
    old_classes: usize,
) -> Result<Evaluation> {
    let index: HashMap<&str, usize> = clf.class_ids().enumerate().map(|(i, c)| (c, i)).collect();
    let truth: Vec<usize> = items
        .iter()
        .map(|&i| index.get(labels[i].as_str()).copied().ok_or_else(|| Error::InvalidInput(format!("unknown test class {}", labels[i]))))
        .collect::<Result<_>>()?;
    let pred = embeddings.iter().map(|e| clf.predict(e)).collect::<Result<Vec<_>>>()?;
    let old: Vec<usize> = (0..truth.len()).filter(|&k| truth[k] < old_classes).collect();
    let old_accuracy = if old.is_empty() {
        None
    } else {
        let p: Vec<usize> = old.iter().map(|&k| pred[k]).collect();
        let t: Vec<usize> = old.iter().map(|&k| truth[k]).collect();
        Some(accuracy(&p, &t)?)
    };
    Ok(Evaluation { accuracy: accuracy(&pred, &truth)?, old_accuracy })
}

/// Points in an extractor run at which [`run_protocol_observed`] shows the
/// current state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Session 0, after the base extractor is assembled.
    Built,
    /// Session m ≥ 1, right after the new branch is added.
    Expanded,
    /// Session m ≥ 1, after incremental training.
    Trained,
}

/// Receives `(session, stage, state)` during an extractor run.
pub type Observer<'o> = &'o mut dyn FnMut(usize, Stage, &EdeState);

struct EdeRun<'a> {
    wb: &'a Workbench,
    split: &'a SessionSplit,
    variant: Variant,
    seed: u64,
    out: Option<&'a Path>,
}

impl EdeRun<'_> {
    fn pre(&self, items: &[usize]) -> Result<Option<Vec<Vec<f32>>>> {
        if !self.variant.uses_pretrained() {
            return Ok(None);
        }
        let all = self.wb.pretrained_embeddings()?;
        Ok(Some(items.iter().map(|&i| all[i].clone()).collect()))
    }

    fn embed(&self, state: &EdeState, tokens: &HashMap<usize, Mat<f32>>, items: &[usize]) -> Result<Vec<Vec<f32>>> {
        let pre = self.pre(items)?;
        let fin = if self.variant.uses_finetuned() {
            let toks: Vec<Mat<f32>> = items.iter().map(|i| tokens[i].clone()).collect();
            Some(state.branch_from_tokens(&toks, state.active())?)
        } else {
            None
        };
        Ok((0..items.len())
            .map(|k| combine(pre.as_ref().map(|p| &p[k][..]), fin.as_ref().map(|f| &f[k][..])))
            .collect())
    }

    fn run(&self, report: &mut RunReport, log: &mut Vec<EpochRecord>, observe: Observer<'_>) -> Result<()> {
        let wb = self.wb;
        let corpus = &wb.corpus;
        let labels = &corpus.labels;
        let s0 = &self.split.sessions[0];
        let t0 = Instant::now();

        let mut state = if self.variant.uses_finetuned() {
            let base = wb.base_session(self.split)?;
            log.extend(base.1.iter().cloned());
            report.encoder_updates += base.0.encoder_updates;
            EdeState::build_base(&wb.pretrained, &base.0.params, &wb.encoder, self.variant)?
        } else {
            EdeState::build_base(&wb.pretrained, &wb.pretrained, &wb.encoder, self.variant)?
        };

        // ψ_g is frozen from here on, so its tokens are computed once.
        let mut tokens: HashMap<usize, Mat<f32>> = HashMap::new();
        if self.variant.uses_finetuned() {
            let items: Vec<usize> =
                self.split.sessions.iter().flat_map(|s| s.train.iter().chain(&s.test).copied()).collect();
            let specs: Vec<&LogMelSpec> = items.iter().map(|&i| &corpus.specs[i]).collect();
            for (i, t) in items.iter().zip(state.shallow_tokens(&specs)?) {
                tokens.insert(*i, t);
            }
        }

        observe(0, Stage::Built, &state);
        let dim = state.variant_dim(self.variant);
        let emb0 = self.embed(&state, &tokens, &s0.train)?;
        let stats0 = stats_for(&s0.classes, &s0.train, labels, &emb0)?;
        let mut clf = PrototypeClassifier::new(dim).extend(&stats0)?;
        let mut replay = ReplayStore::new(&wb.reconstruction);
        if self.variant.expands() {
            replay.add(&stats0)?;
        }
        self.finish_session(0, &state, &stats0, &clf, &tokens, report, t0)?;

        for m in 1..self.split.sessions.len() {
            let t0 = Instant::now();
            let sm = &self.split.sessions[m];
            let old_ids: Vec<String> = clf.class_ids().map(String::from).collect();
            if self.variant.expands() {
                state = state.expand();
                observe(m, Stage::Expanded, &state);
                let pre = self.pre(&sm.train)?;
                let toks: Vec<Mat<f32>> = sm.train.iter().map(|i| tokens[i].clone()).collect();
                let branch = state.branch_from_tokens(&toks, state.active())?;
                let main: Vec<Vec<f32>> = (0..sm.train.len())
                    .map(|k| combine(pre.as_ref().map(|p| &p[k][..]), Some(&branch[k])))
                    .collect();
                let new_stats = stats_for(&sm.classes, &sm.train, labels, &main)?;
                let rows: Vec<&[f32]> = clf
                    .classes
                    .iter()
                    .map(|(_, p)| p.as_slice())
                    .chain(new_stats.iter().map(|s| s.prototype.as_slice()))
                    .collect();
                let head = CosineHead::from_prototypes(&rows, wb.train.eta)?;
                let aux_stats = stats_for(&sm.classes, &sm.train, labels, &branch)?;
                let aux_rows: Vec<&[f32]> = aux_stats.iter().map(|s| s.prototype.as_slice()).collect();
                let aux = CosineHead::from_prototypes(&aux_rows, wb.train.eta)?;
                let local = local_labels(labels, &sm.train, &sm.classes);
                let global: Vec<usize> = local.iter().map(|&l| l + old_ids.len()).collect();
                let data = IncrementalData { pretrained: pre.as_deref(), tokens: &toks, labels: &global, aux_labels: &local };
                let cfg = TrainConfig { seed: mix_seed(&[self.seed, 0x1C]), ..wb.train.clone() };
                let out = train_incremental(&mut state, &head, &aux, &data, &old_ids, &replay, &cfg, log, m)?;
                report.encoder_updates += out.encoder_updates;
                observe(m, Stage::Trained, &state);
            }
            let emb = self.embed(&state, &tokens, &sm.train)?;
            let stats = stats_for(&sm.classes, &sm.train, labels, &emb)?;
            clf = clf.extend(&stats)?;
            if self.variant.expands() {
                replay.add(&stats)?;
            }
            self.finish_session(m, &state, &stats, &clf, &tokens, report, t0)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_session(
        &self,
        m: usize,
        state: &EdeState,
        stats: &[ClassStats],
        clf: &PrototypeClassifier,
        tokens: &HashMap<usize, Mat<f32>>,
        report: &mut RunReport,
        started: Instant,
    ) -> Result<()> {
        let test = cumulative_test_set(self.split, m);
        let emb = self.embed(state, tokens, &test)?;
        let old = clf.len() - stats.len();
        let ev = evaluate(clf, &test, &emb, &self.wb.corpus.labels, old)?;
        report.accuracies.push(ev.accuracy);
        report.old_class_accuracies.push(ev.old_accuracy);
        report.branch_count = state.branches.len();
        report.session_seconds.push(started.elapsed().as_secs_f64());
        if let Some(dir) = self.out {
            let sdir = dir.join(format!("session_{m}"));
            state.save_bundle(&sdir.join("ede"), &self.wb.digest)?;
            save_stats(&sdir.join("class_stats.bin"), stats)?;
        }
        Ok(())
    }
}

fn run_finetune(
    wb: &Workbench,
    split: &SessionSplit,
    out: Option<&Path>,
    report: &mut RunReport,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    let corpus = &wb.corpus;
    let labels = &corpus.labels;
    let mut clf = PrototypeClassifier::new(wb.encoder.model_dim);
    let mut params = ParamSet::new();
    for (m, sm) in split.sessions.iter().enumerate() {
        let t0 = Instant::now();
        let specs: Vec<&LogMelSpec> = sm.train.iter().map(|&i| &corpus.specs[i]).collect();
        let local = local_labels(labels, &sm.train, &sm.classes);
        let ft = if m == 0 {
            let base = wb.base_session(split)?;
            log.extend(base.1.iter().cloned());
            base.0.clone()
        } else {
            finetune_baseline_step(&params, &specs, &local, sm.classes.len(), &wb.encoder, &wb.train, log, m)?
        };
        report.encoder_updates += ft.encoder_updates;
        params = ft.params;
        let emb = encoder::encode_batch(&specs, &params, &wb.encoder)?;
        let stats = stats_for(&sm.classes, &sm.train, labels, &emb)?;
        clf = clf.extend(&stats)?;
        let test = cumulative_test_set(split, m);
        let test_specs: Vec<&LogMelSpec> = test.iter().map(|&i| &corpus.specs[i]).collect();
        let test_emb = encoder::encode_batch(&test_specs, &params, &wb.encoder)?;
        let ev = evaluate(&clf, &test, &test_emb, labels, clf.len() - stats.len())?;
        report.accuracies.push(ev.accuracy);
        report.old_class_accuracies.push(ev.old_accuracy);
        report.branch_count = 1;
        report.session_seconds.push(t0.elapsed().as_secs_f64());
        if let Some(dir) = out {
            let sdir = dir.join(format!("session_{m}"));
            fs::create_dir_all(&sdir)?;
            save_checkpoint(&params, &wb.digest, &sdir.join("model.ffck"))?;
            save_stats(&sdir.join("class_stats.bin"), &stats)?;
        }
    }
    Ok(())
}

/// Runs every session of `split`. Failures stop the run and yield a partial
/// report with `completed == false`. With `out`, the split record,
/// per-session checkpoints and class statistics, the metrics stream and the
/// report are written there.
pub fn run_protocol(
    wb: &Workbench,
    split: &SessionSplit,
    method: Method,
    variant: Variant,
    repeat: usize,
    out: Option<&Path>,
) -> RunReport {
    run_protocol_observed(wb, split, method, variant, repeat, out, &mut |_, _, _| {})
}

/// [`run_protocol`] that also hands the extractor state to `observe` at
/// each [`Stage`]. The baseline method never calls it.
pub fn run_protocol_observed(
    wb: &Workbench,
    split: &SessionSplit,
    method: Method,
    variant: Variant,
    repeat: usize,
    out: Option<&Path>,
    observe: Observer<'_>,
) -> RunReport {
    let mut report = RunReport::new(method, variant, repeat, split.seed, &wb.digest);
    let mut log = Vec::new();
    let result = (|| -> Result<()> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            write_atomic(&dir.join("split.json"), &serde_json::to_vec_pretty(&split.record(&wb.corpus))?)?;
        }
        match method {
            Method::Ede => EdeRun { wb, split, variant, seed: split.seed, out }.run(&mut report, &mut log, observe),
            Method::Finetune => run_finetune(wb, split, out, &mut report, &mut log),
        }
    })();
    report.completed = result.is_ok() && report.accuracies.len() == split.sessions.len();
    if let Err(e) = result {
        report.error = Some(e.to_string());
    }
    report.aa = average_accuracy(&report.accuracies).unwrap_or(0.0);
    if let Some(dir) = out {
        let written = (|| -> Result<()> {
            write_metrics(&dir.join("metrics.jsonl"), &log)?;
            write_reports(&dir.join("report.jsonl"), std::slice::from_ref(&report))?;
            let timings = serde_json::json!({ "session_seconds": report.session_seconds });
            write_atomic(&dir.join("timings.json"), &serde_json::to_vec_pretty(&timings)?)
        })();
        if let (Err(e), None) = (written, &report.error) {
            report.error = Some(format!("writing run output: {e}"));
            report.completed = false;
        }
    }
    report
}

/// Runs `repeats` independent splits with seeds `seed + i`, on up to `jobs`
/// threads. Reports come back in repeat order.
pub fn run_repeats(wb: &Workbench, method: Method, variant: Variant, repeats: usize, jobs: usize) -> Result<Vec<RunReport>> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let one = |i: usize| {
        let seed = wb.protocol.seed.wrapping_add(i as u64);
        match wb.split(seed) {
            Ok(split) => run_protocol(wb, &split, method, variant, i, None),
            Err(e) => {
                let mut r = RunReport::new(method, variant, i, seed, &wb.digest);
                r.error = Some(e.to_string());
                r
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let reports: Vec<RunReport> = pool.install(|| (0..repeats).into_par_iter().map(one).collect());
    if reports.iter().all(|r| !r.completed) {
        let first = reports[0].error.clone().unwrap_or_default();
        return Err(Error::AllRunsFailed(format!("{} runs, first error: {first}", reports.len())));
    }
    Ok(reports)
}

/// Line-delimited report records.
pub fn write_reports(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Default output root: `$FFCAC_OUTPUT_ROOT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("FFCAC_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
