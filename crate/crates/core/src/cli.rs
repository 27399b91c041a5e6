//! Command implementations behind the `ffcac` binary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::audio::{load_manifest, synth_corpus, write_manifest, write_wav, CorpusPreset, SynthSpec};
use crate::config::RunConfigFile;
use crate::ede::Variant;
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint, write_atomic};
use crate::protocol::{read_reports, run_protocol, run_repeats, write_reports, Corpus, Method, RunReport, Workbench};
use crate::stats::{accuracy_table, compare_methods, comparison_table, sign_test, summarize, MethodResults};
use crate::training::{pretrain, write_metrics, PretrainCheckpoint};

#[derive(Debug, Parser)]
#[command(name = "ffcac", version, about = "Few-shot class-incremental audio classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a corpus and its manifest.
    Generate(GenerateArgs),
    /// Pretrain the encoder on the pretraining corpus.
    Pretrain(PretrainArgs),
    /// One protocol run (all sessions) into a run directory.
    Run(RunArgs),
    /// Repeated runs of one method into a results file.
    Bench(BenchArgs),
    /// All four extractor variants on shared seeds.
    Ablate(AblateArgs),
    /// Friedman / Nemenyi comparison of results files.
    Stats(StatsArgs),
    /// Accuracy tables for a run directory or results file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML corpus preset, or an explicit synthesis spec (one with `classes`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overwrite a finished pretraining run.
    #[arg(long)]
    pub force: bool,
    /// Continue from the last saved epoch.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `protocol.variant`.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value = "ede")]
    pub method: Method,
    /// Overrides `protocol.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<output root>/run-<method>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the config and print it with defaults filled in.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `protocol.repeats`.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value = "ede")]
    pub method: Method,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Results file; defaults to `<output root>/bench-<method>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; defaults to `<output root>/ablate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Results files, one or more methods each.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Also rank per-session accuracies.
    #[arg(long)]
    pub per_session: bool,
    /// Write the full report (including CD-diagram data) as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (containing report.jsonl) or a results file.
    #[arg(long)]
    pub run: PathBuf,
    /// Comma-separated output instead of a markdown table.
    #[arg(long)]
    pub csv: bool,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn write_corpus(spec: &SynthSpec, dir: &Path) -> Result<usize> {
    let (entries, waves) = synth_corpus(spec)?;
    for (e, w) in entries.iter().zip(&waves) {
        write_wav(&dir.join(&e.path), w)?;
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    write_atomic(&dir.join("spec.json"), &serde_json::to_vec_pretty(spec)?)?;
    Ok(entries.len())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let table: toml::Table = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::InvalidSpec(format!("{}: {e}", p.display())))?;
            text.parse().map_err(|e: toml::de::Error| Error::InvalidSpec(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if table.contains_key("classes") {
        let mut spec: SynthSpec = table.try_into().map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))?;
        if let Some(seed) = a.seed {
            spec.seed = seed;
        }
        let n = write_corpus(&spec, &a.out)?;
        println!("wrote {n} clips of {} classes to {}", spec.n_classes, a.out.display());
    } else {
        let mut preset: CorpusPreset =
            table.try_into().map_err(|e: toml::de::Error| Error::InvalidSpec(e.to_string()))?;
        if let Some(seed) = a.seed {
            preset.seed = seed;
        }
        let (protocol, pre) = preset.build()?;
        let n = write_corpus(&protocol, &a.out.join("protocol"))?;
        println!("wrote {n} clips of {} classes to {}", protocol.n_classes, a.out.join("protocol").display());
        let n = write_corpus(&pre, &a.out.join("pretrain"))?;
        println!("wrote {n} clips of {} classes to {}", pre.n_classes, a.out.join("pretrain").display());
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfigFile> {
    let cfg = RunConfigFile::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Features for a manifest, cached under the output root when enabled.
pub fn load_corpus(cfg: &RunConfigFile, manifest: &Path, name: &str) -> Result<Corpus> {
    let entries = load_manifest(manifest)?;
    let cache = cfg
        .data
        .feature_cache
        .then(|| cfg.output_root().join("cache").join(format!("{name}-{}.ffc", &cfg.frontend.digest()[..16])));
    Corpus::from_manifest(&entries, &cfg.frontend, cache.as_deref())
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dir = cfg.pretrain_dir();
    let out = dir.join("encoder.ffck");
    if out.exists() && !a.force && !a.resume {
        return Err(Error::InvalidConfig(format!("{} exists; pass --force to overwrite or --resume", out.display())));
    }
    let digest = cfg.pretrain_digest();
    let resume = if a.resume { Some(PretrainCheckpoint::load(&dir, &cfg.pretrain, &digest)?) } else { None };
    let corpus = load_corpus(&cfg, &cfg.data.pretrain_manifest, "pretrain")?;
    let classes = corpus.classes();
    let labels: Vec<usize> =
        corpus.labels.iter().map(|l| classes.binary_search(l).expect("label from corpus")).collect();
    let specs: Vec<_> = corpus.specs.iter().collect();
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let metrics = dir.join("metrics.jsonl");
    if resume.is_none() {
        write_metrics(&metrics, &[])?;
    }
    let state = pretrain(&specs, &labels, classes.len(), &cfg.encoder, &cfg.pretrain, resume, |s, rec| {
        s.save(&dir, &digest)?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&metrics)?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        println!("epoch {:>3}/{} loss {:.4} lr {:.2e}", rec.epoch + 1, cfg.pretrain.epochs, rec.loss, rec.lr);
        Ok(())
    })?;
    save_checkpoint(&state.encoder(), &digest, &out)?;
    println!("pretrained encoder written to {}", out.display());
    Ok(())
}

fn workbench(cfg: &RunConfigFile) -> Result<Workbench> {
    let corpus = load_corpus(cfg, &cfg.data.protocol_manifest, "protocol")?;
    let path = cfg.pretrained_path();
    let (pretrained, _) = load_checkpoint(&path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    Workbench::new(
        Arc::new(corpus),
        pretrained,
        cfg.encoder.clone(),
        cfg.protocol.clone(),
        cfg.training.clone(),
        cfg.reconstruction.clone(),
        cfg.digest(),
    )
}

fn print_report(r: &RunReport) {
    for (m, acc) in r.accuracies.iter().enumerate() {
        println!("session {m}: {:.2}%", 100.0 * acc);
    }
    println!("AA: {:.2}%", 100.0 * r.aa);
}

pub fn cmd_run(a: &RunArgs) -> Result<RunReport> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.variant {
        cfg.protocol.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.protocol.seed = s;
    }
    if a.dry_run {
        print!("{}", cfg.to_toml());
        println!("# digest {}", cfg.digest());
        return Ok(dry_report(&cfg, a.method));
    }
    let wb = workbench(&cfg)?;
    let variant = cfg.protocol.variant;
    let split = wb.split(cfg.protocol.seed)?;
    let dir = a.out.clone().unwrap_or_else(|| {
        let tag = match a.method {
            Method::Ede => format!("ede-{variant}"),
            Method::Finetune => "finetune".into(),
        };
        cfg.output_root().join(format!("run-{tag}-s{}", cfg.protocol.seed))
    });
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join("config_digest"), format!("{}\n", cfg.digest()).as_bytes())?;
    let report = run_protocol(&wb, &split, a.method, variant, 0, Some(&dir));
    print_report(&report);
    println!("run directory: {}", dir.display());
    match &report.error {
        Some(e) => Err(Error::RunIncomplete(e.clone())),
        None => Ok(report),
    }
}

fn dry_report(cfg: &RunConfigFile, method: Method) -> RunReport {
    RunReport {
        method: method.name(cfg.protocol.variant),
        variant: (method == Method::Ede).then_some(cfg.protocol.variant),
        repeat: 0,
        seed: cfg.protocol.seed,
        config_digest: cfg.digest(),
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

fn file_tag(name: &str) -> String {
    name.replace(':', "-")
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<RunReport>> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.variant {
        cfg.protocol.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.protocol.seed = s;
    }
    let repeats = a.repeats.unwrap_or(cfg.protocol.repeats);
    let wb = workbench(&cfg)?;
    let variant = cfg.protocol.variant;
    let reports = run_repeats(&wb, a.method, variant, repeats, a.jobs)?;
    let name = a.method.name(variant);
    let out = a.out.clone().unwrap_or_else(|| cfg.output_root().join(format!("bench-{}.jsonl", file_tag(&name))));
    write_reports(&out, &reports)?;
    let summary = summarize(&MethodResults { name, runs: reports.clone() })?;
    print!("{}", accuracy_table(&[summary]));
    println!("results: {}", out.display());
    Ok(reports)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.protocol.seed = s;
    }
    let repeats = a.repeats.unwrap_or(cfg.protocol.repeats);
    let wb = workbench(&cfg)?;
    let dir = a.out.clone().unwrap_or_else(|| cfg.output_root().join("ablate"));
    let mut groups = Vec::new();
    for v in Variant::ALL {
        let reports = run_repeats(&wb, Method::Ede, v, repeats, a.jobs)?;
        write_reports(&dir.join(format!("{v}.jsonl")), &reports)?;
        groups.push(MethodResults { name: v.to_string(), runs: reports });
    }
    let summaries = groups.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    let mut text = accuracy_table(&summaries);
    let full = groups.iter().find(|g| g.name == Variant::PPlusExpandedF.as_str()).expect("all variants ran");
    text.push('\n');
    for g in groups.iter().filter(|g| g.name != full.name) {
        let (x, y): (Vec<f64>, Vec<f64>) = full
            .runs
            .iter()
            .zip(&g.runs)
            .filter(|(p, q)| p.completed && q.completed)
            .map(|(p, q)| (p.aa, q.aa))
            .unzip();
        let t = sign_test(&x, &y)?;
        text.push_str(&format!(
            "{} vs {}: {} wins, {} losses, {} ties, sign test p = {:.3e}\n",
            full.name, g.name, t.wins, t.losses, t.ties, t.p_value
        ));
    }
    write_atomic(&dir.join("table.md"), text.as_bytes())?;
    print!("{text}");
    println!("results: {}", dir.display());
    Ok(())
}

/// Reads results files into one group per method. A method name seen in
/// two files is suffixed with the file stem so the files stay distinct.
pub fn load_method_results(paths: &[PathBuf]) -> Result<Vec<MethodResults>> {
    let mut out: Vec<MethodResults> = Vec::new();
    for p in paths {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for mut g in MethodResults::group(read_reports(p)?) {
            if out.iter().any(|o| o.name == g.name) {
                g.name = format!("{} ({stem})", g.name);
            }
            out.push(g);
        }
    }
    Ok(out)
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let methods = load_method_results(&a.inputs)?;
    let report = compare_methods(&methods, a.alpha, a.per_session)?;
    print!("{}", accuracy_table(&report.summaries));
    println!("\nAverage accuracy over {} paired runs", report.paired_seeds.len());
    print!("{}", comparison_table(&report.average_accuracy));
    for (m, c) in report.per_session.iter().flatten().enumerate() {
        println!("\nSession {m}");
        print!("{}", comparison_table(c));
    }
    if let Some(out) = &a.out {
        write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let path = if a.run.is_dir() { a.run.join("report.jsonl") } else { a.run.clone() };
    let groups = MethodResults::group(read_reports(&path)?);
    let summaries = groups.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    if a.csv {
        let sessions = summaries.iter().map(|s| s.per_session.len()).max().unwrap_or(0);
        let mut head = vec!["method".to_string()];
        for s in 0..sessions {
            head.push(format!("s{s}_mean"));
            head.push(format!("s{s}_std"));
        }
        head.extend(["aa_mean", "aa_std", "runs", "failed"].map(String::from));
        println!("{}", head.join(","));
        for m in &summaries {
            let mut row = vec![m.method.clone()];
            for s in 0..sessions {
                match m.per_session.get(s) {
                    Some(v) => row.extend([format!("{:.4}", v.mean), format!("{:.4}", v.std)]),
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row.extend([format!("{:.4}", m.aa.mean), format!("{:.4}", m.aa.std), m.runs.to_string(), m.failed.to_string()]);
            println!("{}", row.join(","));
        }
    } else {
        print!("{}", accuracy_table(&summaries));
    }
    Ok(())
}

/// Exit code for a command result: 0 success, 1 usage or configuration
/// error, 2 failure during execution.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 1,
        Err(_) => 2,
    }
}
