//! Pretrains an encoder on the synthetic pretraining corpus, then runs the
//! five-session protocol for every extractor variant and the finetuning
//! baseline on a few splits.
//!
//!     cargo run --release --example session_run -- [repeats] [pretrain_epochs]

use std::sync::Arc;
use std::time::Instant;

use ffcac::audio::{default_corpora, FrontendConfig};
use ffcac::classifier::ReconstructionConfig;
use ffcac::ede::Variant;
use ffcac::encoder::EncoderConfig;
use ffcac::protocol::{run_repeats, Corpus, Method, ProtocolConfig, Workbench};
use ffcac::stats::aggregate;
use ffcac::training::{pretrain, PretrainConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let repeats: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(3);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(40);

    let frontend = FrontendConfig::default();
    let enc = EncoderConfig::default();
    let (proto_spec, pre_spec) = default_corpora(7)?;
    let t = Instant::now();
    let corpus = Arc::new(Corpus::synthesize(&proto_spec, &frontend)?);
    let pre = Corpus::synthesize(&pre_spec, &frontend)?;
    println!("features: {} + {} clips in {:.1}s", corpus.len(), pre.len(), t.elapsed().as_secs_f64());

    let classes = pre.classes();
    let labels: Vec<usize> = pre.labels.iter().map(|l| classes.iter().position(|c| c == l).unwrap()).collect();
    let specs: Vec<_> = pre.specs.iter().collect();
    let cfg = PretrainConfig { epochs, ..PretrainConfig::default() };
    let t = Instant::now();
    let ckpt = pretrain(&specs, &labels, classes.len(), &enc, &cfg, None, |_, rec| {
        if rec.epoch % 10 == 9 {
            println!("pretrain epoch {:>3} loss {:.4}", rec.epoch + 1, rec.loss);
        }
        Ok(())
    })?;
    println!("pretrained in {:.1}s", t.elapsed().as_secs_f64());

    let wb = Workbench::new(
        corpus,
        ckpt.encoder(),
        enc,
        ProtocolConfig::default(),
        TrainConfig::default(),
        ReconstructionConfig::default(),
        "example".into(),
    )?;
    let mut runs: Vec<(Method, Variant)> = Variant::ALL.iter().map(|&v| (Method::Ede, v)).collect();
    runs.push((Method::Finetune, Variant::PPlusExpandedF));
    for (method, variant) in runs {
        let t = Instant::now();
        let reports = run_repeats(&wb, method, variant, repeats, 1)?;
        let sessions: Vec<String> = (0..5)
            .map(|s| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.accuracies.get(s).copied()).collect();
                aggregate(&v).map(|a| a.percent()).unwrap_or_else(|_| "-".into())
            })
            .collect();
        let aa = aggregate(&reports.iter().map(|r| r.aa).collect::<Vec<_>>())?;
        println!(
            "{:<22} AA {}  sessions [{}]  {:.1}s",
            method.name(variant),
            aa.percent(),
            sessions.join(" "),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
