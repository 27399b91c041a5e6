//! Writes the default synthetic corpora (25 protocol classes, 15 disjoint
//! pretraining classes) as WAV files plus JSON-lines manifests, then reads
//! one manifest back.
//!
//!     cargo run --release --example synth_corpus -- <out-dir> [seed]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ffcac::audio::load_manifest;
use ffcac::cli::{cmd_generate, GenerateArgs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?;
    cmd_generate(&GenerateArgs { spec: None, out: out.clone(), seed })?;

    let entries = load_manifest(&out.join("protocol/manifest.jsonl"))?;
    let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &entries {
        *per_label.entry(e.label.as_str()).or_default() += 1;
    }
    println!("{} entries, {} labels", entries.len(), per_label.len());
    for (label, n) in per_label.iter().take(3) {
        println!("  {label}: {n} clips");
    }
    println!("  ...");
    Ok(())
}
