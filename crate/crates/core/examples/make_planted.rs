//! Write the planted dataset as PNG/WAV files plus `manifest.jsonl`.
//!
//! cargo run --release -p avloc-core --example make_planted -- <out_dir> [boxes|mask] [pairs]

use std::path::PathBuf;

use avloc_core::encoders::ToyConfig;
use avloc_core::evaluation::AnnotationKind;
use avloc_core::synth::{planted_pairs, write_planted, PlantedConfig};

fn main() -> avloc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(
        args.next()
            .expect("usage: make_planted <out_dir> [boxes|mask] [pairs]"),
    );
    let kind = match args.next().as_deref() {
        None | Some("boxes") => AnnotationKind::Boxes,
        Some("mask") => AnnotationKind::Mask,
        Some(other) => panic!("unknown annotation kind `{other}`"),
    };
    let mut cfg = PlantedConfig::default();
    if let Some(n) = args.next() {
        cfg.pairs = n.parse().expect("pair count");
    }
    let pairs = planted_pairs(&cfg, &ToyConfig::default())?;
    let ds = write_planted(&out, &pairs, &cfg, kind)?;
    println!(
        "{} pairs -> {}",
        ds.records.len(),
        out.join("manifest.jsonl").display()
    );
    Ok(())
}
