//! Linear probes and clustering metrics for a trained checkpoint.
//!
//! cargo run --release --example evaluate_probes -- <checkpoint> [manifest.jsonl]
//!
//! Without a manifest the held-out synthetic corpus of the desk preset is used.

use srl::config::PipelineConfig;
use srl::corpus::load_manifest;
use srl::pipeline::{held_out_report, synthetic_corpora};
use srl::trainer::TrainerState;

fn main() -> srl::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "target/train_srl/ckpt/latest.ckpt".into());
    let config = PipelineConfig::desk();
    let manifest = match args.next() {
        Some(p) => load_manifest(p)?,
        None => synthetic_corpora(&config)?.held_out,
    };
    let state = TrainerState::load(&ckpt)?;
    let report = held_out_report(&state, &manifest, &config)?;

    println!("{} utterances", report.n_utterances);
    println!("{:>8} | {:>8} {:>8} {:>8}", "target", "style", "emotion", "speaker");
    for target in ["style", "emotion", "speaker"] {
        let row: Vec<String> = ["style", "emotion", "speaker"]
            .iter()
            .map(|source| {
                let p = report
                    .probes
                    .iter()
                    .find(|p| p.probe_target.name() == target && p.probe_source.name() == *source)
                    .expect("all nine probes");
                format!("{:>8.3}", p.accuracy)
            })
            .collect();
        println!("{target:>8} | {}", row.join(" "));
    }
    for c in &report.clustering {
        println!("{:>8} space grouped by {:<8} silhouette {:+.3} purity {:.3}", c.space.name(), c.grouped_by.name(), c.report.silhouette, c.report.purity);
    }
    println!("own-attribute accuracy {:.3}, speaker leakage {:.3}", report.own_attribute_accuracy, report.speaker_leakage);
    Ok(())
}
