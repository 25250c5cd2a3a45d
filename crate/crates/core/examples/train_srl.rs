//! Train the desk-scale model on the synthetic corpus, writing checkpoints
//! and the metrics log, then probe held-out embeddings.
//!
//! cargo run --release --example train_srl -- [out_dir] [steps] [lambda_mi] [seed]

use srl::config::PipelineConfig;
use srl::pipeline::{held_out_report, synthetic_corpora, train_model};
use srl::trainer::RunPaths;

fn main() -> srl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "target/train_srl".into());
    let mut config = PipelineConfig::desk();
    if let Some(s) = args.get(2) {
        config.steps = s.parse().expect("steps");
    }
    if let Some(l) = args.get(3) {
        config.lambda_mi = l.parse().expect("lambda_mi");
    }
    if let Some(s) = args.get(4) {
        config.seed = s.parse().expect("seed");
    }

    let corpora = synthetic_corpora(&config)?;
    let paths = RunPaths::under(&out);
    let t0 = std::time::Instant::now();
    let run = train_model(&config, &corpora.train, Some(&paths))?;
    let (first, last) = (&run.records[0], run.records.last().expect("at least one step"));
    println!("{} steps in {:.1?}; total loss {:.4} -> {:.4}", config.steps, t0.elapsed(), first.total, last.total);
    println!("metrics: {}  checkpoint: {}", paths.metrics.display(), paths.latest().display());

    let report = held_out_report(&run.state, &corpora.held_out, &config)?;
    for p in &report.probes {
        println!("{:>8} from {:>8} embedding: accuracy {:.3} (chance {:.3})", p.probe_target.name(), p.probe_source.name(), p.accuracy, p.chance_level);
    }
    println!("own-attribute accuracy {:.3}, speaker leakage {:.3}", report.own_attribute_accuracy, report.speaker_leakage);
    Ok(())
}
