//! Train a reconstructor on frozen embeddings, then swap one reference at a
//! time and read the result back with the oracle.
//!
//! cargo run --release --example attribute_transfer -- <checkpoint> [trials]

use srl::config::PipelineConfig;
use srl::corpus::Attribute;
use srl::pipeline::synthetic_corpora;
use srl::recombiner::{reconstruction_error, success_rate, train_reconstructor, transfer_trials, RecombinerState};
use srl::trainer::TrainerState;

fn main() -> srl::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "target/train_srl/ckpt/latest.ckpt".into());
    let trials: usize = args.next().map_or(50, |s| s.parse().expect("trials"));
    let config = PipelineConfig::desk();
    let corpora = synthetic_corpora(&config)?;
    let srl = TrainerState::load(&ckpt)?;

    let untrained = RecombinerState::new(&srl, config.frame_dim, config.recombiner())?;
    let baseline = reconstruction_error(&untrained, &corpora.held_out)?;
    let (state, log) = train_reconstructor(&srl, &corpora.train, config.recombiner())?;
    let trained = reconstruction_error(&state, &corpora.held_out)?;
    println!("{} reconstructor steps; last batch error {:.4}", log.len(), log.last().map_or(f64::NAN, |r| r.frame_error));
    println!("held-out frame error {trained:.4} (untrained {baseline:.4})");

    for swapped in [vec![Attribute::Style], vec![Attribute::Emotion], vec![Attribute::Speaker], vec![Attribute::Style, Attribute::Emotion]] {
        let t = transfer_trials(&state, &corpora.held_out, &swapped, trials, 5)?;
        let names: Vec<&str> = swapped.iter().map(|a| a.name()).collect();
        println!("swap {:<16} success {:.2}", names.join("+"), success_rate(&t));
        if let Some(miss) = t.iter().find(|t| !t.success) {
            println!("  e.g. expected {:?}, oracle read {:?}", miss.expected, miss.recovered);
        }
    }
    Ok(())
}
