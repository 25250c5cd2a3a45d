//! Compose one quota batch and print its three pair masks.
//!
//! Rows and columns run over set A then set B; 1 marks a positive pair,
//! 0 a negative and -1 an unknown one.

use srl::corpus::synth::{generate, SynthConfig};
use srl::corpus::{relabel_domains, Attribute};
use srl::sampler::{batch_statistics, build_mask, compose_batch, SliceConfig};

fn main() -> srl::Result<()> {
    let synth = SynthConfig { frame_rate: 16.0, ..SynthConfig::default() };
    let manifest = relabel_domains(&generate(&synth)?, [0.25; 4], 0)?;
    let slice = SliceConfig { slice_seconds: 2.0, frame_rate: 16.0 };
    let batch = compose_batch(&manifest, 8, 7, &slice)?;

    for (i, s) in batch.set_a.iter().enumerate() {
        println!("a{i}: {:<22} {:<8} {:?}", s.parent_id, s.domain.name(), s.labels);
    }
    for a in Attribute::ALL {
        println!("\n{} mask", a.name());
        print!("{}", build_mask(&batch, a).to_text());
    }
    println!("\n{}", serde_json::to_string_pretty(&batch_statistics(&batch))?);
    Ok(())
}
