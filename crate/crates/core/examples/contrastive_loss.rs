//! The masked pairwise contrastive loss on small hand-built inputs, and the
//! gradient it sends through known and unknown pairs.

use ndarray::{arr2, ArrayD};
use srl::autodiff::Tape;
use srl::corpus::Attribute;
use srl::objectives::{contrastive_loss, contrastive_loss_var, ContrastiveConfig};
use srl::sampler::MaskMatrix;

fn main() {
    let cfg = ContrastiveConfig::default();
    let sim = arr2(&[[1.0, 0.2], [-0.4, 0.9]]);
    let mask = MaskMatrix { attribute: Attribute::Style, entries: arr2(&[[1, 0], [-1, 1]]) };
    println!("similarities\n{sim}\nmask\n{}", mask.to_text());
    println!("loss {:.6}", contrastive_loss(&sim, &mask, &cfg));

    let tape = Tape::new();
    let s = tape.constant(ArrayD::from(sim.clone().into_dyn()));
    let loss = contrastive_loss_var(s, &mask, &cfg);
    let grads = tape.backward(loss);
    println!("d loss / d similarity\n{}", grads.get(s).expect("gradient reaches the input"));

    let unknown = MaskMatrix { attribute: Attribute::Emotion, entries: arr2(&[[-1, -1], [-1, -1]]) };
    println!("all-unknown mask: loss {}", contrastive_loss(&sim, &unknown, &cfg));
}
