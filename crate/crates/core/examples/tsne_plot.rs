//! t-SNE plots of each embedding space, coloured by its own labels and by
//! speaker, with coordinate sidecars.
//!
//! cargo run --release --example tsne_plot -- <checkpoint> [out_dir]

use srl::config::PipelineConfig;
use srl::corpus::Attribute;
use srl::evaluator::{embed_with_checkpoint, export_tsne_plot, read_sidecar};
use srl::pipeline::synthetic_corpora;
use srl::trainer::TrainerState;

fn main() -> srl::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "target/train_srl/ckpt/latest.ckpt".into());
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "target/tsne_plot".into()));
    let config = PipelineConfig::desk();
    let state = TrainerState::load(&ckpt)?;
    let rows = embed_with_checkpoint(&state, &synthetic_corpora(&config)?.held_out)?;

    for space in Attribute::ALL {
        let mut colorings = vec![space];
        if space != Attribute::Speaker {
            colorings.push(Attribute::Speaker);
        }
        for color_by in colorings {
            let path = out.join(format!("tsne_{}_by_{}.png", space.name(), color_by.name()));
            let plot = export_tsne_plot(&rows, space, color_by, &path, &config.tsne())?;
            let back = read_sidecar(&plot.sidecar)?;
            assert_eq!(back, plot.points);
            println!("{} ({} points, sidecar {})", plot.image.display(), plot.points.len(), plot.sidecar.display());
        }
    }
    Ok(())
}
