//! End-to-end helpers over a [`PipelineConfig`]: corpora, training, probing.

use crate::config::PipelineConfig;
use crate::corpus::synth::{generate, mix_seed};
use crate::corpus::{relabel_domains, CorpusManifest};
use crate::error::Result;
use crate::evaluator::{embed_with_checkpoint, evaluate, EvalReport};
use crate::trainer::{run_training, RunPaths, TrainOutcome, TrainerState};

const HELD_OUT_TAG: u64 = 0x4e1d;

/// Training manifest with supervision domains, plus a fully labeled held-out
/// manifest drawn with a different seed.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: CorpusManifest,
    pub held_out: CorpusManifest,
}

pub fn synthetic_corpora(config: &PipelineConfig) -> Result<Corpora> {
    let synth = config.synth();
    let train = relabel_domains(&generate(&synth)?, config.domain_fractions, config.seed)?;
    let held_out = generate(&crate::corpus::synth::SynthConfig {
        seed: mix_seed(config.seed, HELD_OUT_TAG),
        ..synth
    })?;
    Ok(Corpora { train, held_out })
}

pub fn train_model(config: &PipelineConfig, manifest: &CorpusManifest, paths: Option<&RunPaths>) -> Result<TrainOutcome> {
    run_training(TrainerState::new(config.train())?, manifest, paths)
}

/// Probe and cluster the embeddings of `manifest`.
pub fn held_out_report(state: &TrainerState, manifest: &CorpusManifest, config: &PipelineConfig) -> Result<EvalReport> {
    evaluate(&embed_with_checkpoint(state, manifest)?, &config.probe())
}
