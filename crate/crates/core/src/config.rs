//! Flat key-value pipeline configuration shared by every CLI subcommand.
//!
//! One TOML table, no nesting; unknown keys are rejected. [`PipelineConfig`]
//! converts into the per-module config structs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::synth::SynthConfig;
use crate::corpus::DomainFractions;
use crate::error::{Result, SrlError};
use crate::evaluator::{ProbeConfig, TsneConfig};
use crate::model::{ModelConfig, TrunkConfig};
use crate::objectives::{ContrastiveConfig, ObjectiveConfig, ProbMapping};
use crate::recombiner::RecombinerConfig;
use crate::sampler::SliceConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    // synthetic corpus
    pub n_styles: u32,
    pub n_emotions: u32,
    pub n_speakers: u32,
    pub n_utts_per_cell: u32,
    pub frame_rate: f64,
    pub frame_dim: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub n_scripts: u32,
    pub table_seed: u64,
    /// STYLE, EMOTION, SPEAKER, LANGUAGE shares used when relabeling.
    pub domain_fractions: DomainFractions,

    // slicing and model
    pub slice_seconds: f64,
    pub frontend_layers: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub d_emb: usize,
    pub decoder_channels: usize,
    pub decoder_convs: usize,
    pub decoder_hidden: usize,

    // training
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub q_steps_per_step: usize,
    pub q_learning_rate: f64,
    pub q_hidden: usize,
    pub clip_norm: f64,
    pub lambda_mi: f64,
    pub mi_delay_steps: u64,
    pub mi_warmup_steps: u64,
    pub standardize_mi_inputs: bool,
    pub epsilon: f64,
    pub similarity_to_prob: ProbMapping,
    pub temperature: f64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,

    // evaluation
    pub probe_test_fraction: f64,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_l2: f64,

    // plotting
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,

    // recombiner
    pub rec_d_content: usize,
    pub rec_content_channels: usize,
    pub rec_content_layers: usize,
    pub rec_hidden: usize,
    pub rec_n_harmonics: usize,
    pub rec_basis_base_hz: f64,
    pub rec_window_seconds: f64,
    pub rec_steps: u64,
    pub rec_batch_size: usize,
    pub rec_learning_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let probe = ProbeConfig::default();
        let tsne = TsneConfig::default();
        let rec = RecombinerConfig::default();
        Self::assemble(&synth, [0.25; 4], &train, &probe, &tsne, &rec)
    }
}

impl PipelineConfig {
    fn assemble(
        synth: &SynthConfig,
        domain_fractions: DomainFractions,
        train: &TrainConfig,
        probe: &ProbeConfig,
        tsne: &TsneConfig,
        rec: &RecombinerConfig,
    ) -> Self {
        let m = &train.model;
        let c = &train.objective.contrastive;
        Self {
            seed: train.seed,
            n_styles: synth.n_styles,
            n_emotions: synth.n_emotions,
            n_speakers: synth.n_speakers,
            n_utts_per_cell: synth.n_utts_per_cell,
            frame_rate: synth.frame_rate,
            frame_dim: synth.frame_dim,
            min_duration: synth.min_duration,
            max_duration: synth.max_duration,
            n_scripts: synth.n_scripts,
            table_seed: synth.table_seed,
            domain_fractions,
            slice_seconds: train.slice.slice_seconds,
            frontend_layers: m.frontend_layers,
            n_layers: m.trunk.n_layers,
            n_heads: m.trunk.n_heads,
            d_model: m.trunk.d_model,
            d_ffn: m.trunk.d_ffn,
            dropout: m.trunk.dropout,
            d_emb: m.d_emb,
            decoder_channels: m.decoder_channels,
            decoder_convs: m.decoder_convs,
            decoder_hidden: m.decoder_hidden,
            batch_size: train.batch_size,
            steps: train.steps,
            learning_rate: train.learning_rate,
            q_steps_per_step: train.q_steps_per_step,
            q_learning_rate: train.q_learning_rate,
            q_hidden: train.q_hidden,
            clip_norm: train.clip_norm,
            lambda_mi: train.objective.lambda_mi,
            mi_delay_steps: train.mi_delay_steps,
            mi_warmup_steps: train.mi_warmup_steps,
            standardize_mi_inputs: train.objective.standardize_mi_inputs,
            epsilon: c.epsilon,
            similarity_to_prob: c.similarity_to_prob,
            temperature: c.temperature,
            checkpoint_interval: train.checkpoint_interval,
            eval_interval: train.eval_interval,
            probe_test_fraction: probe.test_fraction,
            probe_epochs: probe.epochs,
            probe_learning_rate: probe.learning_rate,
            probe_l2: probe.l2,
            tsne_perplexity: tsne.perplexity,
            tsne_iterations: tsne.iterations,
            tsne_learning_rate: tsne.learning_rate,
            rec_d_content: rec.d_content,
            rec_content_channels: rec.content_channels,
            rec_content_layers: rec.content_layers,
            rec_hidden: rec.hidden,
            rec_n_harmonics: rec.n_harmonics,
            rec_basis_base_hz: rec.basis_base_hz,
            rec_window_seconds: rec.window_seconds,
            rec_steps: rec.steps,
            rec_batch_size: rec.batch_size,
            rec_learning_rate: rec.learning_rate,
        }
    }

    /// Small enough to train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            n_utts_per_cell: 4,
            frame_rate: 16.0,
            min_duration: 1.5,
            max_duration: 4.0,
            slice_seconds: 2.0,
            d_model: 32,
            d_ffn: 64,
            dropout: 0.1,
            d_emb: 32,
            decoder_channels: 32,
            decoder_hidden: 32,
            batch_size: 48,
            steps: 1000,
            q_hidden: 64,
            lambda_mi: 0.1,
            mi_delay_steps: 200,
            mi_warmup_steps: 200,
            checkpoint_interval: 250,
            tsne_perplexity: 20.0,
            tsne_iterations: 500,
            rec_steps: 1500,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SrlError::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SrlError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: SrlError| match e {
            SrlError::Config(m) | SrlError::Precondition(m) => SrlError::Config(m),
            other => SrlError::Config(other.to_string()),
        };
        self.synth().validate().map_err(as_config)?;
        if self.domain_fractions.iter().any(|f| !(*f >= 0.0)) || self.domain_fractions.iter().sum::<f64>() <= 0.0 {
            return Err(SrlError::Config("domain_fractions must be non-negative with a positive sum".into()));
        }
        if (self.slice_seconds * self.frame_rate).round() < 1.0 {
            return Err(SrlError::Config("slice_seconds is shorter than one frame".into()));
        }
        self.train().validate().map_err(as_config)?;
        if !(self.probe_test_fraction > 0.0 && self.probe_test_fraction < 1.0) {
            return Err(SrlError::Config("probe_test_fraction must lie in (0, 1)".into()));
        }
        if !(self.tsne_perplexity > 0.0) || self.tsne_iterations == 0 {
            return Err(SrlError::Config("tsne_perplexity and tsne_iterations must be positive".into()));
        }
        self.recombiner().validate().map_err(as_config)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_styles: self.n_styles,
            n_emotions: self.n_emotions,
            n_speakers: self.n_speakers,
            n_utts_per_cell: self.n_utts_per_cell,
            seed: self.seed,
            frame_rate: self.frame_rate,
            frame_dim: self.frame_dim,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            n_scripts: self.n_scripts,
            table_seed: self.table_seed,
        }
    }

    pub fn slice(&self) -> SliceConfig {
        SliceConfig {
            slice_seconds: self.slice_seconds,
            frame_rate: self.frame_rate,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.frame_dim,
            frontend_layers: self.frontend_layers,
            trunk: TrunkConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                d_ffn: self.d_ffn,
                dropout: self.dropout,
            },
            d_emb: self.d_emb,
            decoder_channels: self.decoder_channels,
            decoder_convs: self.decoder_convs,
            decoder_hidden: self.decoder_hidden,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            q_steps_per_step: self.q_steps_per_step,
            q_learning_rate: self.q_learning_rate,
            q_hidden: self.q_hidden,
            clip_norm: self.clip_norm,
            mi_delay_steps: self.mi_delay_steps,
            mi_warmup_steps: self.mi_warmup_steps,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            eval_interval: self.eval_interval,
            objective: ObjectiveConfig {
                contrastive: ContrastiveConfig {
                    epsilon: self.epsilon,
                    similarity_to_prob: self.similarity_to_prob,
                    temperature: self.temperature,
                },
                lambda_mi: self.lambda_mi,
                standardize_mi_inputs: self.standardize_mi_inputs,
            },
            model: self.model(),
            slice: self.slice(),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            test_fraction: self.probe_test_fraction,
            epochs: self.probe_epochs,
            learning_rate: self.probe_learning_rate,
            l2: self.probe_l2,
            seed: self.seed,
        }
    }

    pub fn tsne(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            learning_rate: self.tsne_learning_rate,
            seed: self.seed,
        }
    }

    pub fn recombiner(&self) -> RecombinerConfig {
        RecombinerConfig {
            d_content: self.rec_d_content,
            content_channels: self.rec_content_channels,
            content_layers: self.rec_content_layers,
            hidden: self.rec_hidden,
            n_harmonics: self.rec_n_harmonics,
            basis_base_hz: self.rec_basis_base_hz,
            window_seconds: self.rec_window_seconds,
            steps: self.rec_steps,
            batch_size: self.rec_batch_size,
            learning_rate: self.rec_learning_rate,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_module_defaults() {
        let c = PipelineConfig::default();
        let mut train = TrainConfig::default();
        train.model.input_dim = SynthConfig::default().frame_dim;
        assert_eq!(c.train(), train);
        assert_eq!(c.synth(), SynthConfig::default());
        assert_eq!(c.probe(), ProbeConfig::default());
        assert_eq!(c.recombiner(), RecombinerConfig::default());
        c.validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let partial = PipelineConfig::from_toml_str("steps = 7\nlambda_mi = 0.0\n").unwrap();
        assert_eq!(partial.steps, 7);
        assert_eq!(partial.batch_size, 96);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(PipelineConfig::from_toml_str("stepz = 3"), Err(SrlError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("batch_size = 10"), Err(SrlError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("n_styles = 40"), Err(SrlError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("steps = \"many\""), Err(SrlError::Config(_))));
    }
}
