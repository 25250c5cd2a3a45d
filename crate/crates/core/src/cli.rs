//! `srl` command line: one subcommand per pipeline stage.
//!
//! Exit status 0 on success, 2 for usage errors (including unknown
//! subcommands), 3 when the configuration is invalid and 1 for any other
//! failure. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::corpus::synth::generate;
use crate::corpus::{load_manifest, relabel_domains, Attribute, CorpusManifest};
use crate::error::{Result, SrlError};
use crate::evaluator::{embed_with_checkpoint, evaluate, export_tsne_plot, read_embeddings, write_embeddings, EmbeddingRow};
use crate::recombiner::{oracle_reading, recombine, train_reconstructor, true_factors, RecombinerState};
use crate::trainer::{run_training, RunPaths, TrainerState};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

fn defaults_help() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        format!(
            "Configuration file keys (flat TOML) and their defaults:\n\n{}",
            PipelineConfig::default().to_toml()
        )
    })
}

#[derive(Debug, Parser)]
#[command(name = "srl", version, about = "Disentangled style, emotion and speaker embeddings")]
#[command(after_long_help = defaults_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML config; missing keys keep their defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory holding manifest.jsonl, ckpt/, metrics.log, reports/ and plots/
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Defaults to <out>/manifest.jsonl
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Defaults to <out>/ckpt/latest.ckpt
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttributeArg {
    Style,
    Emotion,
    Speaker,
}

impl From<AttributeArg> for Attribute {
    fn from(a: AttributeArg) -> Self {
        match a {
            AttributeArg::Style => Attribute::Style,
            AttributeArg::Emotion => Attribute::Emotion,
            AttributeArg::Speaker => Attribute::Speaker,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and assign supervision domains
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder; writes ckpt/ and metrics.log
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/manifest.jsonl
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Continue from <out>/ckpt/latest.ckpt if it exists
        #[arg(long)]
        resume: bool,
    },
    /// Probe and cluster the embeddings; writes reports/eval.json
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Export one embedding triple per utterance; writes reports/embeddings.jsonl
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// t-SNE plot of one embedding space; writes plots/tsne_<space>_by_<label>.{png,csv}
    Plot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "style")]
        space: AttributeArg,
        #[arg(long, value_enum, default_value = "speaker")]
        color_by: AttributeArg,
        /// Read embeddings from this file instead of the checkpoint
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
    },
    /// Recombine attributes of four references; trains ckpt/recombiner.ckpt on first use
    Recombine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_name = "ID")]
        style_ref: String,
        #[arg(long, value_name = "ID")]
        emotion_ref: String,
        #[arg(long, value_name = "ID")]
        speaker_ref: String,
        #[arg(long, value_name = "ID")]
        content_ref: String,
        /// Defaults to <out>/ckpt/recombiner.ckpt
        #[arg(long, value_name = "FILE")]
        recombiner: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Embed { common, .. }
            | Command::Plot { common, .. }
            | Command::Recombine { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join("manifest.jsonl"))
}

fn checkpoint_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| RunPaths::under(out).latest())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn embeddings_from(cfg: &PipelineConfig, out: &Path, inputs: &Inputs) -> Result<(TrainerState, CorpusManifest, Vec<EmbeddingRow>)> {
    let manifest = load_manifest(manifest_path(out, &inputs.manifest))?;
    let mut state = TrainerState::load(checkpoint_path(out, &inputs.checkpoint))?;
    state.config.slice = cfg.slice();
    let rows = embed_with_checkpoint(&state, &manifest)?;
    Ok((state, manifest, rows))
}

#[derive(Serialize)]
struct RecombineReport {
    style_ref: String,
    emotion_ref: String,
    speaker_ref: String,
    content_ref: String,
    /// `[style, emotion, speaker]` each reference carries, when known.
    expected: Option<[u32; 3]>,
    /// `[style, emotion, speaker]` the oracle reads from the output.
    oracle: [u32; 3],
    frames: Vec<Vec<f64>>,
}

/// Execute a parsed command.
pub fn dispatch(command: &Command) -> Result<String> {
    let common = command.common();
    let cfg = load_config(common)?;
    let out = common.out.as_path();
    match command {
        Command::SynthData { .. } => {
            let manifest = relabel_domains(&generate(&cfg.synth())?, cfg.domain_fractions, cfg.seed)?;
            let path = out.join("manifest.jsonl");
            manifest.write(&path)?;
            Ok(format!("wrote {} utterances to {}", manifest.len(), path.display()))
        }
        Command::Train { manifest, resume, .. } => {
            let manifest = load_manifest(manifest_path(out, manifest))?;
            let paths = RunPaths::under(out);
            let state = if *resume && paths.latest().exists() {
                let mut s = TrainerState::load(paths.latest())?;
                s.config.steps = cfg.steps;
                s
            } else {
                TrainerState::new(cfg.train())?
            };
            let outcome = run_training(state, &manifest, Some(&paths))?;
            Ok(format!("trained to step {}; latest checkpoint {}", outcome.state.step, paths.latest().display()))
        }
        Command::Eval { inputs, .. } => {
            let (_, _, rows) = embeddings_from(&cfg, out, inputs)?;
            let report = evaluate(&rows, &cfg.probe())?;
            let path = out.join("reports").join("eval.json");
            write_json(&path, &report)?;
            Ok(format!(
                "own-attribute accuracy {:.3}, speaker leakage {:.3}; report {}",
                report.own_attribute_accuracy,
                report.speaker_leakage,
                path.display()
            ))
        }
        Command::Embed { inputs, .. } => {
            let (_, _, rows) = embeddings_from(&cfg, out, inputs)?;
            let path = out.join("reports").join("embeddings.jsonl");
            write_embeddings(&rows, &path)?;
            Ok(format!("wrote {} embedding rows to {}", rows.len(), path.display()))
        }
        Command::Plot {
            inputs,
            space,
            color_by,
            embeddings,
            ..
        } => {
            let rows = match embeddings {
                Some(p) => read_embeddings(p)?,
                None => embeddings_from(&cfg, out, inputs)?.2,
            };
            let (space, color_by) = (Attribute::from(*space), Attribute::from(*color_by));
            let path = out
                .join("plots")
                .join(format!("tsne_{}_by_{}.png", space.name(), color_by.name()));
            let plot = export_tsne_plot(&rows, space, color_by, &path, &cfg.tsne())?;
            Ok(format!("plotted {} points to {}", plot.points.len(), plot.image.display()))
        }
        Command::Recombine {
            inputs,
            style_ref,
            emotion_ref,
            speaker_ref,
            content_ref,
            recombiner,
            ..
        } => {
            let manifest = load_manifest(manifest_path(out, &inputs.manifest))?;
            let find = |id: &str| {
                manifest
                    .find(id)
                    .ok_or_else(|| SrlError::UnresolvableSource(format!("{id} is not in the manifest")))
            };
            let refs = [find(style_ref)?, find(emotion_ref)?, find(speaker_ref)?, find(content_ref)?];
            let rec_path = recombiner
                .clone()
                .unwrap_or_else(|| out.join("ckpt").join("recombiner.ckpt"));
            let state = if rec_path.exists() {
                RecombinerState::load(&rec_path)?
            } else {
                let srl = TrainerState::load(checkpoint_path(out, &inputs.checkpoint))?;
                let (state, _) = train_reconstructor(&srl, &manifest, cfg.recombiner())?;
                state.save(&rec_path)?;
                state
            };
            let frames = recombine(&state, refs[0], refs[1], refs[2], refs[3])?;
            let oracle = oracle_reading(&frames, state.net.frame_rate, &manifest.category_counts, refs[3])?;
            let expected = (0..3)
                .map(|i| true_factors(refs[i]).map(|f| f[i]))
                .collect::<Option<Vec<u32>>>()
                .map(|v| [v[0], v[1], v[2]]);
            let report = RecombineReport {
                style_ref: style_ref.clone(),
                emotion_ref: emotion_ref.clone(),
                speaker_ref: speaker_ref.clone(),
                content_ref: content_ref.clone(),
                expected,
                oracle,
                frames: frames.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            let path = out.join("reports").join("recombine.json");
            write_json(&path, &report)?;
            Ok(format!("oracle reads {oracle:?} (expected {expected:?}); frames in {}", path.display()))
        }
    }
}

fn variant_name(e: &SrlError) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

/// One-line JSON description of a failure.
pub fn error_line(e: &SrlError) -> String {
    let category = match e {
        SrlError::Config(_) => "config",
        _ => "runtime",
    };
    serde_json::json!({
        "error": category,
        "kind": variant_name(e),
        "message": e.to_string().replace('\n', " "),
    })
    .to_string()
}

pub fn exit_code(e: &SrlError) -> i32 {
    match e {
        SrlError::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args`, run, print, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["srl", "frobnicate", "--out", "/nonexistent"]), EXIT_USAGE);
    }

    #[test]
    fn help_lists_config_defaults() {
        assert!(defaults_help().contains("lambda_mi = 1.0"));
        assert!(defaults_help().contains("batch_size = 96"));
    }

    #[test]
    fn error_lines_are_single_line_json() {
        let e = SrlError::Config("bad\nvalue".into());
        let line = error_line(&e);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["kind"], "Config");
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        assert_eq!(exit_code(&SrlError::Degenerate("x".into())), EXIT_RUNTIME);
    }
}
