//! Training loop: q-network updates on detached embeddings, then one main
//! step on the total objective. Every random draw is derived from
//! `(seed, step)`, so a run resumed from a checkpoint replays the same
//! trajectory as an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Adam, AdamConfig, ParamStore, Tape};
use crate::checkpoint::Archive;
use crate::corpus::synth::mix_seed;
use crate::corpus::{Attribute, CorpusManifest};
use crate::error::{Result, SrlError};
use crate::model::{batch_stack, ForwardCtx, ModelConfig, SrlModel};
use crate::objectives::{
    detached_joined, total_loss, update_mi_estimators, BatchEmbeddings, LossBreakdown, MiEstimatorState,
    ObjectiveConfig,
};
use crate::sampler::{batch_statistics, build_mask, check_quota, compose_batch, PairBatch, SliceConfig};

pub const TRAINER_KIND: &str = "srl-trainer";

const BATCH_TAG: u64 = 0xba7c;
const DROPOUT_TAG: u64 = 0xd209;
const INIT_TAG: u64 = 0x1417;
const MI_TAG: u64 = 0x3141;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub q_steps_per_step: usize,
    pub q_learning_rate: f64,
    pub q_hidden: usize,
    pub clip_norm: f64,
    /// Steps during which λ_MI is held at 0 (the q-networks still train).
    pub mi_delay_steps: u64,
    /// After the delay, λ_MI ramps linearly from 0 over this many steps.
    pub mi_warmup_steps: u64,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final step is always saved.
    pub checkpoint_interval: u64,
    /// 0 disables held-out loss records.
    pub eval_interval: u64,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub slice: SliceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            steps: 20_000,
            learning_rate: 1e-3,
            q_steps_per_step: 5,
            q_learning_rate: 1e-3,
            q_hidden: 256,
            clip_norm: 5.0,
            mi_delay_steps: 0,
            mi_warmup_steps: 0,
            seed: 0,
            checkpoint_interval: 1000,
            eval_interval: 0,
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
            slice: SliceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 4 != 0 {
            return Err(SrlError::Config(format!("batch_size {} is not a positive multiple of 4", self.batch_size)));
        }
        if self.steps == 0 {
            return Err(SrlError::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.q_learning_rate >= 0.0) {
            return Err(SrlError::Config("learning rates must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(SrlError::Config("clip_norm must be positive".into()));
        }
        self.model.validate()?;
        self.slice.validate()?;
        self.objective.contrastive.validate()
    }

    /// Objective in force at a (1-based) step.
    pub fn objective_at(&self, step: u64) -> ObjectiveConfig {
        let mut objective = self.objective;
        if step <= self.mi_delay_steps {
            objective.lambda_mi = 0.0;
        } else if step - self.mi_delay_steps < self.mi_warmup_steps {
            objective.lambda_mi *= (step - self.mi_delay_steps) as f64 / self.mi_warmup_steps as f64;
        }
        objective
    }

    pub fn batch_seed(&self, step: u64) -> u64 {
        mix_seed(mix_seed(self.seed, BATCH_TAG), step)
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub contrastive_style: f64,
    pub contrastive_emotion: f64,
    pub contrastive_speaker: f64,
    pub mi_style_emotion: f64,
    pub mi_emotion_speaker: f64,
    pub mi_speaker_style: f64,
    pub total: f64,
    pub q_nll: [f64; 3],
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_total: Option<f64>,
}

impl StepRecord {
    fn new(step: u64, b: &LossBreakdown, q_nll: [f64; 3], grad_norm: f64) -> Self {
        Self {
            step,
            contrastive_style: b.contrastive[0],
            contrastive_emotion: b.contrastive[1],
            contrastive_speaker: b.contrastive[2],
            mi_style_emotion: b.mi[0],
            mi_emotion_speaker: b.mi[1],
            mi_speaker_style: b.mi[2],
            total: b.total,
            q_nll,
            grad_norm,
            eval_total: None,
        }
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub step: u64,
    pub model: SrlModel,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub mi: MiEstimatorState,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    step: u64,
    optimizer_steps: u64,
    mi_optimizer_steps: Vec<u64>,
}

impl TrainerState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SrlModel::new(config.model)?;
        let params = model.init_params(mix_seed(config.seed, INIT_TAG));
        let mi = MiEstimatorState::new(
            config.model.d_emb,
            config.q_hidden,
            AdamConfig {
                learning_rate: config.q_learning_rate,
                ..AdamConfig::default()
            },
            mix_seed(config.seed, MI_TAG),
        );
        let optimizer = Adam::new(AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        });
        Ok(Self {
            config,
            step: 0,
            model,
            params,
            optimizer,
            mi,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = TrainerMeta {
            config: self.config.clone(),
            step: self.step,
            optimizer_steps: self.optimizer.steps,
            mi_optimizer_steps: self.mi.optimizers.iter().map(|o| o.steps).collect(),
        };
        let mut ar = Archive::new(TRAINER_KIND, serde_json::to_value(meta)?);
        ar.put_store("model/", &self.params);
        ar.put_adam("adam/", &self.optimizer);
        for (p, (store, opt)) in self.mi.params.iter().zip(&self.mi.optimizers).enumerate() {
            ar.put_store(&format!("mi{p}/"), store);
            ar.put_adam(&format!("mi{p}.adam/"), opt);
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        ar.expect_kind(TRAINER_KIND)?;
        let meta: TrainerMeta = serde_json::from_value(ar.meta.clone())?;
        let mut state = Self::new(meta.config)?;
        state.step = meta.step;
        state.params = ar.take_store("model/");
        if state.params.names().ne(state.model.init_params(0).names()) {
            return Err(SrlError::Checkpoint("model tensors do not match the stored config".into()));
        }
        state.optimizer = ar.take_adam("adam/", state.optimizer.config, meta.optimizer_steps);
        for p in 0..state.mi.params.len() {
            state.mi.params[p] = ar.take_store(&format!("mi{p}/"));
            let cfg = state.mi.optimizers[p].config;
            let steps = meta.mi_optimizer_steps.get(p).copied().unwrap_or(0);
            state.mi.optimizers[p] = ar.take_adam(&format!("mi{p}.adam/"), cfg, steps);
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

fn batch_embeddings<'t>(
    state: &TrainerState,
    tape: &'t Tape,
    batch: &PairBatch,
    ctx: &mut ForwardCtx,
) -> Result<BatchEmbeddings<'t>> {
    let frames: Vec<_> = batch.set_a.iter().chain(&batch.set_b).map(|s| s.frames.clone()).collect();
    let stack = tape.constant(batch_stack(&frames)?);
    let out = state.model.forward(tape, &state.params, stack, ctx)?;
    let k = batch.len();
    Ok(BatchEmbeddings {
        set_a: out.map(|e| e.narrow(0, 0, k)),
        set_b: out.map(|e| e.narrow(0, k, k)),
    })
}

fn masks(batch: &PairBatch) -> [crate::sampler::MaskMatrix; 3] {
    Attribute::ALL.map(|a| build_mask(batch, a))
}

fn diagnostics(batch: &PairBatch, b: &LossBreakdown) -> String {
    serde_json::json!({
        "batch": batch_statistics(batch),
        "losses": b,
    })
    .to_string()
}

/// q-updates on the current (detached) embeddings, then one main step.
pub fn train_step(state: &mut TrainerState, batch: &PairBatch) -> Result<StepRecord> {
    let step = state.step + 1;
    let config = &state.config;
    let mut ctx = ForwardCtx::train(mix_seed(mix_seed(config.seed, DROPOUT_TAG), step));
    let tape = Tape::new();
    let emb = batch_embeddings(state, &tape, batch, &mut ctx)?;
    let q_nll = if config.objective.lambda_mi != 0.0 {
        update_mi_estimators(&mut state.mi, &detached_joined(&emb, &config.objective), config.q_steps_per_step)?
    } else {
        [0.0; 3]
    };
    let (loss, breakdown) = total_loss(&emb, &masks(batch), &config.objective_at(step), &state.mi)?;
    if !breakdown.total.is_finite() {
        return Err(SrlError::NonFiniteLoss {
            step,
            diagnostics: diagnostics(batch, &breakdown),
        });
    }
    let mut grads = tape.backward(loss).params(&state.params);
    let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
    if !grad_norm.is_finite() {
        return Err(SrlError::NonFiniteLoss {
            step,
            diagnostics: diagnostics(batch, &breakdown),
        });
    }
    state.optimizer.step(&mut state.params, &grads);
    state.step = step;
    Ok(StepRecord::new(step, &breakdown, q_nll, grad_norm))
}

/// Eval-mode total loss on a batch, leaving every parameter untouched.
pub fn evaluate_loss(state: &TrainerState, batch: &PairBatch) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let emb = batch_embeddings(state, &tape, batch, &mut ForwardCtx::eval())?;
    Ok(total_loss(&emb, &masks(batch), &state.config.objective, &state.mi)?.1)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunPaths {
    pub fn under(out: impl AsRef<Path>) -> Self {
        let out = out.as_ref();
        Self {
            metrics: out.join("metrics.log"),
            checkpoints: out.join("ckpt"),
        }
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints.join(format!("step_{step:08}.ckpt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints.join("latest.ckpt")
    }
}

pub struct TrainOutcome {
    pub state: TrainerState,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn metrics_line(r: &StepRecord) -> Result<String> {
    Ok(serde_json::to_string(r)? + "\n")
}

/// Keep only log lines up to `step` so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let r: StepRecord = serde_json::from_str(line)?;
        if r.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Train from `state.step` to `state.config.steps`. Batches are prepared one
/// step ahead on a worker thread and handed over in step order.
pub fn run_training(
    mut state: TrainerState,
    manifest: &CorpusManifest,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let config = state.config.clone();
    config.validate()?;
    manifest.validate()?;
    check_quota(manifest, config.batch_size)?;
    let first = state.step + 1;
    let mut log = match paths {
        Some(p) => {
            if let Some(dir) = p.metrics.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::create_dir_all(&p.checkpoints)?;
            if first == 1 {
                fs::write(&p.metrics, "")?;
            } else {
                truncate_metrics(&p.metrics, state.step)?;
            }
            Some(fs::OpenOptions::new().append(true).create(true).open(&p.metrics)?)
        }
        None => None,
    };
    let eval_batch = if config.eval_interval > 0 {
        Some(compose_batch(manifest, config.batch_size, mix_seed(config.seed, u64::MAX), &config.slice)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel(1);
        let producer_config = config.clone();
        scope.spawn(move || {
            for step in first..=producer_config.steps {
                let batch = compose_batch(
                    manifest,
                    producer_config.batch_size,
                    producer_config.batch_seed(step),
                    &producer_config.slice,
                );
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        for step in first..=config.steps {
            let batch = rx.recv().map_err(|_| SrlError::Degenerate("batch producer stopped".into()))??;
            let mut record = train_step(&mut state, &batch)?;
            debug_assert_eq!(record.step, step);
            if let Some(eb) = &eval_batch {
                if step % config.eval_interval == 0 {
                    record.eval_total = Some(evaluate_loss(&state, eb)?.total);
                }
            }
            if let Some(f) = log.as_mut() {
                f.write_all(metrics_line(&record)?.as_bytes())?;
            }
            if step % 100 == 0 || step == config.steps {
                log::info!("step {step} total {:.4}", record.total);
            }
            records.push(record);
            if let Some(p) = paths {
                let periodic = config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0;
                if periodic || step == config.steps {
                    let path = p.checkpoint(step);
                    state.save(&path)?;
                    fs::copy(&path, p.latest())?;
                    checkpoints.push(path);
                }
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        state,
        records,
        checkpoints,
    })
}
