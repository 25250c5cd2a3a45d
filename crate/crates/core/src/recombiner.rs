//! Frame reconstruction from frozen attribute embeddings, and attribute
//! transfer by swapping the reference each embedding is taken from.
//!
//! The reconstructor predicts the first `W` frames of an utterance. A small
//! conv stack over a content reference gives a [`ContentCode`]; the three
//! embeddings and the content code are concatenated and mapped by an MLP to
//! per-dimension coefficients of a Fourier time basis (a constant term plus
//! `n_harmonics` sine/cosine pairs at multiples of `basis_base_hz`), so
//! `frame[t, d] = Σ_j coef[j, d] · basis_j(t)`.
//!
//! During training every attribute reference is a random utterance sharing
//! the target's label for that attribute, and the content reference is an
//! utterance reading the same script. Each factor can therefore only be read
//! from its own embedding.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Activation, Conv1d, Linear, Mlp};
use crate::autodiff::{concat, Adam, AdamConfig, ParamStore, Tape, Var};
use crate::checkpoint::Archive;
use crate::corpus::oracle::recover_factors;
use crate::corpus::synth::{mix_seed, render_frames};
use crate::corpus::{Attribute, CategoryCounts, CorpusManifest, SignalSource, Utterance};
use crate::error::{Result, SrlError};
use crate::model::{EmbeddingTriple, FrameFeatures, ModelConfig, SrlModel};
use crate::sampler::{center_slice, SliceConfig};
use crate::trainer::TrainerState;

pub const RECOMBINER_KIND: &str = "srl-recombiner";

const INIT_TAG: u64 = 0x7ec0;
const STEP_TAG: u64 = 0x57e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecombinerConfig {
    pub d_content: usize,
    pub content_channels: usize,
    pub content_layers: usize,
    pub hidden: usize,
    pub n_harmonics: usize,
    pub basis_base_hz: f64,
    pub window_seconds: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RecombinerConfig {
    fn default() -> Self {
        Self {
            d_content: 32,
            content_channels: 32,
            content_layers: 2,
            hidden: 128,
            n_harmonics: 6,
            basis_base_hz: 1.0,
            window_seconds: 1.5,
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl RecombinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SrlError::Config(m.into()));
        if self.d_content == 0 || self.content_channels == 0 || self.content_layers == 0 || self.hidden == 0 {
            return bad("recombiner widths and depths must be >= 1");
        }
        if !(self.basis_base_hz > 0.0) || !(self.window_seconds > 0.0) {
            return bad("basis_base_hz and window_seconds must be positive");
        }
        if self.batch_size == 0 {
            return bad("recombiner batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("recombiner learning_rate must be non-negative");
        }
        Ok(())
    }

    pub fn window_frames(&self, frame_rate: f64) -> usize {
        ((self.window_seconds * frame_rate).round() as usize).max(1)
    }
}

/// Residual (non-attribute) code of an utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentCode(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    pub config: RecombinerConfig,
    pub frame_dim: usize,
    pub d_emb: usize,
    pub frame_rate: f64,
    convs: Vec<Conv1d>,
    content_proj: Linear,
    conditioning: Mlp,
}

impl Reconstructor {
    pub fn new(config: RecombinerConfig, frame_dim: usize, d_emb: usize, frame_rate: f64) -> Result<Self> {
        config.validate()?;
        let convs = (0..config.content_layers)
            .map(|i| {
                let input = if i == 0 { frame_dim } else { config.content_channels };
                Conv1d::new(format!("content.conv{i}"), input, config.content_channels, 3, 1)
            })
            .collect();
        let content_proj = Linear::new("content.proj", config.content_channels, config.d_content);
        let n_basis = 2 * config.n_harmonics + 1;
        let conditioning = Mlp::new(
            "cond",
            &[3 * d_emb + config.d_content, config.hidden, config.hidden, n_basis * frame_dim],
            Activation::Tanh,
        );
        Ok(Self {
            config,
            frame_dim,
            d_emb,
            frame_rate,
            convs,
            content_proj,
            conditioning,
        })
    }

    pub fn window(&self) -> usize {
        self.config.window_frames(self.frame_rate)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, INIT_TAG));
        let mut store = ParamStore::new();
        for c in &self.convs {
            c.init(&mut store, &mut rng);
        }
        self.content_proj.init(&mut store, &mut rng);
        self.conditioning.init(&mut store, &mut rng);
        store
    }

    /// `[W, 2J + 1]`: a constant column, then sin/cos pairs.
    pub fn time_basis(&self) -> Array2<f64> {
        let w = self.window();
        let j = self.config.n_harmonics;
        Array2::from_shape_fn((w, 2 * j + 1), |(t, c)| {
            if c == 0 {
                return 1.0;
            }
            let h = ((c + 1) / 2) as f64;
            let phase = 2.0 * PI * h * self.config.basis_base_hz * t as f64 / self.frame_rate;
            if c % 2 == 1 {
                phase.sin()
            } else {
                phase.cos()
            }
        })
    }

    /// `[B, W, D]` content frames to `[B, d_content]`.
    pub fn content_code<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: Var<'t>) -> Var<'t> {
        let mut x = frames;
        for c in &self.convs {
            x = c.forward(tape, store, x).relu();
        }
        let pooled = x.mean_keepdim(1);
        let b = pooled.shape()[0];
        let pooled = pooled.reshape(&[b, self.config.content_channels]);
        self.content_proj.forward(tape, store, pooled)
    }

    /// Conditioning `[B, 3 d_emb + d_content]` to frames `[B, W, D]`.
    pub fn decode<'t>(&self, tape: &'t Tape, store: &ParamStore, conditioning: Var<'t>) -> Var<'t> {
        let b = conditioning.shape()[0];
        let n_basis = 2 * self.config.n_harmonics + 1;
        let coef = self
            .conditioning
            .forward(tape, store, conditioning)
            .reshape(&[b, n_basis, self.frame_dim]);
        let basis = self.time_basis();
        let batched = basis
            .broadcast((b, basis.nrows(), n_basis))
            .expect("basis broadcast")
            .to_owned()
            .into_dyn();
        tape.constant(batched).bmm(coef)
    }

    /// Frames from per-attribute embeddings `[B, d_emb]` and content frames `[B, W, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        embeddings: [Var<'t>; 3],
        content_frames: Var<'t>,
    ) -> Var<'t> {
        let content = self.content_code(tape, store, content_frames);
        let [s, e, k] = embeddings;
        self.decode(tape, store, concat(&[s, e, k, content], 1))
    }
}

/// Frozen SRL encoder plus a (possibly untrained) reconstructor.
#[derive(Debug, Clone, PartialEq)]
pub struct RecombinerState {
    pub srl_model: SrlModel,
    pub srl_params: ParamStore,
    pub slice: SliceConfig,
    pub net: Reconstructor,
    pub params: ParamStore,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct RecombinerMeta {
    config: RecombinerConfig,
    srl_model: ModelConfig,
    slice: SliceConfig,
    frame_dim: usize,
    step: u64,
}

impl RecombinerState {
    /// Untrained reconstructor over a trained SRL checkpoint.
    pub fn new(srl: &TrainerState, frame_dim: usize, config: RecombinerConfig) -> Result<Self> {
        let net = Reconstructor::new(
            config.clone(),
            frame_dim,
            srl.config.model.d_emb,
            srl.config.slice.frame_rate,
        )?;
        let params = net.init_params(config.seed);
        Ok(Self {
            srl_model: srl.model.clone(),
            srl_params: srl.params.clone(),
            slice: srl.config.slice,
            net,
            params,
            step: 0,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = RecombinerMeta {
            config: self.net.config.clone(),
            srl_model: self.srl_model.config.clone(),
            slice: self.slice,
            frame_dim: self.net.frame_dim,
            step: self.step,
        };
        let mut ar = Archive::new(RECOMBINER_KIND, serde_json::to_value(meta)?);
        ar.put_store("srl/", &self.srl_params);
        ar.put_store("net/", &self.params);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        ar.expect_kind(RECOMBINER_KIND)?;
        let meta: RecombinerMeta = serde_json::from_value(ar.meta.clone())?;
        let srl_model = SrlModel::new(meta.srl_model)?;
        let net = Reconstructor::new(meta.config, meta.frame_dim, srl_model.config.d_emb, meta.slice.frame_rate)?;
        Ok(Self {
            srl_model,
            srl_params: ar.take_store("srl/"),
            slice: meta.slice,
            net,
            params: ar.take_store("net/"),
            step: meta.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    fn embed(&self, utterances: &[&Utterance]) -> Result<Vec<EmbeddingTriple>> {
        let inputs = utterances
            .iter()
            .map(|u| Ok(center_slice(u, &self.slice)?.frames))
            .collect::<Result<Vec<FrameFeatures>>>()?;
        self.srl_model.embed(&self.srl_params, &inputs)
    }
}

/// First `w` frames of an utterance.
pub fn leading_window(utterance: &Utterance, w: usize) -> Result<Array2<f64>> {
    let frames = render_frames(utterance)?.frames;
    if frames.nrows() < w {
        return Err(SrlError::Precondition(format!(
            "utterance {} has {} frames, the reconstruction window needs {w}",
            utterance.utterance_id,
            frames.nrows()
        )));
    }
    Ok(frames.slice(s![..w, ..]).to_owned())
}

fn script_of(u: &Utterance) -> Option<u64> {
    match &u.source {
        SignalSource::Synthetic(spec) => Some(spec.content_seed),
        SignalSource::File(_) => None,
    }
}

/// Everything the training loop needs per usable utterance.
struct Pool {
    windows: Vec<Array2<f64>>,
    embeddings: Vec<EmbeddingTriple>,
    /// Per attribute: label -> pool indices carrying it.
    by_label: [BTreeMap<u32, Vec<usize>>; 3],
    labels: Vec<[Option<u32>; 3]>,
    /// Pool indices reading the same script, excluding self.
    script_mates: Vec<Vec<usize>>,
}

fn build_pool(state: &RecombinerState, manifest: &CorpusManifest) -> Result<Pool> {
    let w = state.net.window();
    let usable: Vec<&Utterance> = manifest
        .entries
        .iter()
        .filter(|u| render_frames(u).map(|f| f.n_frames() >= w).unwrap_or(false))
        .collect();
    if usable.is_empty() {
        return Err(SrlError::Precondition(format!("no utterance is at least {w} frames long")));
    }
    let windows = usable
        .iter()
        .map(|u| leading_window(u, w))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = state.embed(&usable)?;
    let labels: Vec<[Option<u32>; 3]> = usable
        .iter()
        .map(|u| Attribute::ALL.map(|a| u.labels.get(a)))
        .collect();
    let mut by_label: [BTreeMap<u32, Vec<usize>>; 3] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        for a in 0..3 {
            if let Some(v) = l[a] {
                by_label[a].entry(v).or_default().push(i);
            }
        }
    }
    let mut by_script: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, u) in usable.iter().enumerate() {
        if let Some(s) = script_of(u) {
            by_script.entry(s).or_default().push(i);
        }
    }
    let script_mates = usable
        .iter()
        .enumerate()
        .map(|(i, u)| {
            script_of(u)
                .map(|s| by_script[&s].iter().copied().filter(|&j| j != i).collect())
                .unwrap_or_default()
        })
        .collect();
    Ok(Pool {
        windows,
        embeddings,
        by_label,
        labels,
        script_mates,
    })
}

fn embedding_rows<'t>(tape: &'t Tape, pool: &Pool, rows: &[usize], attribute: Attribute) -> Var<'t> {
    let d = pool.embeddings[0].style.len();
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|&i| pool.embeddings[i].get(attribute).iter().copied())
        .collect();
    tape.constant(ArrayD::from_shape_vec(IxDyn(&[rows.len(), d]), data).expect("embedding rows"))
}

fn window_rows<'t>(tape: &'t Tape, pool: &Pool, rows: &[usize]) -> Var<'t> {
    let (w, d) = pool.windows[0].dim();
    let mut out = Array3::zeros((rows.len(), w, d));
    for (b, &i) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&pool.windows[i]);
    }
    tape.constant(out.into_dyn())
}

/// Mean absolute frame error of the batch.
fn batch_loss<'t>(
    tape: &'t Tape,
    state: &RecombinerState,
    pool: &Pool,
    targets: &[usize],
    refs: &[[usize; 3]],
    contents: &[usize],
) -> Var<'t> {
    let emb = Attribute::ALL.map(|a| {
        let rows: Vec<usize> = refs.iter().map(|r| r[a.index()]).collect();
        embedding_rows(tape, pool, &rows, a)
    });
    let pred = state
        .net
        .forward(tape, &state.params, emb, window_rows(tape, pool, contents));
    (pred - window_rows(tape, pool, targets)).abs().mean_all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub step: u64,
    pub frame_error: f64,
}

/// Train the reconstructor on `manifest` with the SRL encoder frozen.
pub fn train_reconstructor(
    srl: &TrainerState,
    manifest: &CorpusManifest,
    config: RecombinerConfig,
) -> Result<(RecombinerState, Vec<ReconstructionRecord>)> {
    let frame_dim = manifest
        .entries
        .first()
        .ok_or_else(|| SrlError::Precondition("empty manifest".into()))
        .and_then(|u| Ok(render_frames(u)?.dim()))?;
    let mut state = RecombinerState::new(srl, frame_dim, config)?;
    let before = state.srl_params.fingerprint();
    let records = continue_training(&mut state, manifest)?;
    if state.srl_params.fingerprint() != before || srl.params.fingerprint() != before {
        return Err(SrlError::FrozenViolation("SRL parameters changed while training the reconstructor".into()));
    }
    Ok((state, records))
}

/// Run `config.steps` reconstructor steps from the current state.
pub fn continue_training(state: &mut RecombinerState, manifest: &CorpusManifest) -> Result<Vec<ReconstructionRecord>> {
    let pool = build_pool(state, manifest)?;
    let cfg = state.net.config.clone();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let n = pool.windows.len();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let step = state.step + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, STEP_TAG), step));
        let targets: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let refs: Vec<[usize; 3]> = targets
            .iter()
            .map(|&t| {
                std::array::from_fn(|a| match pool.labels[t][a] {
                    Some(l) => *pool.by_label[a][&l].choose(&mut rng).expect("label group holds t"),
                    None => t,
                })
            })
            .collect();
        let contents: Vec<usize> = targets
            .iter()
            .map(|&t| pool.script_mates[t].choose(&mut rng).copied().unwrap_or(t))
            .collect();
        let tape = Tape::new();
        let loss = batch_loss(&tape, state, &pool, &targets, &refs, &contents);
        let frame_error = loss.item();
        if !frame_error.is_finite() {
            return Err(SrlError::NonFinite {
                layer: "recombiner".into(),
            });
        }
        let grads = tape.backward(loss).params(&state.params);
        adam.step(&mut state.params, &grads);
        state.step = step;
        records.push(ReconstructionRecord { step, frame_error });
    }
    Ok(records)
}

/// Mean absolute error of identity recombination (every reference is the
/// target itself) over the usable utterances of `manifest`.
pub fn reconstruction_error(state: &RecombinerState, manifest: &CorpusManifest) -> Result<f64> {
    let pool = build_pool(state, manifest)?;
    let n = pool.windows.len();
    let mut total = 0.0;
    for chunk in (0..n).collect::<Vec<_>>().chunks(64) {
        let tape = Tape::new();
        let refs: Vec<[usize; 3]> = chunk.iter().map(|&i| [i; 3]).collect();
        total += batch_loss(&tape, state, &pool, chunk, &refs, chunk).item() * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Frames carrying `style_ref`'s style, `emotion_ref`'s emotion and
/// `speaker_ref`'s speaker, with `content_ref` as the content reference.
pub fn recombine(
    state: &RecombinerState,
    style_ref: &Utterance,
    emotion_ref: &Utterance,
    speaker_ref: &Utterance,
    content_ref: &Utterance,
) -> Result<Array2<f64>> {
    if state.step == 0 {
        return Err(SrlError::Precondition("reconstructor is untrained".into()));
    }
    let triples = state.embed(&[style_ref, emotion_ref, speaker_ref])?;
    let content = leading_window(content_ref, state.net.window())?;
    let tape = Tape::new();
    let emb = Attribute::ALL.map(|a| {
        let v = triples[a.index()].get(a);
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).expect("row"))
    });
    let content = tape.constant(content.insert_axis(Axis(0)).into_dyn());
    let out = state.net.forward(&tape, &state.params, emb, content).value();
    Ok(out
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("[W, D] output"))
}

/// True generating factors of a synthetic utterance.
pub fn true_factors(u: &Utterance) -> Option<[u32; 3]> {
    match &u.source {
        SignalSource::Synthetic(spec) => Some([spec.style_id, spec.emotion_id, spec.speaker_id]),
        SignalSource::File(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTrial {
    pub swapped: Vec<Attribute>,
    pub base_id: String,
    pub donor_id: String,
    pub expected: [u32; 3],
    pub recovered: [u32; 3],
    pub success: bool,
}

/// Oracle reading of recombined frames, as `[style, emotion, speaker]`.
pub fn oracle_reading(frames: &Array2<f64>, frame_rate: f64, counts: &CategoryCounts, reference: &Utterance) -> Result<[u32; 3]> {
    let SignalSource::Synthetic(spec) = &reference.source else {
        return Err(SrlError::Precondition(format!(
            "{} is not synthetic; the oracle needs its table seed",
            reference.utterance_id
        )));
    };
    let f = recover_factors(frames, frame_rate, counts, spec.table_seed);
    Ok([f.style, f.emotion, f.speaker])
}

/// Swap the references for `swapped` from a donor that differs from the
/// base in every swapped factor; a trial succeeds when the oracle reads the
/// donor's values for the swapped factors and the base's for the rest.
pub fn transfer_trials(
    state: &RecombinerState,
    manifest: &CorpusManifest,
    swapped: &[Attribute],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<TransferTrial>> {
    let w = state.net.window();
    let usable: Vec<(&Utterance, [u32; 3])> = manifest
        .entries
        .iter()
        .filter(|u| render_frames(u).map(|f| f.n_frames() >= w).unwrap_or(false))
        .filter_map(|u| true_factors(u).map(|f| (u, f)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let (base, bf) = *usable
            .choose(&mut rng)
            .ok_or_else(|| SrlError::Precondition("no usable synthetic utterance".into()))?;
        let donors: Vec<&(&Utterance, [u32; 3])> = usable
            .iter()
            .filter(|(_, df)| swapped.iter().all(|a| df[a.index()] != bf[a.index()]))
            .collect();
        let &&(donor, df) = donors
            .choose(&mut rng)
            .ok_or_else(|| SrlError::Precondition("no donor differs in the swapped factors".into()))?;
        let pick = |a: Attribute| if swapped.contains(&a) { donor } else { base };
        let frames = recombine(
            state,
            pick(Attribute::Style),
            pick(Attribute::Emotion),
            pick(Attribute::Speaker),
            base,
        )?;
        let expected = std::array::from_fn(|i| if swapped.contains(&Attribute::ALL[i]) { df[i] } else { bf[i] });
        let recovered = oracle_reading(&frames, state.net.frame_rate, &manifest.category_counts, base)?;
        trials.push(TransferTrial {
            swapped: swapped.to_vec(),
            base_id: base.utterance_id.clone(),
            donor_id: donor.utterance_id.clone(),
            expected,
            recovered,
            success: expected == recovered,
        });
    }
    Ok(trials)
}

pub fn success_rate(trials: &[TransferTrial]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    trials.iter().filter(|t| t.success).count() as f64 / trials.len() as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::trainer::tests::{tiny_manifest, tiny_train_config};

    fn tiny_config() -> RecombinerConfig {
        RecombinerConfig {
            d_content: 4,
            content_channels: 4,
            content_layers: 1,
            hidden: 16,
            n_harmonics: 3,
            window_seconds: 1.0,
            steps: 0,
            batch_size: 8,
            learning_rate: 3e-3,
            ..RecombinerConfig::default()
        }
    }

    fn srl() -> TrainerState {
        TrainerState::new(tiny_train_config()).unwrap()
    }

    #[test]
    fn zero_steps_keeps_the_untrained_baseline() {
        let m = tiny_manifest();
        let srl = srl();
        let (trained, records) = train_reconstructor(&srl, &m, tiny_config()).unwrap();
        assert!(records.is_empty());
        let fresh = RecombinerState::new(&srl, 8, tiny_config()).unwrap();
        assert_eq!(trained.params, fresh.params);
        assert_eq!(
            reconstruction_error(&trained, &m).unwrap(),
            reconstruction_error(&fresh, &m).unwrap()
        );
    }

    #[test]
    fn training_reduces_error_and_leaves_srl_untouched() {
        let m = tiny_manifest();
        let srl = srl();
        let before = srl.params.clone();
        let base = reconstruction_error(&RecombinerState::new(&srl, 8, tiny_config()).unwrap(), &m).unwrap();
        let (state, _) = train_reconstructor(&srl, &m, RecombinerConfig { steps: 200, ..tiny_config() }).unwrap();
        let after = reconstruction_error(&state, &m).unwrap();
        assert!(after < 0.7 * base, "{after} vs {base}");
        assert_eq!(srl.params, before);
        assert_eq!(state.srl_params, before);
    }

    #[test]
    fn untrained_reconstructor_refuses_to_recombine() {
        let m = tiny_manifest();
        let state = RecombinerState::new(&srl(), 8, tiny_config()).unwrap();
        let u = &m.entries[0];
        assert!(matches!(recombine(&state, u, u, u, u), Err(SrlError::Precondition(_))));
    }

    #[test]
    fn archive_round_trip() {
        let m = tiny_manifest();
        let (state, _) = train_reconstructor(&srl(), &m, RecombinerConfig { steps: 3, ..tiny_config() }).unwrap();
        let back = RecombinerState::from_archive(&Archive::from_bytes(&state.to_archive().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, state);
        let u = &m.entries[0];
        assert_eq!(recombine(&back, u, u, u, u).unwrap(), recombine(&state, u, u, u, u).unwrap());
    }

    #[test]
    fn time_basis_columns() {
        let net = Reconstructor::new(tiny_config(), 8, 16, 16.0).unwrap();
        let b = net.time_basis();
        assert_eq!(b.dim(), (16, 7));
        assert!(b.column(0).iter().all(|&x| x == 1.0));
        // first harmonic at 1 Hz, 16 fps: a quarter period is 4 frames
        assert!((b[[4, 1]] - 1.0).abs() < 1e-12);
        assert!(b[[4, 2]].abs() < 1e-12);
    }
}
