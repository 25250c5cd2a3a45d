//! Synthetic factor corpus.
//!
//! Every generated frame is
//!
//! ```text
//! x[t, d] = mean_k[d] + scale_e * (sin(2π f_s t / rate + phase_d) + NOISE_LEVEL * n[t, d])
//! ```
//!
//! * speaker `k` picks the per-dimension mean vector `mean_k` (seeded table),
//! * emotion `e` picks the global deviation scale `scale_e = EMOTION_BASE_SCALE * EMOTION_RATIO^e`,
//! * style `s` picks the modulation frequency `f_s = STYLE_BASE_HZ * (s + 1)`,
//! * `content_seed` drives the Gaussian noise `n` (and nothing else).
//!
//! Phases come from the same table seed as the speaker means, so two specs
//! that differ in one factor differ in exactly one of the statistics above.
//! See [`super::oracle`] for the closed-form recovery of each factor.

use std::f64::consts::PI;
use std::fs;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AttributeLabels, CategoryCounts, CorpusManifest, Domain, SignalSource, Utterance};
use crate::error::{Result, SrlError};
use crate::model::FrameFeatures;

pub const STYLE_BASE_HZ: f64 = 1.0;
pub const EMOTION_BASE_SCALE: f64 = 0.5;
pub const EMOTION_RATIO: f64 = 1.35;
pub const NOISE_LEVEL: f64 = 0.15;
pub const SPEAKER_SPREAD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFactorSpec {
    pub style_id: u32,
    pub emotion_id: u32,
    pub speaker_id: u32,
    pub content_seed: u64,
    pub frame_rate: f64,
    pub duration: f64,
    pub frame_dim: usize,
    /// Seeds the speaker mean table and the phase table.
    #[serde(default)]
    pub table_seed: u64,
}

/// Deterministic 64-bit mixing of a seed with a stream tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SPEAKER_TAG: u64 = 0x5350_4b52;
const PHASE_TAG: u64 = 0x5048_4153;
const SCRIPT_TAG: u64 = 0x5343_5250;

pub fn style_frequency(style_id: u32) -> f64 {
    STYLE_BASE_HZ * (style_id as f64 + 1.0)
}

pub fn emotion_scale(emotion_id: u32) -> f64 {
    EMOTION_BASE_SCALE * EMOTION_RATIO.powi(emotion_id as i32)
}

pub fn speaker_mean(table_seed: u64, speaker_id: u32, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        mix_seed(table_seed, SPEAKER_TAG),
        speaker_id as u64,
    ));
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            SPEAKER_SPREAD * z
        })
        .collect()
}

pub fn phases(table_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(table_seed, PHASE_TAG));
    (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
}

impl SyntheticFactorSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize
    }

    pub fn labels(&self) -> AttributeLabels {
        AttributeLabels::full(self.style_id, self.emotion_id, self.speaker_id)
    }

    /// Noise-free frames, i.e. what the generator produces before adding content noise.
    pub fn clean_frames(&self) -> Array2<f64> {
        self.frames_with_noise(false)
    }

    pub fn render(&self) -> Array2<f64> {
        self.frames_with_noise(true)
    }

    fn frames_with_noise(&self, noise: bool) -> Array2<f64> {
        let t_len = self.n_frames();
        let d = self.frame_dim;
        let mean = speaker_mean(self.table_seed, self.speaker_id, d);
        let phase = phases(self.table_seed, d);
        let scale = emotion_scale(self.emotion_id);
        let omega = 2.0 * PI * style_frequency(self.style_id) / self.frame_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(self.content_seed);
        Array2::from_shape_fn((t_len, d), |(t, j)| {
            let n: f64 = if noise {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            mean[j] + scale * ((omega * t as f64 + phase[j]).sin() + NOISE_LEVEL * n)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_styles: u32,
    pub n_emotions: u32,
    pub n_speakers: u32,
    pub n_utts_per_cell: u32,
    pub seed: u64,
    pub frame_rate: f64,
    pub frame_dim: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    /// Size of the pool of content seeds; 0 gives every utterance its own.
    pub n_scripts: u32,
    pub table_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_styles: 3,
            n_emotions: 6,
            n_speakers: 5,
            n_utts_per_cell: 2,
            seed: 0,
            frame_rate: 50.0,
            frame_dim: 8,
            min_duration: 2.0,
            max_duration: 5.0,
            n_scripts: 8,
            table_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SrlError::Precondition(m));
        if self.n_styles == 0 || self.n_emotions == 0 || self.n_speakers == 0 || self.n_utts_per_cell == 0 {
            return bad("all category counts and n_utts_per_cell must be >= 1".into());
        }
        if !(self.frame_rate > 0.0) || self.frame_dim == 0 {
            return bad("frame_rate and frame_dim must be positive".into());
        }
        if style_frequency(self.n_styles - 1) >= 0.45 * self.frame_rate {
            return bad(format!(
                "{} styles need modulation up to {} Hz, beyond 0.45 x frame_rate {}",
                self.n_styles,
                style_frequency(self.n_styles - 1),
                self.frame_rate
            ));
        }
        if !(self.min_duration > 0.0 && self.max_duration >= self.min_duration) {
            return bad("need 0 < min_duration <= max_duration".into());
        }
        if (self.min_duration * self.frame_rate).round() < 1.0 {
            return bad("min_duration shorter than one frame".into());
        }
        Ok(())
    }
}

/// [`generate`] with default rendering settings.
pub fn generate_synthetic_corpus(
    n_styles: u32,
    n_emotions: u32,
    n_speakers: u32,
    n_utts_per_cell: u32,
    seed: u64,
) -> Result<CorpusManifest> {
    generate(&SynthConfig {
        n_styles,
        n_emotions,
        n_speakers,
        n_utts_per_cell,
        seed,
        ..SynthConfig::default()
    })
}

/// Generate every (style, emotion, speaker) cell `n_utts_per_cell` times.
///
/// Entries carry all three labels and sit in the STYLE domain as a
/// placeholder; run the result through [`super::relabel_domains`] to get a
/// partially labeled training corpus.
pub fn generate(config: &SynthConfig) -> Result<CorpusManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let min_frames = (config.min_duration * config.frame_rate).round() as usize;
    let max_frames = (config.max_duration * config.frame_rate).round() as usize;
    let mut entries = Vec::new();
    for s in 0..config.n_styles {
        for e in 0..config.n_emotions {
            for k in 0..config.n_speakers {
                for r in 0..config.n_utts_per_cell {
                    let frames = rng.random_range(min_frames..=max_frames);
                    let content_seed = if config.n_scripts == 0 {
                        rng.random::<u64>()
                    } else {
                        let script = rng.random_range(0..config.n_scripts) as u64;
                        mix_seed(mix_seed(config.seed, SCRIPT_TAG), script)
                    };
                    let spec = SyntheticFactorSpec {
                        style_id: s,
                        emotion_id: e,
                        speaker_id: k,
                        content_seed,
                        frame_rate: config.frame_rate,
                        duration: frames as f64 / config.frame_rate,
                        frame_dim: config.frame_dim,
                        table_seed: config.table_seed,
                    };
                    entries.push(Utterance {
                        utterance_id: format!("syn{}_s{s}_e{e}_k{k}_{r}", config.seed),
                        source: SignalSource::Synthetic(spec),
                        duration: spec.duration,
                        labels: spec.labels(),
                        domain: Domain::Style,
                    });
                }
            }
        }
    }
    let manifest = CorpusManifest::new(
        CategoryCounts {
            style: config.n_styles,
            emotion: config.n_emotions,
            speaker: config.n_speakers,
            language: 0,
        },
        entries,
    );
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Deserialize)]
struct FrameFile {
    frame_rate: f64,
    frames: Vec<Vec<f64>>,
}

/// Frames of an utterance: `[T x D]` with `T = duration * frame_rate`.
pub fn render_frames(utterance: &Utterance) -> Result<FrameFeatures> {
    match &utterance.source {
        SignalSource::Synthetic(spec) => FrameFeatures::new(spec.render()),
        SignalSource::File(path) => {
            let unresolvable = || SrlError::UnresolvableSource(utterance.utterance_id.clone());
            let text = fs::read_to_string(path).map_err(|_| unresolvable())?;
            let file: FrameFile = serde_json::from_str(&text).map_err(|_| unresolvable())?;
            let t = file.frames.len();
            let d = file.frames.first().map_or(0, |r| r.len());
            if t == 0 || d == 0 || file.frames.iter().any(|r| r.len() != d) || !(file.frame_rate > 0.0) {
                return Err(unresolvable());
            }
            let flat: Vec<f64> = file.frames.into_iter().flatten().collect();
            FrameFeatures::new(Array2::from_shape_vec((t, d), flat).expect("rectangular frames"))
        }
    }
}
