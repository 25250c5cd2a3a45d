//! Closed-form recovery of the generating factors from synthetic frames.
//!
//! For each candidate style frequency the oracle fits, per dimension,
//! `x[t] ≈ m + a cos(ωt) + b sin(ωt)` by least squares. The best-fitting
//! frequency gives the style, the fitted offsets `m` give the speaker mean
//! vector and the mean fitted amplitude `sqrt(a² + b²)` gives the emotion
//! scale. Decisions are nearest-prototype:
//!
//! * style: minimum residual sum of squares over candidate frequencies,
//! * emotion: nearest level in log-amplitude, margin `ln(EMOTION_RATIO) / 2`,
//! * speaker: nearest table mean in Euclidean distance, margin half the
//!   smallest distance between two table means.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::synth::{emotion_scale, speaker_mean, style_frequency, EMOTION_RATIO};
use super::{Attribute, CategoryCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStats {
    /// Least-squares offset per dimension at the best frequency.
    pub per_dim_mean: Vec<f64>,
    /// Mean modulation amplitude across dimensions at the best frequency.
    pub amplitude: f64,
    /// Residual sum of squares for each candidate style frequency.
    pub style_rss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorEstimate {
    pub style: u32,
    pub emotion: u32,
    pub speaker: u32,
}

impl FactorEstimate {
    pub fn get(&self, attribute: Attribute) -> u32 {
        match attribute {
            Attribute::Style => self.style,
            Attribute::Emotion => self.emotion,
            Attribute::Speaker => self.speaker,
        }
    }
}

struct SinusoidFit {
    offset: Vec<f64>,
    amplitude: Vec<f64>,
    rss: f64,
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> [f64; 3] {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = rhs[row];
        }
        *o = det(mc) / d;
    }
    out
}

fn fit_sinusoid(frames: &Array2<f64>, omega: f64) -> SinusoidFit {
    let t_len = frames.nrows();
    let basis: Vec<[f64; 3]> = (0..t_len)
        .map(|t| {
            let p = omega * t as f64;
            [1.0, p.cos(), p.sin()]
        })
        .collect();
    let mut gram = [[0.0; 3]; 3];
    for b in &basis {
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] += b[i] * b[j];
            }
        }
    }
    // Tiny ridge keeps the system solvable for windows shorter than a period.
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    let mut offset = Vec::with_capacity(frames.ncols());
    let mut amplitude = Vec::with_capacity(frames.ncols());
    let mut rss = 0.0;
    for col in frames.columns() {
        let mut rhs = [0.0; 3];
        for (b, &x) in basis.iter().zip(col.iter()) {
            for i in 0..3 {
                rhs[i] += b[i] * x;
            }
        }
        let coef = solve3(gram, rhs);
        for (b, &x) in basis.iter().zip(col.iter()) {
            let r = x - (coef[0] * b[0] + coef[1] * b[1] + coef[2] * b[2]);
            rss += r * r;
        }
        offset.push(coef[0]);
        amplitude.push((coef[1] * coef[1] + coef[2] * coef[2]).sqrt());
    }
    SinusoidFit {
        offset,
        amplitude,
        rss,
    }
}

/// Per-factor statistics of a `[T x D]` frame matrix.
pub fn factor_statistics(frames: &Array2<f64>, frame_rate: f64, n_styles: u32) -> OracleStats {
    let fits: Vec<SinusoidFit> = (0..n_styles)
        .map(|s| fit_sinusoid(frames, 2.0 * PI * style_frequency(s) / frame_rate))
        .collect();
    let best = fits
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.rss.partial_cmp(&b.1.rss).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let fit = &fits[best];
    OracleStats {
        per_dim_mean: fit.offset.clone(),
        amplitude: fit.amplitude.iter().sum::<f64>() / fit.amplitude.len() as f64,
        style_rss: fits.iter().map(|f| f.rss).collect(),
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> u32 {
    values
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(i, _)| i as u32)
        .unwrap()
}

pub fn classify(stats: &OracleStats, counts: &CategoryCounts, table_seed: u64) -> FactorEstimate {
    let style = argmin(stats.style_rss.iter().copied());
    let log_amp = stats.amplitude.max(1e-12).ln();
    let emotion = argmin((0..counts.emotion).map(|e| (emotion_scale(e).ln() - log_amp).abs()));
    let dim = stats.per_dim_mean.len();
    let speaker = argmin((0..counts.speaker).map(|k| {
        speaker_mean(table_seed, k, dim)
            .iter()
            .zip(&stats.per_dim_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }));
    FactorEstimate {
        style,
        emotion,
        speaker,
    }
}

/// Recover all three factor ids from frames.
pub fn recover_factors(
    frames: &Array2<f64>,
    frame_rate: f64,
    counts: &CategoryCounts,
    table_seed: u64,
) -> FactorEstimate {
    classify(&factor_statistics(frames, frame_rate, counts.style), counts, table_seed)
}

/// Decision margins: half the log spacing of emotion levels and half the
/// smallest pairwise distance between speaker means.
pub fn decision_margins(counts: &CategoryCounts, table_seed: u64, dim: usize) -> (f64, f64) {
    let means: Vec<_> = (0..counts.speaker)
        .map(|k| speaker_mean(table_seed, k, dim))
        .collect();
    let mut min_d = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_d = min_d.min(d);
        }
    }
    (EMOTION_RATIO.ln() / 2.0, min_d / 2.0)
}

/// Feature vector per factor on which a linear rule recovers the factor:
/// style gets negated residuals, emotion the log amplitude, speaker the means.
pub fn oracle_features(stats: &OracleStats, attribute: Attribute) -> Vec<f64> {
    match attribute {
        Attribute::Style => {
            let scale = stats.style_rss.iter().cloned().fold(0.0, f64::max).max(1e-12);
            stats.style_rss.iter().map(|r| -r / scale).collect()
        }
        Attribute::Emotion => vec![stats.amplitude.max(1e-12).ln()],
        Attribute::Speaker => stats.per_dim_mean.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate, SynthConfig};
    use crate::corpus::{render_frames, SignalSource};

    fn spec_of(u: &crate::corpus::Utterance) -> crate::corpus::SyntheticFactorSpec {
        match &u.source {
            SignalSource::Synthetic(s) => *s,
            _ => unreachable!(),
        }
    }

    #[test]
    fn oracle_identifies_every_factor_of_the_reference_corpus() {
        for (rate, seed) in [(50.0, 0), (16.0, 3), (16.0, 21)] {
            let cfg = SynthConfig {
                n_utts_per_cell: 4,
                frame_rate: rate,
                min_duration: 1.5,
                max_duration: 4.0,
                seed,
                ..SynthConfig::default()
            };
            let m = generate(&cfg).unwrap();
            for u in &m.entries {
                let frames = render_frames(u).unwrap();
                let got = recover_factors(&frames.frames, rate, &m.category_counts, 0);
                let spec = spec_of(u);
                assert_eq!(
                    (got.style, got.emotion, got.speaker),
                    (spec.style_id, spec.emotion_id, spec.speaker_id),
                    "{}",
                    u.utterance_id
                );
            }
        }
    }

    #[test]
    fn clean_frames_give_exact_statistics() {
        let m = generate(&SynthConfig::default()).unwrap();
        let spec = spec_of(&m.entries[37]);
        let stats = factor_statistics(&spec.clean_frames(), spec.frame_rate, 3);
        let truth = speaker_mean(0, spec.speaker_id, spec.frame_dim);
        for (a, b) in stats.per_dim_mean.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((stats.amplitude - emotion_scale(spec.emotion_id)).abs() < 1e-6);
        assert!(stats.style_rss[spec.style_id as usize] < 1e-9);
    }

    #[test]
    fn margins_are_positive() {
        let (emo, spk) = decision_margins(
            &CategoryCounts {
                style: 3,
                emotion: 6,
                speaker: 5,
                language: 0,
            },
            0,
            8,
        );
        assert!(emo > 0.1 && spk > 0.5, "{emo} {spk}");
    }
}
