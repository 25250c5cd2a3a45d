//! Slices, two-set pair batches and the ground-truth mask matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::mix_seed;
use crate::corpus::{render_frames, Attribute, AttributeLabels, CorpusManifest, Domain, Utterance};
use crate::error::{Result, SrlError};
use crate::model::FrameFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub slice_seconds: f64,
    pub frame_rate: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            slice_seconds: 3.0,
            frame_rate: 50.0,
        }
    }
}

impl SliceConfig {
    pub fn slice_frames(&self) -> usize {
        (self.slice_seconds * self.frame_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) || self.slice_frames() == 0 {
            return Err(SrlError::Config(format!(
                "slice of {} s at {} fps has no frames",
                self.slice_seconds, self.frame_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechSlice {
    pub parent_id: String,
    /// Start offset in seconds; 0 for repeat-padded slices.
    pub start: f64,
    pub frames: FrameFeatures,
    pub labels: AttributeLabels,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub set_a: Vec<SpeechSlice>,
    pub set_b: Vec<SpeechSlice>,
    /// Whether speaker ids are comparable across domains.
    pub global_speaker_ids: bool,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.set_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set_a.is_empty()
    }
}

/// Cut `n` frames starting at a uniform frame offset, or tile short input
/// along time and cut from frame 0.
pub fn slice_frames(frames: &Array2<f64>, n: usize, offset_seed: u64) -> (usize, Array2<f64>) {
    let t = frames.nrows();
    if t >= n {
        let mut rng = ChaCha8Rng::seed_from_u64(offset_seed);
        let start = rng.random_range(0..=t - n);
        (start, frames.slice(s![start..start + n, ..]).to_owned())
    } else {
        let reps = n.div_ceil(t);
        let views: Vec<_> = (0..reps).map(|_| frames.view()).collect();
        let tiled = ndarray::concatenate(ndarray::Axis(0), &views).expect("same width");
        (0, tiled.slice(s![..n, ..]).to_owned())
    }
}

fn slice_rendered(
    utterance: &Utterance,
    rendered: &FrameFeatures,
    offset_seed: u64,
    config: &SliceConfig,
) -> Result<SpeechSlice> {
    let (start, frames) = slice_frames(&rendered.frames, config.slice_frames(), offset_seed);
    let layer_stack = rendered.layer_stack.as_ref().map(|stack| {
        let layers: Vec<_> = stack
            .outer_iter()
            .map(|l| slice_frames(&l.to_owned(), config.slice_frames(), offset_seed).1)
            .collect();
        let views: Vec<_> = layers.iter().map(|l| l.view()).collect();
        ndarray::stack(ndarray::Axis(0), &views).expect("equal layer shapes")
    });
    let mut frames = FrameFeatures::new(frames)?;
    frames.layer_stack = layer_stack;
    Ok(SpeechSlice {
        parent_id: utterance.utterance_id.clone(),
        start: start as f64 / config.frame_rate,
        frames,
        labels: utterance.labels,
        domain: utterance.domain,
    })
}

fn check_duration(utterance: &Utterance) -> Result<()> {
    if !(utterance.duration > 0.0) {
        return Err(SrlError::InvalidUtterance {
            id: utterance.utterance_id.clone(),
            message: "zero duration".into(),
        });
    }
    Ok(())
}

pub fn extract_slice(utterance: &Utterance, offset_seed: u64, config: &SliceConfig) -> Result<SpeechSlice> {
    check_duration(utterance)?;
    slice_rendered(utterance, &render_frames(utterance)?, offset_seed, config)
}

/// The slice centred in the utterance (repeat-padded when too short).
pub fn center_slice(utterance: &Utterance, config: &SliceConfig) -> Result<SpeechSlice> {
    check_duration(utterance)?;
    let rendered = render_frames(utterance)?;
    let n = config.slice_frames();
    let t = rendered.n_frames();
    if t < n {
        return slice_rendered(utterance, &rendered, 0, config);
    }
    let start = (t - n) / 2;
    let frames = rendered.frames.slice(s![start..start + n, ..]).to_owned();
    let mut out = FrameFeatures::new(frames)?;
    out.layer_stack = rendered
        .layer_stack
        .map(|st| st.slice(s![.., start..start + n, ..]).to_owned());
    Ok(SpeechSlice {
        parent_id: utterance.utterance_id.clone(),
        start: start as f64 / config.frame_rate,
        frames: out,
        labels: utterance.labels,
        domain: utterance.domain,
    })
}

/// Fail unless every domain has at least `k / 4` utterances.
pub fn check_quota(manifest: &CorpusManifest, k: usize) -> Result<()> {
    if k == 0 || k % 4 != 0 {
        return Err(SrlError::Precondition(format!("batch size {k} is not a positive multiple of 4")));
    }
    let counts = manifest.domain_counts();
    for d in Domain::ALL {
        if counts[d.index()] < k / 4 {
            return Err(SrlError::InsufficientDomain {
                domain: d.name().to_string(),
                available: counts[d.index()],
                required: k / 4,
            });
        }
    }
    Ok(())
}

/// Manifest indices of the `k` utterances a batch draws, quarter by quarter.
pub fn batch_indices(manifest: &CorpusManifest, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_quota(manifest, k)?;
    let mut out = Vec::with_capacity(k);
    for d in Domain::ALL {
        let mut pool = manifest.indices_in(d);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, d.index() as u64));
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..k / 4]);
    }
    Ok(out)
}

pub fn compose_batch(manifest: &CorpusManifest, k: usize, seed: u64, config: &SliceConfig) -> Result<PairBatch> {
    config.validate()?;
    let indices = batch_indices(manifest, k, seed)?;
    let mut set_a = Vec::with_capacity(k);
    let mut set_b = Vec::with_capacity(k);
    for (pos, &i) in indices.iter().enumerate() {
        let u = &manifest.entries[i];
        check_duration(u)?;
        let rendered = render_frames(u)?;
        let base = mix_seed(seed, 0x51_1ce0 + pos as u64);
        set_a.push(slice_rendered(u, &rendered, mix_seed(base, 0), config)?);
        set_b.push(slice_rendered(u, &rendered, mix_seed(base, 1), config)?);
    }
    Ok(PairBatch {
        set_a,
        set_b,
        global_speaker_ids: manifest.global_speaker_ids,
    })
}

/// `K x K` ground truth for one attribute: 1 positive, 0 negative, -1 unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    pub attribute: Attribute,
    pub entries: Array2<i8>,
}

/// Label state of one slice as seen by the mask rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelState {
    pub domain: Domain,
    pub label: Option<u32>,
}

/// Mask entry for an off-diagonal pair of distinct utterances.
pub fn pair_entry(a: LabelState, b: LabelState, attribute: Attribute, global_speaker_ids: bool) -> i8 {
    if a.domain == Domain::Unlabeled || b.domain == Domain::Unlabeled {
        return -1;
    }
    let (Some(x), Some(y)) = (a.label, b.label) else {
        return -1;
    };
    if attribute == Attribute::Speaker && a.domain != b.domain && !global_speaker_ids {
        return -1;
    }
    i8::from(x == y)
}

pub fn build_mask(batch: &PairBatch, attribute: Attribute) -> MaskMatrix {
    let k = batch.len();
    let state = |s: &SpeechSlice| LabelState {
        domain: s.domain,
        label: s.labels.get(attribute),
    };
    let entries = Array2::from_shape_fn((k, k), |(i, j)| {
        let (a, b) = (&batch.set_a[i], &batch.set_b[j]);
        if i == j || a.parent_id == b.parent_id {
            1
        } else {
            pair_entry(state(a), state(b), attribute, batch.global_speaker_ids)
        }
    });
    MaskMatrix { attribute, entries }
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries as reals, for use inside the loss.
    pub fn as_f64(&self) -> Array2<f64> {
        self.entries.mapv(f64::from)
    }

    /// One row per line, entries separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.entries.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn from_text(attribute: Attribute, text: &str) -> Result<Self> {
        let rows: Vec<Vec<i8>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|c| match c {
                        "-1" => Ok(-1),
                        "0" => Ok(0),
                        "1" => Ok(1),
                        other => Err(SrlError::Degenerate(format!("bad mask entry {other:?}"))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(SrlError::Degenerate("mask text is not square".into()));
        }
        let entries = Array2::from_shape_vec((k, k), rows.into_iter().flatten().collect())
            .expect("checked square");
        Ok(Self { attribute, entries })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainStatistics {
    pub count: usize,
    /// Label histograms in attribute order style, emotion, speaker.
    pub histograms: [BTreeMap<u32, usize>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStatistics {
    pub batch_size: usize,
    pub per_domain: BTreeMap<Domain, DomainStatistics>,
}

impl BatchStatistics {
    pub fn count(&self, domain: Domain) -> usize {
        self.per_domain.get(&domain).map_or(0, |d| d.count)
    }

    pub fn histogram(&self, domain: Domain, attribute: Attribute) -> BTreeMap<u32, usize> {
        self.per_domain
            .get(&domain)
            .map(|d| d.histograms[attribute.index()].clone())
            .unwrap_or_default()
    }

    /// True when every domain holds exactly a quarter of the batch.
    pub fn meets_quota(&self) -> bool {
        self.batch_size % 4 == 0 && Domain::ALL.iter().all(|&d| self.count(d) == self.batch_size / 4)
    }
}

/// Per-domain utterance counts and label histograms over set A.
pub fn batch_statistics(batch: &PairBatch) -> BatchStatistics {
    let mut per_domain: BTreeMap<Domain, DomainStatistics> = BTreeMap::new();
    for d in Domain::ALL {
        per_domain.insert(d, DomainStatistics::default());
    }
    for s in &batch.set_a {
        let entry = per_domain.entry(s.domain).or_default();
        entry.count += 1;
        for a in Attribute::ALL {
            if let Some(l) = s.labels.get(a) {
                *entry.histograms[a.index()].entry(l).or_default() += 1;
            }
        }
    }
    BatchStatistics {
        batch_size: batch.len(),
        per_domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{relabel_domains, SignalSource, SyntheticFactorSpec};
    use proptest::prelude::*;

    fn utterance(id: &str, duration: f64, domain: Domain, labels: AttributeLabels) -> Utterance {
        Utterance {
            utterance_id: id.into(),
            source: SignalSource::Synthetic(SyntheticFactorSpec {
                style_id: labels.style.unwrap_or(0),
                emotion_id: labels.emotion.unwrap_or(0),
                speaker_id: labels.speaker.unwrap_or(0),
                content_seed: 7,
                frame_rate: 50.0,
                duration,
                frame_dim: 4,
                table_seed: 0,
            }),
            duration,
            labels,
            domain,
        }
    }

    fn slice(id: &str, domain: Domain, labels: AttributeLabels) -> SpeechSlice {
        SpeechSlice {
            parent_id: id.into(),
            start: 0.0,
            frames: FrameFeatures::new(Array2::zeros((2, 1))).unwrap(),
            labels,
            domain,
        }
    }

    fn pair(slices: Vec<SpeechSlice>) -> PairBatch {
        PairBatch {
            set_a: slices.clone(),
            set_b: slices,
            global_speaker_ids: true,
        }
    }

    fn emotion_only(e: u32) -> AttributeLabels {
        AttributeLabels {
            emotion: Some(e),
            ..AttributeLabels::default()
        }
    }

    #[test]
    fn long_utterance_slice_stays_inside() {
        let u = utterance("u", 5.0, Domain::Style, AttributeLabels::full(0, 0, 0));
        let cfg = SliceConfig::default();
        for seed in 0..50 {
            let s = extract_slice(&u, seed, &cfg).unwrap();
            assert_eq!(s.frames.n_frames(), 150);
            assert!((0.0..=2.0).contains(&s.start));
        }
        let a = extract_slice(&u, 9, &cfg).unwrap();
        assert_eq!(a, extract_slice(&u, 9, &cfg).unwrap());
    }

    #[test]
    fn short_utterance_is_tiled_then_cut() {
        let u = utterance("u", 1.2, Domain::Style, AttributeLabels::full(1, 2, 3));
        let s = extract_slice(&u, 4, &SliceConfig::default()).unwrap();
        let full = render_frames(&u).unwrap().frames;
        assert_eq!(full.nrows(), 60);
        assert_eq!(s.start, 0.0);
        assert_eq!(s.frames.n_frames(), 150);
        for t in 0..150 {
            assert_eq!(s.frames.frames.row(t), full.row(t % 60));
        }
    }

    #[test]
    fn zero_duration_is_rejected() {
        let mut u = utterance("u", 1.0, Domain::Style, AttributeLabels::full(0, 0, 0));
        u.duration = 0.0;
        assert!(extract_slice(&u, 0, &SliceConfig::default()).is_err());
    }

    fn small_corpus(per_domain: usize) -> CorpusManifest {
        let m = crate::corpus::generate_synthetic_corpus(2, 2, 2, (per_domain as u32).div_ceil(2), 1).unwrap();
        relabel_domains(&m, [0.25; 4], 3).unwrap()
    }

    #[test]
    fn forced_selection_with_two_per_domain() {
        let m = small_corpus(2);
        assert_eq!(m.domain_counts(), [2, 2, 2, 2]);
        let m2 = CorpusManifest::new(
            m.category_counts,
            Domain::ALL
                .iter()
                .flat_map(|&d| m.indices_in(d).into_iter().take(2).map(|i| m.entries[i].clone()))
                .collect(),
        );
        let b = compose_batch(&m2, 8, 5, &SliceConfig::default()).unwrap();
        for (q, d) in Domain::ALL.iter().enumerate() {
            let mut got: Vec<_> = b.set_a[2 * q..2 * q + 2].iter().map(|s| s.parent_id.clone()).collect();
            got.sort();
            let mut want: Vec<_> = m2.indices_in(*d).iter().map(|&i| m2.entries[i].utterance_id.clone()).collect();
            want.sort();
            assert_eq!(got, want);
        }
        assert!(batch_statistics(&b).meets_quota());
    }

    #[test]
    fn quarter_boundaries_at_96() {
        let m = crate::corpus::generate_synthetic_corpus(3, 6, 5, 2, 0).unwrap();
        let m = relabel_domains(&m, [0.25; 4], 0).unwrap();
        let b = compose_batch(&m, 96, 1, &SliceConfig::default()).unwrap();
        let domains: Vec<_> = b.set_a.iter().map(|s| s.domain).collect();
        assert!(domains[..24].iter().all(|&d| d == Domain::Style));
        assert!(domains[24..48].iter().all(|&d| d == Domain::Emotion));
        assert!(domains[48..72].iter().all(|&d| d == Domain::Speaker));
        assert!(domains[72..].iter().all(|&d| d == Domain::Unlabeled));
        for (a, b) in b.set_a.iter().zip(&b.set_b) {
            assert_eq!(a.parent_id, b.parent_id);
        }
    }

    #[test]
    fn batch_size_must_divide_by_four() {
        let m = small_corpus(4);
        assert!(matches!(
            compose_batch(&m, 6, 0, &SliceConfig::default()),
            Err(SrlError::Precondition(_))
        ));
    }

    #[test]
    fn insufficient_domain_is_named() {
        let m = small_corpus(2);
        let err = compose_batch(&m, 24, 0, &SliceConfig::default()).unwrap_err();
        assert!(matches!(err, SrlError::InsufficientDomain { ref domain, .. } if domain == "STYLE"));
    }

    #[test]
    fn mask_examples() {
        let b = pair(vec![slice("a", Domain::Emotion, emotion_only(2)), slice("b", Domain::Emotion, emotion_only(2))]);
        assert_eq!(build_mask(&b, Attribute::Emotion).entries, ndarray::arr2(&[[1, 1], [1, 1]]));
        let b = pair(vec![slice("a", Domain::Emotion, emotion_only(0)), slice("b", Domain::Emotion, emotion_only(1))]);
        assert_eq!(build_mask(&b, Attribute::Emotion).entries, ndarray::arr2(&[[1, 0], [0, 1]]));
        let b = pair(vec![
            slice("a", Domain::Emotion, emotion_only(0)),
            slice("b", Domain::Unlabeled, AttributeLabels::default()),
        ]);
        assert_eq!(build_mask(&b, Attribute::Emotion).entries, ndarray::arr2(&[[1, -1], [-1, 1]]));
    }

    #[test]
    fn cross_domain_speakers_need_global_ids() {
        let spk = |k| AttributeLabels {
            speaker: Some(k),
            ..AttributeLabels::default()
        };
        let mut b = pair(vec![slice("a", Domain::Style, spk(0)), slice("b", Domain::Speaker, spk(1))]);
        assert_eq!(build_mask(&b, Attribute::Speaker).entries[[0, 1]], 0);
        b.global_speaker_ids = false;
        assert_eq!(build_mask(&b, Attribute::Speaker).entries[[0, 1]], -1);
        b.set_b[1].domain = Domain::Style;
        b.set_a[1].domain = Domain::Style;
        assert_eq!(build_mask(&b, Attribute::Speaker).entries[[0, 1]], 0);
    }

    #[test]
    fn mask_text_round_trip() {
        let m = small_corpus(4);
        let b = compose_batch(&m, 8, 2, &SliceConfig::default()).unwrap();
        for a in Attribute::ALL {
            let mask = build_mask(&b, a);
            assert_eq!(MaskMatrix::from_text(a, &mask.to_text()).unwrap(), mask);
        }
        assert!(MaskMatrix::from_text(Attribute::Style, "1 2\n0 1\n").is_err());
    }

    #[test]
    fn statistics_expose_quota_violations_and_empty_histograms() {
        let m = small_corpus(4);
        let mut b = compose_batch(&m, 8, 2, &SliceConfig::default()).unwrap();
        let stats = batch_statistics(&b);
        assert_eq!(Domain::ALL.map(|d| stats.count(d)), [2, 2, 2, 2]);
        for a in Attribute::ALL {
            assert!(stats.histogram(Domain::Unlabeled, a).is_empty());
        }
        assert_eq!(stats.histogram(Domain::Style, Attribute::Style).values().sum::<usize>(), 2);
        b.set_a[7].domain = Domain::Style;
        assert!(!batch_statistics(&b).meets_quota());
    }

    const STATES: [LabelState; 6] = [
        LabelState { domain: Domain::Style, label: Some(0) },
        LabelState { domain: Domain::Style, label: Some(1) },
        LabelState { domain: Domain::Style, label: None },
        LabelState { domain: Domain::Speaker, label: Some(0) },
        LabelState { domain: Domain::Speaker, label: None },
        LabelState { domain: Domain::Unlabeled, label: None },
    ];

    /// Every K=3 assignment of label states: entries depend only on the ordered pair of states.
    #[test]
    fn mask_entries_depend_only_on_label_states() {
        for a in Attribute::ALL {
            for global in [false, true] {
                for x in 0..STATES.len() {
                    for y in 0..STATES.len() {
                        for z in 0..STATES.len() {
                            let states = [STATES[x], STATES[y], STATES[z]];
                            let slices: Vec<_> = states
                                .iter()
                                .enumerate()
                                .map(|(i, st)| {
                                    let mut l = AttributeLabels::default();
                                    l.set(a, st.label);
                                    slice(&format!("u{i}"), st.domain, l)
                                })
                                .collect();
                            let mut b = pair(slices);
                            b.global_speaker_ids = global;
                            let mask = build_mask(&b, a);
                            for i in 0..3 {
                                for j in 0..3 {
                                    let want = if i == j { 1 } else { pair_entry(states[i], states[j], a, global) };
                                    assert_eq!(mask.entries[[i, j]], want);
                                    assert_eq!(mask.entries[[i, j]], mask.entries[[j, i]]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composed_batches_respect_protocol(seed in any::<u64>(), quarter in 1usize..5) {
            let m = crate::corpus::generate_synthetic_corpus(2, 3, 2, 2, seed % 7).unwrap();
            let m = relabel_domains(&m, [0.25; 4], seed).unwrap();
            let cfg = SliceConfig { slice_seconds: 0.5, frame_rate: 50.0 };
            let b = compose_batch(&m, 4 * quarter, seed, &cfg).unwrap();
            prop_assert!(batch_statistics(&b).meets_quota());
            for q in 0..4 {
                let mut ids: Vec<_> = b.set_a[q * quarter..(q + 1) * quarter].iter().map(|s| &s.parent_id).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), quarter);
            }
            for a in Attribute::ALL {
                let mask = build_mask(&b, a);
                for i in 0..b.len() {
                    prop_assert_eq!(mask.entries[[i, i]], 1);
                    for j in 0..b.len() {
                        let unl = b.set_a[i].domain == Domain::Unlabeled || b.set_b[j].domain == Domain::Unlabeled;
                        if i != j && unl {
                            prop_assert_eq!(mask.entries[[i, j]], -1);
                        }
                    }
                }
            }
        }
    }
}
