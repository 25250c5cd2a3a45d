//! Partially labeled utterance corpora.
//!
//! A [`CorpusManifest`] is stored as line-delimited JSON: one header record
//! followed by one record per utterance. Utterances either point at a frame
//! file or carry a [`SyntheticFactorSpec`] from which their frames are
//! rendered deterministically.

pub mod oracle;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrlError};

pub use synth::{generate_synthetic_corpus, render_frames, SynthConfig, SyntheticFactorSpec};

pub const MANIFEST_VERSION: &str = "srl-manifest/1";

/// The three disentangled attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Style,
    Emotion,
    Speaker,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Style, Attribute::Emotion, Attribute::Speaker];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Style => "style",
            Attribute::Emotion => "emotion",
            Attribute::Speaker => "speaker",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attribute {
    type Err = SrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style" => Ok(Attribute::Style),
            "emotion" => Ok(Attribute::Emotion),
            "speaker" => Ok(Attribute::Speaker),
            other => Err(SrlError::Config(format!("unknown attribute `{other}`"))),
        }
    }
}

/// Which corpus an utterance was drawn from, and therefore which labels it keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Style,
    Emotion,
    Speaker,
    Unlabeled,
}

impl Domain {
    /// Batch quarter order.
    pub const ALL: [Domain; 4] = [Domain::Style, Domain::Emotion, Domain::Speaker, Domain::Unlabeled];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Style => "STYLE",
            Domain::Emotion => "EMOTION",
            Domain::Speaker => "SPEAKER",
            Domain::Unlabeled => "UNLABELED",
        }
    }

    /// Labels an utterance of this domain retains.
    pub fn retains(self, attribute: Attribute) -> bool {
        matches!(
            (self, attribute),
            (Domain::Style, Attribute::Style)
                | (Domain::Style, Attribute::Speaker)
                | (Domain::Emotion, Attribute::Emotion)
                | (Domain::Emotion, Attribute::Speaker)
                | (Domain::Speaker, Attribute::Speaker)
        )
    }

    /// The label this domain is defined by, if any.
    pub fn defining_attribute(self) -> Option<Attribute> {
        match self {
            Domain::Style => Some(Attribute::Style),
            Domain::Emotion => Some(Attribute::Emotion),
            Domain::Speaker => Some(Attribute::Speaker),
            Domain::Unlabeled => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<u32>,
}

impl AttributeLabels {
    pub fn full(style: u32, emotion: u32, speaker: u32) -> Self {
        Self {
            style: Some(style),
            emotion: Some(emotion),
            speaker: Some(speaker),
            language: None,
        }
    }

    pub fn get(&self, attribute: Attribute) -> Option<u32> {
        match attribute {
            Attribute::Style => self.style,
            Attribute::Emotion => self.emotion,
            Attribute::Speaker => self.speaker,
        }
    }

    pub fn set(&mut self, attribute: Attribute, value: Option<u32>) {
        match attribute {
            Attribute::Style => self.style = value,
            Attribute::Emotion => self.emotion = value,
            Attribute::Speaker => self.speaker = value,
        }
    }

    /// Drop every label `domain` does not retain.
    pub fn restricted_to(&self, domain: Domain) -> Self {
        let mut out = *self;
        for a in Attribute::ALL {
            if !domain.retains(a) {
                out.set(a, None);
            }
        }
        if domain == Domain::Unlabeled {
            out.language = None;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalSource {
    /// JSON frame file: `{"frame_rate": r, "frames": [[..], ..]}`.
    File(PathBuf),
    Synthetic(SyntheticFactorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub source: SignalSource,
    pub duration: f64,
    #[serde(default)]
    pub labels: AttributeLabels,
    pub domain: Domain,
}

impl Utterance {
    pub fn validate(&self, counts: &CategoryCounts) -> Result<()> {
        let fail = |message: String| SrlError::InvalidUtterance {
            id: self.utterance_id.clone(),
            message,
        };
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(fail(format!("duration {} must be > 0", self.duration)));
        }
        if let Some(a) = self.domain.defining_attribute() {
            if self.labels.get(a).is_none() {
                return Err(fail(format!("domain {} requires a {a} label", self.domain)));
            }
        }
        for a in Attribute::ALL {
            if let Some(id) = self.labels.get(a) {
                let limit = counts.get(a);
                if id >= limit {
                    return Err(fail(format!("{a} id {id} >= category count {limit}")));
                }
            }
        }
        if let Some(l) = self.labels.language {
            if l >= counts.language {
                return Err(fail(format!(
                    "language id {l} >= category count {}",
                    counts.language
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub style: u32,
    pub emotion: u32,
    pub speaker: u32,
    #[serde(default)]
    pub language: u32,
}

impl CategoryCounts {
    pub fn get(&self, attribute: Attribute) -> u32 {
        match attribute {
            Attribute::Style => self.style,
            Attribute::Emotion => self.emotion,
            Attribute::Speaker => self.speaker,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub version: String,
    pub category_counts: CategoryCounts,
    /// Speaker ids name the same person in every domain.
    pub global_speaker_ids: bool,
    pub entries: Vec<Utterance>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    version: String,
    category_counts: CategoryCounts,
    #[serde(default = "default_true")]
    global_speaker_ids: bool,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    #[serde(flatten)]
    utterance: Utterance,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl CorpusManifest {
    pub fn new(category_counts: CategoryCounts, entries: Vec<Utterance>) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            category_counts,
            global_speaker_ids: true,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for u in &self.entries {
            if !seen.insert(u.utterance_id.as_str()) {
                return Err(SrlError::InvalidUtterance {
                    id: u.utterance_id.clone(),
                    message: "duplicate utterance_id".into(),
                });
            }
            u.validate(&self.category_counts)?;
        }
        Ok(())
    }

    pub fn domain_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for u in &self.entries {
            counts[u.domain.index()] += 1;
        }
        counts
    }

    pub fn indices_in(&self, domain: Domain) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].domain == domain)
            .collect()
    }

    pub fn find(&self, utterance_id: &str) -> Option<&Utterance> {
        self.entries.iter().find(|u| u.utterance_id == utterance_id)
    }

    /// Serialize to the line-delimited text form.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = HeaderRecord {
            version: self.version.clone(),
            category_counts: self.category_counts,
            global_speaker_ids: self.global_speaker_ids,
            extra: BTreeMap::new(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for u in &self.entries {
            out.push_str(&serde_json::to_string(u)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(dir) = path.as_ref().parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    /// Parse and validate the line-delimited form; `origin` names the source in errors.
    pub fn parse(reader: impl BufRead, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| SrlError::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut header: Option<HeaderRecord> = None;
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if header.is_none() {
                let h: HeaderRecord =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                for key in h.extra.keys() {
                    log::warn!("{}:{lineno}: ignoring unknown header field `{key}`", origin.display());
                }
                header = Some(h);
                continue;
            }
            let rec: UtteranceRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            for key in rec.extra.keys() {
                log::warn!(
                    "{}:{lineno}: ignoring unknown field `{key}` on `{}`",
                    origin.display(),
                    rec.utterance.utterance_id
                );
            }
            entries.push(rec.utterance);
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header record".into()))?;
        if header.version != MANIFEST_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported version `{}`", header.version),
            ));
        }
        let manifest = CorpusManifest {
            version: header.version,
            category_counts: header.category_counts,
            global_speaker_ids: header.global_speaker_ids,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    CorpusManifest::parse(BufReader::new(file), path)
}

/// Proportions for STYLE, EMOTION, SPEAKER, UNLABELED, in that order.
pub type DomainFractions = [f64; 4];

/// Largest-remainder partition of `n` by `fractions`; ties go to the earlier domain.
pub fn quota_partition(n: usize, fractions: &DomainFractions) -> [usize; 4] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut quotas = [0usize; 4];
    for (q, r) in quotas.iter_mut().zip(&raw) {
        *q = r.floor() as usize;
    }
    let mut left = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Reassign every utterance to a domain by exact quota, stripping labels the
/// new domain does not retain. Entry order is preserved.
pub fn relabel_domains(
    manifest: &CorpusManifest,
    fractions: DomainFractions,
    seed: u64,
) -> Result<CorpusManifest> {
    if manifest.is_empty() {
        return Err(SrlError::InvalidManifest("cannot relabel an empty manifest".into()));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(SrlError::Precondition(format!(
            "domain fractions must be non-negative, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SrlError::Precondition(format!(
            "domain fractions sum to {total}, expected 1"
        )));
    }
    let quotas = quota_partition(manifest.len(), &fractions);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = manifest.clone();
    let mut cursor = 0;
    for (domain, quota) in Domain::ALL.into_iter().zip(quotas) {
        for &i in &order[cursor..cursor + quota] {
            let u = &mut out.entries[i];
            if let Some(a) = domain.defining_attribute() {
                if u.labels.get(a).is_none() {
                    return Err(SrlError::InvalidUtterance {
                        id: u.utterance_id.clone(),
                        message: format!("cannot move to {domain}: no {a} label"),
                    });
                }
            }
            u.domain = domain;
            u.labels = u.labels.restricted_to(domain);
        }
        cursor += quota;
    }
    out.validate()?;
    Ok(out)
}

/// Seeded choice of `fraction` of each labeled domain's utterances
/// (rounded down per domain). Same seed, same choice.
pub fn select_labeled_fraction(
    manifest: &CorpusManifest,
    fraction: f64,
    seed: u64,
) -> BTreeSet<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for domain in [Domain::Style, Domain::Emotion, Domain::Speaker] {
        let mut idx = manifest.indices_in(domain);
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).floor() as usize;
        chosen.extend(idx.into_iter().take(take));
    }
    chosen
}

/// Turn the selected labeled utterances into UNLABELED ones (utterance-level pairs only).
pub fn unlabel_fraction(manifest: &CorpusManifest, fraction: f64, seed: u64) -> CorpusManifest {
    let chosen = select_labeled_fraction(manifest, fraction, seed);
    let mut out = manifest.clone();
    for i in chosen {
        let u = &mut out.entries[i];
        u.domain = Domain::Unlabeled;
        u.labels = u.labels.restricted_to(Domain::Unlabeled);
    }
    out
}

/// Drop the same utterances [`unlabel_fraction`] would convert.
pub fn discard_fraction(manifest: &CorpusManifest, fraction: f64, seed: u64) -> CorpusManifest {
    let chosen = select_labeled_fraction(manifest, fraction, seed);
    let mut out = manifest.clone();
    out.entries = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, u)| u.clone())
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(n_s: u32, n_e: u32, n_k: u32, per: u32, seed: u64) -> CorpusManifest {
        generate_synthetic_corpus(n_s, n_e, n_k, per, seed).unwrap()
    }

    #[test]
    fn manifest_round_trips_through_file() {
        let m = relabel_domains(&synthetic(1, 3, 1, 1, 4), [0.25, 0.25, 0.25, 0.25], 1).unwrap();
        assert_eq!(m.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        m.write(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn style_domain_without_style_label_is_rejected() {
        let mut m = synthetic(1, 1, 1, 1, 0);
        m.entries[0].domain = Domain::Style;
        m.entries[0].labels.style = None;
        let text = m.to_jsonl().unwrap();
        let err = CorpusManifest::parse(text.as_bytes(), Path::new("mem")).unwrap_err();
        let id = &m.entries[0].utterance_id;
        assert!(matches!(&err, SrlError::InvalidUtterance { id: got, .. } if got == id), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut m = synthetic(2, 1, 1, 1, 0);
        m.entries[1].utterance_id = m.entries[0].utterance_id.clone();
        let err = CorpusManifest::parse(m.to_jsonl().unwrap().as_bytes(), Path::new("mem"))
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let m = synthetic(2, 1, 1, 1, 0);
        let mut text = m.to_jsonl().unwrap();
        text.push_str("{not json\n");
        let err = CorpusManifest::parse(text.as_bytes(), Path::new("m.jsonl")).unwrap_err();
        assert!(matches!(err, SrlError::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let m = synthetic(1, 1, 1, 1, 0);
        let text = m.to_jsonl().unwrap().replacen("{\"utterance_id\"", "{\"mood\":3,\"utterance_id\"", 1);
        let back = CorpusManifest::parse(text.as_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn label_ids_must_fit_category_counts() {
        let mut m = synthetic(2, 1, 1, 1, 0);
        m.category_counts.style = 1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn relabel_all_unlabeled_strips_labels() {
        let m = relabel_domains(&synthetic(2, 2, 2, 1, 3), [0.0, 0.0, 0.0, 1.0], 0).unwrap();
        assert!(m.entries.iter().all(|u| u.domain == Domain::Unlabeled
            && u.labels == AttributeLabels::default()));
    }

    #[test]
    fn relabel_all_style_keeps_style_and_speaker() {
        let m = relabel_domains(&synthetic(2, 2, 2, 1, 3), [1.0, 0.0, 0.0, 0.0], 0).unwrap();
        for u in &m.entries {
            assert_eq!(u.domain, Domain::Style);
            assert!(u.labels.style.is_some() && u.labels.speaker.is_some());
            assert!(u.labels.emotion.is_none());
        }
    }

    #[test]
    fn relabel_quarters_of_180() {
        let m = relabel_domains(&synthetic(3, 6, 5, 2, 7), [0.25; 4], 11).unwrap();
        assert_eq!(m.domain_counts(), [45, 45, 45, 45]);
    }

    #[test]
    fn relabel_rejects_bad_fractions_and_empty_manifests() {
        let m = synthetic(1, 1, 1, 2, 0);
        assert!(relabel_domains(&m, [0.5, 0.5, 0.5, 0.0], 0).is_err());
        let mut empty = m.clone();
        empty.entries.clear();
        assert!(relabel_domains(&empty, [0.25; 4], 0).is_err());
    }

    #[test]
    fn unlabel_and_discard_select_the_same_utterances() {
        let m = relabel_domains(&synthetic(2, 2, 2, 4, 1), [0.25; 4], 2).unwrap();
        let unl = unlabel_fraction(&m, 0.5, 9);
        let dis = discard_fraction(&m, 0.5, 9);
        let converted: Vec<_> = m
            .entries
            .iter()
            .zip(&unl.entries)
            .filter(|(a, b)| a.domain != b.domain)
            .map(|(a, _)| a.utterance_id.clone())
            .collect();
        assert_eq!(converted.len(), m.len() - dis.len());
        for id in &converted {
            assert!(dis.find(id).is_none());
        }
        unl.validate().unwrap();
    }

    proptest! {
        #[test]
        fn quota_partition_is_exact(n in 0usize..500, w in proptest::array::uniform4(0u32..10)) {
            prop_assume!(w.iter().sum::<u32>() > 0);
            let s: u32 = w.iter().sum();
            let f = [w[0] as f64 / s as f64, w[1] as f64 / s as f64, w[2] as f64 / s as f64, 0.0];
            let f = [f[0], f[1], f[2], 1.0 - f[0] - f[1] - f[2]];
            let q = quota_partition(n, &f);
            prop_assert_eq!(q.iter().sum::<usize>(), n);
            for i in 0..4 {
                let exact = f[i] * n as f64;
                prop_assert!(q[i] as f64 >= exact.floor() - 1e-9 && q[i] as f64 <= exact.ceil() + 1e-9,
                    "domain {} quota {} vs {}", i, q[i], exact);
            }
        }
    }
}
