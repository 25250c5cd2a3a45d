//! Linear probes, clustering metrics and t-SNE plots over corpus embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::corpus::{Attribute, AttributeLabels, CorpusManifest};
use crate::error::{Result, SrlError};
use crate::model::{EmbeddingTriple, SrlModel};
use crate::sampler::{center_slice, SliceConfig};
use crate::trainer::TrainerState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub utterance_id: String,
    pub embedding: EmbeddingTriple,
    pub labels: AttributeLabels,
}

/// One embedding triple per utterance from its centre slice, dropout off.
pub fn embed_corpus(
    model: &SrlModel,
    params: &ParamStore,
    manifest: &CorpusManifest,
    slice: &SliceConfig,
) -> Result<Vec<EmbeddingRow>> {
    let slices = manifest
        .entries
        .iter()
        .map(|u| center_slice(u, slice))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<_> = slices.iter().map(|s| s.frames.clone()).collect();
    let embeddings = model.embed(params, &frames)?;
    Ok(manifest
        .entries
        .iter()
        .zip(embeddings)
        .map(|(u, e)| EmbeddingRow {
            utterance_id: u.utterance_id.clone(),
            embedding: e,
            labels: u.labels,
        })
        .collect())
}

pub fn embed_with_checkpoint(state: &TrainerState, manifest: &CorpusManifest) -> Result<Vec<EmbeddingRow>> {
    embed_corpus(&state.model, &state.params, manifest, &state.config.slice)
}

pub fn write_embeddings(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_target: Attribute,
    pub probe_source: Attribute,
    pub accuracy: f64,
    pub chance_level: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub test_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            epochs: 300,
            learning_rate: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

fn to_matrix(features: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = features.first().map_or(0, |f| f.len());
    Array2::from_shape_vec((features.len(), d), features.iter().flatten().copied().collect())
        .map_err(|_| SrlError::Degenerate("feature rows differ in length".into()))
}

/// Seeded stratified split: per class, a `test_fraction` share (at least one
/// when the class has two or more members) goes to the test side.
pub fn stratified_split(labels: &[u32], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if idx.len() >= 2 {
            n_test = n_test.clamp(1, idx.len() - 1);
        } else {
            n_test = 0;
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
    classes: Vec<u32>,
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl SoftmaxClassifier {
    pub fn fit(x: &Array2<f64>, labels: &[u32], config: &ProbeConfig) -> Self {
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let (n, d) = x.dim();
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = (x - &mean) / &scale;
        let k = classes.len();
        let mut y = Array2::zeros((n, k));
        for (i, l) in labels.iter().enumerate() {
            y[[i, classes.binary_search(l).expect("known class")]] = 1.0;
        }
        let mut w = Array2::<f64>::zeros((d, k));
        let mut b = Array1::<f64>::zeros(k);
        let (mut mw, mut vw) = (w.clone(), w.clone());
        let (mut mb, mut vb) = (b.clone(), b.clone());
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for t in 1..=config.epochs {
            let mut p = xs.dot(&w) + &b;
            softmax_rows(&mut p);
            let err = (p - &y) / n as f64;
            let gw = xs.t().dot(&err) + &w * config.l2;
            let gb = err.sum_axis(Axis(0));
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            mw = &mw * b1 + &gw * (1.0 - b1);
            vw = &vw * b2 + &gw.mapv(|g| g * g) * (1.0 - b2);
            mb = &mb * b1 + &gb * (1.0 - b1);
            vb = &vb * b2 + &gb.mapv(|g| g * g) * (1.0 - b2);
            w = w - &((&mw / c1) / ((&vw / c2).mapv(f64::sqrt) + eps) * config.learning_rate);
            b = b - &((&mb / c1) / ((&vb / c2).mapv(f64::sqrt) + eps) * config.learning_rate);
        }
        Self {
            mean,
            scale,
            weight: w,
            bias: b,
            classes,
        }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u32> {
        let z = ((x - &self.mean) / &self.scale).dot(&self.weight) + &self.bias;
        z.rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                self.classes[best]
            })
            .collect()
    }
}

/// Held-out accuracy of a linear classifier predicting `labels` from `features`.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[u32],
    target: Attribute,
    source: Attribute,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(SrlError::Degenerate(format!("{target} probe needs at least two classes")));
    }
    let x = to_matrix(features)?;
    let (train, test) = stratified_split(labels, config.test_fraction, config.seed);
    if test.is_empty() || train.is_empty() {
        return Err(SrlError::Degenerate("probe split left an empty side".into()));
    }
    let pick = |idx: &[usize]| x.select(Axis(0), idx);
    let train_labels: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    let clf = SoftmaxClassifier::fit(&pick(&train), &train_labels, config);
    let pred = clf.predict(&pick(&test));
    let correct = pred.iter().zip(&test_labels).filter(|(a, b)| a == b).count();
    let majority = classes
        .iter()
        .map(|c| test_labels.iter().filter(|l| *l == c).count())
        .max()
        .unwrap_or(0);
    Ok(ProbeReport {
        probe_target: target,
        probe_source: source,
        accuracy: correct as f64 / test.len() as f64,
        chance_level: majority as f64 / test.len() as f64,
        n_test: test.len(),
    })
}

/// Rows that carry a `target` label, as (features from `source`, label).
pub fn labeled_view(rows: &[EmbeddingRow], source: Attribute, target: Attribute) -> (Vec<Vec<f64>>, Vec<u32>) {
    rows.iter()
        .filter_map(|r| r.labels.get(target).map(|l| (r.embedding.get(source).to_vec(), l)))
        .unzip()
}

/// Probe every (target, source) pair. Runs the nine probes in parallel.
pub fn probe_all(rows: &[EmbeddingRow], config: &ProbeConfig) -> Result<Vec<ProbeReport>> {
    let pairs: Vec<(Attribute, Attribute)> = Attribute::ALL
        .iter()
        .flat_map(|&t| Attribute::ALL.iter().map(move |&s| (t, s)))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|&(t, s)| {
                scope.spawn(move || {
                    let (x, y) = labeled_view(rows, s, t);
                    linear_probe(&x, &y, t, s, config)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("probe thread")).collect()
    })
}

pub fn find_probe(reports: &[ProbeReport], target: Attribute, source: Attribute) -> Option<&ProbeReport> {
    reports.iter().find(|r| r.probe_target == target && r.probe_source == source)
}

/// Mean accuracy of the own-attribute probes.
pub fn own_attribute_accuracy(reports: &[ProbeReport]) -> f64 {
    let own: Vec<f64> = reports
        .iter()
        .filter(|r| r.probe_target == r.probe_source)
        .map(|r| r.accuracy)
        .collect();
    own.iter().sum::<f64>() / own.len().max(1) as f64
}

/// Mean accuracy of predicting speaker from the style and emotion spaces.
pub fn speaker_leakage(reports: &[ProbeReport]) -> f64 {
    let a = find_probe(reports, Attribute::Speaker, Attribute::Style).map_or(f64::NAN, |r| r.accuracy);
    let b = find_probe(reports, Attribute::Speaker, Attribute::Emotion).map_or(f64::NAN, |r| r.accuracy);
    (a + b) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub silhouette: f64,
    pub purity: f64,
}

fn cosine_distance_matrix(x: &Array2<f64>) -> Array2<f64> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-300));
    let unit = x / &norms.insert_axis(Axis(1));
    unit.dot(&unit.t()).mapv(|c| 1.0 - c)
}

fn silhouette(dist: &Array2<f64>, labels: &[u32], classes: &[u32]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for j in 0..n {
            if i != j {
                let c = classes.binary_search(&labels[j]).unwrap();
                sums[c] += dist[[i, j]];
                counts[c] += 1;
            }
        }
        let own = classes.binary_search(&labels[i]).unwrap();
        let a = sums[own] / counts[own].max(1) as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if counts[own] > 0 && denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, iterations: usize) -> Vec<usize> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
    };
    let mut centers = vec![x.row(rng.random_range(0..n)).to_owned()];
    while centers.len() < k {
        let d: Vec<f64> = (0..n)
            .map(|i| centers.iter().map(|c| sq(x.row(i), c.view())).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if r < *di {
                    pick = i;
                    break;
                }
                r -= di;
            }
            pick
        };
        centers.push(x.row(next).to_owned());
    }
    let mut assign = vec![0; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, slot) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq(x.row(i), centers[a].view()).partial_cmp(&sq(x.row(i), centers[b].view())).unwrap())
                .unwrap();
            if *slot != best {
                *slot = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if !members.is_empty() {
                *center = x.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Cosine silhouette by label and purity of seeded k-means with one cluster per class.
pub fn clustering_metrics(features: &[Vec<f64>], labels: &[u32], seed: u64) -> Result<ClusterReport> {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(SrlError::Degenerate("clustering needs at least two classes".into()));
    }
    if classes.iter().any(|c| labels.iter().filter(|l| *l == c).count() < 2) {
        return Err(SrlError::Degenerate("every class needs at least two points".into()));
    }
    let x = to_matrix(features)?;
    let spread = x.var_axis(Axis(0), 0.0).sum();
    if !(spread > 1e-24) {
        return Err(SrlError::Degenerate("all points identical (zero variance)".into()));
    }
    let dist = cosine_distance_matrix(&x);
    let assign = kmeans(&x, classes.len(), seed, 100);
    let mut hit = 0;
    for c in 0..classes.len() {
        let members: Vec<u32> = (0..labels.len()).filter(|&i| assign[i] == c).map(|i| labels[i]).collect();
        hit += classes
            .iter()
            .map(|k| members.iter().filter(|m| *m == k).count())
            .max()
            .unwrap_or(0);
    }
    Ok(ClusterReport {
        silhouette: silhouette(&dist, labels, &classes),
        purity: hit as f64 / labels.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub space: Attribute,
    pub grouped_by: Attribute,
    pub report: ClusterReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_utterances: usize,
    pub probes: Vec<ProbeReport>,
    pub clustering: Vec<ClusterEntry>,
    pub own_attribute_accuracy: f64,
    pub speaker_leakage: f64,
}

pub fn evaluate(rows: &[EmbeddingRow], config: &ProbeConfig) -> Result<EvalReport> {
    let probes = probe_all(rows, config)?;
    let mut clustering = Vec::new();
    for space in Attribute::ALL {
        for grouped_by in Attribute::ALL {
            let (x, y) = labeled_view(rows, space, grouped_by);
            if let Ok(report) = clustering_metrics(&x, &y, config.seed) {
                clustering.push(ClusterEntry {
                    space,
                    grouped_by,
                    report,
                });
            }
        }
    }
    Ok(EvalReport {
        n_utterances: rows.len(),
        own_attribute_accuracy: own_attribute_accuracy(&probes),
        speaker_leakage: speaker_leakage(&probes),
        probes,
        clustering,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

fn conditional_affinities(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-beta * d2[[i, j]]).exp();
                    sum += w;
                    weighted += w * d2[[i, j]];
                }
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * weighted / sum;
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[[i, j]] = (-beta * d2[[i, j]]).exp();
                sum += p[[i, j]];
            }
        }
        if sum > 0.0 {
            p.row_mut(i).mapv_inplace(|v| v / sum);
        }
    }
    p
}

/// Exact t-SNE to two dimensions. Perplexity is capped at `(n - 1) / 3`.
pub fn tsne(features: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 4 {
        return Err(SrlError::Degenerate("t-SNE needs at least four points".into()));
    }
    let x = to_matrix(features)?;
    let sq = x.map_axis(Axis(1), |r| r.dot(&r));
    let mut d2 = -2.0 * x.dot(&x.t());
    for i in 0..n {
        for j in 0..n {
            d2[[i, j]] = (d2[[i, j]] + sq[i] + sq[j]).max(0.0);
        }
    }
    let perplexity = config.perplexity.min((n as f64 - 1.0) / 3.0);
    let cond = conditional_affinities(&d2, perplexity);
    let p = (&cond + &cond.t()).mapv(|v| (v / (2.0 * n as f64)).max(1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y = Array2::from_shape_fn((n, 2), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        1e-4 * z
    });
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    for iter in 0..config.iterations {
        let exaggeration = if iter < 250 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[[i, j]] = v;
                z += v;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / z).max(1e-12);
                let m = 4.0 * (exaggeration * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += m * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += m * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, gain), v) in grad.iter().zip(gains.iter_mut()).zip(velocity.iter()) {
            *gain = if (*g > 0.0) != (*v > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
        }
        velocity = &velocity * momentum - &(&gains * &grad * config.learning_rate);
        y = y + &velocity;
        let mean = y.mean_axis(Axis(0)).unwrap();
        y -= &mean;
    }
    Ok(y.rows().into_iter().map(|r| [r[0], r[1]]).collect())
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn label_color(label: Option<u32>) -> [u8; 3] {
    match label {
        Some(l) => PALETTE[l as usize % PALETTE.len()],
        None => [0, 0, 0],
    }
}

pub const PLOT_SIZE: u32 = 800;
const MARGIN: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub utterance_id: String,
    pub x: f64,
    pub y: f64,
    pub px: u32,
    pub py: u32,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub image: PathBuf,
    pub sidecar: PathBuf,
    pub points: Vec<PlotPoint>,
}

/// Project one embedding space with t-SNE and draw it coloured by `color_by`.
/// Writes `output` (PNG) and `output` with a `.csv` extension.
pub fn export_tsne_plot(
    rows: &[EmbeddingRow],
    space: Attribute,
    color_by: Attribute,
    output: impl AsRef<Path>,
    config: &TsneConfig,
) -> Result<PlotOutput> {
    if rows.len() < 10 {
        return Err(SrlError::Degenerate(format!("t-SNE plot needs at least 10 points, got {}", rows.len())));
    }
    let features: Vec<Vec<f64>> = rows.iter().map(|r| r.embedding.get(space).to_vec()).collect();
    let coords = tsne(&features, config)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = |a: usize| (hi[a] - lo[a]).max(1e-12);
    let usable = PLOT_SIZE as f64 - 2.0 * MARGIN;
    let points: Vec<PlotPoint> = rows
        .iter()
        .zip(&coords)
        .map(|(r, c)| PlotPoint {
            utterance_id: r.utterance_id.clone(),
            x: c[0],
            y: c[1],
            px: (MARGIN + (c[0] - lo[0]) / span(0) * usable).round() as u32,
            py: (MARGIN + (hi[1] - c[1]) / span(1) * usable).round() as u32,
            label: r.labels.get(color_by),
        })
        .collect();

    let mut img = image::RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, image::Rgb([255, 255, 255]));
    for p in &points {
        let color = image::Rgb(label_color(p.label));
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx * dx + dy * dy <= 9 {
                    let (x, y) = (p.px as i64 + dx, p.py as i64 + dy);
                    if (0..PLOT_SIZE as i64).contains(&x) && (0..PLOT_SIZE as i64).contains(&y) {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    let image_path = output.as_ref().to_path_buf();
    if let Some(dir) = image_path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(&image_path).map_err(|e| SrlError::Image(e.to_string()))?;
    let sidecar = image_path.with_extension("csv");
    write_sidecar(&points, &sidecar)?;
    Ok(PlotOutput {
        image: image_path,
        sidecar,
        points,
    })
}

fn write_sidecar(points: &[PlotPoint], path: &Path) -> Result<()> {
    let mut out = String::from("utterance_id,x,y,px,py,label\n");
    for p in points {
        let label = p.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{:?},{:?},{},{},{}\n", p.utterance_id, p.x, p.y, p.px, p.py, label));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<PlotPoint>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| SrlError::Degenerate(format!("bad sidecar line {line:?}"));
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(PlotPoint {
                utterance_id: f[0].to_string(),
                x: f[1].parse().map_err(|_| bad(line))?,
                y: f[2].parse().map_err(|_| bad(line))?,
                px: f[3].parse().map_err(|_| bad(line))?,
                py: f[4].parse().map_err(|_| bad(line))?,
                label: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| bad(line))?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::oracle::{factor_statistics, oracle_features};
    use crate::corpus::{render_frames, synth::SynthConfig};

    fn blobs(n_per: usize, centers: &[[f64; 3]], spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..n_per {
                x.push(center.iter().map(|m| m + spread * rng.random_range(-1.0..1.0)).collect());
                y.push(c as u32);
            }
        }
        (x, y)
    }

    #[test]
    fn single_class_probe_is_rejected() {
        let x = vec![vec![0.0, 1.0]; 5];
        assert!(linear_probe(&x, &[3; 5], Attribute::Style, Attribute::Style, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn probe_recovers_oracle_statistics_exactly() {
        let m = crate::corpus::synth::generate(&SynthConfig {
            n_utts_per_cell: 2,
            frame_rate: 16.0,
            min_duration: 1.5,
            max_duration: 4.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let stats: Vec<_> = m
            .entries
            .iter()
            .map(|u| factor_statistics(&render_frames(u).unwrap().frames, 16.0, 3))
            .collect();
        for a in Attribute::ALL {
            let x: Vec<_> = stats.iter().map(|s| oracle_features(s, a)).collect();
            let y: Vec<_> = m.entries.iter().map(|u| u.labels.get(a).unwrap()).collect();
            let cfg = ProbeConfig {
                epochs: 2000,
                ..ProbeConfig::default()
            };
            let r = linear_probe(&x, &y, a, a, &cfg).unwrap();
            assert_eq!(r.accuracy, 1.0, "{a}");
            assert!(r.chance_level < 1.0 && r.n_test > 0);
        }
    }

    #[test]
    fn separated_blobs_have_high_silhouette_and_permuted_labels_low_purity() {
        let (x, y) = blobs(60, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 0.1, 1);
        let r = clustering_metrics(&x, &y, 0).unwrap();
        assert!(r.silhouette > 0.5, "{r:?}");
        assert_eq!(r.purity, 1.0);

        let (x, mut y) = blobs(100, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.1, 2);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let r = clustering_metrics(&x, &y, 0).unwrap();
        assert!((r.purity - 1.0 / 3.0).abs() <= 0.1, "{r:?}");
    }

    #[test]
    fn identical_points_are_rejected() {
        let x = vec![vec![1.0, 2.0]; 6];
        assert!(clustering_metrics(&x, &[0, 0, 0, 1, 1, 1], 0).is_err());
        assert!(clustering_metrics(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1], 0).is_err());
    }

    fn rows_from(x: &[Vec<f64>], y: &[u32]) -> Vec<EmbeddingRow> {
        x.iter()
            .zip(y)
            .enumerate()
            .map(|(i, (v, &l))| {
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let u: Vec<f64> = v.iter().map(|a| a / n).collect();
                EmbeddingRow {
                    utterance_id: format!("u{i}"),
                    embedding: EmbeddingTriple {
                        style: u.clone(),
                        emotion: u.clone(),
                        speaker: u,
                    },
                    labels: AttributeLabels::full(l, l, l % 2),
                }
            })
            .collect()
    }

    #[test]
    fn tsne_separates_blobs_and_sidecar_round_trips() {
        let (x, y) = blobs(20, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 0.05, 4);
        let rows = rows_from(&x, &y);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TsneConfig {
            iterations: 400,
            ..TsneConfig::default()
        };
        let out = export_tsne_plot(&rows, Attribute::Style, Attribute::Style, dir.path().join("p.png"), &cfg).unwrap();
        assert_eq!(read_sidecar(&out.sidecar).unwrap(), out.points);
        let img = image::open(&out.image).unwrap().to_rgb8();
        for p in &out.points {
            assert_eq!(img.get_pixel(p.px, p.py).0, label_color(p.label));
        }
        let coords: Vec<Vec<f64>> = out.points.iter().map(|p| vec![p.x, p.y]).collect();
        assert!(clustering_metrics(&coords, &y, 0).unwrap().purity > 0.95);
        let again = export_tsne_plot(&rows, Attribute::Style, Attribute::Speaker, dir.path().join("q.png"), &cfg).unwrap();
        assert_eq!(
            again.points.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(),
            out.points.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>()
        );
        assert!(export_tsne_plot(&rows[..9], Attribute::Style, Attribute::Style, dir.path().join("r.png"), &cfg).is_err());
    }
}
