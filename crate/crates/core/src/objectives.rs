//! Masked contrastive cross-entropy, the variational CLUB upper bound on
//! mutual information between embedding spaces, and their weighted sum.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Activation, Mlp};
use crate::autodiff::{concat, Adam, AdamConfig, ParamStore, Tape, Var};
use crate::corpus::Attribute;
use crate::error::{Result, SrlError};
use crate::sampler::MaskMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbMapping {
    Affine,
    TemperedSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub epsilon: f64,
    pub similarity_to_prob: ProbMapping,
    /// Used by the sigmoid mapping only.
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            similarity_to_prob: ProbMapping::Affine,
            temperature: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(SrlError::Config(format!("epsilon {} not in (0, 0.5)", self.epsilon)));
        }
        if !(self.temperature > 0.0) {
            return Err(SrlError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

pub fn similarity_to_prob(s: f64, config: &ContrastiveConfig) -> f64 {
    let eps = config.epsilon;
    let p = match config.similarity_to_prob {
        ProbMapping::Affine => (s + 1.0) / 2.0,
        ProbMapping::TemperedSigmoid => 1.0 / (1.0 + (-s / config.temperature).exp()),
    };
    p.clamp(eps, 1.0 - eps)
}

fn prob_var<'t>(sim: Var<'t>, config: &ContrastiveConfig) -> Var<'t> {
    let eps = config.epsilon;
    let p = match config.similarity_to_prob {
        ProbMapping::Affine => sim.add_scalar(1.0).scale(0.5),
        ProbMapping::TemperedSigmoid => sim.scale(1.0 / config.temperature).sigmoid(),
    };
    p.clamp(eps, 1.0 - eps)
}

/// Mean over known entries of `-ln p` (positives) and `-ln(1 - p)` (negatives).
/// Unknown entries are multiplied by zero, so their gradient is exactly zero.
pub fn contrastive_loss_var<'t>(sim: Var<'t>, mask: &MaskMatrix, config: &ContrastiveConfig) -> Var<'t> {
    let tape = sim.tape();
    assert_eq!(sim.shape(), mask.entries.shape(), "similarity and mask shapes differ");
    let positive = mask.entries.mapv(|m| f64::from(m == 1)).into_dyn();
    let negative = mask.entries.mapv(|m| f64::from(m == 0)).into_dyn();
    let known = positive.sum() + negative.sum();
    if known == 0.0 {
        log::warn!("{} mask has no known entries; contrastive loss is 0", mask.attribute);
        return (sim * tape.constant(ArrayD::zeros(IxDyn(&sim.shape())))).sum_all();
    }
    let p = prob_var(sim, config);
    let q = p.neg().add_scalar(1.0);
    let ll = p.ln() * tape.constant(positive) + q.ln() * tape.constant(negative);
    ll.sum_all().scale(-1.0 / known)
}

pub fn contrastive_loss(sim: &Array2<f64>, mask: &MaskMatrix, config: &ContrastiveConfig) -> f64 {
    let tape = Tape::new();
    contrastive_loss_var(tape.constant(sim.clone().into_dyn()), mask, config).item()
}

/// The three attribute pairs whose mutual information is penalised; each
/// unordered pair appears exactly once.
pub const MI_PAIRS: [(Attribute, Attribute); 3] = [
    (Attribute::Style, Attribute::Emotion),
    (Attribute::Emotion, Attribute::Speaker),
    (Attribute::Speaker, Attribute::Style),
];

pub const MIN_VARIANCE: f64 = 1e-6;

/// Diagonal Gaussian `q(v | u)` with MLP mean and softplus variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub name: String,
    pub u_dim: usize,
    pub v_dim: usize,
    mean: Mlp,
    variance: Mlp,
}

impl GaussianConditional {
    pub fn new(name: &str, u_dim: usize, v_dim: usize, hidden: usize) -> Self {
        Self {
            name: name.to_string(),
            u_dim,
            v_dim,
            mean: Mlp::new(&format!("{name}.mean"), &[u_dim, hidden, hidden, v_dim], Activation::Tanh),
            variance: Mlp::new(&format!("{name}.var"), &[u_dim, hidden, hidden, v_dim], Activation::Tanh),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.mean.init(store, rng);
        self.variance.init(store, rng);
    }

    /// Predicted mean and variance, each `[N, v_dim]`.
    pub fn predict<'t>(&self, tape: &'t Tape, store: &ParamStore, u: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mu = self.mean.forward(tape, store, u);
        let var = self.variance.forward(tape, store, u).softplus().add_scalar(MIN_VARIANCE);
        if !var.all_finite() || !mu.all_finite() {
            return Err(SrlError::DegenerateVariance);
        }
        Ok((mu, var))
    }

    /// `mean_i ln q(v_i | u_i)`.
    pub fn log_likelihood<'t>(&self, tape: &'t Tape, store: &ParamStore, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (mu, var) = self.predict(tape, store, u)?;
        let sq = (v - mu).square() / var;
        let per_dim = sq + var.ln();
        let n = u.shape()[0] as f64;
        let d = self.v_dim as f64;
        Ok(per_dim
            .sum_all()
            .scale(-0.5 / n)
            .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln()))
    }

    /// vCLUB estimate `mean_i ln q(v_i|u_i) - mean_{i,j} ln q(v_j|u_i)` over all
    /// `N^2` pairs. The log-variance terms cancel, leaving
    /// `mean_i sum_d [mean_j (v_jd - mu_id)^2 - (v_id - mu_id)^2] / (2 var_id)`.
    pub fn vclub<'t>(&self, tape: &'t Tape, store: &ParamStore, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (mu, var) = self.predict(tape, store, u)?;
        let n = u.shape()[0] as f64;
        let precision = var.ln().neg().exp();
        let positive = (v - mu).square() * precision;
        let m1 = v.mean_keepdim(0);
        let m2 = v.square().mean_keepdim(0);
        let all_pairs = (m2 - mu * m1.scale(2.0) + mu.square()) * precision;
        Ok((all_pairs - positive).sum_all().scale(0.5 / n))
    }
}

/// One q-network per attribute pair, each with its own parameters and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MiEstimatorState {
    pub nets: Vec<GaussianConditional>,
    pub params: Vec<ParamStore>,
    pub optimizers: Vec<Adam>,
}

impl MiEstimatorState {
    pub fn new(dim: usize, hidden: usize, adam: AdamConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut nets = Vec::new();
        let mut params = Vec::new();
        for (a, b) in MI_PAIRS {
            let net = GaussianConditional::new(&format!("mi.{a}_{b}"), dim, dim, hidden);
            let mut store = ParamStore::new();
            net.init(&mut store, &mut rng);
            nets.push(net);
            params.push(store);
        }
        Self {
            nets,
            params,
            optimizers: vec![Adam::new(adam); MI_PAIRS.len()],
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for o in &mut self.optimizers {
            o.config.learning_rate = lr;
        }
    }
}

/// One Adam step maximising `mean_i ln q(v_i|u_i)`. Returns the negative
/// log-likelihood before the step.
pub fn q_update_step(
    net: &GaussianConditional,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    u: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let uv = tape.constant(u.clone().into_dyn());
    let vv = tape.constant(v.clone().into_dyn());
    let nll = net.log_likelihood(&tape, store, uv, vv)?.neg();
    let grads = tape.backward(nll).params(store);
    if !grads.values().all(|g| g.iter().all(|x| x.is_finite())) {
        return Err(SrlError::NonFinite {
            layer: format!("{} gradient", net.name),
        });
    }
    optimizer.step(store, &grads);
    Ok(nll.item())
}

/// Evaluate the vCLUB estimate of a trained q without building gradients for it.
pub fn vclub_mi(net: &GaussianConditional, store: &ParamStore, u: &Array2<f64>, v: &Array2<f64>) -> Result<f64> {
    let tape = Tape::new();
    let uv = tape.constant(u.clone().into_dyn());
    let vv = tape.constant(v.clone().into_dyn());
    Ok(net.vclub(&tape, store, uv, vv)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub contrastive: ContrastiveConfig,
    pub lambda_mi: f64,
    /// Feed the q-networks per-dimension z-scored embeddings (batch
    /// statistics, differentiable). MI is unchanged by such maps, but the
    /// estimate no longer rewards shrinking the embedding spread.
    pub standardize_mi_inputs: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveConfig::default(),
            lambda_mi: 1.0,
            standardize_mi_inputs: true,
        }
    }
}

const STANDARDIZE_EPS: f64 = 1e-6;

/// Per-column z-score of a `[N, d]` batch using its own statistics.
pub fn standardize_columns(x: Var<'_>) -> Var<'_> {
    let centered = x - x.mean_keepdim(0);
    let var = centered.square().mean_keepdim(0);
    centered / var.add_scalar(STANDARDIZE_EPS).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Contrastive terms in attribute order style, emotion, speaker.
    pub contrastive: [f64; 3],
    /// MI terms in [`MI_PAIRS`] order.
    pub mi: [f64; 3],
    pub total: f64,
}

/// Embeddings of both sets, indexed by attribute.
pub struct BatchEmbeddings<'t> {
    pub set_a: [Var<'t>; 3],
    pub set_b: [Var<'t>; 3],
}

impl<'t> BatchEmbeddings<'t> {
    /// Rows of set A followed by set B for one attribute.
    pub fn joined(&self, attribute: Attribute) -> Var<'t> {
        let i = attribute.index();
        concat(&[self.set_a[i], self.set_b[i]], 0)
    }

    /// What the q-networks see for one attribute.
    pub fn mi_input(&self, attribute: Attribute, config: &ObjectiveConfig) -> Var<'t> {
        let joined = self.joined(attribute);
        if config.standardize_mi_inputs {
            standardize_columns(joined)
        } else {
            joined
        }
    }
}

/// Sum of the three contrastive terms plus `lambda_mi` times the three MI
/// terms. q-network parameters are read but receive no update here.
pub fn total_loss<'t>(
    emb: &BatchEmbeddings<'t>,
    masks: &[MaskMatrix; 3],
    config: &ObjectiveConfig,
    mi: &MiEstimatorState,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = emb.set_a[0].tape();
    let mut breakdown = LossBreakdown::default();
    let mut total = tape.scalar(0.0);
    for a in Attribute::ALL {
        let i = a.index();
        assert_eq!(masks[i].attribute, a, "masks must be in attribute order");
        let sim = emb.set_a[i].matmul(emb.set_b[i].transpose_last());
        let term = contrastive_loss_var(sim, &masks[i], &config.contrastive);
        breakdown.contrastive[i] = term.item();
        total = total + term;
    }
    if config.lambda_mi != 0.0 {
        for (p, &(ua, va)) in MI_PAIRS.iter().enumerate() {
            let term = mi.nets[p].vclub(tape, &mi.params[p], emb.mi_input(ua, config), emb.mi_input(va, config))?;
            breakdown.mi[p] = term.item();
            total = total + term.scale(config.lambda_mi);
        }
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

/// Detached `[2K, d]` q-network inputs per attribute, the q-networks' training data.
pub fn detached_joined(emb: &BatchEmbeddings<'_>, config: &ObjectiveConfig) -> [Array2<f64>; 3] {
    Attribute::ALL.map(|a| {
        let v = emb.mi_input(a, config).value();
        let rows = v.shape()[0];
        v.as_ref()
            .clone()
            .into_shape_with_order((rows, v.len() / rows))
            .expect("2-D embeddings")
    })
}

/// `steps` q-updates for every pair on fixed embeddings. Returns the last
/// pre-step NLL per pair.
pub fn update_mi_estimators(mi: &mut MiEstimatorState, joined: &[Array2<f64>; 3], steps: usize) -> Result<[f64; 3]> {
    let mut nll = [0.0; 3];
    for (p, &(ua, va)) in MI_PAIRS.iter().enumerate() {
        for _ in 0..steps {
            nll[p] = q_update_step(
                &mi.nets[p],
                &mut mi.params[p],
                &mut mi.optimizers[p],
                &joined[ua.index()],
                &joined[va.index()],
            )?;
        }
    }
    Ok(nll)
}

/// Closed-form MI of a bivariate standard Gaussian with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Value the vCLUB estimator converges to on that Gaussian when `q` equals the
/// true conditional: `rho^2 / (1 - rho^2)`.
pub fn gaussian_vclub_limit(rho: f64) -> f64 {
    rho * rho / (1.0 - rho * rho)
}

/// Sample `n` pairs of a bivariate standard Gaussian with correlation `rho`.
pub fn correlated_gaussians(n: usize, rho: f64, rng: &mut impl Rng) -> (Array2<f64>, Array2<f64>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut u = Array2::zeros((n, 1));
    let mut v = Array2::zeros((n, 1));
    for i in 0..n {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        u[[i, 0]] = a;
        v[[i, 0]] = rho * a + (1.0 - rho * rho).sqrt() * b;
    }
    (u, v)
}

/// Train a 1-D q-network (hidden 16, lr 5e-3) for 1500 steps on fresh
/// batches of 256 correlated pairs, then average its vCLUB estimate over 10
/// held-out batches of 512.
pub fn converged_gaussian_vclub(rho: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = GaussianConditional::new("q", 1, 1, 16);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 5e-3,
        ..AdamConfig::default()
    });
    for _ in 0..1500 {
        let (u, v) = correlated_gaussians(256, rho, &mut rng);
        q_update_step(&net, &mut store, &mut adam, &u, &v).expect("finite Gaussian batches");
    }
    let mut est = 0.0;
    for _ in 0..10 {
        let (u, v) = correlated_gaussians(512, rho, &mut rng);
        est += vclub_mi(&net, &store, &u, &v).expect("finite Gaussian batches");
    }
    est / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::MaskMatrix;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn mask(a: Attribute, m: Array2<i8>) -> MaskMatrix {
        MaskMatrix { attribute: a, entries: m }
    }

    #[test]
    fn prob_mapping_boundaries() {
        let c = ContrastiveConfig::default();
        assert_eq!(similarity_to_prob(1.0, &c), 1.0 - 1e-6);
        assert_eq!(similarity_to_prob(-1.0, &c), 1e-6);
        assert_eq!(similarity_to_prob(0.0, &c), 0.5);
        let s = ContrastiveConfig {
            similarity_to_prob: ProbMapping::TemperedSigmoid,
            ..c
        };
        assert!(similarity_to_prob(0.2, &s) > similarity_to_prob(0.1, &s));
        assert!(ContrastiveConfig { epsilon: 0.5, ..c }.validate().is_err());
    }

    #[test]
    fn hand_computed_losses() {
        let c = ContrastiveConfig::default();
        let l = contrastive_loss(
            &arr2(&[[1.0, -1.0], [-1.0, 1.0]]),
            &mask(Attribute::Style, arr2(&[[1, 0], [0, 1]])),
            &c,
        );
        assert!((l - (-(1.0f64 - 1e-6).ln())).abs() < 1e-12);
        let l = contrastive_loss(&arr2(&[[0.0]]), &mask(Attribute::Style, arr2(&[[1]])), &c);
        assert!((l - 0.6931).abs() < 1e-4);
        let l = contrastive_loss(
            &arr2(&[[0.3, -0.2], [0.9, 0.1]]),
            &mask(Attribute::Style, arr2(&[[-1, -1], [-1, -1]])),
            &c,
        );
        assert_eq!(l, 0.0);
    }

    #[test]
    fn unknown_entries_have_exactly_zero_gradient() {
        let tape = Tape::new();
        let sim = tape.constant(arr2(&[[0.5, -0.3, 0.2], [0.1, 0.9, -0.7], [0.0, 0.4, 0.8]]).into_dyn());
        let m = mask(Attribute::Emotion, arr2(&[[1, -1, 0], [-1, 1, -1], [0, -1, 1]]));
        let loss = contrastive_loss_var(sim, &m, &ContrastiveConfig::default());
        let g = tape.backward(loss).get_or_zeros(sim);
        for ((i, j), &e) in m.entries.indexed_iter() {
            if e == -1 {
                assert_eq!(g[[i, j]], 0.0);
            } else {
                assert_ne!(g[[i, j]], 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_similarity(
            s in prop::collection::vec(-0.99f64..0.99, 4),
            m in prop::collection::vec(-1i8..=1, 4),
            idx in 0usize..4,
            delta in 0.0f64..0.5,
        ) {
            let c = ContrastiveConfig::default();
            let sim = Array2::from_shape_vec((2, 2), s).unwrap();
            let mk = mask(Attribute::Style, Array2::from_shape_vec((2, 2), m).unwrap());
            let mut up = sim.clone();
            let (i, j) = (idx / 2, idx % 2);
            up[[i, j]] = (up[[i, j]] + delta).min(1.0);
            let before = contrastive_loss(&sim, &mk, &c);
            let after = contrastive_loss(&up, &mk, &c);
            match mk.entries[[i, j]] {
                1 => prop_assert!(after <= before + 1e-12),
                0 => prop_assert!(after >= before - 1e-12),
                _ => prop_assert!((after - before).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn mi_pairs_cover_each_unordered_pair_once() {
        let mut seen: Vec<_> = MI_PAIRS
            .iter()
            .map(|&(a, b)| {
                assert_ne!(a, b);
                let (x, y) = (a.index().min(b.index()), a.index().max(b.index()));
                (x, y)
            })
            .collect();
        seen.sort();
        assert_eq!(seen, vec![(0, 1), (0, 2), (1, 2)]);
    }

    fn brute_force_vclub(net: &GaussianConditional, store: &ParamStore, u: &Array2<f64>, v: &Array2<f64>) -> f64 {
        let tape = Tape::new();
        let (mu, var) = net.predict(&tape, store, tape.constant(u.clone().into_dyn())).unwrap();
        let (mu, var) = (mu.value(), var.value());
        let n = u.nrows();
        let logq = |i: usize, j: usize| {
            (0..v.ncols())
                .map(|d| {
                    let s = var[[i, d]];
                    -0.5 * ((v[[j, d]] - mu[[i, d]]).powi(2) / s + s.ln() + (2.0 * std::f64::consts::PI).ln())
                })
                .sum::<f64>()
        };
        let pos = (0..n).map(|i| logq(i, i)).sum::<f64>() / n as f64;
        let mut all = 0.0;
        for i in 0..n {
            for j in 0..n {
                all += logq(i, j);
            }
        }
        pos - all / (n * n) as f64
    }

    #[test]
    fn vclub_matches_double_loop_and_untrained_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = GaussianConditional::new("q", 3, 2, 5);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let u = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let fast = vclub_mi(&net, &store, &u, &v).unwrap();
        assert!(fast.is_finite());
        assert!((fast - brute_force_vclub(&net, &store, &u, &v)).abs() < 1e-10);
    }

    #[test]
    fn q_training_reduces_nll_and_zero_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (u, v) = correlated_gaussians(256, 0.8, &mut rng);
        let net = GaussianConditional::new("q", 1, 1, 16);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let snapshot = store.clone();
        let mut frozen = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        q_update_step(&net, &mut store, &mut frozen, &u, &v).unwrap();
        assert_eq!(store, snapshot);
        assert!(frozen.first_moment.is_empty());

        let run = |mut store: ParamStore| {
            let mut adam = Adam::new(AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            });
            let mut trace = Vec::new();
            for _ in 0..500 {
                trace.push(q_update_step(&net, &mut store, &mut adam, &u, &v).unwrap());
            }
            trace
        };
        let a = run(snapshot.clone());
        assert_eq!(a, run(snapshot));
        assert!(a[499] < 0.8 * a[0], "{} -> {}", a[0], a[499]);
    }

    /// Trains q on fresh Gaussian batches and returns the mean vCLUB
    /// estimate on held-out batches.
    #[test]
    fn vclub_converges_to_its_gaussian_limit() {
        let zero = converged_gaussian_vclub(0.0, 3);
        assert!(zero.abs() < 0.05, "{zero}");
        for rho in [0.5, 0.9] {
            let est = converged_gaussian_vclub(rho, 4);
            let want = gaussian_vclub_limit(rho);
            assert!((est - want).abs() <= 0.1 * want, "rho {rho}: {est} vs {want}");
            assert!(est >= gaussian_mi(rho));
        }
    }

    fn unit_rows(rows: &[[f64; 2]]) -> ArrayD<f64> {
        let mut a = Array2::zeros((rows.len(), 2));
        for (i, r) in rows.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
            a[[i, 0]] = r[0] / n;
            a[[i, 1]] = r[1] / n;
        }
        a.into_dyn()
    }

    #[test]
    fn total_loss_on_hand_set_pair() {
        let mut mi = MiEstimatorState::new(2, 4, AdamConfig::default(), 7);
        let masks = [
            mask(Attribute::Style, arr2(&[[1, 0], [0, 1]])),
            mask(Attribute::Emotion, arr2(&[[1, 1], [1, 1]])),
            mask(Attribute::Speaker, arr2(&[[1, -1], [-1, 1]])),
        ];
        let rows_a = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [1.0, -1.0]], [[3.0, 4.0], [-4.0, 3.0]]];
        let rows_b = [[[1.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]], [[4.0, 3.0], [0.0, 1.0]]];
        let tape = Tape::new();
        let emb = BatchEmbeddings {
            set_a: [0, 1, 2].map(|i| tape.constant(unit_rows(&rows_a[i]))),
            set_b: [0, 1, 2].map(|i| tape.constant(unit_rows(&rows_b[i]))),
        };
        // Hand values: p = (cos + 1) / 2.
        let r = 0.5f64.sqrt();
        let style = -((1.0f64 - 1e-6).ln() + 0.5f64.ln() + (1.0 - (r + 1.0) / 2.0).ln() + ((r + 1.0) / 2.0).ln()) / 4.0;
        let emotion = -(((r + 1.0) / 2.0).ln() + ((r + 1.0) / 2.0).ln() + ((-r + 1.0) / 2.0).ln() + ((r + 1.0) / 2.0).ln()) / 4.0;
        let speaker = -(0.98f64.ln() + 0.8f64.ln()) / 2.0;
        let config = ObjectiveConfig {
            lambda_mi: 0.0,
            ..ObjectiveConfig::default()
        };
        let (total, b) = total_loss(&emb, &masks, &config, &mi).unwrap();
        assert!((b.contrastive[0] - style).abs() < 1e-5);
        assert!((b.contrastive[1] - emotion).abs() < 1e-5);
        assert!((b.contrastive[2] - speaker).abs() < 1e-5);
        assert_eq!(total.item(), b.contrastive.iter().sum::<f64>());

        let config = ObjectiveConfig {
            lambda_mi: 0.5,
            ..ObjectiveConfig::default()
        };
        let joined = detached_joined(&emb, &config);
        update_mi_estimators(&mut mi, &joined, 3).unwrap();
        let (total, _) = total_loss(&emb, &masks, &config, &mi).unwrap();
        let mi_sum: f64 = MI_PAIRS
            .iter()
            .enumerate()
            .map(|(p, &(a, b))| brute_force_vclub(&mi.nets[p], &mi.params[p], &joined[a.index()], &joined[b.index()]))
            .sum();
        assert!((total.item() - (style + emotion + speaker + 0.5 * mi_sum)).abs() < 1e-5);
    }

    #[test]
    fn all_unknown_with_no_mi_is_zero() {
        let mi = MiEstimatorState::new(2, 4, AdamConfig::default(), 0);
        let unknown = |a| mask(a, arr2(&[[-1, -1], [-1, -1]]));
        let tape = Tape::new();
        let x = tape.constant(unit_rows(&[[1.0, 2.0], [3.0, -1.0]]));
        let emb = BatchEmbeddings {
            set_a: [x; 3],
            set_b: [x; 3],
        };
        let config = ObjectiveConfig {
            lambda_mi: 0.0,
            ..ObjectiveConfig::default()
        };
        let masks = Attribute::ALL.map(unknown);
        assert_eq!(total_loss(&emb, &masks, &config, &mi).unwrap().1.total, 0.0);
    }
}
