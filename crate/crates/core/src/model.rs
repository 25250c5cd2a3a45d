//! The representation network: frame frontend with learned layer mixing, a
//! shared transformer trunk that fans out into three hidden streams, and one
//! reference-encoder style decoder per attribute. Every output is projected
//! onto the unit hypersphere.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{dropout, Conv1d, Gru, LayerNorm, Linear};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::corpus::Attribute;
use crate::error::{Result, SrlError};

/// Tolerance on unit norm accepted by [`similarity_matrix`].
pub const NORM_TOLERANCE: f64 = 1e-4;

/// A `[T x D]` frame matrix, optionally with the full `[L x T x D]` stack of
/// frontend layers it was mixed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frames: Array2<f64>,
    pub layer_stack: Option<Array3<f64>>,
}

impl FrameFeatures {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(SrlError::Degenerate("frame matrix must have T >= 1 and D >= 1".into()));
        }
        if !frames.iter().all(|x| x.is_finite()) {
            return Err(SrlError::Degenerate("frame matrix has non-finite entries".into()));
        }
        Ok(Self {
            frames,
            layer_stack: None,
        })
    }

    pub fn with_stack(stack: Array3<f64>) -> Result<Self> {
        if stack.shape()[0] == 0 {
            return Err(SrlError::Degenerate("layer stack must have L >= 1".into()));
        }
        let mut f = Self::new(stack.index_axis(ndarray::Axis(0), 0).to_owned())?;
        f.layer_stack = Some(stack);
        Ok(f)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// `[L x T x D]`, with `L = 1` when no stack is attached.
    pub fn stack(&self) -> Array3<f64> {
        match &self.layer_stack {
            Some(s) => s.clone(),
            None => self.frames.clone().insert_axis(ndarray::Axis(0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_heads: 2,
            d_model: 256,
            d_ffn: 1024,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Number of frontend layers mixed by the learned convex weights.
    pub frontend_layers: usize,
    pub trunk: TrunkConfig,
    pub d_emb: usize,
    pub decoder_channels: usize,
    pub decoder_convs: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            frontend_layers: 1,
            trunk: TrunkConfig::default(),
            d_emb: 256,
            decoder_channels: 128,
            decoder_convs: 2,
            decoder_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.trunk;
        if t.n_heads == 0 || t.d_model % t.n_heads != 0 {
            return Err(SrlError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                t.d_model, t.n_heads
            )));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(SrlError::Config(format!("dropout {} not in [0, 1)", t.dropout)));
        }
        if self.input_dim == 0 || self.frontend_layers == 0 || self.d_emb == 0 {
            return Err(SrlError::Config("input_dim, frontend_layers and d_emb must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unit-norm style, emotion and speaker vectors of one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTriple {
    pub style: Vec<f64>,
    pub emotion: Vec<f64>,
    pub speaker: Vec<f64>,
}

impl EmbeddingTriple {
    pub fn get(&self, attribute: Attribute) -> &[f64] {
        match attribute {
            Attribute::Style => &self.style,
            Attribute::Emotion => &self.emotion,
            Attribute::Speaker => &self.speaker,
        }
    }
}

/// Forward-pass mode. Dropout runs only when a random source is present.
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    fn rng(&mut self) -> Option<&mut dyn rand::RngCore> {
        self.rng.as_mut().map(|r| r as &mut dyn rand::RngCore)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TrunkLayer {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    convs: Vec<Conv1d>,
    gru: Gru,
    proj: Linear,
}

/// Layer layout of the network. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SrlModel {
    pub config: ModelConfig,
    input_proj: Linear,
    layers: Vec<TrunkLayer>,
    final_ln: LayerNorm,
    heads: Vec<Linear>,
    decoders: Vec<Decoder>,
}

pub const MIX_LOGITS: &str = "frontend.mix_logits";

pub fn sinusoidal_positions(t_len: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, d_model), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl SrlModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let dm = config.trunk.d_model;
        let layers = (0..config.trunk.n_layers)
            .map(|i| {
                let p = format!("trunk.{i}");
                TrunkLayer {
                    ln_attn: LayerNorm::new(format!("{p}.ln_attn"), dm),
                    q: Linear::new(format!("{p}.attn.q"), dm, dm),
                    k: Linear::new(format!("{p}.attn.k"), dm, dm),
                    v: Linear::new(format!("{p}.attn.v"), dm, dm),
                    o: Linear::new(format!("{p}.attn.o"), dm, dm),
                    ln_ffn: LayerNorm::new(format!("{p}.ln_ffn"), dm),
                    ffn_in: Linear::new(format!("{p}.ffn.in"), dm, config.trunk.d_ffn),
                    ffn_out: Linear::new(format!("{p}.ffn.out"), config.trunk.d_ffn, dm),
                }
            })
            .collect();
        let heads = Attribute::ALL
            .iter()
            .map(|a| Linear::new(format!("head.{a}"), dm, dm))
            .collect();
        let decoders = Attribute::ALL
            .iter()
            .map(|a| {
                let c = config.decoder_channels;
                let convs = (0..config.decoder_convs)
                    .map(|i| {
                        let input = if i == 0 { dm } else { c };
                        Conv1d::new(format!("decoder.{a}.conv{i}"), input, c, 3, 2)
                    })
                    .collect::<Vec<_>>();
                let gru_in = if convs.is_empty() { dm } else { c };
                Decoder {
                    convs,
                    gru: Gru::new(format!("decoder.{a}.gru"), gru_in, config.decoder_hidden),
                    proj: Linear::new(format!("decoder.{a}.proj"), config.decoder_hidden, config.d_emb),
                }
            })
            .collect();
        Ok(Self {
            config,
            input_proj: Linear::new("input_proj", config.input_dim, dm),
            layers,
            final_ln: LayerNorm::new("trunk.final_ln", dm),
            heads,
            decoders,
        })
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.init_const(MIX_LOGITS, &[self.config.frontend_layers], 0.0);
        self.input_proj.init(&mut store, &mut rng);
        for l in &self.layers {
            l.ln_attn.init(&mut store);
            l.q.init(&mut store, &mut rng);
            l.k.init(&mut store, &mut rng);
            l.v.init(&mut store, &mut rng);
            l.o.init(&mut store, &mut rng);
            l.ln_ffn.init(&mut store);
            l.ffn_in.init(&mut store, &mut rng);
            l.ffn_out.init(&mut store, &mut rng);
        }
        self.final_ln.init(&mut store);
        for h in &self.heads {
            h.init(&mut store, &mut rng);
        }
        for d in &self.decoders {
            for c in &d.convs {
                c.init(&mut store, &mut rng);
            }
            d.gru.init(&mut store, &mut rng);
            d.proj.init(&mut store, &mut rng);
        }
        store
    }

    /// Parameter-name prefix owned by one attribute's decoder.
    pub fn decoder_prefix(attribute: Attribute) -> String {
        format!("decoder.{attribute}.")
    }

    /// Convex combination over frontend layers: `[L, B, T, D] -> [B, T, D]`.
    pub fn layer_mix<'t>(&self, tape: &'t Tape, store: &ParamStore, stack: Var<'t>) -> Var<'t> {
        let shape = stack.shape();
        let l = shape[0];
        let logits = tape.param(store, MIX_LOGITS);
        assert_eq!(logits.shape(), vec![l], "stack depth does not match frontend_layers");
        let weights = logits.softmax_last().reshape(&[l, 1, 1, 1]);
        (stack * weights).sum_keepdim(0).reshape(&shape[1..])
    }

    fn check<'t>(v: Var<'t>, layer: &str) -> Result<Var<'t>> {
        if v.all_finite() {
            Ok(v)
        } else {
            Err(SrlError::NonFinite {
                layer: layer.to_string(),
            })
        }
    }

    /// Shared trunk: `[L, B, T, D]` frames to `[B, T, d_model]`.
    pub fn trunk<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stack: Var<'t>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var<'t>> {
        let p = self.config.trunk.dropout;
        let mixed = Self::check(self.layer_mix(tape, store, stack), "frontend")?;
        let shape = mixed.shape();
        let (b, t) = (shape[0], shape[1]);
        let dm = self.config.trunk.d_model;
        let heads = self.config.trunk.n_heads;
        let dh = dm / heads;
        let pos = tape.constant(sinusoidal_positions(t, dm).into_dyn());
        let mut x = self.input_proj.forward(tape, store, mixed) + pos;
        x = dropout(x, p, ctx.rng());
        for (i, l) in self.layers.iter().enumerate() {
            let h = l.ln_attn.forward(tape, store, x);
            let split = |v: Var<'t>| {
                v.reshape(&[b, t, heads, dh])
                    .permute(&[0, 2, 1, 3])
                    .reshape(&[b * heads, t, dh])
            };
            let q = split(l.q.forward(tape, store, h));
            let k = split(l.k.forward(tape, store, h));
            let v = split(l.v.forward(tape, store, h));
            let attn = q
                .bmm(k.transpose_last())
                .scale(1.0 / (dh as f64).sqrt())
                .softmax_last();
            let ctx_v = attn
                .bmm(v)
                .reshape(&[b, heads, t, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b, t, dm]);
            let attn_out = dropout(l.o.forward(tape, store, ctx_v), p, ctx.rng());
            x = x + attn_out;
            let h = l.ln_ffn.forward(tape, store, x);
            let h = l.ffn_in.forward(tape, store, h).relu();
            let h = dropout(h, p, ctx.rng());
            let h = dropout(l.ffn_out.forward(tape, store, h), p, ctx.rng());
            x = Self::check(x + h, &format!("trunk.{i}"))?;
        }
        Ok(self.final_ln.forward(tape, store, x))
    }

    /// One attribute's head and decoder: trunk output to `[B, d_emb]` unit vectors.
    pub fn decode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        hidden: Var<'t>,
        attribute: Attribute,
    ) -> Result<Var<'t>> {
        let i = attribute.index();
        let mut h = self.heads[i].forward(tape, store, hidden);
        let dec = &self.decoders[i];
        for c in &dec.convs {
            h = c.forward(tape, store, h).relu();
        }
        let state = dec.gru.forward(tape, store, h);
        let out = dec.proj.forward(tape, store, state);
        Self::check(out.l2_normalize(), &format!("decoder.{attribute}"))
    }

    /// All three embeddings for a batch given as `[L, B, T, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stack: Var<'t>,
        ctx: &mut ForwardCtx,
    ) -> Result<[Var<'t>; 3]> {
        let hidden = self.trunk(tape, store, stack, ctx)?;
        Ok([
            self.decode(tape, store, hidden, Attribute::Style)?,
            self.decode(tape, store, hidden, Attribute::Emotion)?,
            self.decode(tape, store, hidden, Attribute::Speaker)?,
        ])
    }

    /// Eval-mode embeddings of equally long frame matrices, processed in chunks.
    pub fn embed(&self, store: &ParamStore, inputs: &[FrameFeatures]) -> Result<Vec<EmbeddingTriple>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            let tape = Tape::new();
            let stack = tape.constant(batch_stack(chunk)?);
            let [s, e, k] = self.forward(&tape, store, stack, &mut ForwardCtx::eval())?;
            let (s, e, k) = (s.value(), e.value(), k.value());
            for row in 0..chunk.len() {
                let take = |v: &ArrayD<f64>| v.index_axis(ndarray::Axis(0), row).iter().copied().collect();
                out.push(EmbeddingTriple {
                    style: take(&s),
                    emotion: take(&e),
                    speaker: take(&k),
                });
            }
        }
        Ok(out)
    }

    /// The `which` component of [`SrlModel::embed`] for a single input.
    pub fn encode(&self, store: &ParamStore, input: &FrameFeatures, which: Attribute) -> Result<Vec<f64>> {
        let triple = self.embed(store, std::slice::from_ref(input))?.remove(0);
        Ok(triple.get(which).to_vec())
    }
}

/// Stack per-slice inputs into `[L, B, T, D]`.
pub fn batch_stack(inputs: &[FrameFeatures]) -> Result<ArrayD<f64>> {
    let first = inputs
        .first()
        .ok_or_else(|| SrlError::Degenerate("empty batch".into()))?
        .stack();
    let (l, t, d) = first.dim();
    let mut out = ArrayD::zeros(IxDyn(&[l, inputs.len(), t, d]));
    for (b, f) in inputs.iter().enumerate() {
        let s = f.stack();
        if s.dim() != (l, t, d) {
            return Err(SrlError::Degenerate(format!(
                "batch inputs differ in shape: {:?} vs {:?}",
                s.dim(),
                (l, t, d)
            )));
        }
        out.slice_mut(ndarray::s![.., b, .., ..]).assign(&s);
    }
    Ok(out)
}

/// Pairwise dot products of unit vectors: `out[i][j] = <a_i, b_j>`.
pub fn similarity_matrix(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<Array2<f64>> {
    for v in set_a.iter().chain(set_b) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(SrlError::NormViolation {
                norm,
                tolerance: NORM_TOLERANCE,
            });
        }
    }
    let dim = set_a.first().or(set_b.first()).map_or(0, |v| v.len());
    let to_matrix = |set: &[Vec<f64>]| {
        Array2::from_shape_vec((set.len(), dim), set.iter().flatten().copied().collect())
            .map_err(|_| SrlError::Degenerate("embeddings differ in dimension".into()))
    };
    let a = to_matrix(set_a)?;
    let b = to_matrix(set_b)?;
    Ok(a.dot(&b.t()))
}
