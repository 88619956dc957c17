//! Tiny pre-norm causal transformer with a language-modeling head and a
//! scalar reward head.
//!
//! Parameters live in one flat buffer described by a [`ParamLayout`]; the
//! gradient buffer shares that layout. Forward passes record a [`Trace`] and
//! the backward pass is written out by hand, so gradients are exact and the
//! same code runs in `f32` (training) and `f64` (gradient checking).
//!
//! Inputs are [`Packed`] sequences: token ids with explicit position ids and
//! a branch tag per token. Token `i` attends to token `j <= i` when `j` is in
//! the shared prefix (branch 0) or in the same branch as `i`. A plain
//! sequence is a single branch-0 run; a preference pair is packed as
//! `prompt | chosen | rejected` so the prompt is encoded once and both
//! responses see it exactly as they would in separate sequences.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add_bias, add_col_sums, axpy, dot, matmul, matmul_strided, Layout, Real};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub reward_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            max_seq_len: 256,
            reward_head: true,
        }
    }
}

impl ModelConfig {
    /// The small preset used by the sweeps and acceptance runs on a single core.
    pub fn compact() -> Self {
        Self {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 192,
            reward_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids plus the count of leading real (non-padding) tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, valid_len: usize) -> Result<Self> {
        if valid_len == 0 || valid_len > ids.len() {
            return Err(Error::Input(format!(
                "valid_len {valid_len} outside 1..={}",
                ids.len()
            )));
        }
        Ok(Self { ids, valid_len })
    }

    /// A sequence with no padding.
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        let n = ids.len();
        Self::new(ids, n)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn valid_ids(&self) -> &[TokenId] {
        &self.ids[..self.valid_len]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with `pad` up to `len` tokens; `valid_len` is unchanged.
    pub fn padded(&self, len: usize, pad: TokenId) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), pad);
        Self {
            ids,
            valid_len: self.valid_len,
        }
    }
}

/// Model input with explicit positions and branch tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<TokenId>,
    pub positions: Vec<u32>,
    pub branch: Vec<u8>,
}

/// Where the interesting rows of a packed preference pair live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRows {
    /// Row of the last chosen token (reward readout).
    pub chosen_last: usize,
    /// Row of the last rejected token (reward readout).
    pub rejected_last: usize,
    /// Rows whose next-token prediction is a chosen response token, with that target.
    pub chosen_targets: Vec<(usize, TokenId)>,
}

impl Packed {
    pub fn single(ids: &[TokenId]) -> Self {
        Self {
            ids: ids.to_vec(),
            positions: (0..ids.len() as u32).collect(),
            branch: vec![0; ids.len()],
        }
    }

    /// Packs `prompt | chosen | rejected`; both responses continue the
    /// prompt's positions and cannot see each other.
    pub fn pair(prompt: &[TokenId], chosen: &[TokenId], rejected: &[TokenId]) -> (Self, PairRows) {
        assert!(!prompt.is_empty() && !chosen.is_empty() && !rejected.is_empty());
        let p = prompt.len();
        let mut ids = Vec::with_capacity(p + chosen.len() + rejected.len());
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(chosen);
        ids.extend_from_slice(rejected);
        let mut positions: Vec<u32> = (0..(p + chosen.len()) as u32).collect();
        positions.extend((p..p + rejected.len()).map(|x| x as u32));
        let mut branch = vec![0u8; p];
        branch.extend(std::iter::repeat_n(1u8, chosen.len()));
        branch.extend(std::iter::repeat_n(2u8, rejected.len()));

        let mut chosen_targets = Vec::with_capacity(chosen.len());
        chosen_targets.push((p - 1, chosen[0]));
        for (i, &tok) in chosen.iter().enumerate().skip(1) {
            chosen_targets.push((p + i - 1, tok));
        }
        let rows = PairRows {
            chosen_last: p + chosen.len() - 1,
            rejected_last: ids.len() - 1,
            chosen_targets,
        };
        (
            Self {
                ids,
                positions,
                branch,
            },
            rows,
        )
    }

    /// Packs a prompt followed by up to 255 mutually invisible responses;
    /// returns the last row of each response.
    pub fn fanout(prompt: &[TokenId], responses: &[&[TokenId]]) -> Result<(Self, Vec<usize>)> {
        if prompt.is_empty() || responses.is_empty() || responses.iter().any(|r| r.is_empty()) {
            return Err(Error::Input("fanout needs a prompt and non-empty responses".into()));
        }
        if responses.len() > usize::from(u8::MAX) {
            return Err(Error::Input(format!("{} responses exceed the branch limit", responses.len())));
        }
        let p = prompt.len();
        let mut out = Self::single(prompt);
        let mut last = Vec::with_capacity(responses.len());
        for (k, r) in responses.iter().enumerate() {
            out.ids.extend_from_slice(r);
            out.positions.extend((p..p + r.len()).map(|x| x as u32));
            out.branch.extend(std::iter::repeat_n(k as u8 + 1, r.len()));
            last.push(out.ids.len() - 1);
        }
        Ok((out, last))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        j <= i && (self.branch[j] == 0 || self.branch[j] == self.branch[i])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Clone, Debug)]
struct LayerSlots {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wqkv: Range<usize>,
    bqkv: Range<usize>,
    wo: Range<usize>,
    bo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

/// Names, shapes and offsets of every parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    total: usize,
    tok_emb: Range<usize>,
    pos_emb: Range<usize>,
    layers: Vec<LayerSlots>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    lm_head: Range<usize>,
    reward: Option<(Range<usize>, Range<usize>)>,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> Range<usize> {
            let info = TensorInfo {
                name,
                shape,
                offset: total,
            };
            total += info.numel();
            let r = info.range();
            tensors.push(info);
            r
        };
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, 4 * cfg.d_model);
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerSlots {
                ln1_g: push(p("ln1.g"), vec![d]),
                ln1_b: push(p("ln1.b"), vec![d]),
                wqkv: push(p("attn.wqkv"), vec![d, 3 * d]),
                bqkv: push(p("attn.bqkv"), vec![3 * d]),
                wo: push(p("attn.wo"), vec![d, d]),
                bo: push(p("attn.bo"), vec![d]),
                ln2_g: push(p("ln2.g"), vec![d]),
                ln2_b: push(p("ln2.b"), vec![d]),
                w1: push(p("mlp.w1"), vec![d, f]),
                b1: push(p("mlp.b1"), vec![f]),
                w2: push(p("mlp.w2"), vec![f, d]),
                b2: push(p("mlp.b2"), vec![d]),
            });
        }
        let lnf_g = push("lnf.g".into(), vec![d]);
        let lnf_b = push("lnf.b".into(), vec![d]);
        let lm_head = push("lm_head.w".into(), vec![d, v]);
        let reward = cfg.reward_head.then(|| {
            let w = push("reward.w".into(), vec![d]);
            let b = push("reward.b".into(), vec![1]);
            (w, b)
        });
        Self {
            tensors,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            lm_head,
            reward,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Range of the LM head output weights inside the flat buffer.
    pub fn lm_head_range(&self) -> Range<usize> {
        self.lm_head.clone()
    }
}

/// Checkpointable trainable object: architecture plus flat `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub step: u64,
}

impl ModelState {
    /// Seeded initialization: scaled normal weights, unit layer-norm gains,
    /// zero biases and a zero reward head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Transformer::new(config.clone())?;
        let layout = model.layout();
        let mut params = vec![0.0f32; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * config.n_layers as f32).sqrt()).expect("valid std");
        for t in layout.tensors() {
            let slot = &mut params[t.range()];
            let leaf = t.name.rsplit('.').next().unwrap_or(&t.name);
            let name = t.name.as_str();
            if name.starts_with("reward.") {
                continue;
            } else if leaf == "g" {
                slot.fill(1.0);
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                slot.iter_mut().for_each(|v| *v = resid.sample(&mut rng));
            } else if t.shape.len() == 2 {
                slot.iter_mut().for_each(|v| *v = base.sample(&mut rng));
            }
        }
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    pub fn model(&self) -> Result<Transformer> {
        Transformer::new(self.config.clone())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let layout = ParamLayout::new(&self.config);
        let r = layout.get(name)?.range();
        Some(&self.params[r])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Per-position logits for a batch, padded to the longest sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLogits {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl BatchLogits {
    pub fn row(&self, b: usize, t: usize) -> &[f32] {
        let start = (b * self.seq_len + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Logits for every position of every sequence in `batch`.
pub fn forward_lm(state: &ModelState, batch: &[TokenSequence]) -> Result<BatchLogits> {
    let model = state.model()?;
    let seq_len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
    let vocab = state.config.vocab_size;
    let mut data = vec![0.0f32; batch.len() * seq_len * vocab];
    for (b, seq) in batch.iter().enumerate() {
        let trace = model.forward(&state.params, &Packed::single(seq.ids()))?;
        let rows: Vec<usize> = (0..seq.len()).collect();
        let logits = model.logits(&state.params, &trace, &rows);
        let start = b * seq_len * vocab;
        data[start..start + logits.len()].copy_from_slice(&logits);
    }
    Ok(BatchLogits {
        batch: batch.len(),
        seq_len,
        vocab,
        data,
    })
}

/// Scalar reward read from the last valid token.
pub fn forward_reward(state: &ModelState, seq: &TokenSequence) -> Result<f32> {
    let model = state.model()?;
    model.score(&state.params, seq.valid_ids())
}

#[derive(Clone, Debug)]
struct NormTrace<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

#[derive(Clone, Debug)]
struct LayerTrace<T> {
    ln1: NormTrace<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2: NormTrace<T>,
    h_pre: Vec<T>,
    h_tanh: Vec<T>,
    h_act: Vec<T>,
}

/// Activations recorded by one forward pass, plus the upstream gradient on
/// the final hidden states accumulated by the heads.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    input: Packed,
    layers: Vec<LayerTrace<T>>,
    lnf: NormTrace<T>,
    d_hidden: Vec<T>,
    seeded: bool,
}

impl<T: Real> Trace<T> {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Final (post layer-norm) hidden state of row `t`.
    pub fn hidden(&self, t: usize, d: usize) -> &[T] {
        &self.lnf.out[t * d..(t + 1) * d]
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T]) -> NormTrace<T> {
    let d = g.len();
    let n = x.len() / d;
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            xhat[t * d + i] = xh;
            out[t * d + i] = xh * g[i] + b[i];
        }
    }
    NormTrace { xhat, rstd, out }
}

/// Accumulates the input gradient into `dx` and parameter gradients into `dg`/`db`.
fn layer_norm_backward<T: Real>(
    tr: &NormTrace<T>,
    g: &[T],
    dout: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let d = g.len();
    let n = dout.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for t in 0..n {
        let xh = &tr.xhat[t * d..(t + 1) * d];
        let dy = &dout[t * d..(t + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dg[i] += dy[i] * xh[i];
            db[i] += dy[i];
            dxhat[i] = dy[i] * g[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let r = tr.rstd[t];
        let out = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            out[i] += r * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// Tanh-approximated GELU; writes the inner tanh to `th` for the backward pass.
fn gelu_into<T: Real>(x: &[T], th: &mut [T], out: &mut [T]) {
    let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    for ((&v, t), o) in x.iter().zip(th.iter_mut()).zip(out.iter_mut()) {
        *t = (k * (v + c * v * v * v)).tanh();
        *o = half * v * (T::one() + *t);
    }
}

fn gelu_grad<T: Real>(x: T, th: T) -> T {
    let k = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x)
}

/// Architecture plus parameter layout; stateless with respect to weights.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    layout: ParamLayout,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn check_input(&self, input: &Packed) -> Result<()> {
        if input.is_empty() {
            return Err(Error::Input("empty input sequence".into()));
        }
        if input.positions.len() != input.len() || input.branch.len() != input.len() {
            return Err(Error::Input("positions/branch length mismatch".into()));
        }
        if let Some(&bad) = input.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p as usize >= self.config.max_seq_len) {
            return Err(Error::Input(format!(
                "position {p} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &Packed) -> Result<Trace<T>> {
        self.check_input(input)?;
        assert_eq!(params.len(), self.layout.total(), "parameter buffer size");
        let cfg = &self.config;
        let (n, d, h, f) = (input.len(), cfg.d_model, cfg.n_heads, 4 * cfg.d_model);
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let tok = &params[self.layout.tok_emb.clone()];
        let pos = &params[self.layout.pos_emb.clone()];

        let mut x = vec![T::zero(); n * d];
        for t in 0..n {
            let te = &tok[input.ids[t] as usize * d..][..d];
            let pe = &pos[input.positions[t] as usize * d..][..d];
            for i in 0..d {
                x[t * d + i] = te[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut scores = vec![T::zero(); n * n];
        for slots in &self.layout.layers {
            let ln1 = layer_norm(&x, &params[slots.ln1_g.clone()], &params[slots.ln1_b.clone()]);
            let mut qkv = vec![T::zero(); n * 3 * d];
            matmul(&ln1.out, Layout::Normal, &params[slots.wqkv.clone()], Layout::Normal, &mut qkv, n, d, 3 * d, false);
            add_bias(&mut qkv, &params[slots.bqkv.clone()]);

            let mut probs = vec![T::zero(); h * n * n];
            let mut ctx = vec![T::zero(); n * d];
            for head in 0..h {
                let q = &qkv[head * dh..];
                let k = &qkv[d + head * dh..];
                let v = &qkv[2 * d + head * dh..];
                // scores = q k^T
                matmul_strided(n, dh, n, q, (3 * d, 1), k, (1, 3 * d), &mut scores, (n, 1), false);
                let p = &mut probs[head * n * n..(head + 1) * n * n];
                for i in 0..n {
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        if input.visible(i, j) {
                            max = max.max(scores[i * n + j] * scale);
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..=i {
                        if input.visible(i, j) {
                            let e = (scores[i * n + j] * scale - max).exp();
                            p[i * n + j] = e;
                            sum += e;
                        }
                    }
                    let inv = T::one() / sum;
                    for j in 0..=i {
                        p[i * n + j] *= inv;
                    }
                }
                matmul_strided(n, n, dh, p, (n, 1), v, (3 * d, 1), &mut ctx[head * dh..], (d, 1), false);
            }
            let mut attn = vec![T::zero(); n * d];
            matmul(&ctx, Layout::Normal, &params[slots.wo.clone()], Layout::Normal, &mut attn, n, d, d, false);
            add_bias(&mut attn, &params[slots.bo.clone()]);
            axpy(T::one(), &attn, &mut x);

            let ln2 = layer_norm(&x, &params[slots.ln2_g.clone()], &params[slots.ln2_b.clone()]);
            let mut h_pre = vec![T::zero(); n * f];
            matmul(&ln2.out, Layout::Normal, &params[slots.w1.clone()], Layout::Normal, &mut h_pre, n, d, f, false);
            add_bias(&mut h_pre, &params[slots.b1.clone()]);
            let mut h_tanh = vec![T::zero(); n * f];
            let mut h_act = vec![T::zero(); n * f];
            gelu_into(&h_pre, &mut h_tanh, &mut h_act);
            let mut mlp = vec![T::zero(); n * d];
            matmul(&h_act, Layout::Normal, &params[slots.w2.clone()], Layout::Normal, &mut mlp, n, f, d, false);
            add_bias(&mut mlp, &params[slots.b2.clone()]);
            axpy(T::one(), &mlp, &mut x);

            layers.push(LayerTrace {
                ln1,
                qkv,
                probs,
                ctx,
                ln2,
                h_pre,
                h_tanh,
                h_act,
            });
        }
        let lnf = layer_norm(&x, &params[self.layout.lnf_g.clone()], &params[self.layout.lnf_b.clone()]);
        Ok(Trace {
            input: input.clone(),
            layers,
            lnf,
            d_hidden: vec![T::zero(); n * d],
            seeded: false,
        })
    }

    /// LM logits `[rows.len() x vocab]` for the selected rows.
    pub fn logits<T: Real>(&self, params: &[T], trace: &Trace<T>, rows: &[usize]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let hidden = self.gather(trace, rows);
        let mut out = vec![T::zero(); rows.len() * v];
        matmul(&hidden, Layout::Normal, &params[self.layout.lm_head.clone()], Layout::Normal, &mut out, rows.len(), d, v, false);
        out
    }

    fn gather<T: Real>(&self, trace: &Trace<T>, rows: &[usize]) -> Vec<T> {
        let d = self.config.d_model;
        let mut hidden = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            hidden.extend_from_slice(trace.hidden(r, d));
        }
        hidden
    }

    fn reward_slots(&self) -> Result<(Range<usize>, Range<usize>)> {
        self.layout
            .reward
            .clone()
            .ok_or_else(|| Error::Capability("model was built without a reward head".into()))
    }

    /// Reward score read from the hidden state at `row`.
    pub fn reward<T: Real>(&self, params: &[T], trace: &Trace<T>, row: usize) -> Result<T> {
        let (w, b) = self.reward_slots()?;
        let hid = trace.hidden(row, self.config.d_model);
        Ok(dot(&params[w], hid) + params[b.start])
    }

    /// Reward of a plain sequence, read at its last token.
    pub fn score<T: Real>(&self, params: &[T], ids: &[TokenId]) -> Result<T> {
        self.reward_slots()?;
        let trace = self.forward(params, &Packed::single(ids))?;
        self.reward(params, &trace, ids.len() - 1)
    }

    /// Chosen and rejected scores of a packed pair in one pass.
    pub fn score_pair<T: Real>(&self, params: &[T], packed: &Packed, rows: &PairRows) -> Result<(T, T)> {
        self.reward_slots()?;
        let trace = self.forward(params, packed)?;
        Ok((
            self.reward(params, &trace, rows.chosen_last)?,
            self.reward(params, &trace, rows.rejected_last)?,
        ))
    }

    /// Scores of every response packed by [`Packed::fanout`].
    pub fn score_fanout<T: Real>(&self, params: &[T], packed: &Packed, last_rows: &[usize]) -> Result<Vec<T>> {
        self.reward_slots()?;
        let trace = self.forward(params, packed)?;
        last_rows.iter().map(|&r| self.reward(params, &trace, r)).collect()
    }

    /// Pushes `dlogits` for `rows` through the LM head.
    pub fn seed_logits<T: Real>(&self, params: &[T], trace: &mut Trace<T>, rows: &[usize], dlogits: &[T], grads: &mut [T]) {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        assert_eq!(dlogits.len(), rows.len() * v);
        let hidden = self.gather(trace, rows);
        matmul(&hidden, Layout::Transposed, dlogits, Layout::Normal, &mut grads[self.layout.lm_head.clone()], d, rows.len(), v, true);
        let mut dh = vec![T::zero(); rows.len() * d];
        matmul(dlogits, Layout::Normal, &params[self.layout.lm_head.clone()], Layout::Transposed, &mut dh, rows.len(), v, d, false);
        for (i, &r) in rows.iter().enumerate() {
            axpy(T::one(), &dh[i * d..(i + 1) * d], &mut trace.d_hidden[r * d..(r + 1) * d]);
        }
        trace.seeded = true;
    }

    /// Pushes `dscore` for the reward read at `row` through the reward head.
    pub fn seed_reward<T: Real>(&self, params: &[T], trace: &mut Trace<T>, row: usize, dscore: T, grads: &mut [T]) -> Result<()> {
        let (w, b) = self.reward_slots()?;
        let d = self.config.d_model;
        let hid = trace.hidden(row, d).to_vec();
        axpy(dscore, &hid, &mut grads[w.clone()]);
        grads[b.start] += dscore;
        axpy(dscore, &params[w], &mut trace.d_hidden[row * d..(row + 1) * d]);
        trace.seeded = true;
        Ok(())
    }

    /// Back-propagates the seeded head gradients through the trunk.
    pub fn backward<T: Real>(&self, params: &[T], trace: &Trace<T>, grads: &mut [T]) -> Result<()> {
        if !trace.seeded {
            return Err(Error::State("no loss gradient was seeded on this forward pass".into()));
        }
        assert_eq!(grads.len(), self.layout.total(), "gradient buffer size");
        let cfg = &self.config;
        let input = &trace.input;
        let (n, d, h, f) = (input.len(), cfg.d_model, cfg.n_heads, 4 * cfg.d_model);
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let mut dx = vec![T::zero(); n * d];
        {
            let (dg, db) = split_pair(grads, &self.layout.lnf_g, &self.layout.lnf_b);
            layer_norm_backward(&trace.lnf, &params[self.layout.lnf_g.clone()], &trace.d_hidden, &mut dx, dg, db);
        }

        let mut dtmp = vec![T::zero(); n * f];
        let mut dnorm = vec![T::zero(); n * d];
        let mut dctx = vec![T::zero(); n * d];
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        for (slots, tr) in self.layout.layers.iter().zip(&trace.layers).rev() {
            // MLP residual branch.
            matmul(&tr.h_act, Layout::Transposed, &dx, Layout::Normal, &mut grads[slots.w2.clone()], f, n, d, true);
            add_col_sums(&dx, &mut grads[slots.b2.clone()]);
            matmul(&dx, Layout::Normal, &params[slots.w2.clone()], Layout::Transposed, &mut dtmp, n, d, f, false);
            for ((g, &x), &th) in dtmp.iter_mut().zip(&tr.h_pre).zip(&tr.h_tanh) {
                *g *= gelu_grad(x, th);
            }
            matmul(&tr.ln2.out, Layout::Transposed, &dtmp, Layout::Normal, &mut grads[slots.w1.clone()], d, n, f, true);
            add_col_sums(&dtmp, &mut grads[slots.b1.clone()]);
            matmul(&dtmp, Layout::Normal, &params[slots.w1.clone()], Layout::Transposed, &mut dnorm, n, f, d, false);
            {
                let (dg, db) = split_pair(grads, &slots.ln2_g, &slots.ln2_b);
                layer_norm_backward(&tr.ln2, &params[slots.ln2_g.clone()], &dnorm, &mut dx, dg, db);
            }

            // Attention residual branch.
            matmul(&tr.ctx, Layout::Transposed, &dx, Layout::Normal, &mut grads[slots.wo.clone()], d, n, d, true);
            add_col_sums(&dx, &mut grads[slots.bo.clone()]);
            matmul(&dx, Layout::Normal, &params[slots.wo.clone()], Layout::Transposed, &mut dctx, n, d, d, false);
            for head in 0..h {
                let p = &tr.probs[head * n * n..(head + 1) * n * n];
                let q = &tr.qkv[head * dh..];
                let k = &tr.qkv[d + head * dh..];
                let v = &tr.qkv[2 * d + head * dh..];
                let dc = &dctx[head * dh..];
                // dP = dctx_h v_h^T
                matmul_strided(n, dh, n, dc, (d, 1), v, (1, 3 * d), &mut dp, (n, 1), false);
                // dV_h = P^T dctx_h
                matmul_strided(n, n, dh, p, (1, n), dc, (d, 1), &mut dqkv[2 * d + head * dh..], (3 * d, 1), false);
                // softmax backward, folded with the score scale
                for i in 0..n {
                    let row_p = &p[i * n..i * n + i + 1];
                    let row_dp = &dp[i * n..i * n + i + 1];
                    let s: T = row_p.iter().zip(row_dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dp[i * n + j] = if j <= i { p[i * n + j] * (dp[i * n + j] - s) * scale } else { T::zero() };
                    }
                }
                // dQ_h = dS k_h ; dK_h = dS^T q_h
                matmul_strided(n, n, dh, &dp, (n, 1), k, (3 * d, 1), &mut dqkv[head * dh..], (3 * d, 1), false);
                matmul_strided(n, n, dh, &dp, (1, n), q, (3 * d, 1), &mut dqkv[d + head * dh..], (3 * d, 1), false);
            }
            matmul(&tr.ln1.out, Layout::Transposed, &dqkv, Layout::Normal, &mut grads[slots.wqkv.clone()], d, n, 3 * d, true);
            add_col_sums(&dqkv, &mut grads[slots.bqkv.clone()]);
            matmul(&dqkv, Layout::Normal, &params[slots.wqkv.clone()], Layout::Transposed, &mut dnorm, n, 3 * d, d, false);
            {
                let (dg, db) = split_pair(grads, &slots.ln1_g, &slots.ln1_b);
                layer_norm_backward(&tr.ln1, &params[slots.ln1_g.clone()], &dnorm, &mut dx, dg, db);
            }
        }

        for t in 0..n {
            let row = &dx[t * d..(t + 1) * d];
            let te = self.layout.tok_emb.start + input.ids[t] as usize * d;
            axpy(T::one(), row, &mut grads[te..te + d]);
            let pe = self.layout.pos_emb.start + input.positions[t] as usize * d;
            axpy(T::one(), row, &mut grads[pe..pe + d]);
        }
        Ok(())
    }
}

/// Disjoint mutable views of two adjacent ranges (`a` immediately before `b`).
fn split_pair<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(a.end, b.start);
    let (left, right) = buf[a.start..b.end].split_at_mut(a.len());
    (left, right)
}

/// Recorded forward passes whose head gradients will be back-propagated together.
pub struct Graph<'a, T: Real> {
    model: &'a Transformer,
    params: &'a [T],
    traces: Vec<Trace<T>>,
    grads: Vec<T>,
}

/// Handle to a forward pass recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(model: &'a Transformer, params: &'a [T]) -> Self {
        Self {
            model,
            params,
            traces: Vec::new(),
            grads: vec![T::zero(); model.layout().total()],
        }
    }

    pub fn forward(&mut self, input: &Packed) -> Result<NodeId> {
        let trace = self.model.forward(self.params, input)?;
        self.traces.push(trace);
        Ok(NodeId(self.traces.len() - 1))
    }

    pub fn logits(&self, node: NodeId, rows: &[usize]) -> Vec<T> {
        self.model.logits(self.params, &self.traces[node.0], rows)
    }

    pub fn reward(&self, node: NodeId, row: usize) -> Result<T> {
        self.model.reward(self.params, &self.traces[node.0], row)
    }

    pub fn seed_logits(&mut self, node: NodeId, rows: &[usize], dlogits: &[T]) {
        self.model
            .seed_logits(self.params, &mut self.traces[node.0], rows, dlogits, &mut self.grads);
    }

    pub fn seed_reward(&mut self, node: NodeId, row: usize, dscore: T) -> Result<()> {
        self.model
            .seed_reward(self.params, &mut self.traces[node.0], row, dscore, &mut self.grads)
    }

    /// Exact gradients of the seeded loss with respect to every parameter.
    pub fn backward(mut self) -> Result<Vec<T>> {
        if self.traces.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        for trace in &self.traces {
            if trace.seeded {
                self.model.backward(self.params, trace, &mut self.grads)?;
            }
        }
        Ok(self.grads)
    }
}
