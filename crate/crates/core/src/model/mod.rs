//! A small GPT-style decoder used as the host for decomposed layers.
//!
//! Pre-norm residual blocks with RMSNorm, multi-head causal attention and a
//! SiLU-gated MLP; learned absolute positions. Each block has seven linear
//! layers (`q, k, v, o, up, gate, down`), addressed globally as
//! `block * 7 + kind`. Inference runs one position at a time over a KV cache,
//! so positions before a split point can run dense (prefill) while later
//! positions run through decomposed layers (decode).

pub mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ColumnMajorMatrix, DecomposedLayer, SparsityPlan};
use crate::linalg::{self, axpy, dot, Matrix, SvdResult};
use crate::scores::{self, ScoreMatrix};
use crate::sparsity::{multiphase_relu, PhaseThresholds};

pub const LINEARS_PER_BLOCK: usize = 7;
pub const INIT_STD: f64 = 0.02;
pub const RMS_EPS: f64 = 1e-5;

/// Observer of every linear-layer input: `(slot, x)`.
type Tap<'a> = &'a mut dyn FnMut(usize, &[f64]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; LINEARS_PER_BLOCK] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Gate,
        LinearKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::O => "o",
            LinearKind::Up => "up",
            LinearKind::Gate => "gate",
            LinearKind::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// n
    pub embed_dim: usize,
    /// m
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            embed_dim: 64,
            hidden_dim: 172,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.num_layers == 0
            || c.embed_dim == 0
            || c.num_heads == 0
            || c.vocab_size == 0
            || c.max_seq_len == 0
        {
            return Err(Error::invalid(format!(
                "model dimensions must be positive: {c:?}"
            )));
        }
        if !c.embed_dim.is_multiple_of(c.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} not divisible by num_heads {}",
                c.embed_dim, c.num_heads
            )));
        }
        if c.hidden_dim <= c.embed_dim {
            return Err(Error::invalid(format!(
                "hidden_dim {} must exceed embed_dim {}",
                c.hidden_dim, c.embed_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_linear_layers(&self) -> usize {
        self.num_layers * LINEARS_PER_BLOCK
    }

    /// `(m_in, m_out)` of a linear kind.
    pub fn linear_shape(&self, kind: LinearKind) -> (usize, usize) {
        let (n, m) = (self.embed_dim, self.hidden_dim);
        match kind {
            LinearKind::Up | LinearKind::Gate => (n, m),
            LinearKind::Down => (m, n),
            _ => (n, n),
        }
    }

    pub fn slot_kind(slot: usize) -> LinearKind {
        LinearKind::ALL[slot % LINEARS_PER_BLOCK]
    }

    pub fn slot_name(slot: usize) -> String {
        format!(
            "blocks.{}.{}",
            slot / LINEARS_PER_BLOCK,
            Self::slot_kind(slot).name()
        )
    }

    /// `(m_in, m_out)` for every linear layer in slot order.
    pub fn linear_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.num_linear_layers())
            .map(|s| self.linear_shape(Self::slot_kind(s)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub mlp_norm: Vec<f64>,
    /// m x n
    pub w_up: Matrix,
    /// m x n
    pub w_gate: Matrix,
    /// n x m
    pub w_down: Matrix,
}

impl BlockWeights {
    fn init(cfg: &ModelConfig, mut mat: impl FnMut(usize, usize) -> Matrix, norm: f64) -> Self {
        let (n, m) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            attn_norm: vec![norm; n],
            w_q: mat(n, n),
            w_k: mat(n, n),
            w_v: mat(n, n),
            w_o: mat(n, n),
            mlp_norm: vec![norm; n],
            w_up: mat(m, n),
            w_gate: mat(m, n),
            w_down: mat(n, m),
        }
    }

    pub fn linear(&self, kind: LinearKind) -> &Matrix {
        match kind {
            LinearKind::Q => &self.w_q,
            LinearKind::K => &self.w_k,
            LinearKind::V => &self.w_v,
            LinearKind::O => &self.w_o,
            LinearKind::Up => &self.w_up,
            LinearKind::Gate => &self.w_gate,
            LinearKind::Down => &self.w_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Matrix {
        match kind {
            LinearKind::Q => &mut self.w_q,
            LinearKind::K => &mut self.w_k,
            LinearKind::V => &mut self.w_v,
            LinearKind::O => &mut self.w_o,
            LinearKind::Up => &mut self.w_up,
            LinearKind::Gate => &mut self.w_gate,
            LinearKind::Down => &mut self.w_down,
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let n = cfg.embed_dim;
        if self.attn_norm.len() != n || self.mlp_norm.len() != n {
            return Err(Error::shape("BlockWeights", n, self.attn_norm.len()));
        }
        for kind in LinearKind::ALL {
            let (m_in, m_out) = cfg.linear_shape(kind);
            let w = self.linear(kind);
            if w.shape() != (m_out, m_in) {
                return Err(Error::shape(
                    "BlockWeights",
                    format!("{m_out}x{m_in}"),
                    w.shape_str(),
                ));
            }
        }
        Ok(())
    }
}

/// Decoder weights. Also used as the gradient container during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// vocab x n
    pub tok_emb: Matrix,
    /// max_seq_len x n
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Vec<f64>,
    /// vocab x n
    pub lm_head: Matrix,
}

impl ToyModel {
    /// Gaussian(0, 0.02) weights and unit norm gains, seeded by `config.seed`.
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mat = |r, c| Matrix::random_normal(r, c, INIT_STD, &mut rng);
        let tok_emb = mat(config.vocab_size, config.embed_dim);
        let pos_emb = mat(config.max_seq_len, config.embed_dim);
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights::init(&config, &mut mat, 1.0))
            .collect();
        let lm_head = mat(config.vocab_size, config.embed_dim);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: vec![1.0; config.embed_dim],
            lm_head,
        })
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(config: ModelConfig) -> Self {
        let n = config.embed_dim;
        Self {
            config,
            tok_emb: Matrix::zeros(config.vocab_size, n),
            pos_emb: Matrix::zeros(config.max_seq_len, n),
            blocks: (0..config.num_layers)
                .map(|_| BlockWeights::init(&config, Matrix::zeros, 0.0))
                .collect(),
            final_norm: vec![0.0; n],
            lm_head: Matrix::zeros(config.vocab_size, n),
        }
    }

    /// Checks that every tensor has the shape its config implies.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.num_layers {
            return Err(Error::shape(
                "ToyModel blocks",
                c.num_layers,
                self.blocks.len(),
            ));
        }
        for b in &self.blocks {
            b.check(c)?;
        }
        let n = c.embed_dim;
        if self.tok_emb.shape() != (c.vocab_size, n)
            || self.pos_emb.shape() != (c.max_seq_len, n)
            || self.lm_head.shape() != (c.vocab_size, n)
            || self.final_norm.len() != n
        {
            return Err(Error::invalid(
                "embedding or head shapes disagree with the config",
            ));
        }
        Ok(())
    }

    pub fn num_linear_layers(&self) -> usize {
        self.config.num_linear_layers()
    }

    pub fn linear(&self, slot: usize) -> &Matrix {
        self.blocks[slot / LINEARS_PER_BLOCK].linear(ModelConfig::slot_kind(slot))
    }

    pub fn linear_mut(&mut self, slot: usize) -> &mut Matrix {
        self.blocks[slot / LINEARS_PER_BLOCK].linear_mut(ModelConfig::slot_kind(slot))
    }

    /// Every parameter tensor in declaration (and file) order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice(), self.pos_emb.as_slice()];
        for b in &self.blocks {
            out.push(&b.attn_norm);
            out.extend([&b.w_q, &b.w_k, &b.w_v, &b.w_o].map(Matrix::as_slice));
            out.push(&b.mlp_norm);
            out.extend([&b.w_up, &b.w_gate, &b.w_down].map(Matrix::as_slice));
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.tok_emb.as_mut_slice(), self.pos_emb.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(b.w_q.as_mut_slice());
            out.push(b.w_k.as_mut_slice());
            out.push(b.w_v.as_mut_slice());
            out.push(b.w_o.as_mut_slice());
            out.push(&mut b.mlp_norm);
            out.push(b.w_up.as_mut_slice());
            out.push(b.w_gate.as_mut_slice());
            out.push(b.w_down.as_mut_slice());
        }
        out.push(&mut self.final_norm);
        out.push(self.lm_head.as_mut_slice());
        out
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::invalid(format!(
                "token {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn apply_linear(&self, slot: usize, x: &[f64], sparse: Option<&DecomposedModel>) -> Vec<f64> {
        match sparse.and_then(|d| d.layer(slot)) {
            Some(layer) => layer.forward_unchecked(x).output,
            None => self.linear(slot).matvec_unchecked(x),
        }
    }

    /// Runs one position through the model, appending to `cache`.
    fn step(
        &self,
        token: u32,
        cache: &mut KvCache,
        sparse: Option<&DecomposedModel>,
        tap: &mut Option<Tap<'_>>,
        want_logits: bool,
    ) -> Option<Vec<f64>> {
        let cfg = &self.config;
        let n = cfg.embed_dim;
        let pos = cache.len;
        let mut x: Vec<f64> = self
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(self.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut linear = |slot: usize, input: &[f64]| {
            if let Some(f) = tap.as_mut() {
                f(slot, input);
            }
            self.apply_linear(slot, input, sparse)
        };
        for (b, block) in self.blocks.iter().enumerate() {
            let base = b * LINEARS_PER_BLOCK;
            let a = rmsnorm(&x, &block.attn_norm).0;
            let q = linear(base, &a);
            let k = linear(base + 1, &a);
            let v = linear(base + 2, &a);
            cache.keys[b].extend_from_slice(&k);
            cache.values[b].extend_from_slice(&v);
            let (o, _) = attend(&q, &cache.keys[b], &cache.values[b], pos + 1, cfg.num_heads);
            let attn = linear(base + 3, &o);
            x.iter_mut().zip(&attn).for_each(|(xi, d)| *xi += d);

            let h_in = rmsnorm(&x, &block.mlp_norm).0;
            let up = linear(base + 4, &h_in);
            let gate = linear(base + 5, &h_in);
            let h: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * silu(*g)).collect();
            let down = linear(base + 6, &h);
            x.iter_mut().zip(&down).for_each(|(xi, d)| *xi += d);
        }
        cache.len += 1;
        debug_assert_eq!(x.len(), n);
        want_logits.then(|| {
            let f = rmsnorm(&x, &self.final_norm).0;
            self.lm_head.matvec_unchecked(&f)
        })
    }

    /// Logits for every position. Positions `>= decode_from` use the
    /// decomposed layers in `sparse` (where present); earlier ones run dense.
    pub fn forward(
        &self,
        tokens: &[u32],
        sparse: Option<&DecomposedModel>,
        decode_from: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        self.check_sparse(sparse)?;
        let mut cache = KvCache::new(&self.config);
        let mut none = None;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let mode = if t >= decode_from { sparse } else { None };
                self.step(tok, &mut cache, mode, &mut none, true)
                    .expect("logits requested")
            })
            .collect())
    }

    /// Dense forward that reports the input of every linear layer as
    /// `tap(slot, input)`.
    pub fn forward_tapped(
        &self,
        tokens: &[u32],
        tap: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(&self.config);
        let mut tap = Some(tap);
        Ok(tokens
            .iter()
            .map(|&tok| {
                self.step(tok, &mut cache, None, &mut tap, true)
                    .expect("logits requested")
            })
            .collect())
    }

    fn check_sparse(&self, sparse: Option<&DecomposedModel>) -> Result<()> {
        if let Some(d) = sparse {
            if d.layers.len() != self.num_linear_layers() {
                return Err(Error::shape(
                    "decomposed model",
                    self.num_linear_layers(),
                    d.layers.len(),
                ));
            }
            for (slot, l) in d.layers.iter().enumerate() {
                if let Some(l) = l {
                    let w = self.linear(slot);
                    if (l.m_out(), l.m_in()) != w.shape() {
                        return Err(Error::shape(
                            "decomposed layer",
                            w.shape_str(),
                            format!("{}x{}", l.m_out(), l.m_in()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs the dense prefill over `tokens[..split]`.
    pub fn prefill(&self, tokens: &[u32], split: usize) -> Result<Prefill> {
        self.check_tokens(tokens)?;
        if split >= tokens.len() {
            return Err(Error::invalid(format!(
                "split point {split} must be below the sequence length {}",
                tokens.len()
            )));
        }
        let mut cache = KvCache::new(&self.config);
        let mut none = None;
        for &tok in &tokens[..split] {
            self.step(tok, &mut cache, None, &mut none, false);
        }
        Ok(Prefill {
            cache,
            tokens: tokens.to_vec(),
            split,
        })
    }

    /// Perplexity of `tokens[t + 1]` given the prefix, over decode positions
    /// `split <= t < len - 1`. Positions before `split` run dense.
    pub fn perplexity(
        &self,
        tokens: &[u32],
        split: usize,
        sparse: Option<&DecomposedModel>,
    ) -> Result<f64> {
        let pre = self.prefill(tokens, split)?;
        self.perplexity_from(&pre, sparse)
    }

    /// Continues a prefill through the decode positions.
    pub fn perplexity_from(&self, pre: &Prefill, sparse: Option<&DecomposedModel>) -> Result<f64> {
        self.check_sparse(sparse)?;
        let tokens = &pre.tokens;
        if pre.split + 1 >= tokens.len() {
            return Err(Error::invalid("no scored positions after the split point"));
        }
        let mut cache = pre.cache.clone();
        let mut none = None;
        let mut nll = 0.0;
        let scored = tokens.len() - 1 - pre.split;
        for t in pre.split..tokens.len() - 1 {
            let logits = self
                .step(tokens[t], &mut cache, sparse, &mut none, true)
                .expect("logits requested");
            nll += cross_entropy(&logits, tokens[t + 1] as usize);
        }
        let ppl = (nll / scored as f64).exp();
        if !ppl.is_finite() {
            return Err(Error::Numerical(format!(
                "perplexity overflowed (mean nll {})",
                nll / scored as f64
            )));
        }
        Ok(ppl)
    }
}

/// Keys and values of every processed position, per block.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cap = cfg.max_seq_len * cfg.embed_dim;
        Self {
            keys: (0..cfg.num_layers)
                .map(|_| Vec::with_capacity(cap))
                .collect(),
            values: (0..cfg.num_layers)
                .map(|_| Vec::with_capacity(cap))
                .collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Dense state after the prefill part of one sequence.
#[derive(Debug, Clone)]
pub struct Prefill {
    cache: KvCache,
    tokens: Vec<u32>,
    split: usize,
}

impl Prefill {
    pub fn split(&self) -> usize {
        self.split
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Returns `(x / rms(x) * gain, x / rms(x), rms(x))`.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let ms = dot(x, x) / x.len() as f64;
    let r = (ms + RMS_EPS).sqrt();
    let xn: Vec<f64> = x.iter().map(|v| v / r).collect();
    let y = xn.iter().zip(gain).map(|(a, g)| a * g).collect();
    (y, xn, r)
}

/// Causal attention of one query over the first `len` cached positions.
/// Returns the concatenated head outputs and, per head, the attention
/// probabilities.
pub(crate) fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    len: usize,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = q.len();
    let dh = n / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dh;
        let qh = &q[lo..lo + dh];
        let mut p: Vec<f64> = (0..len)
            .map(|s| dot(qh, &keys[s * n + lo..s * n + lo + dh]) * scale)
            .collect();
        softmax_in_place(&mut p);
        let oh = &mut out[lo..lo + dh];
        for (s, &ps) in p.iter().enumerate() {
            axpy(ps, &values[s * n + lo..s * n + lo + dh], oh);
        }
        probs.push(p);
    }
    (out, probs)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// The MLP of one block, `W_down (W_up x * silu(W_gate x))`, with any of the
/// three projections optionally replaced by a decomposed layer.
pub fn mlp_forward(
    x: &[f64],
    block: &BlockWeights,
    replace: [Option<&DecomposedLayer>; 3],
) -> Result<Vec<f64>> {
    let n = block.w_up.cols();
    if x.len() != n {
        return Err(Error::shape(
            "mlp_forward",
            block.w_up.shape_str(),
            format!("input of {}", x.len()),
        ));
    }
    let mats = [&block.w_up, &block.w_gate, &block.w_down];
    for (r, w) in replace.iter().zip(mats) {
        if let Some(l) = r {
            if (l.m_out(), l.m_in()) != w.shape() {
                return Err(Error::shape(
                    "mlp_forward",
                    w.shape_str(),
                    format!("{}x{}", l.m_out(), l.m_in()),
                ));
            }
        }
    }
    let apply = |i: usize, v: &[f64]| match replace[i] {
        Some(l) => l.forward_unchecked(v).output,
        None => mats[i].matvec_unchecked(v),
    };
    let up = apply(0, x);
    let gate = apply(1, x);
    let h: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * silu(*g)).collect();
    Ok(apply(2, &h))
}

/// Mean relative error of one phase setting over MLP inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Number of thresholds `l`.
    pub levels: usize,
    pub sparsity: f64,
    pub tokens: usize,
    pub mean_relative_error: f64,
}

/// Applies the multi-phase ReLU to the down-projection input
/// `h = W_up x * silu(W_gate x)` of every block and every token of
/// `sequences`, and reports the mean of `|W_down (sigma_T(h) - h)| / |W_down h|`.
///
/// Thresholds are calibrated per token: `T_0` changes a `sparsity` fraction of
/// `h`, `T_{l-1}` is the token minimum. `t0` overrides the calibrated `T_0`.
pub fn analyze_phases(
    model: &ToyModel,
    sequences: &[Vec<u32>],
    sparsity: f64,
    levels: &[usize],
    t0: Option<f64>,
) -> Result<Vec<PhaseReport>> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::invalid(
            "phase levels must be a non-empty list of counts >= 1",
        ));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::invalid(format!(
            "sparsity {sparsity} outside [0, 1]"
        )));
    }
    let mut hs: Vec<(usize, Vec<f64>)> = Vec::new();
    for seq in sequences {
        model.forward_tapped(seq, &mut |slot, x| {
            if ModelConfig::slot_kind(slot) == LinearKind::Down {
                hs.push((slot / LINEARS_PER_BLOCK, x.to_vec()));
            }
        })?;
    }
    levels
        .iter()
        .map(|&l| {
            let errors = hs
                .par_iter()
                .map(|(b, h)| {
                    let w = &model.blocks[*b].w_down;
                    let t = match t0 {
                        None => PhaseThresholds::calibrated(h, sparsity, l)?,
                        Some(t0) => thresholds_from(h, t0, l)?,
                    };
                    let y = w.matvec_unchecked(h);
                    let diff: Vec<f64> = multiphase_relu(h, &t)
                        .iter()
                        .zip(h)
                        .map(|(a, b)| a - b)
                        .collect();
                    let dy = w.matvec_unchecked(&diff);
                    let denom = linalg::norm2(&y);
                    Ok((denom > 0.0).then(|| linalg::norm2(&dy) / denom))
                })
                .collect::<Result<Vec<_>>>()?;
            let errs: Vec<f64> = errors.into_iter().flatten().collect();
            if errs.is_empty() {
                return Err(Error::Numerical("every MLP output was zero".into()));
            }
            Ok(PhaseReport {
                levels: l,
                sparsity,
                tokens: errs.len(),
                mean_relative_error: errs.iter().sum::<f64>() / errs.len() as f64,
            })
        })
        .collect()
}

/// `T_0 = t0`, `T_{l-1} = min(h)`, interior thresholds evenly spaced. A token
/// entirely at or above `t0` gets the single threshold `t0` (left unchanged).
fn thresholds_from(h: &[f64], t0: f64, levels: usize) -> Result<PhaseThresholds> {
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    if levels == 1 || lo >= t0 {
        return PhaseThresholds::new(vec![t0]);
    }
    let step = (t0 - lo) / (levels - 1) as f64;
    let mut t: Vec<f64> = (0..levels - 1).map(|i| t0 - step * i as f64).collect();
    t.push(lo);
    PhaseThresholds::new(t)
}

/// SVD and aggregated scores of one linear layer.
#[derive(Debug, Clone)]
pub struct LayerProfile {
    pub weight: Arc<ColumnMajorMatrix>,
    pub svd: SvdResult,
    pub scores: ScoreMatrix,
}

/// Per-layer profiles for every linear layer of a model.
#[derive(Debug, Clone)]
pub struct ModelProfile {
    pub layers: Vec<LayerProfile>,
}

impl ModelProfile {
    /// Runs the dense model over `sequences`, collects every linear layer's
    /// inputs, and aggregates the component/channel scores per layer.
    pub fn collect(model: &ToyModel, sequences: &[Vec<u32>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid(
                "profiling needs at least one calibration sequence",
            ));
        }
        let slots = model.num_linear_layers();
        let mut inputs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); slots];
        for seq in sequences {
            model.forward_tapped(seq, &mut |slot, x| inputs[slot].push(x.to_vec()))?;
        }
        let layers = inputs
            .into_par_iter()
            .enumerate()
            .map(|(slot, xs)| {
                let w = model.linear(slot);
                let svd = linalg::svd(w)?;
                let scores = scores::aggregate_scores(&xs, &svd, ModelConfig::slot_name(slot))?;
                Ok(LayerProfile {
                    weight: Arc::new(ColumnMajorMatrix::from_row_major(w)),
                    svd,
                    scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// One optional decomposed layer per linear slot; `None` runs dense.
#[derive(Debug, Clone)]
pub struct DecomposedModel {
    pub layers: Vec<Option<DecomposedLayer>>,
}

impl DecomposedModel {
    /// Decomposes every layer with its plan.
    pub fn build(profile: &ModelProfile, plans: &[SparsityPlan]) -> Result<Self> {
        if plans.len() != profile.layers.len() {
            return Err(Error::shape(
                "DecomposedModel::build",
                profile.layers.len(),
                plans.len(),
            ));
        }
        let layers = profile
            .layers
            .iter()
            .zip(plans)
            .map(|(p, plan)| {
                DecomposedLayer::decompose_with_svd(p.weight.clone(), &p.svd, *plan, &p.scores)
                    .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layer(&self, slot: usize) -> Option<&DecomposedLayer> {
        self.layers.get(slot).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            embed_dim: 8,
            hidden_dim: 12,
            num_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.hidden_dim = 8;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::slot_name(12), "blocks.1.gate");
        assert_eq!(tiny().linear_shapes()[6], (12, 8));
    }

    #[test]
    fn block_shapes() {
        let m = ToyModel::random(tiny()).unwrap();
        m.validate().unwrap();
        let b = &m.blocks[0];
        assert_eq!(b.w_up.shape(), (12, 8));
        assert_eq!(b.w_down.shape(), (8, 12));
        assert_eq!(m.tensors().len(), 2 + 2 * 9 + 2);
    }

    #[test]
    fn mlp_zero_input_is_zero() {
        let m = ToyModel::random(tiny()).unwrap();
        let y = mlp_forward(&[0.0; 8], &m.blocks[0], [None, None, None]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(mlp_forward(&[0.0; 7], &m.blocks[0], [None, None, None]).is_err());
    }

    #[test]
    fn mlp_hand_evaluation_at_dim_two() {
        // identity up/down, gate = 2 I
        let block = BlockWeights {
            attn_norm: vec![1.0; 2],
            w_q: Matrix::identity(2),
            w_k: Matrix::identity(2),
            w_v: Matrix::identity(2),
            w_o: Matrix::identity(2),
            mlp_norm: vec![1.0; 2],
            w_up: Matrix::identity(2),
            w_gate: Matrix::identity(2).scaled(2.0),
            w_down: Matrix::identity(2),
        };
        let y = mlp_forward(&[1.0, -0.5], &block, [None, None, None]).unwrap();
        let e1 = 1.0 * (2.0 / (1.0 + (-2.0f64).exp()));
        let e2 = -0.5 * (-1.0 / (1.0 + 1.0f64.exp()));
        assert!((y[0] - e1).abs() < 1e-15 && (y[1] - e2).abs() < 1e-15);
    }

    #[test]
    fn mlp_with_dense_plan_layers_is_exact() {
        let m = ToyModel::random(tiny()).unwrap();
        let b = &m.blocks[1];
        let mk = |w: &Matrix| {
            let svd = linalg::svd(w).unwrap();
            DecomposedLayer::decompose(w, SparsityPlan::dense(), &ScoreMatrix::uniform(&svd, "t"))
                .unwrap()
        };
        let (u, g, d) = (mk(&b.w_up), mk(&b.w_gate), mk(&b.w_down));
        let x: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) * 0.3).collect();
        let dense = mlp_forward(&x, b, [None, None, None]).unwrap();
        let dec = mlp_forward(&x, b, [Some(&u), Some(&g), Some(&d)]).unwrap();
        for (a, c) in dense.iter().zip(&dec) {
            assert!((a - c).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = ToyModel::random(tiny()).unwrap();
        let logits = m.forward(&[3], None, 0).unwrap();
        assert_eq!(logits.len(), 1);
        assert_eq!(logits[0].len(), 11);
        assert!(m.forward(&[], None, 0).is_err());
        assert!(m.forward(&[11], None, 0).is_err());
        assert!(m.forward(&[0; 17], None, 0).is_err());
    }

    #[test]
    fn forward_is_causal_and_deterministic() {
        let m = ToyModel::random(tiny()).unwrap();
        let a = m.forward(&[1, 2, 3, 4, 5], None, 0).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 0], None, 0).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
        assert_eq!(a, m.forward(&[1, 2, 3, 4, 5], None, 0).unwrap());
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = ToyModel::random(tiny()).unwrap();
        m.lm_head = Matrix::zeros(11, 8);
        let ppl = m.perplexity(&[1, 2, 3, 4, 5, 6], 2, None).unwrap();
        assert!((ppl - 11.0).abs() < 1e-12);
        assert!(m.perplexity(&[1, 2, 3], 2, None).is_err());
        assert!(m.perplexity(&[1, 2, 3], 3, None).is_err());
    }

    #[test]
    fn perplexity_matches_full_forward() {
        let m = ToyModel::random(tiny()).unwrap();
        let toks = [4, 1, 7, 7, 2, 9, 0, 3];
        let logits = m.forward(&toks, None, 0).unwrap();
        let nll: f64 = (3..7)
            .map(|t| cross_entropy(&logits[t], toks[t + 1] as usize))
            .sum();
        let expect = (nll / 4.0).exp();
        assert_eq!(m.perplexity(&toks, 3, None).unwrap(), expect);
    }

    #[test]
    fn decomposed_dense_plan_matches_dense_model() {
        let m = ToyModel::random(tiny()).unwrap();
        let seqs = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let profile = ModelProfile::collect(&m, &seqs).unwrap();
        let plans = vec![SparsityPlan::dense(); m.num_linear_layers()];
        let dec = DecomposedModel::build(&profile, &plans).unwrap();
        let a = m.forward(&seqs[0], None, 0).unwrap();
        let b = m.forward(&seqs[0], Some(&dec), 0).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert!(DecomposedModel::build(&profile, &plans[1..]).is_err());
    }

    #[test]
    fn relu_phase_error_matches_manual_masking() {
        let m = ToyModel::random(tiny()).unwrap();
        let seq = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let rep = analyze_phases(&m, std::slice::from_ref(&seq), 0.9, &[1], Some(0.0)).unwrap();
        let mut errs = Vec::new();
        m.forward_tapped(&seq, &mut |slot, h| {
            if slot % LINEARS_PER_BLOCK == 6 {
                let w = &m.blocks[slot / LINEARS_PER_BLOCK].w_down;
                let y = w.matvec(h).unwrap();
                let relu: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
                let d: Vec<f64> = w
                    .matvec(&relu)
                    .unwrap()
                    .iter()
                    .zip(&y)
                    .map(|(a, b)| a - b)
                    .collect();
                errs.push(linalg::norm2(&d) / linalg::norm2(&y));
            }
        })
        .unwrap();
        let expect = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((rep[0].mean_relative_error - expect).abs() < 1e-12);
        assert_eq!(rep[0].tokens, 16);
        assert!(analyze_phases(&m, std::slice::from_ref(&seq), 0.9, &[], None).is_err());
        assert!(analyze_phases(&m, &[seq], 0.9, &[0], None).is_err());
    }

    #[test]
    fn decode_split_only_affects_later_positions() {
        let m = ToyModel::random(tiny()).unwrap();
        let seq = vec![1, 2, 3, 4, 5, 6, 7, 8];
        let profile = ModelProfile::collect(&m, std::slice::from_ref(&seq)).unwrap();
        let plans = vec![SparsityPlan::new(0.25, 0).unwrap(); m.num_linear_layers()];
        let dec = DecomposedModel::build(&profile, &plans).unwrap();
        let dense = m.forward(&seq, None, 0).unwrap();
        let split = m.forward(&seq, Some(&dec), 4).unwrap();
        assert_eq!(dense[..4], split[..4]);
        assert_ne!(dense[5], split[5]);
    }
}
