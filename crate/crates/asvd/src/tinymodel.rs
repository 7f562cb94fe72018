//! A small deterministic decoder-only transformer used as the compression
//! harness.
//!
//! Architecture per block: RMSNorm -> causal multi-head attention -> residual
//! add -> RMSNorm -> gated MLP (SiLU gate times up, then down) -> residual
//! add. Token and absolute position embeddings are summed at the input; the
//! output head is tied to the token embedding. Activations are laid out
//! channels x tokens, so every projection is a plain left-multiplication
//! `Y = W X`.
//!
//! Weights are synthesized from a seed: each tensor draws from its own
//! named [`crate::rng::stream`], uniform in (-1/sqrt(cols), 1/sqrt(cols)),
//! rounded to f32 precision so a container round trip is lossless.

use std::collections::BTreeMap;
use std::fmt;

use crate::container::TensorContainer;
use crate::decompose::{Absorption, DecomposedLayer, Method};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;
use crate::rng;
use crate::stats::ActivationStats;

pub const RMS_EPS: f64 = 1e-6;

/// The seven projection layers of a block that are eligible for low-rank
/// substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LayerKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::QProj,
        LayerKind::KProj,
        LayerKind::VProj,
        LayerKind::OProj,
        LayerKind::GateProj,
        LayerKind::UpProj,
        LayerKind::DownProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::QProj => "q_proj",
            LayerKind::KProj => "k_proj",
            LayerKind::VProj => "v_proj",
            LayerKind::OProj => "o_proj",
            LayerKind::GateProj => "gate_proj",
            LayerKind::UpProj => "up_proj",
            LayerKind::DownProj => "down_proj",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        LayerKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    /// Weight shape (rows, cols) for `Y = W X`.
    pub fn shape(self, config: &TinyModelConfig) -> (usize, usize) {
        let d = config.d_model;
        let f = config.d_ff;
        match self {
            LayerKind::QProj | LayerKind::KProj | LayerKind::VProj | LayerKind::OProj => (d, d),
            LayerKind::GateProj | LayerKind::UpProj => (f, d),
            LayerKind::DownProj => (d, f),
        }
    }
}

/// Addresses one projection layer: block index plus kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LayerRef {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerRef {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        LayerRef { block, kind }
    }

    pub fn parse(s: &str) -> Option<LayerRef> {
        let rest = s.strip_prefix("blocks/")?;
        let (idx, kind) = rest.split_once('/')?;
        Some(LayerRef { block: idx.parse().ok()?, kind: LayerKind::parse(kind)? })
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks/{}/{}", self.block, self.kind.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for TinyModelConfig {
    fn default() -> Self {
        TinyModelConfig {
            vocab: 256,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 128,
            max_seq: 128,
            seed: 0,
        }
    }
}

impl TinyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::invalid("vocab must be at least 2".to_string()));
        }
        // Token ids are persisted as f32; stay within its exact-integer range.
        if self.vocab > (1 << 24) {
            return Err(Error::invalid("vocab must not exceed 2^24".to_string()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive".to_string()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::invalid("max_seq must be positive".to_string()));
        }
        Ok(())
    }
}

/// A projection layer is either the original dense weight or a low-rank
/// substitute.
#[derive(Debug, Clone)]
pub enum LayerSlot {
    Dense(Matrix),
    LowRank(DecomposedLayer),
}

impl LayerSlot {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            LayerSlot::Dense(w) => w.matmul(x),
            LayerSlot::LowRank(d) => d.apply(x),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerSlot::Dense(w) => w.shape(),
            LayerSlot::LowRank(d) => (d.out_dim(), d.in_dim()),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: Vec<f64>,
    mlp_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    config: TinyModelConfig,
    embed: Matrix,
    pos: Matrix,
    blocks: Vec<Block>,
    final_norm: Vec<f64>,
    layers: BTreeMap<LayerRef, LayerSlot>,
}

/// Everything the forward pass can expose for one token batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Matrix,
    /// Input activations per eligible layer (channels x tokens).
    pub layer_inputs: BTreeMap<LayerRef, Matrix>,
    /// Concatenated-head attention output per block, before the output
    /// projection.
    pub attn_outputs: Vec<Matrix>,
}

impl TinyModel {
    /// Deterministically synthesize a model from its config seed.
    pub fn synth(config: TinyModelConfig) -> Result<TinyModel> {
        config.validate()?;
        let seed = config.seed;
        let embed = synth_tensor(seed, "embed", config.vocab, config.d_model);
        let pos = synth_tensor(seed, "pos", config.max_seq, config.d_model);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut layers = BTreeMap::new();
        for b in 0..config.n_blocks {
            blocks.push(Block {
                attn_norm: vec![1.0; config.d_model],
                mlp_norm: vec![1.0; config.d_model],
            });
            for kind in LayerKind::ALL {
                let layer = LayerRef::new(b, kind);
                let (rows, cols) = kind.shape(&config);
                let w = synth_tensor(seed, &layer.to_string(), rows, cols);
                layers.insert(layer, LayerSlot::Dense(w));
            }
        }
        let final_norm = vec![1.0; config.d_model];
        Ok(TinyModel { config, embed, pos, blocks, final_norm, layers })
    }

    pub fn config(&self) -> &TinyModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &Matrix {
        &self.embed
    }

    pub fn pos(&self) -> &Matrix {
        &self.pos
    }

    pub fn attn_norm(&self, block: usize) -> &[f64] {
        &self.blocks[block].attn_norm
    }

    pub fn mlp_norm(&self, block: usize) -> &[f64] {
        &self.blocks[block].mlp_norm
    }

    pub fn final_norm(&self) -> &[f64] {
        &self.final_norm
    }

    /// Replace the token embedding (test scaffolding for degenerate models).
    pub fn with_embed(mut self, embed: Matrix) -> Result<TinyModel> {
        if embed.shape() != (self.config.vocab, self.config.d_model) {
            return Err(Error::invalid(format!(
                "embedding shape {:?} does not match config",
                embed.shape()
            )));
        }
        self.embed = embed;
        Ok(self)
    }

    /// Replace the positional table (test scaffolding).
    pub fn with_pos(mut self, pos: Matrix) -> Result<TinyModel> {
        if pos.shape() != (self.config.max_seq, self.config.d_model) {
            return Err(Error::invalid(format!(
                "positional table shape {:?} does not match config",
                pos.shape()
            )));
        }
        self.pos = pos;
        Ok(self)
    }

    /// All substitutable projection layers, in block-then-kind order.
    pub fn eligible_layers(&self) -> Vec<LayerRef> {
        self.layers.keys().copied().collect()
    }

    pub fn slot(&self, layer: LayerRef) -> Result<&LayerSlot> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("model has no layer {layer}")))
    }

    /// Functional update: returns a copy with one layer replaced. The slot
    /// shape must match the layer's dense shape.
    pub fn swap_layer(&self, layer: LayerRef, slot: LayerSlot) -> Result<TinyModel> {
        let expected = match self.layers.get(&layer) {
            Some(s) => s.shape(),
            None => return Err(Error::invalid(format!("model has no layer {layer}"))),
        };
        if slot.shape() != expected {
            return Err(Error::invalid(format!(
                "slot shape {:?} does not match layer {layer} shape {:?}",
                slot.shape(),
                expected
            )));
        }
        if let LayerSlot::LowRank(d) = &slot {
            if d.rank == 0 || d.a.cols() != d.rank || d.b.rows() != d.rank {
                return Err(Error::invalid(format!(
                    "inconsistent low-rank factors for layer {layer}"
                )));
            }
        }
        let mut next = self.clone();
        next.layers.insert(layer, slot);
        Ok(next)
    }

    /// Collapse every low-rank slot into its dense product.
    pub fn materialize(&self) -> TinyModel {
        let mut next = self.clone();
        for (_, slot) in next.layers.iter_mut() {
            if let LayerSlot::LowRank(d) = slot {
                *slot = LayerSlot::Dense(d.effective_weight());
            }
        }
        next
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty".to_string()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::invalid(format!(
                "token id {t} is outside the vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, channels x tokens.
    pub(crate) fn embed_sequence(&self, tokens: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut h = Matrix::zeros(d, tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.embed.row(tok as usize);
            let p = self.pos.row(t);
            for i in 0..d {
                h.set(i, t, e[i] + p[i]);
            }
        }
        h
    }

    fn forward_impl(&self, tokens: &[u32], capture: bool) -> Result<(Matrix, Option<ForwardTrace>)> {
        self.check_tokens(tokens)?;
        let mut h = self.embed_sequence(tokens);
        let mut layer_inputs = BTreeMap::new();
        let mut attn_outputs = Vec::new();

        for (b, block) in self.blocks.iter().enumerate() {
            let xn = rmsnorm_cols(&h, &block.attn_norm);
            if capture {
                for kind in [LayerKind::QProj, LayerKind::KProj, LayerKind::VProj] {
                    layer_inputs.insert(LayerRef::new(b, kind), xn.clone());
                }
            }
            let q = self.slot(LayerRef::new(b, LayerKind::QProj))?.apply(&xn);
            let k = self.slot(LayerRef::new(b, LayerKind::KProj))?.apply(&xn);
            let v = self.slot(LayerRef::new(b, LayerKind::VProj))?.apply(&xn);
            let attn = causal_attention(&q, &k, &v, self.config.n_heads);
            if capture {
                layer_inputs.insert(LayerRef::new(b, LayerKind::OProj), attn.clone());
                attn_outputs.push(attn.clone());
            }
            let o = self.slot(LayerRef::new(b, LayerKind::OProj))?.apply(&attn);
            h = h.add(&o);

            let xm = rmsnorm_cols(&h, &block.mlp_norm);
            if capture {
                for kind in [LayerKind::GateProj, LayerKind::UpProj] {
                    layer_inputs.insert(LayerRef::new(b, kind), xm.clone());
                }
            }
            let gate = self.slot(LayerRef::new(b, LayerKind::GateProj))?.apply(&xm);
            let up = self.slot(LayerRef::new(b, LayerKind::UpProj))?.apply(&xm);
            let act = silu_gate(&gate, &up);
            if capture {
                layer_inputs.insert(LayerRef::new(b, LayerKind::DownProj), act.clone());
            }
            let down = self.slot(LayerRef::new(b, LayerKind::DownProj))?.apply(&act);
            h = h.add(&down);
        }

        let hn = rmsnorm_cols(&h, &self.final_norm);
        let logits = self.embed.matmul(&hn);
        let trace = capture.then(|| ForwardTrace {
            logits: logits.clone(),
            layer_inputs,
            attn_outputs,
        });
        Ok((logits, trace))
    }

    /// Logits (vocab x tokens) for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_impl(tokens, false)?.0)
    }

    /// Forward pass that also captures per-layer inputs and attention
    /// outputs.
    pub fn forward_traced(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        Ok(self.forward_impl(tokens, true)?.1.expect("capture requested"))
    }

    /// Next-token perplexity over one sequence (needs at least 2 tokens).
    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64> {
        let (nll, count) = self.nll_sum(tokens)?;
        Ok((nll / count as f64).exp())
    }

    /// Token-weighted perplexity across several sequences.
    pub fn perplexity_batches(&self, batches: &[Vec<u32>]) -> Result<f64> {
        if batches.is_empty() {
            return Err(Error::invalid("no calibration batches".to_string()));
        }
        let sums: Vec<Result<(f64, usize)>> =
            par::par_map(batches.to_vec(), |b| self.nll_sum(&b));
        let mut nll = 0.0;
        let mut count = 0usize;
        for s in sums {
            let (n, c) = s?;
            nll += n;
            count += c;
        }
        Ok((nll / count as f64).exp())
    }

    fn nll_sum(&self, tokens: &[u32]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::invalid(
                "perplexity needs at least 2 tokens".to_string(),
            ));
        }
        let logits = self.forward(tokens)?;
        let mut nll = 0.0;
        for t in 0..tokens.len() - 1 {
            let col = logits.column(t);
            let target = tokens[t + 1] as usize;
            nll += log_sum_exp(&col) - col[target];
        }
        Ok((nll, tokens.len() - 1))
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.set_meta("format", "tiny_model");
        c.set_meta("config/vocab", &self.config.vocab.to_string());
        c.set_meta("config/d_model", &self.config.d_model.to_string());
        c.set_meta("config/n_heads", &self.config.n_heads.to_string());
        c.set_meta("config/n_blocks", &self.config.n_blocks.to_string());
        c.set_meta("config/d_ff", &self.config.d_ff.to_string());
        c.set_meta("config/max_seq", &self.config.max_seq.to_string());
        c.set_meta("config/seed", &self.config.seed.to_string());
        c.insert("embed", &self.embed).expect("fresh container");
        c.insert("pos", &self.pos).expect("fresh container");
        for (b, block) in self.blocks.iter().enumerate() {
            c.insert(&format!("blocks/{b}/attn_norm"), &row_matrix(&block.attn_norm))
                .expect("fresh container");
            c.insert(&format!("blocks/{b}/mlp_norm"), &row_matrix(&block.mlp_norm))
                .expect("fresh container");
        }
        c.insert("final_norm", &row_matrix(&self.final_norm)).expect("fresh container");
        for (layer, slot) in &self.layers {
            let name = layer.to_string();
            match slot {
                LayerSlot::Dense(w) => {
                    c.insert(&name, w).expect("fresh container");
                }
                LayerSlot::LowRank(d) => {
                    c.insert(&format!("{name}/a"), &d.a).expect("fresh container");
                    c.insert(&format!("{name}/b"), &d.b).expect("fresh container");
                    c.set_meta(&format!("layer/{name}/method"), d.method.as_str());
                    c.set_meta(&format!("layer/{name}/absorption"), d.absorption.as_str());
                }
            }
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<TinyModel> {
        if c.meta_value("format") != Some("tiny_model") {
            return Err(Error::format("container is not a tiny_model".to_string()));
        }
        let config = TinyModelConfig {
            vocab: meta_usize(c, "config/vocab")?,
            d_model: meta_usize(c, "config/d_model")?,
            n_heads: meta_usize(c, "config/n_heads")?,
            n_blocks: meta_usize(c, "config/n_blocks")?,
            d_ff: meta_usize(c, "config/d_ff")?,
            max_seq: meta_usize(c, "config/max_seq")?,
            seed: meta_u64(c, "config/seed")?,
        };
        config.validate().map_err(|e| Error::format(e.to_string()))?;

        let embed = expect_shape(c, "embed", (config.vocab, config.d_model))?;
        let pos = expect_shape(c, "pos", (config.max_seq, config.d_model))?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut layers = BTreeMap::new();
        for b in 0..config.n_blocks {
            let attn_norm = expect_shape(c, &format!("blocks/{b}/attn_norm"), (1, config.d_model))?;
            let mlp_norm = expect_shape(c, &format!("blocks/{b}/mlp_norm"), (1, config.d_model))?;
            blocks.push(Block {
                attn_norm: attn_norm.data().to_vec(),
                mlp_norm: mlp_norm.data().to_vec(),
            });
            for kind in LayerKind::ALL {
                let layer = LayerRef::new(b, kind);
                let name = layer.to_string();
                let (rows, cols) = kind.shape(&config);
                let slot = if c.contains(&name) {
                    LayerSlot::Dense(expect_shape(c, &name, (rows, cols))?)
                } else if c.contains(&format!("{name}/a")) {
                    let a = c.get(&format!("{name}/a"))?;
                    let bm = c.get(&format!("{name}/b"))?;
                    if a.rows() != rows || bm.cols() != cols || a.cols() != bm.rows() {
                        return Err(Error::format(format!(
                            "layer {name}: factor shapes {:?} x {:?} do not compose to {rows}x{cols}",
                            a.shape(),
                            bm.shape()
                        )));
                    }
                    let method = c
                        .meta_value(&format!("layer/{name}/method"))
                        .and_then(Method::parse)
                        .ok_or_else(|| {
                            Error::format(format!("layer {name}: missing or unknown method"))
                        })?;
                    let absorption = c
                        .meta_value(&format!("layer/{name}/absorption"))
                        .and_then(Absorption::parse)
                        .ok_or_else(|| {
                            Error::format(format!("layer {name}: missing or unknown absorption"))
                        })?;
                    let rank = a.cols();
                    LayerSlot::LowRank(DecomposedLayer { a, b: bm, rank, method, absorption })
                } else {
                    return Err(Error::format(format!("layer {name} is missing")));
                };
                layers.insert(layer, slot);
            }
        }
        let final_norm = expect_shape(c, "final_norm", (1, config.d_model))?.data().to_vec();
        Ok(TinyModel { config, embed, pos, blocks, final_norm, layers })
    }
}

fn synth_tensor(seed: u64, name: &str, rows: usize, cols: usize) -> Matrix {
    let mut g = rng::stream(seed, name);
    let bound = 1.0 / (cols as f64).sqrt();
    // Round through f32 so the stored form is exactly the generated form.
    Matrix::from_fn(rows, cols, |_, _| g.uniform(-bound, bound) as f32 as f64)
}

fn row_matrix(v: &[f64]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, j| v[j])
}

fn meta_usize(c: &TensorContainer, key: &str) -> Result<usize> {
    c.meta_value(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(format!("missing or invalid meta key '{key}'")))
}

fn meta_u64(c: &TensorContainer, key: &str) -> Result<u64> {
    c.meta_value(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(format!("missing or invalid meta key '{key}'")))
}

fn expect_shape(c: &TensorContainer, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let m = c.get(name)?;
    if m.shape() != shape {
        return Err(Error::format(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            m.shape(),
            shape
        )));
    }
    Ok(m)
}

/// RMS-normalize each column: `x / sqrt(mean(x^2) + eps)`, then scale per
/// channel by `gain`.
pub(crate) fn rmsnorm_cols(x: &Matrix, gain: &[f64]) -> Matrix {
    let (d, t) = x.shape();
    debug_assert_eq!(d, gain.len());
    let mut out = Matrix::zeros(d, t);
    for c in 0..t {
        let mut ms = 0.0;
        for i in 0..d {
            let v = x.get(i, c);
            ms += v * v;
        }
        let denom = (ms / d as f64 + RMS_EPS).sqrt();
        for i in 0..d {
            out.set(i, c, x.get(i, c) / denom * gain[i]);
        }
    }
    out
}

pub(crate) fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Elementwise `silu(gate) * up`.
pub(crate) fn silu_gate(gate: &Matrix, up: &Matrix) -> Matrix {
    debug_assert_eq!(gate.shape(), up.shape());
    let mut out = gate.clone();
    for (o, u) in out.data_mut().iter_mut().zip(up.data()) {
        *o = silu(*o) * u;
    }
    out
}

/// Causal multi-head attention over channels x tokens inputs. Scores are
/// scaled by 1/sqrt(head_dim); position `t` attends to positions `0..=t`.
pub(crate) fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Matrix {
    let (d, t_len) = q.shape();
    debug_assert_eq!(k.shape(), (d, t_len));
    debug_assert_eq!(v.shape(), (d, t_len));
    debug_assert_eq!(d % n_heads, 0);
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(d, t_len);
    for h in 0..n_heads {
        let base = h * hd;
        for t in 0..t_len {
            let mut scores = Vec::with_capacity(t + 1);
            for j in 0..=t {
                let mut dot = 0.0;
                for r in 0..hd {
                    dot += q.get(base + r, t) * k.get(base + r, j);
                }
                scores.push(dot * scale);
            }
            let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            for (j, &w) in scores.iter().enumerate() {
                let wz = w / z;
                for r in 0..hd {
                    let cur = out.get(base + r, t);
                    out.set(base + r, t, cur + wz * v.get(base + r, j));
                }
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Deterministic calibration token batches drawn from the `tokens/<i>`
/// streams of `seed`.
pub fn synth_token_batches(vocab: usize, seed: u64, batches: usize, len: usize) -> Vec<Vec<u32>> {
    (0..batches)
        .map(|b| {
            let mut g = rng::stream(seed, &format!("tokens/{b}"));
            (0..len).map(|_| g.below(vocab as u64) as u32).collect()
        })
        .collect()
}

/// Calibration batches plus the per-layer activation statistics they
/// induce under a given model.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub batches: Vec<Vec<u32>>,
    pub stats: BTreeMap<LayerRef, ActivationStats>,
}

impl CalibrationSet {
    /// Run the model over every batch and accumulate per-layer stats.
    /// Batches are processed independently and merged in order, so the
    /// result is identical at any thread count.
    pub fn collect(model: &TinyModel, batches: &[Vec<u32>]) -> Result<CalibrationSet> {
        if batches.is_empty() {
            return Err(Error::invalid("no calibration batches".to_string()));
        }
        for b in batches {
            if b.len() < 2 {
                return Err(Error::invalid(
                    "calibration batches need at least 2 tokens".to_string(),
                ));
            }
        }
        let traces: Vec<Result<BTreeMap<LayerRef, ActivationStats>>> =
            par::par_map(batches.to_vec(), |b| {
                let trace = model.forward_traced(&b)?;
                Ok(trace
                    .layer_inputs
                    .iter()
                    .map(|(l, x)| (*l, ActivationStats::from_activations(x)))
                    .collect())
            });
        let mut stats: BTreeMap<LayerRef, ActivationStats> = BTreeMap::new();
        for t in traces {
            for (layer, s) in t? {
                let merged = match stats.get(&layer) {
                    Some(acc) => acc.merge(&s)?,
                    None => s,
                };
                stats.insert(layer, merged);
            }
        }
        Ok(CalibrationSet { batches: batches.to_vec(), stats })
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.set_meta("format", "calibration");
        c.set_meta("batches", &self.batches.len().to_string());
        for (i, b) in self.batches.iter().enumerate() {
            let m = Matrix::from_fn(1, b.len(), |_, j| b[j] as f64);
            c.insert(&format!("tokens/{i}"), &m).expect("fresh container");
        }
        for (layer, s) in &self.stats {
            let base = format!("stats/{layer}");
            c.insert(&format!("{base}/abs_mean"), &row_matrix(s.abs_mean()))
                .expect("fresh container");
            c.insert(&format!("{base}/abs_max"), &row_matrix(s.abs_max()))
                .expect("fresh container");
            c.insert(&format!("{base}/gram"), s.gram()).expect("fresh container");
            c.set_meta(&format!("{base}/token_count"), &s.token_count().to_string());
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<CalibrationSet> {
        if c.meta_value("format") != Some("calibration") {
            return Err(Error::format("container is not a calibration set".to_string()));
        }
        let n_batches = meta_usize(c, "batches")?;
        let mut batches = Vec::with_capacity(n_batches);
        for i in 0..n_batches {
            let m = c.get(&format!("tokens/{i}"))?;
            let mut b = Vec::with_capacity(m.cols());
            for &v in m.data() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::format(format!(
                        "tokens/{i} holds a non-token value {v}"
                    )));
                }
                b.push(v as u32);
            }
            batches.push(b);
        }
        let mut stats = BTreeMap::new();
        let names: Vec<String> = c.names().map(|s| s.to_string()).collect();
        for name in names {
            if let Some(layer_name) = name
                .strip_prefix("stats/")
                .and_then(|rest| rest.strip_suffix("/gram"))
            {
                let layer = LayerRef::parse(layer_name).ok_or_else(|| {
                    Error::format(format!("unknown layer name '{layer_name}' in stats"))
                })?;
                let base = format!("stats/{layer_name}");
                let abs_mean = c.get(&format!("{base}/abs_mean"))?.data().to_vec();
                let abs_max = c.get(&format!("{base}/abs_max"))?.data().to_vec();
                let gram = c.get(&format!("{base}/gram"))?;
                let token_count = meta_usize(c, &format!("{base}/token_count"))?;
                let s = ActivationStats::from_parts(abs_mean, abs_max, gram, token_count)
                    .map_err(|e| Error::format(e.to_string()))?;
                stats.insert(layer, s);
            }
        }
        if stats.is_empty() {
            return Err(Error::format("calibration container holds no stats".to_string()));
        }
        Ok(CalibrationSet { batches, stats })
    }
}
