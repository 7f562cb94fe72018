//! Low-rank KV caching.
//!
//! When the key and value projections are factored as W = A·B, a decoder
//! cache can hold the r-dimensional latents z_t = B·x_t instead of the
//! d-dimensional key and value vectors, and multiply by A only when
//! attention needs the materialized tensors. Per token that stores
//! r_k + r_v floats instead of 2·d.

use std::collections::BTreeMap;

use crate::decompose::{self, MethodSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tinymodel::{
    causal_attention, rmsnorm_cols, silu_gate, CalibrationSet, LayerKind, LayerRef, LayerSlot,
    TinyModel,
};

/// Latent cache for one block: down-projected key/value states per token,
/// plus the up factors needed to materialize them.
#[derive(Debug, Clone)]
pub struct LowRankKvCache {
    a_k: Matrix,
    b_k: Matrix,
    a_v: Matrix,
    b_v: Matrix,
    capacity: usize,
    zk: Vec<f64>,
    zv: Vec<f64>,
    len: usize,
}

impl LowRankKvCache {
    pub fn new(a_k: Matrix, b_k: Matrix, a_v: Matrix, b_v: Matrix, capacity: usize) -> Result<Self> {
        let d = a_k.rows();
        for (name, a, b) in [("key", &a_k, &b_k), ("value", &a_v, &b_v)] {
            if a.cols() != b.rows() {
                return Err(Error::invalid(format!(
                    "{name} factors do not chain: {}x{} then {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            if a.rows() != d || b.cols() != d {
                return Err(Error::invalid(format!(
                    "{name} factors must map dimension {d} to itself"
                )));
            }
        }
        if capacity == 0 {
            return Err(Error::invalid("cache capacity must be positive".to_string()));
        }
        Ok(LowRankKvCache { a_k, b_k, a_v, b_v, capacity, zk: Vec::new(), zv: Vec::new(), len: 0 })
    }

    /// Build the cache from a model whose key and value projections in
    /// `block` have already been decomposed. Capacity is the model's
    /// maximum sequence length.
    pub fn for_block(model: &TinyModel, block: usize) -> Result<Self> {
        let take = |kind: LayerKind| -> Result<(Matrix, Matrix)> {
            let layer = LayerRef::new(block, kind);
            match model.slot(layer)? {
                LayerSlot::LowRank(d) => Ok((d.a.clone(), d.b.clone())),
                LayerSlot::Dense(_) => Err(Error::invalid(format!(
                    "layer {layer} is dense; decompose it before caching latents"
                ))),
            }
        };
        let (a_k, b_k) = take(LayerKind::KProj)?;
        let (a_v, b_v) = take(LayerKind::VProj)?;
        LowRankKvCache::new(a_k, b_k, a_v, b_v, model.config().max_seq)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rank_k(&self) -> usize {
        self.b_k.rows()
    }

    pub fn rank_v(&self) -> usize {
        self.b_v.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.a_k.rows()
    }

    /// Floats stored per token, against 2·d for a dense cache.
    pub fn latent_floats_per_token(&self) -> usize {
        self.rank_k() + self.rank_v()
    }

    pub fn memory_ratio(&self) -> f64 {
        self.latent_floats_per_token() as f64 / (2 * self.input_dim()) as f64
    }

    /// Push one token's normalized input activations; only the latents
    /// B·x are retained.
    pub fn append_token(&mut self, x: &[f64]) -> Result<()> {
        if self.len == self.capacity {
            return Err(Error::CapacityExceeded(format!(
                "cache holds {} tokens already",
                self.capacity
            )));
        }
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "token activation has {} channels, cache expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        self.zk.extend(self.b_k.matvec(x));
        self.zv.extend(self.b_v.matvec(x));
        self.len += 1;
        Ok(())
    }

    /// Materialize the key and value tensors (d x len) for every cached
    /// token.
    pub fn reconstruct_kv(&self) -> Result<(Matrix, Matrix)> {
        if self.len == 0 {
            return Err(Error::invalid("cache is empty; nothing to reconstruct".to_string()));
        }
        let zk = latent_matrix(&self.zk, self.rank_k(), self.len);
        let zv = latent_matrix(&self.zv, self.rank_v(), self.len);
        Ok((self.a_k.matmul(&zk), self.a_v.matmul(&zv)))
    }
}

fn latent_matrix(data: &[f64], rank: usize, len: usize) -> Matrix {
    Matrix::from_fn(rank, len, |i, t| data[t * rank + i])
}

/// Rank policy for the key/value projections.
#[derive(Debug, Clone)]
pub enum KvRankSpec {
    /// Shared rank r = max(1, floor(ratio * d_model)); a ratio of 1 or
    /// more leaves the model unchanged.
    UniformRatio(f64),
    /// Explicit rank per key/value layer; must cover every one of them.
    PerLayer(BTreeMap<LayerRef, usize>),
}

impl KvRankSpec {
    fn resolve(&self, layer: LayerRef, d: usize) -> Result<Option<usize>> {
        let rank = match self {
            KvRankSpec::UniformRatio(ratio) => {
                if !ratio.is_finite() || *ratio <= 0.0 {
                    return Err(Error::invalid(format!("kv ratio {ratio} must be positive")));
                }
                if *ratio >= 1.0 {
                    return Ok(None);
                }
                ((ratio * d as f64).floor() as usize).max(1)
            }
            KvRankSpec::PerLayer(map) => *map.get(&layer).ok_or_else(|| {
                Error::invalid(format!("kv rank spec does not cover layer {layer}"))
            })?,
        };
        if rank == 0 || rank > d {
            return Err(Error::invalid(format!(
                "kv rank {rank} for layer {layer} is outside 1..={d}"
            )));
        }
        Ok(Some(rank))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockKvRanks {
    pub block: usize,
    pub rank_k: usize,
    pub rank_v: usize,
}

/// Cache footprint of a model; dense projections count at full rank.
#[derive(Debug, Clone)]
pub struct KvMemoryReport {
    pub blocks: Vec<BlockKvRanks>,
    pub dense_floats_per_token: usize,
    pub cached_floats_per_token: usize,
    pub memory_ratio: f64,
}

pub fn kv_memory_report(model: &TinyModel) -> Result<KvMemoryReport> {
    let d = model.config().d_model;
    let mut blocks = Vec::new();
    let mut cached = 0;
    for b in 0..model.config().n_blocks {
        let rank_of = |kind: LayerKind| -> Result<usize> {
            Ok(match model.slot(LayerRef::new(b, kind))? {
                LayerSlot::Dense(_) => d,
                LayerSlot::LowRank(l) => l.rank,
            })
        };
        let rank_k = rank_of(LayerKind::KProj)?;
        let rank_v = rank_of(LayerKind::VProj)?;
        cached += rank_k + rank_v;
        blocks.push(BlockKvRanks { block: b, rank_k, rank_v });
    }
    let dense = 2 * d * model.config().n_blocks;
    Ok(KvMemoryReport {
        blocks,
        dense_floats_per_token: dense,
        cached_floats_per_token: cached,
        memory_ratio: cached as f64 / dense as f64,
    })
}

/// Decompose only the key and value projections of a dense model.
pub fn kv_decompose(
    model: &TinyModel,
    calib: &CalibrationSet,
    spec: &MethodSpec,
    ranks: &KvRankSpec,
) -> Result<(TinyModel, KvMemoryReport)> {
    if let KvRankSpec::PerLayer(map) = ranks {
        for layer in map.keys() {
            if !matches!(layer.kind, LayerKind::KProj | LayerKind::VProj) {
                return Err(Error::invalid(format!(
                    "kv rank spec names non-kv layer {layer}"
                )));
            }
        }
    }
    let d = model.config().d_model;
    let mut out = model.clone();
    for b in 0..model.config().n_blocks {
        for kind in [LayerKind::KProj, LayerKind::VProj] {
            let layer = LayerRef::new(b, kind);
            let Some(rank) = ranks.resolve(layer, d)? else { continue };
            let w = match model.slot(layer)? {
                LayerSlot::Dense(w) => w.clone(),
                LayerSlot::LowRank(_) => {
                    return Err(Error::invalid(format!(
                        "layer {layer} is already decomposed"
                    )));
                }
            };
            let stats = calib.stats.get(&layer);
            let decomposed = decompose::decompose_layer(&w, spec, stats, rank)?;
            out = out.swap_layer(layer, LayerSlot::LowRank(decomposed))?;
        }
    }
    let report = kv_memory_report(&out)?;
    Ok((out, report))
}

/// Output of the incremental cached decode path.
#[derive(Debug, Clone)]
pub struct CachedForward {
    pub logits: Matrix,
    /// Concatenated-head attention output per block.
    pub attn_outputs: Vec<Matrix>,
}

/// Run the model token by token, holding only low-rank latents for keys
/// and values and materializing them at each step. Every key/value
/// projection must already be decomposed.
pub fn generate_with_cache(model: &TinyModel, tokens: &[u32]) -> Result<CachedForward> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence".to_string()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::CapacityExceeded(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab {
            return Err(Error::invalid(format!(
                "token id {t} is outside the vocabulary of {}",
                cfg.vocab
            )));
        }
    }

    let n_blocks = cfg.n_blocks;
    let d = cfg.d_model;
    let mut caches = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        caches.push(LowRankKvCache::for_block(model, b)?);
    }

    let mut q_cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_blocks];
    let mut attn_cols: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_blocks];
    let mut logit_cols: Vec<Vec<f64>> = Vec::new();

    for (t, &tok) in tokens.iter().enumerate() {
        let e = model.embed().row(tok as usize);
        let p = model.pos().row(t);
        let mut x: Vec<f64> = (0..d).map(|i| e[i] + p[i]).collect();

        for b in 0..n_blocks {
            let xcol = Matrix::from_vec(d, 1, x.clone())?;
            let xn = rmsnorm_cols(&xcol, model.attn_norm(b));
            let q = model.slot(LayerRef::new(b, LayerKind::QProj))?.apply(&xn);
            caches[b].append_token(&xn.column(0))?;
            let (k, v) = caches[b].reconstruct_kv()?;
            q_cols[b].push(q.column(0));
            let qm = columns_to_matrix(d, &q_cols[b]);
            let attn = causal_attention(&qm, &k, &v, cfg.n_heads);
            let a_t = attn.column(t);
            attn_cols[b].push(a_t.clone());
            let acol = Matrix::from_vec(d, 1, a_t)?;
            let o = model.slot(LayerRef::new(b, LayerKind::OProj))?.apply(&acol);
            for (xi, oi) in x.iter_mut().zip(o.column(0)) {
                *xi += oi;
            }

            let xcol = Matrix::from_vec(d, 1, x.clone())?;
            let xm = rmsnorm_cols(&xcol, model.mlp_norm(b));
            let gate = model.slot(LayerRef::new(b, LayerKind::GateProj))?.apply(&xm);
            let up = model.slot(LayerRef::new(b, LayerKind::UpProj))?.apply(&xm);
            let act = silu_gate(&gate, &up);
            let down = model.slot(LayerRef::new(b, LayerKind::DownProj))?.apply(&act);
            for (xi, di) in x.iter_mut().zip(down.column(0)) {
                *xi += di;
            }
        }

        let xcol = Matrix::from_vec(d, 1, x)?;
        let hn = rmsnorm_cols(&xcol, model.final_norm());
        let logits = model.embed().matmul(&hn);
        logit_cols.push(logits.column(0));
    }

    Ok(CachedForward {
        logits: columns_to_matrix(cfg.vocab, &logit_cols),
        attn_outputs: attn_cols.iter().map(|c| columns_to_matrix(d, c)).collect(),
    })
}

fn columns_to_matrix(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, t| cols[t][i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tinymodel::{synth_token_batches, TinyModelConfig};

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    fn small_model() -> (TinyModel, CalibrationSet) {
        let cfg = TinyModelConfig {
            vocab: 48,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 32,
            max_seq: 16,
            seed: 3,
        };
        let model = TinyModel::synth(cfg).unwrap();
        let batches = synth_token_batches(48, 3, 2, 12);
        let calib = CalibrationSet::collect(&model, &batches).unwrap();
        (model, calib)
    }

    #[test]
    fn identity_down_projection_reconstructs_dense_kv() {
        let d = 6;
        let mut rng = SplitMix64::new(9);
        let wk = random_matrix(&mut rng, d, d);
        let wv = random_matrix(&mut rng, d, d);
        let eye = Matrix::identity(d);
        let mut cache =
            LowRankKvCache::new(wk.clone(), eye.clone(), wv.clone(), eye, d).unwrap();
        let xs: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect();
        for x in &xs {
            cache.append_token(x).unwrap();
        }
        let (k, v) = cache.reconstruct_kv().unwrap();
        for (t, x) in xs.iter().enumerate() {
            let kx = wk.matvec(x);
            let vx = wv.matvec(x);
            for i in 0..d {
                assert!((k[(i, t)] - kx[i]).abs() < 1e-12);
                assert!((v[(i, t)] - vx[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let d = 4;
        let eye = Matrix::identity(d);
        let mut cache =
            LowRankKvCache::new(eye.clone(), eye.clone(), eye.clone(), eye, 2).unwrap();
        let x = vec![1.0; d];
        cache.append_token(&x).unwrap();
        cache.append_token(&x).unwrap();
        match cache.append_token(&x) {
            Err(Error::CapacityExceeded(_)) => {}
            other => panic!("expected CapacityExceeded, got {other:?}"),
        }
    }

    #[test]
    fn empty_cache_cannot_reconstruct() {
        let eye = Matrix::identity(3);
        let cache = LowRankKvCache::new(eye.clone(), eye.clone(), eye.clone(), eye, 4).unwrap();
        assert!(cache.reconstruct_kv().is_err());
        assert!(cache.is_empty());
    }

    #[test]
    fn mismatched_factors_are_rejected() {
        let a = Matrix::identity(4);
        let b = Matrix::identity(3);
        assert!(LowRankKvCache::new(a.clone(), b, a.clone(), a, 4).is_err());
        let eye = Matrix::identity(4);
        let mut cache =
            LowRankKvCache::new(eye.clone(), eye.clone(), eye.clone(), eye, 4).unwrap();
        assert!(cache.append_token(&[1.0; 3]).is_err());
    }

    #[test]
    fn for_block_requires_decomposed_kv() {
        let (model, _) = small_model();
        match LowRankKvCache::for_block(&model, 0) {
            Err(Error::InvalidArgument(m)) => assert!(m.contains("dense")),
            other => panic!("expected InvalidArgument, got {other:?}"),
        }
    }

    #[test]
    fn cached_decode_matches_batch_forward() {
        let (model, calib) = small_model();
        let spec = MethodSpec::default();
        let (kv_model, report) =
            kv_decompose(&model, &calib, &spec, &KvRankSpec::UniformRatio(0.5)).unwrap();
        assert_eq!(report.memory_ratio, 0.5);

        let tokens = synth_token_batches(48, 11, 1, 12).remove(0);
        let cached = generate_with_cache(&kv_model, &tokens).unwrap();
        let batch = kv_model.forward_traced(&tokens).unwrap();
        assert!(cached.logits.max_abs_diff(&batch.logits) < 1e-12);
        for (a, b) in cached.attn_outputs.iter().zip(&batch.attn_outputs) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }

        // Folding each A*B back into a dense weight only reassociates the
        // products, so the cached path tracks the materialized model too.
        let materialized = kv_model.materialize();
        let dense = materialized.forward_traced(&tokens).unwrap();
        assert!(cached.logits.max_abs_diff(&dense.logits) < 1e-9);
    }

    #[test]
    fn memory_ratio_is_exact() {
        let (model, calib) = small_model();
        let spec = MethodSpec::default();
        let (kv_model, report) =
            kv_decompose(&model, &calib, &spec, &KvRankSpec::UniformRatio(0.25)).unwrap();
        // d_model 16 at ratio 0.25: rank 4 for both projections per block.
        for b in &report.blocks {
            assert_eq!((b.rank_k, b.rank_v), (4, 4));
        }
        assert_eq!(report.dense_floats_per_token, 2 * 16 * 2);
        assert_eq!(report.cached_floats_per_token, 16);
        assert_eq!(report.memory_ratio, 0.25);
        let cache = LowRankKvCache::for_block(&kv_model, 0).unwrap();
        assert_eq!(cache.memory_ratio(), 0.25);
        assert_eq!(cache.capacity(), 16);
    }

    #[test]
    fn uniform_ratio_of_one_is_identity() {
        let (model, calib) = small_model();
        let spec = MethodSpec::default();
        let (same, report) =
            kv_decompose(&model, &calib, &spec, &KvRankSpec::UniformRatio(1.0)).unwrap();
        assert_eq!(report.memory_ratio, 1.0);
        assert_eq!(
            same.to_container().to_bytes(),
            model.to_container().to_bytes()
        );
    }

    #[test]
    fn per_layer_spec_must_cover_and_stay_in_range() {
        let (model, calib) = small_model();
        let spec = MethodSpec::default();
        let mut map = BTreeMap::new();
        map.insert(LayerRef::new(0, LayerKind::KProj), 2usize);
        let partial = KvRankSpec::PerLayer(map.clone());
        assert!(kv_decompose(&model, &calib, &spec, &partial).is_err());

        for b in 0..2 {
            map.insert(LayerRef::new(b, LayerKind::KProj), 2);
            map.insert(LayerRef::new(b, LayerKind::VProj), 3);
        }
        let full = KvRankSpec::PerLayer(map.clone());
        let (_, report) = kv_decompose(&model, &calib, &spec, &full).unwrap();
        assert_eq!(report.cached_floats_per_token, 2 * (2 + 3));

        map.insert(LayerRef::new(0, LayerKind::QProj), 2);
        assert!(kv_decompose(&model, &calib, &spec, &KvRankSpec::PerLayer(map.clone())).is_err());
        map.remove(&LayerRef::new(0, LayerKind::QProj));
        map.insert(LayerRef::new(0, LayerKind::KProj), 17);
        assert!(kv_decompose(&model, &calib, &spec, &KvRankSpec::PerLayer(map)).is_err());
    }

    #[test]
    fn dense_model_reports_full_cache() {
        let (model, _) = small_model();
        let report = kv_memory_report(&model).unwrap();
        assert_eq!(report.memory_ratio, 1.0);
        assert_eq!(report.cached_floats_per_token, report.dense_floats_per_token);
    }
}
