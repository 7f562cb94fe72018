//! Low-rank decomposition of linear layers.
//!
//! A layer `y = W x` is replaced by `y = A (B x)` with `A` m x k and `B`
//! k x n. The factors come from a truncated SVD of the transformed weight
//! `W S`; the right factor is pulled back through `S^{-1}` so the product
//! `A B` approximates `W` itself. With the whitening transform this
//! truncation minimizes the output error `||(A B - W) X||_F` over all
//! rank-k factorizations, not just the weight error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::ActivationStats;
use crate::svd;
use crate::tinymodel::{LayerRef, LayerSlot, TinyModel};
use crate::transform::{ScalingTransform, StatKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain truncated SVD of `W`.
    Svd,
    /// Diagonal activation-magnitude scaling.
    Asvd,
    /// Whitening by the Cholesky factor of the activation Gram.
    AsvdPlus,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Svd => "svd",
            Method::Asvd => "asvd",
            Method::AsvdPlus => "asvd_plus",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "svd" => Some(Method::Svd),
            "asvd" => Some(Method::Asvd),
            "asvd_plus" => Some(Method::AsvdPlus),
            _ => None,
        }
    }
}

/// Where the singular values go when forming the stored factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Absorption {
    /// `A = U sqrt(S)`, `B = sqrt(S) V`. Balances factor magnitudes, which
    /// keeps per-row quantization scales comparable on both sides.
    SqrtSplit,
    /// `A = U S`, `B = V`.
    IntoU,
    /// `A = U`, `B = S V`.
    IntoV,
}

impl Absorption {
    pub fn as_str(self) -> &'static str {
        match self {
            Absorption::SqrtSplit => "sqrt_split",
            Absorption::IntoU => "into_u",
            Absorption::IntoV => "into_v",
        }
    }

    pub fn parse(s: &str) -> Option<Absorption> {
        match s {
            "sqrt_split" => Some(Absorption::SqrtSplit),
            "into_u" => Some(Absorption::IntoU),
            "into_v" => Some(Absorption::IntoV),
            _ => None,
        }
    }
}

/// Full recipe for decomposing a layer.
#[derive(Debug, Clone, Copy)]
pub struct MethodSpec {
    pub method: Method,
    pub stat: StatKind,
    pub alpha: f64,
    pub absorption: Absorption,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            method: Method::Asvd,
            stat: StatKind::AbsMean,
            alpha: 0.5,
            absorption: Absorption::SqrtSplit,
        }
    }
}

/// A linear layer replaced by two factors: effective weight is `a * b`.
#[derive(Debug, Clone)]
pub struct DecomposedLayer {
    pub a: Matrix,
    pub b: Matrix,
    pub rank: usize,
    pub method: Method,
    pub absorption: Absorption,
}

impl DecomposedLayer {
    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    /// `A (B x)`, the two-matmul inference path.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        self.a.matmul(&self.b.matmul(x))
    }

    /// Materialized product `A B`.
    pub fn effective_weight(&self) -> Matrix {
        self.a.matmul(&self.b)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.out_dim() + self.in_dim())
    }
}

/// Transform plus full SVD of the transformed weight, ready to truncate at
/// any rank. Profiling reuses one of these across a whole rank grid.
#[derive(Debug, Clone)]
pub struct PreparedLayer {
    method: Method,
    u: Matrix,
    singular: Vec<f64>,
    vt_scaled: Matrix,
    transform: ScalingTransform,
}

/// Build the transform a method spec asks for. `Svd` needs no statistics;
/// the activation-aware methods require them.
pub fn build_transform(
    spec: &MethodSpec,
    stats: Option<&ActivationStats>,
    in_dim: usize,
) -> Result<ScalingTransform> {
    match spec.method {
        Method::Svd => Ok(ScalingTransform::identity(in_dim)),
        Method::Asvd => {
            let stats = stats.ok_or_else(|| {
                Error::invalid("asvd scaling requires activation statistics".to_string())
            })?;
            ScalingTransform::from_stats(stats, spec.stat, spec.alpha)
        }
        Method::AsvdPlus => {
            let stats = stats.ok_or_else(|| {
                Error::invalid("asvd_plus whitening requires activation statistics".to_string())
            })?;
            ScalingTransform::whitening(stats)
        }
    }
}

/// Transform the weight and take its full SVD once.
pub fn prepare_layer(
    w: &Matrix,
    spec: &MethodSpec,
    stats: Option<&ActivationStats>,
) -> Result<PreparedLayer> {
    let transform = build_transform(spec, stats, w.cols())?;
    if stats.map_or(false, |s| s.channels() != w.cols()) {
        return Err(Error::invalid(format!(
            "stats cover {} channels but the weight has {} input columns",
            stats.unwrap().channels(),
            w.cols()
        )));
    }
    let scaled = transform.apply_right(w)?;
    let f = svd::svd(&scaled)?;
    Ok(PreparedLayer {
        method: spec.method,
        u: f.u,
        singular: f.singular,
        vt_scaled: f.vt,
        transform,
    })
}

impl PreparedLayer {
    pub fn max_rank(&self) -> usize {
        self.singular.len()
    }

    /// Truncate to rank `k` and absorb the singular values.
    pub fn truncate(&self, k: usize, absorption: Absorption) -> Result<DecomposedLayer> {
        if k == 0 || k > self.max_rank() {
            return Err(Error::invalid(format!(
                "rank {k} is outside [1, {}]",
                self.max_rank()
            )));
        }
        let m = self.u.rows();
        let n = self.vt_scaled.cols();
        let u_k = Matrix::from_fn(m, k, |i, j| self.u.get(i, j));
        let vt_k = Matrix::from_fn(k, n, |i, j| self.vt_scaled.get(i, j));
        let sigma = &self.singular[..k];
        // Map the right factor back to the original input basis.
        let vt_back = self.transform.apply_inverse_right(&vt_k)?;
        let (a, b) = match absorption {
            Absorption::SqrtSplit => {
                let root: Vec<f64> = sigma.iter().map(|s| s.sqrt()).collect();
                (u_k.mul_diag_right(&root), vt_back.mul_diag_left(&root))
            }
            Absorption::IntoU => (u_k.mul_diag_right(sigma), vt_back),
            Absorption::IntoV => (u_k, vt_back.mul_diag_left(sigma)),
        };
        Ok(DecomposedLayer { a, b, rank: k, method: self.method, absorption })
    }
}

/// One-shot decomposition of a single layer.
pub fn decompose_layer(
    w: &Matrix,
    spec: &MethodSpec,
    stats: Option<&ActivationStats>,
    rank: usize,
) -> Result<DecomposedLayer> {
    prepare_layer(w, spec, stats)?.truncate(rank, spec.absorption)
}

/// Output deviation `||(A B - W) X||_F` on explicit activations.
pub fn output_error(w: &Matrix, layer: &DecomposedLayer, x: &Matrix) -> f64 {
    layer.effective_weight().sub(w).matmul(x).frob_norm()
}

///// Same quantity computed from the accumulated Gram `G = X X^T`:
/// `||D X||_F^2 = trace(D G D^T)`.
pub fn output_error_from_gram(w: &Matrix, layer: &DecomposedLayer, gram: &Matrix) -> f64 {
    let d = layer.effective_weight().sub(w);
    weighted_frob(&d, gram)
}

pub(crate) fn weighted_frob(d: &Matrix, gram: &Matrix) -> f64 {
    debug_assert_eq!(d.cols(), gram.rows());
    let mut total = 0.0;
    for i in 0..d.rows() {
        let row = d.row(i);
        let gd = gram.matvec(row);
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(&gd) {
            acc += a * b;
        }
        total += acc;
    }
    total.max(0.0).sqrt()
}

/// Stored-parameter ratio of a rank-k factorization: `k (m + n) / (m n)`.
pub fn param_ratio(m: usize, n: usize, k: usize) -> f64 {
    assert!(m > 0 && n > 0 && k > 0, "param_ratio needs positive dimensions");
    (k * (m + n)) as f64 / (m * n) as f64
}

/// Per-token multiply-accumulate ratio. A dense layer needs `m n` MACs per
/// token; the factored form needs `k n + k m`, so the ratio coincides with
/// the parameter ratio.
pub fn mac_ratio(m: usize, n: usize, k: usize) -> f64 {
    param_ratio(m, n, k)
}

/// Largest rank whose parameter ratio stays at or below `ratio`, floored
/// at 1.
pub fn rank_for_ratio(m: usize, n: usize, ratio: f64) -> Result<usize> {
    if m == 0 || n == 0 {
        return Err(Error::invalid("rank_for_ratio needs positive dimensions".to_string()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let k = (ratio * (m * n) as f64 / (m + n) as f64).floor() as usize;
    Ok(k.max(1))
}

/// Parameter bookkeeping for one layer of a report.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: LayerRef,
    pub rows: usize,
    pub cols: usize,
    /// `None` means the layer stayed dense.
    pub rank: Option<usize>,
    pub method: Option<Method>,
    pub original_params: usize,
    pub stored_params: usize,
    pub output_error: Option<f64>,
}

impl LayerReport {
    pub fn param_ratio(&self) -> f64 {
        self.stored_params as f64 / self.original_params as f64
    }
}

/// Running parameter totals for an aggregate line.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamAgg {
    pub original_params: usize,
    pub stored_params: usize,
}

impl ParamAgg {
    pub fn ratio(&self) -> f64 {
        self.stored_params as f64 / self.original_params as f64
    }

    fn add(&mut self, orig: usize, stored: usize) {
        self.original_params += orig;
        self.stored_params += stored;
    }
}

/// Compression accounting across the model's projection layers, with
/// per-layer, per-kind, per-block and total views. Embeddings, positional
/// tables and norm gains are outside the compressible set and excluded.
#[derive(Debug, Clone)]
pub struct CompressionReport {
    pub layers: Vec<LayerReport>,
    pub per_kind: BTreeMap<String, ParamAgg>,
    pub per_block: BTreeMap<usize, ParamAgg>,
    pub total: ParamAgg,
}

/// Compare a compressed model against its original and account for every
/// eligible layer. Output errors are computed from the calibration Gram
/// when stats are supplied, so the report is reproducible from the stored
/// artifacts alone.
pub fn build_model_report(
    original: &TinyModel,
    compressed: &TinyModel,
    stats: Option<&BTreeMap<LayerRef, ActivationStats>>,
) -> Result<CompressionReport> {
    if original.config() != compressed.config() {
        return Err(Error::invalid(
            "original and compressed models have different configurations".to_string(),
        ));
    }
    let mut layers = Vec::new();
    let mut per_kind: BTreeMap<String, ParamAgg> = BTreeMap::new();
    let mut per_block: BTreeMap<usize, ParamAgg> = BTreeMap::new();
    let mut total = ParamAgg::default();

    for layer in original.eligible_layers() {
        let orig_w = match original.slot(layer)? {
            LayerSlot::Dense(w) => w.clone(),
            LayerSlot::LowRank(_) => {
                return Err(Error::invalid(format!(
                    "baseline model has layer {layer} already decomposed"
                )));
            }
        };
        let (m, n) = orig_w.shape();
        let orig_params = m * n;
        let (rank, method, stored, err) = match compressed.slot(layer)? {
            LayerSlot::Dense(_) => (None, None, orig_params, None),
            LayerSlot::LowRank(d) => {
                let err = stats.and_then(|s| s.get(&layer)).map(|st| {
                    output_error_from_gram(&orig_w, d, st.gram())
                });
                (Some(d.rank), Some(d.method), d.param_count(), err)
            }
        };
        per_kind.entry(layer.kind.as_str().to_string()).or_default().add(orig_params, stored);
        per_block.entry(layer.block).or_default().add(orig_params, stored);
        total.add(orig_params, stored);
        layers.push(LayerReport {
            layer,
            rows: m,
            cols: n,
            rank,
            method,
            original_params: orig_params,
            stored_params: stored,
            output_error: err,
        });
    }
    Ok(CompressionReport { layers, per_kind, per_block, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut g = SplitMix64::new(seed);
        Matrix::from_fn(r, c, |_, _| g.next_gaussian())
    }

    fn spec(method: Method) -> MethodSpec {
        MethodSpec { method, ..MethodSpec::default() }
    }

    #[test]
    fn full_rank_truncation_reconstructs_the_weight() {
        let w = random_matrix(6, 8, 11);
        let d = decompose_layer(&w, &spec(Method::Svd), None, 6).unwrap();
        let rel = d.effective_weight().sub(&w).frob_norm() / w.frob_norm();
        assert!(rel < 1e-12, "relative error {rel}");
    }

    #[test]
    fn absorptions_agree_on_the_product() {
        let w = random_matrix(8, 6, 12);
        let x = random_matrix(6, 32, 13);
        let stats = ActivationStats::from_activations(&x);
        for method in [Method::Svd, Method::Asvd, Method::AsvdPlus] {
            let prepared = prepare_layer(&w, &spec(method), Some(&stats)).unwrap();
            let base = prepared.truncate(3, Absorption::SqrtSplit).unwrap().effective_weight();
            for absorption in [Absorption::IntoU, Absorption::IntoV] {
                let other = prepared.truncate(3, absorption).unwrap().effective_weight();
                let dev = base.max_abs_diff(&other);
                assert!(dev < 1e-10, "{method:?}/{absorption:?} deviates by {dev}");
            }
        }
    }

    #[test]
    fn gram_error_matches_explicit_error() {
        let w = random_matrix(5, 7, 14);
        let x = random_matrix(7, 40, 15);
        let stats = ActivationStats::from_activations(&x);
        let d = decompose_layer(&w, &spec(Method::Asvd), Some(&stats), 2).unwrap();
        let direct = output_error(&w, &d, &x);
        let via_gram = output_error_from_gram(&w, &d, stats.gram());
        assert!((direct - via_gram).abs() < 1e-9 * direct.max(1.0));
    }

    #[test]
    fn svd_method_needs_no_stats_but_asvd_does() {
        let w = random_matrix(4, 4, 16);
        assert!(decompose_layer(&w, &spec(Method::Svd), None, 2).is_ok());
        assert!(decompose_layer(&w, &spec(Method::Asvd), None, 2).is_err());
        assert!(decompose_layer(&w, &spec(Method::AsvdPlus), None, 2).is_err());
    }

    #[test]
    fn alpha_zero_asvd_equals_plain_svd() {
        let w = random_matrix(6, 6, 17);
        let x = random_matrix(6, 24, 18);
        let stats = ActivationStats::from_activations(&x);
        let s = MethodSpec { method: Method::Asvd, alpha: 0.0, ..MethodSpec::default() };
        let asvd0 = decompose_layer(&w, &s, Some(&stats), 3).unwrap();
        let plain = decompose_layer(&w, &spec(Method::Svd), None, 3).unwrap();
        assert!(asvd0.effective_weight().max_abs_diff(&plain.effective_weight()) < 1e-10);
    }

    #[test]
    fn ratio_arithmetic_matches_hand_values() {
        assert_eq!(param_ratio(4096, 4096, 2048), 1.0);
        assert_eq!(param_ratio(4, 4, 1), 0.5);
        assert_eq!(mac_ratio(64, 128, 16), param_ratio(64, 128, 16));
        assert_eq!(rank_for_ratio(4096, 4096, 0.5).unwrap(), 1024);
        assert_eq!(rank_for_ratio(4, 4, 0.1).unwrap(), 1);
    }

    #[test]
    fn rank_for_ratio_rejects_bad_ratios() {
        assert!(rank_for_ratio(8, 8, 0.0).is_err());
        assert!(rank_for_ratio(8, 8, 1.5).is_err());
        assert!(rank_for_ratio(8, 8, -0.1).is_err());
    }

    #[test]
    fn rank_bounds_are_checked() {
        let w = random_matrix(4, 6, 19);
        let p = prepare_layer(&w, &spec(Method::Svd), None).unwrap();
        assert!(p.truncate(0, Absorption::SqrtSplit).is_err());
        assert!(p.truncate(5, Absorption::SqrtSplit).is_err());
    }

    #[test]
    fn whitening_beats_plain_svd_on_skewed_activations() {
        // One input channel carries most of the signal energy.
        let w = random_matrix(8, 8, 20);
        let mut g = SplitMix64::new(21);
        let x = Matrix::from_fn(8, 64, |i, _| {
            let base = g.next_gaussian();
            if i == 3 {
                base * 30.0
            } else {
                base
            }
        });
        let stats = ActivationStats::from_activations(&x);
        let plain = decompose_layer(&w, &spec(Method::Svd), None, 2).unwrap();
        let white = decompose_layer(&w, &spec(Method::AsvdPlus), Some(&stats), 2).unwrap();
        let e_plain = output_error(&w, &plain, &x);
        let e_white = output_error(&w, &white, &x);
        assert!(
            e_white <= e_plain + 1e-12,
            "whitened error {e_white} exceeds plain error {e_plain}"
        );
    }
}
