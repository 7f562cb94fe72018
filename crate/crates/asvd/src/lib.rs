//! Post-training low-rank compression of linear layers, driven by
//! activation statistics.
//!
//! The pipeline: collect per-layer activation statistics from calibration
//! batches, scale each weight so its singular values reflect what the
//! activations actually exercise, truncate an SVD of the scaled weight,
//! and undo the scaling inside the factors. A sensitivity profile over a
//! ratio grid then assigns per-layer ranks under either a parameter
//! budget or a metric threshold. The same factorization serves a latent
//! KV cache and survives round-to-nearest quantization better when the
//! singular values are split evenly across factors.
//!
//! Everything is deterministic: a fixed-seed generator synthesizes models
//! and tokens, the SVD uses a fixed sign convention, and parallel code
//! paths reduce in a fixed order, so outputs are byte-identical across
//! runs and thread counts.

pub mod cholesky;
pub mod container;
pub mod decompose;
pub mod error;
pub mod kvcache;
pub mod matrix;
pub mod par;
pub mod quant;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod svd;
pub mod tinymodel;
pub mod transform;

pub use container::{Dtype, TensorContainer};
pub use decompose::{
    build_model_report, decompose_layer, mac_ratio, output_error, output_error_from_gram,
    param_ratio, prepare_layer, rank_for_ratio, Absorption, CompressionReport, DecomposedLayer,
    Method, MethodSpec, PreparedLayer,
};
pub use error::{Error, Result};
pub use kvcache::{
    generate_with_cache, kv_decompose, kv_memory_report, CachedForward, KvMemoryReport,
    KvRankSpec, LowRankKvCache,
};
pub use matrix::Matrix;
pub use quant::{dequantize, quantized_output_error, rtn_quantize, QuantizedTensor};
pub use rng::SplitMix64;
pub use sensitivity::{
    allocate_param_target, allocate_perf_target, compress_model, profile, LayerChoice,
    MetricKind, RankAllocation, SensitivityProfile, SensitivityRecord,
};
pub use stats::ActivationStats;
pub use svd::{singular_values, svd, truncated_svd, SvdFactors};
pub use tinymodel::{
    synth_token_batches, CalibrationSet, ForwardTrace, LayerKind, LayerRef, LayerSlot, TinyModel,
    TinyModelConfig,
};
pub use transform::{ScalingTransform, StatKind};
