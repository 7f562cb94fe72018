//! Sensitivity profiling and truncation-rank search.
//!
//! Profiling swaps one layer at a time to each ratio on a grid and records
//! the model-level metric. The records, sorted from least to most damaging,
//! define a one-dimensional family of allocations indexed by a split point;
//! both budget searches walk that family by bisection and return exactly
//! the allocation an exhaustive scan of split points would pick.
//!
//! Parameter-budget search: records before the split are "in effect"; each
//! layer takes the minimum in-effect rank, layers with none stay dense.
//! Stored parameters shrink monotonically as the split advances, so the
//! smallest split that fits the budget is the least-damaging feasible
//! allocation.
//!
//! Metric-threshold search: records from the split onward are in effect,
//! so advancing the split removes the most damaging substitutions first.
//! The smallest split whose metric meets the threshold is the most
//! compressed allocation that stays acceptable.

use std::collections::BTreeMap;

use crate::decompose::{self, MethodSpec, PreparedLayer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;
use crate::tinymodel::{CalibrationSet, LayerRef, LayerSlot, TinyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Next-token perplexity over the calibration batches.
    Perplexity,
    /// Frobenius deviation of the final logits from the uncompressed
    /// model over the calibration batches. The dense baseline is 0.
    OutputError,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Perplexity => "ppl",
            MetricKind::OutputError => "output_error",
        }
    }

    pub fn parse(s: &str) -> Option<MetricKind> {
        match s {
            "ppl" => Some(MetricKind::Perplexity),
            "output_error" => Some(MetricKind::OutputError),
            _ => None,
        }
    }
}

/// Metric observed with one layer alone compressed to one grid ratio.
#[derive(Debug, Clone)]
pub struct SensitivityRecord {
    pub layer: LayerRef,
    pub rows: usize,
    pub cols: usize,
    pub ratio: f64,
    pub rank: usize,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct SensitivityProfile {
    pub metric: MetricKind,
    pub baseline: f64,
    pub records: Vec<SensitivityRecord>,
}

impl SensitivityProfile {
    /// Record indices from least to most damaging: metric ascending, ties
    /// by layer then by rank descending (gentler substitution first).
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.sort_by(|&a, &b| {
            let ra = &self.records[a];
            let rb = &self.records[b];
            ra.metric
                .total_cmp(&rb.metric)
                .then(ra.layer.cmp(&rb.layer))
                .then(rb.rank.cmp(&ra.rank))
        });
        idx
    }

    /// Layers covered by the profile with their weight shapes.
    pub fn layer_shapes(&self) -> BTreeMap<LayerRef, (usize, usize)> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            m.insert(r.layer, (r.rows, r.cols));
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::invalid("profile has no records".to_string()));
        }
        if !self.baseline.is_finite() {
            return Err(Error::invalid(format!("baseline {} is not finite", self.baseline)));
        }
        let mut seen = BTreeMap::new();
        for r in &self.records {
            if !r.metric.is_finite() {
                return Err(Error::invalid(format!(
                    "record ({}, {}) has non-finite metric {}",
                    r.layer, r.ratio, r.metric
                )));
            }
            if r.rank == 0 || r.rows == 0 || r.cols == 0 {
                return Err(Error::invalid(format!(
                    "record ({}, {}) has a zero dimension",
                    r.layer, r.ratio
                )));
            }
            if let Some(prev) = seen.insert((r.layer, r.ratio.to_bits()), (r.rows, r.cols)) {
                let _ = prev;
                return Err(Error::invalid(format!(
                    "duplicate record for ({}, {})",
                    r.layer, r.ratio
                )));
            }
        }
        let shapes = self.layer_shapes();
        for r in &self.records {
            if shapes[&r.layer] != (r.rows, r.cols) {
                return Err(Error::invalid(format!(
                    "layer {} has inconsistent shapes across records",
                    r.layer
                )));
            }
        }
        Ok(())
    }

    /// Plain-text serialization; floats use shortest round-trip form, so
    /// saving and reloading reproduces the profile exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# sensitivity profile\n");
        s.push_str(&format!("metric {}\n", self.metric.as_str()));
        s.push_str(&format!("baseline {}\n", self.baseline));
        s.push_str("columns layer ratio rank rows cols metric\n");
        for r in &self.records {
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.layer, r.ratio, r.rank, r.rows, r.cols, r.metric
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SensitivityProfile> {
        let mut metric = None;
        let mut baseline = None;
        let mut records = Vec::new();
        let mut saw_columns = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("metric ") {
                metric = Some(MetricKind::parse(rest.trim()).ok_or_else(|| {
                    Error::format(format!("unknown metric kind '{}'", rest.trim()))
                })?);
            } else if let Some(rest) = line.strip_prefix("baseline ") {
                baseline = Some(rest.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("bad baseline value '{}'", rest.trim()))
                })?);
            } else if line.starts_with("columns ") {
                if line != "columns layer ratio rank rows cols metric" {
                    return Err(Error::format(format!("unexpected column layout: {line}")));
                }
                saw_columns = true;
            } else {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 6 {
                    return Err(Error::format(format!("malformed profile row: {line}")));
                }
                let layer = LayerRef::parse(parts[0])
                    .ok_or_else(|| Error::format(format!("bad layer name '{}'", parts[0])))?;
                let parse_f = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| Error::format(format!("bad number '{s}' in profile row")))
                };
                let parse_u = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::format(format!("bad integer '{s}' in profile row")))
                };
                records.push(SensitivityRecord {
                    layer,
                    ratio: parse_f(parts[1])?,
                    rank: parse_u(parts[2])?,
                    rows: parse_u(parts[3])?,
                    cols: parse_u(parts[4])?,
                    metric: parse_f(parts[5])?,
                });
            }
        }
        if !saw_columns {
            return Err(Error::format("profile is missing its column header".to_string()));
        }
        let profile = SensitivityProfile {
            metric: metric.ok_or_else(|| Error::format("profile is missing 'metric'".to_string()))?,
            baseline: baseline
                .ok_or_else(|| Error::format("profile is missing 'baseline'".to_string()))?,
            records,
        };
        profile.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerChoice {
    Dense,
    Rank(usize),
}

/// A per-layer rank assignment plus the split point that produced it.
#[derive(Debug, Clone)]
pub struct RankAllocation {
    pub choices: BTreeMap<LayerRef, LayerChoice>,
    pub split_index: usize,
    pub param_ratio: f64,
}

/// Dense logits per calibration batch; the reference for the output-error
/// metric.
pub fn baseline_logits(model: &TinyModel, calib: &CalibrationSet) -> Result<Vec<Matrix>> {
    let out: Vec<Result<Matrix>> =
        par::par_map(calib.batches.clone(), |b| model.forward(&b));
    out.into_iter().collect()
}

/// Evaluate a model variant under a metric. `dense_logits` is required for
/// the output-error metric and ignored for perplexity.
pub fn eval_model_metric(
    model: &TinyModel,
    calib: &CalibrationSet,
    metric: MetricKind,
    dense_logits: Option<&[Matrix]>,
) -> Result<f64> {
    let value = match metric {
        MetricKind::Perplexity => model.perplexity_batches(&calib.batches)?,
        MetricKind::OutputError => {
            let base = dense_logits.ok_or_else(|| {
                Error::invalid("output-error metric needs baseline logits".to_string())
            })?;
            if base.len() != calib.batches.len() {
                return Err(Error::invalid(format!(
                    "{} baseline logit batches for {} calibration batches",
                    base.len(),
                    calib.batches.len()
                )));
            }
            let sq: Vec<Result<f64>> = par::par_map(
                calib.batches.iter().cloned().zip(base.to_vec()).collect(),
                |(b, reference)| {
                    let logits = model.forward(&b)?;
                    let d = logits.sub(&reference).frob_norm();
                    Ok(d * d)
                },
            );
            let mut total = 0.0;
            for s in sq {
                total += s?;
            }
            total.sqrt()
        }
    };
    if !value.is_finite() {
        return Err(Error::numerical(format!(
            "{} metric evaluated to {value}",
            metric.as_str()
        )));
    }
    Ok(value)
}

/// Transform and factor every eligible layer of a dense model once, so
/// repeated truncations at different ranks are cheap.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    layers: BTreeMap<LayerRef, PreparedLayer>,
}

impl PreparedModel {
    pub fn build(model: &TinyModel, calib: &CalibrationSet, spec: &MethodSpec) -> Result<Self> {
        let mut dense = Vec::new();
        for layer in model.eligible_layers() {
            match model.slot(layer)? {
                LayerSlot::Dense(w) => dense.push((layer, w.clone())),
                LayerSlot::LowRank(_) => {
                    return Err(Error::invalid(format!(
                        "layer {layer} is already decomposed; preparation needs the dense model"
                    )));
                }
            }
        }
        let spec = *spec;
        let prepared: Vec<Result<(LayerRef, PreparedLayer)>> =
            par::par_map(dense, move |(layer, w)| {
                let stats = calib.stats.get(&layer).ok_or_else(|| {
                    Error::invalid(format!("calibration stats missing for layer {layer}"))
                })?;
                let p = decompose::prepare_layer(&w, &spec, Some(stats))
                    .map_err(|e| annotate(e, &format!("layer {layer}")))?;
                Ok((layer, p))
            });
        let mut layers = BTreeMap::new();
        for p in prepared {
            let (layer, prep) = p?;
            layers.insert(layer, prep);
        }
        Ok(PreparedModel { layers })
    }

    pub fn get(&self, layer: LayerRef) -> Result<&PreparedLayer> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("no prepared factors for layer {layer}")))
    }
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::NumericalFailure(m) => Error::NumericalFailure(format!("{context}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{context}: {m}")),
        other => other,
    }
}

/// Swap every `Rank(k)` choice into the model using prepared factors.
pub fn apply_allocation(
    model: &TinyModel,
    prepared: &PreparedModel,
    allocation: &RankAllocation,
    spec: &MethodSpec,
) -> Result<TinyModel> {
    let mut out = model.clone();
    for (&layer, &choice) in &allocation.choices {
        if let LayerChoice::Rank(k) = choice {
            let d = prepared
                .get(layer)?
                .truncate(k, spec.absorption)
                .map_err(|e| annotate(e, &format!("layer {layer}")))?;
            out = out.swap_layer(layer, LayerSlot::LowRank(d))?;
        }
    }
    Ok(out)
}

/// Profile every (layer, grid ratio) pair by single-layer substitution.
pub fn profile(
    model: &TinyModel,
    calib: &CalibrationSet,
    grid: &[f64],
    metric: MetricKind,
    spec: &MethodSpec,
) -> Result<SensitivityProfile> {
    if grid.is_empty() {
        return Err(Error::invalid("ratio grid is empty".to_string()));
    }
    for (i, &r) in grid.iter().enumerate() {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::invalid(format!("grid ratio {r} is outside (0, 1)")));
        }
        if grid[..i].contains(&r) {
            return Err(Error::invalid(format!("duplicate grid ratio {r}")));
        }
    }

    let prepared = PreparedModel::build(model, calib, spec)?;
    let dense_logits = match metric {
        MetricKind::OutputError => Some(baseline_logits(model, calib)?),
        MetricKind::Perplexity => None,
    };
    let baseline = match metric {
        MetricKind::Perplexity => model.perplexity_batches(&calib.batches)?,
        MetricKind::OutputError => 0.0,
    };

    let mut tasks = Vec::new();
    for layer in model.eligible_layers() {
        for &ratio in grid {
            tasks.push((layer, ratio));
        }
    }
    let spec_copy = *spec;
    let records: Vec<Result<SensitivityRecord>> = par::par_map(tasks, |(layer, ratio)| {
        let slot = model.slot(layer)?;
        let (rows, cols) = slot.shape();
        let rank = decompose::rank_for_ratio(rows, cols, ratio)?;
        let d = prepared
            .get(layer)?
            .truncate(rank, spec_copy.absorption)
            .map_err(|e| annotate(e, &format!("({layer}, {ratio})")))?;
        let variant = model.swap_layer(layer, LayerSlot::LowRank(d))?;
        let value = eval_model_metric(&variant, calib, metric, dense_logits.as_deref())
            .map_err(|e| annotate(e, &format!("({layer}, {ratio})")))?;
        Ok(SensitivityRecord { layer, rows, cols, ratio, rank, metric: value })
    });
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(r?);
    }
    let profile = SensitivityProfile { metric, baseline, records: out };
    profile.validate()?;
    Ok(profile)
}

/// Minimum in-effect rank per layer for a set of record indices, with the
/// dense-keep rule: a rank whose factors would store at least as many
/// parameters as the dense weight leaves the layer dense.
fn choices_for_indices(
    profile: &SensitivityProfile,
    indices: &[usize],
) -> BTreeMap<LayerRef, LayerChoice> {
    let mut min_rank: BTreeMap<LayerRef, usize> = BTreeMap::new();
    for &i in indices {
        let r = &profile.records[i];
        min_rank
            .entry(r.layer)
            .and_modify(|k| *k = (*k).min(r.rank))
            .or_insert(r.rank);
    }
    let mut choices = BTreeMap::new();
    for (layer, shape) in profile.layer_shapes() {
        let (m, n) = shape;
        let choice = match min_rank.get(&layer) {
            Some(&k) if k * (m + n) < m * n => LayerChoice::Rank(k),
            _ => LayerChoice::Dense,
        };
        choices.insert(layer, choice);
    }
    choices
}

fn allocation_params(
    profile: &SensitivityProfile,
    choices: &BTreeMap<LayerRef, LayerChoice>,
) -> (usize, usize) {
    let shapes = profile.layer_shapes();
    let mut stored = 0;
    let mut original = 0;
    for (layer, &(m, n)) in &shapes {
        original += m * n;
        stored += match choices[layer] {
            LayerChoice::Dense => m * n,
            LayerChoice::Rank(k) => k * (m + n),
        };
    }
    (stored, original)
}

fn allocation_at(
    profile: &SensitivityProfile,
    sorted: &[usize],
    split: usize,
    in_effect_before_split: bool,
) -> RankAllocation {
    let indices = if in_effect_before_split { &sorted[..split] } else { &sorted[split..] };
    let choices = choices_for_indices(profile, indices);
    let (stored, original) = allocation_params(profile, &choices);
    RankAllocation {
        choices,
        split_index: split,
        param_ratio: stored as f64 / original as f64,
    }
}

/// Allocation where the records before `split` (in sorted order) are in
/// effect. This is the family walked by the parameter-budget search.
pub fn prefix_allocation(profile: &SensitivityProfile, split: usize) -> Result<RankAllocation> {
    profile.validate()?;
    let sorted = profile.sorted_indices();
    if split > sorted.len() {
        return Err(Error::invalid(format!(
            "split {split} exceeds {} records",
            sorted.len()
        )));
    }
    Ok(allocation_at(profile, &sorted, split, true))
}

/// Allocation where the records from `split` onward are in effect. This is
/// the family walked by the metric-threshold search.
pub fn suffix_allocation(profile: &SensitivityProfile, split: usize) -> Result<RankAllocation> {
    profile.validate()?;
    let sorted = profile.sorted_indices();
    if split > sorted.len() {
        return Err(Error::invalid(format!(
            "split {split} exceeds {} records",
            sorted.len()
        )));
    }
    Ok(allocation_at(profile, &sorted, split, false))
}

/// Smallest-damage allocation whose stored-parameter ratio fits the
/// budget. Identical to scanning every split and taking the first
/// feasible one.
pub fn allocate_param_target(
    profile: &SensitivityProfile,
    target_ratio: f64,
) -> Result<RankAllocation> {
    profile.validate()?;
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "target ratio must be in (0, 1], got {target_ratio}"
        )));
    }
    let sorted = profile.sorted_indices();
    let len = sorted.len();
    // Tiny slack absorbs decimal targets with no exact binary form.
    let feasible = |split: usize| {
        allocation_at(profile, &sorted, split, true).param_ratio <= target_ratio + 1e-12
    };
    let mut lo = 0;
    let mut hi = len;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let alloc = allocation_at(profile, &sorted, lo, true);
    if alloc.param_ratio > target_ratio + 1e-12 {
        let best = allocation_at(profile, &sorted, len, true);
        return Err(Error::InfeasibleBudget { best_achievable: best.param_ratio });
    }
    Ok(alloc)
}

/// Most-compressed allocation whose metric stays at or below `threshold`.
/// Identical to scanning every split from the most compressed end and
/// taking the first acceptable one. The threshold must not undercut the
/// profile's dense baseline.
pub fn allocate_perf_target(
    model: &TinyModel,
    calib: &CalibrationSet,
    profile: &SensitivityProfile,
    spec: &MethodSpec,
    threshold: f64,
) -> Result<RankAllocation> {
    profile.validate()?;
    if threshold.is_nan() {
        return Err(Error::invalid("metric threshold is NaN".to_string()));
    }
    if threshold < profile.baseline {
        return Err(Error::invalid(format!(
            "threshold {threshold} is below the dense baseline {}; unattainable",
            profile.baseline
        )));
    }
    let prepared = PreparedModel::build(model, calib, spec)?;
    let dense_logits = match profile.metric {
        MetricKind::OutputError => Some(baseline_logits(model, calib)?),
        MetricKind::Perplexity => None,
    };
    let sorted = profile.sorted_indices();
    let len = sorted.len();
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut metric_at = |split: usize| -> Result<f64> {
        if let Some(&v) = cache.get(&split) {
            return Ok(v);
        }
        let alloc = allocation_at(profile, &sorted, split, false);
        let variant = apply_allocation(model, &prepared, &alloc, spec)?;
        let v = eval_model_metric(&variant, calib, profile.metric, dense_logits.as_deref())?;
        cache.insert(split, v);
        Ok(v)
    };

    let mut lo = 0;
    let mut hi = len;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if metric_at(mid)? <= threshold {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    // split == len is all-dense and reproduces the baseline, so a valid
    // threshold always lands somewhere.
    if metric_at(lo)? > threshold {
        return Err(Error::invalid(format!(
            "no split meets threshold {threshold}; dense metric is {}",
            metric_at(len)?
        )));
    }
    Ok(allocation_at(profile, &sorted, lo, false))
}

/// Decompose a dense model according to an allocation and report the
/// result. Uses the calibration stats both for the transforms and for the
/// per-layer output errors in the report.
pub fn compress_model(
    model: &TinyModel,
    calib: &CalibrationSet,
    spec: &MethodSpec,
    allocation: &RankAllocation,
) -> Result<(TinyModel, decompose::CompressionReport)> {
    let eligible = model.eligible_layers();
    for layer in &eligible {
        if !allocation.choices.contains_key(layer) {
            return Err(Error::invalid(format!(
                "allocation does not cover layer {layer}"
            )));
        }
    }
    for layer in allocation.choices.keys() {
        if !eligible.contains(layer) {
            return Err(Error::invalid(format!(
                "allocation names unknown layer {layer}"
            )));
        }
    }
    let prepared = PreparedModel::build(model, calib, spec)?;
    let compressed = apply_allocation(model, &prepared, allocation, spec)?;
    let report = decompose::build_model_report(model, &compressed, Some(&calib.stats))?;
    Ok((compressed, report))
}
