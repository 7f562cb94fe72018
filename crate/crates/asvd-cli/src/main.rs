//! Command-line front end for the compression toolkit.
//!
//! Every artifact is a file: models and calibration sets are tensor
//! containers, profiles and reports are plain text. All outputs are
//! deterministic, so rerunning a command with the same inputs rewrites
//! byte-identical files.
//!
//! Exit codes: 0 success, 2 bad usage or malformed input, 3 infeasible
//! compression budget, 4 numerical failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asvd::decompose::{self, CompressionReport, MethodSpec};
use asvd::kvcache::{self, KvRankSpec};
use asvd::sensitivity::{self, MetricKind, SensitivityProfile};
use asvd::tinymodel::{synth_token_batches, CalibrationSet, TinyModel, TinyModelConfig};
use asvd::{Absorption, Error, LayerSlot, Method, Result, StatKind, TensorContainer};

#[derive(Parser)]
#[command(
    name = "asvd",
    version,
    about = "Activation-aware low-rank compression for a deterministic tiny transformer"
)]
struct Cli {
    /// Worker threads for parallel sections (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic model and write it as a container.
    Synth(SynthArgs),
    /// Generate token batches and collect per-layer activation statistics.
    Calibrate(CalibrateArgs),
    /// Measure per-layer sensitivity over a grid of compression ratios.
    Profile(ProfileArgs),
    /// Pick per-layer ranks from a profile and write the compressed model.
    Compress(CompressArgs),
    /// Evaluate perplexity (and logit deviation against a baseline).
    Evaluate(EvaluateArgs),
    /// Decompose the key/value projections and check the latent cache
    /// against the batch forward pass.
    KvSim(KvSimArgs),
    /// Quantize the factors of a compressed model and report the damage.
    Quantize(QuantizeArgs),
    /// Write the compression report for an existing compressed model.
    Report(ReportArgs),
    /// Compare scaling exponents for the diagonal method.
    SweepAlpha(SweepAlphaArgs),
}

#[derive(Args, Clone)]
struct MethodArgs {
    /// Decomposition method: svd, asvd, or asvd_plus.
    #[arg(long, default_value = "asvd")]
    method: String,
    /// Scaling exponent for the diagonal method.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Channel statistic for diagonal scaling: abs_mean or abs_max.
    #[arg(long, default_value = "abs_mean")]
    stat: String,
    /// Singular-value absorption: sqrt_split, into_u, or into_v.
    #[arg(long, default_value = "sqrt_split")]
    absorption: String,
}

impl MethodArgs {
    fn to_spec(&self) -> Result<MethodSpec> {
        let method = Method::parse(&self.method)
            .ok_or_else(|| Error::invalid(format!("unknown method '{}'", self.method)))?;
        let stat = StatKind::parse(&self.stat)
            .ok_or_else(|| Error::invalid(format!("unknown stat '{}'", self.stat)))?;
        let absorption = Absorption::parse(&self.absorption)
            .ok_or_else(|| Error::invalid(format!("unknown absorption '{}'", self.absorption)))?;
        Ok(MethodSpec { method, stat, alpha: self.alpha, absorption })
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 2)]
    n_blocks: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 128)]
    max_seq: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the synthetic token stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batches: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Compression ratios to probe, each in (0, 1).
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    grid: Vec<f64>,
    /// Sensitivity metric: output_error or ppl.
    #[arg(long, default_value = "output_error")]
    metric: String,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Sensitivity profile written by the profile subcommand.
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stored-parameter budget as a fraction of the dense model.
    #[arg(long, conflicts_with = "metric_threshold")]
    target_ratio: Option<f64>,
    /// Largest acceptable metric value; compresses as far as it allows.
    #[arg(long)]
    metric_threshold: Option<f64>,
    /// Also write the compression report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Dense model to measure logit deviation against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KvSimArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Latent rank as a fraction of d_model; 1 or more leaves the
    /// projections dense.
    #[arg(long, default_value_t = 0.5)]
    kv_ratio: f64,
    /// Seed for the simulated decode tokens.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    /// Also write the model with decomposed key/value projections.
    #[arg(long)]
    save_model: Option<PathBuf>,
    #[command(flatten)]
    method: MethodArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Compressed model whose factors get quantized.
    #[arg(long)]
    model: PathBuf,
    /// The dense original, for error measurement.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    bits: u32,
}

#[derive(Args)]
struct ReportArgs {
    /// Compressed model.
    #[arg(long)]
    model: PathBuf,
    /// The dense original it came from.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
    alphas: Vec<f64>,
    /// Per-layer parameter ratio used for every probe.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// Channel statistic: abs_mean or abs_max.
    #[arg(long, default_value = "abs_mean")]
    stat: String,
    #[arg(long, default_value = "sqrt_split")]
    absorption: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: u8 = match e {
                Error::InvalidArgument(_) | Error::FormatError(_) => 2,
                Error::InfeasibleBudget { .. } => 3,
                Error::NumericalFailure(_) => 4,
                Error::CapacityExceeded(_) | Error::Io(_) => 1,
            };
            ExitCode::from(code)
        }
    }
}

#[cfg(feature = "parallel")]
fn init_threads(threads: usize) {
    if threads > 0 {
        // Fails only if a pool already exists, which cannot happen this
        // early; ignore to keep reruns of tests in one process alive.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_threads: usize) {}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Profile(a) => profile(a),
        Command::Compress(a) => compress(a),
        Command::Evaluate(a) => evaluate(a),
        Command::KvSim(a) => kv_sim(a),
        Command::Quantize(a) => quantize(a),
        Command::Report(a) => report(a),
        Command::SweepAlpha(a) => sweep_alpha(a),
    }
}

fn load_model(path: &Path) -> Result<TinyModel> {
    TinyModel::from_container(&TensorContainer::load(path)?)
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    CalibrationSet::from_container(&TensorContainer::load(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = TinyModelConfig {
        vocab: a.vocab,
        d_model: a.d_model,
        n_heads: a.n_heads,
        n_blocks: a.n_blocks,
        d_ff: a.d_ff,
        max_seq: a.max_seq,
        seed: a.seed,
    };
    let model = TinyModel::synth(config)?;
    model.to_container().save(&a.out)?;
    println!(
        "wrote model ({} eligible layers) to {}",
        model.eligible_layers().len(),
        a.out.display()
    );
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = model.config();
    if a.seq_len < 2 || a.seq_len > cfg.max_seq {
        return Err(Error::invalid(format!(
            "seq_len must be in 2..={}, got {}",
            cfg.max_seq, a.seq_len
        )));
    }
    if a.batches == 0 {
        return Err(Error::invalid("need at least one batch".to_string()));
    }
    let batches = synth_token_batches(cfg.vocab, a.seed, a.batches, a.seq_len);
    let calib = CalibrationSet::collect(&model, &batches)?;
    calib.to_container().save(&a.out)?;
    println!(
        "collected stats for {} layers over {} tokens, wrote {}",
        calib.stats.len(),
        a.batches * a.seq_len,
        a.out.display()
    );
    Ok(())
}

fn parse_metric(s: &str) -> Result<MetricKind> {
    MetricKind::parse(s).ok_or_else(|| {
        Error::invalid(format!("unknown metric '{s}'; expected ppl or output_error"))
    })
}

fn profile(a: ProfileArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let spec = a.method.to_spec()?;
    let metric = parse_metric(&a.metric)?;
    let prof = sensitivity::profile(&model, &calib, &a.grid, metric, &spec)?;
    let mut text = String::new();
    text.push_str(&format!(
        "# method {} alpha {} stat {} absorption {}\n",
        spec.method.as_str(),
        spec.alpha,
        spec.stat.as_str(),
        spec.absorption.as_str()
    ));
    text.push_str(&prof.to_text());
    write_text(&a.out, &text)?;
    println!("profiled {} records, wrote {}", prof.records.len(), a.out.display());
    Ok(())
}

fn compress(a: CompressArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let spec = a.method.to_spec()?;
    let prof = SensitivityProfile::from_text(&std::fs::read_to_string(&a.profile)?)?;
    let alloc = match (a.target_ratio, a.metric_threshold) {
        (Some(ratio), None) => sensitivity::allocate_param_target(&prof, ratio)?,
        (None, Some(threshold)) => {
            sensitivity::allocate_perf_target(&model, &calib, &prof, &spec, threshold)?
        }
        _ => {
            return Err(Error::invalid(
                "pass exactly one of --target-ratio or --metric-threshold".to_string(),
            ));
        }
    };
    let (compressed, _) = sensitivity::compress_model(&model, &calib, &spec, &alloc)?;
    compressed.to_container().save(&a.out)?;
    if let Some(path) = &a.report {
        // Report on the saved artifact, not the in-memory factors, so this
        // file matches what the report subcommand would produce.
        let reloaded = load_model(&a.out)?;
        let rep = decompose::build_model_report(&model, &reloaded, Some(&calib.stats))?;
        write_text(path, &format_report(&rep, model.config()))?;
    }
    println!(
        "compressed to parameter ratio {} ({} of {} layers low-rank), wrote {}",
        alloc.param_ratio,
        alloc.choices.values().filter(|c| matches!(c, sensitivity::LayerChoice::Rank(_))).count(),
        alloc.choices.len(),
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let ppl = model.perplexity_batches(&calib.batches)?;
    let mut text = String::new();
    text.push_str("# evaluation\n");
    text.push_str(&format!("ppl {ppl}\n"));
    if let Some(base_path) = &a.baseline {
        let baseline = load_model(base_path)?;
        let base_ppl = baseline.perplexity_batches(&calib.batches)?;
        let dense_logits = sensitivity::baseline_logits(&baseline, &calib)?;
        let deviation = sensitivity::eval_model_metric(
            &model,
            &calib,
            MetricKind::OutputError,
            Some(&dense_logits),
        )?;
        text.push_str(&format!("baseline_ppl {base_ppl}\n"));
        text.push_str(&format!("logit_deviation {deviation}\n"));
    }
    match &a.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn kv_sim(a: KvSimArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let spec = a.method.to_spec()?;
    let cfg = model.config();
    if a.seq_len < 1 || a.seq_len > cfg.max_seq {
        return Err(Error::invalid(format!(
            "seq_len must be in 1..={}, got {}",
            cfg.max_seq, a.seq_len
        )));
    }
    let (kv_model, mem) =
        kvcache::kv_decompose(&model, &calib, &spec, &KvRankSpec::UniformRatio(a.kv_ratio))?;

    let mut text = String::new();
    text.push_str("# kv cache simulation\n");
    text.push_str(&format!("kv_ratio {}\n", a.kv_ratio));
    text.push_str(&format!("memory_ratio {}\n", mem.memory_ratio));
    text.push_str(&format!("dense_floats_per_token {}\n", mem.dense_floats_per_token));
    text.push_str(&format!("cached_floats_per_token {}\n", mem.cached_floats_per_token));
    for b in &mem.blocks {
        text.push_str(&format!("block {} rank_k {} rank_v {}\n", b.block, b.rank_k, b.rank_v));
    }

    if a.kv_ratio >= 1.0 {
        text.push_str("cache unchanged; projections stay dense\n");
    } else {
        let tokens = synth_token_batches(cfg.vocab, a.seed, 1, a.seq_len).remove(0);
        let cached = kvcache::generate_with_cache(&kv_model, &tokens)?;
        let batch = kv_model.forward_traced(&tokens)?;
        let logit_dev = cached.logits.max_abs_diff(&batch.logits);
        let attn_dev = cached
            .attn_outputs
            .iter()
            .zip(&batch.attn_outputs)
            .map(|(x, y)| x.max_abs_diff(y))
            .fold(0.0f64, f64::max);
        text.push_str(&format!("tokens {}\n", tokens.len()));
        text.push_str(&format!("max_logit_deviation {logit_dev}\n"));
        text.push_str(&format!("max_attn_deviation {attn_dev}\n"));
    }
    write_text(&a.out, &text)?;
    if let Some(path) = &a.save_model {
        kv_model.to_container().save(path)?;
    }
    println!("kv simulation done, wrote {}", a.out.display());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let baseline = load_model(&a.baseline)?;
    let calib = load_calib(&a.calib)?;

    struct Row {
        layer: String,
        rank: usize,
        fp_err: f64,
        q_err: f64,
    }
    let mut rows = Vec::new();
    for layer in baseline.eligible_layers() {
        let LayerSlot::LowRank(d) = model.slot(layer)? else { continue };
        let LayerSlot::Dense(w) = baseline.slot(layer)? else {
            return Err(Error::invalid(format!(
                "baseline model has layer {layer} already decomposed"
            )));
        };
        let stats = calib.stats.get(&layer).ok_or_else(|| {
            Error::invalid(format!("calibration stats missing for layer {layer}"))
        })?;
        let fp_err = decompose::output_error_from_gram(w, d, stats.gram());
        let q_err = asvd::quantized_output_error(d, w, stats.gram(), a.bits)?;
        rows.push(Row { layer: layer.to_string(), rank: d.rank, fp_err, q_err });
    }
    if rows.is_empty() {
        return Err(Error::invalid(
            "model has no decomposed layers to quantize".to_string(),
        ));
    }

    let mut text = String::new();
    text.push_str("# factor quantization\n");
    text.push_str(&format!("bits {}\n", a.bits));
    text.push_str(&format!("layers {}\n", rows.len()));
    let table: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [r.layer.clone(), r.rank.to_string(), r.fp_err.to_string(), r.q_err.to_string()]
        })
        .collect();
    text.push_str(&aligned_table(
        ["layer", "rank", "float_error", "quant_error"],
        &table,
    ));
    let rss = |f: fn(&Row) -> f64| rows.iter().map(|r| f(r) * f(r)).sum::<f64>().sqrt();
    text.push_str(&format!("total_float_error {}\n", rss(|r| r.fp_err)));
    text.push_str(&format!("total_quant_error {}\n", rss(|r| r.q_err)));
    write_text(&a.out, &text)?;
    println!("quantized {} layers at {} bits, wrote {}", rows.len(), a.bits, a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let baseline = load_model(&a.baseline)?;
    let calib = load_calib(&a.calib)?;
    let rep = decompose::build_model_report(&baseline, &model, Some(&calib.stats))?;
    write_text(&a.out, &format_report(&rep, baseline.config()))?;
    println!("wrote report to {}", a.out.display());
    Ok(())
}

fn sweep_alpha(a: SweepAlphaArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    if a.alphas.is_empty() {
        return Err(Error::invalid("no alphas to sweep".to_string()));
    }

    let mut rows = Vec::new();
    for &alpha in &a.alphas {
        let spec = MethodSpec {
            method: Method::Asvd,
            stat: StatKind::parse(&a.stat)
                .ok_or_else(|| Error::invalid(format!("unknown stat '{}'", a.stat)))?,
            alpha,
            absorption: Absorption::parse(&a.absorption).ok_or_else(|| {
                Error::invalid(format!("unknown absorption '{}'", a.absorption))
            })?,
        };
        let mut variant = model.clone();
        let mut sq_err = 0.0;
        for layer in model.eligible_layers() {
            let LayerSlot::Dense(w) = model.slot(layer)? else {
                return Err(Error::invalid(format!(
                    "layer {layer} is already decomposed; sweep needs the dense model"
                )));
            };
            let stats = calib.stats.get(&layer).ok_or_else(|| {
                Error::invalid(format!("calibration stats missing for layer {layer}"))
            })?;
            let (m, n) = w.shape();
            let rank = decompose::rank_for_ratio(m, n, a.ratio)?;
            let d = decompose::decompose_layer(w, &spec, Some(stats), rank)?;
            let err = decompose::output_error_from_gram(w, &d, stats.gram());
            sq_err += err * err;
            variant = variant.swap_layer(layer, LayerSlot::LowRank(d))?;
        }
        let ppl = variant.perplexity_batches(&calib.batches)?;
        rows.push([alpha.to_string(), sq_err.sqrt().to_string(), ppl.to_string()]);
    }

    let mut text = String::new();
    text.push_str("# alpha sweep\n");
    text.push_str(&format!("ratio {}\n", a.ratio));
    text.push_str(&format!("stat {}\n", a.stat));
    text.push_str(&aligned_table(["alpha", "total_output_error", "ppl"], &rows));
    write_text(&a.out, &text)?;
    println!("swept {} alphas, wrote {}", a.alphas.len(), a.out.display());
    Ok(())
}

/// Space-aligned table with a header row; left-aligned cells, two spaces
/// between columns.
fn aligned_table<const N: usize>(header: [&str; N], rows: &[[String; N]]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let render = |cells: &[&str]| -> String {
        let mut line = String::new();
        for (i, (cell, &w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i + 1 == cells.len() {
                line.push_str(cell);
            } else {
                line.push_str(&format!("{cell:<w$}"));
            }
        }
        line.push('\n');
        line
    };
    let mut out = render(&header.to_vec());
    for row in rows {
        let cells: Vec<&str> = row.iter().map(|s| s.as_str()).collect();
        out.push_str(&render(&cells));
    }
    out
}

fn format_report(rep: &CompressionReport, config: &TinyModelConfig) -> String {
    let mut text = String::new();
    text.push_str("# compression report\n\n");
    text.push_str("[config]\n");
    text.push_str(&format!("vocab {}\n", config.vocab));
    text.push_str(&format!("d_model {}\n", config.d_model));
    text.push_str(&format!("n_heads {}\n", config.n_heads));
    text.push_str(&format!("n_blocks {}\n", config.n_blocks));
    text.push_str(&format!("d_ff {}\n", config.d_ff));
    text.push_str(&format!("max_seq {}\n", config.max_seq));
    text.push_str(&format!("seed {}\n", config.seed));

    text.push_str("\n[totals]\n");
    text.push_str(&format!("original_params {}\n", rep.total.original_params));
    text.push_str(&format!("stored_params {}\n", rep.total.stored_params));
    text.push_str(&format!("param_ratio {}\n", rep.total.ratio()));

    text.push_str("\n[per_kind]\n");
    let kind_rows: Vec<[String; 4]> = rep
        .per_kind
        .iter()
        .map(|(kind, agg)| {
            [
                kind.clone(),
                agg.original_params.to_string(),
                agg.stored_params.to_string(),
                agg.ratio().to_string(),
            ]
        })
        .collect();
    text.push_str(&aligned_table(["kind", "original", "stored", "ratio"], &kind_rows));

    text.push_str("\n[per_block]\n");
    let block_rows: Vec<[String; 4]> = rep
        .per_block
        .iter()
        .map(|(block, agg)| {
            [
                block.to_string(),
                agg.original_params.to_string(),
                agg.stored_params.to_string(),
                agg.ratio().to_string(),
            ]
        })
        .collect();
    text.push_str(&aligned_table(["block", "original", "stored", "ratio"], &block_rows));

    text.push_str("\n[layers]\n");
    let layer_rows: Vec<[String; 7]> = rep
        .layers
        .iter()
        .map(|l| {
            [
                l.layer.to_string(),
                format!("{}x{}", l.rows, l.cols),
                l.rank.map_or("dense".to_string(), |r| r.to_string()),
                l.method.map_or("-".to_string(), |m| m.as_str().to_string()),
                l.stored_params.to_string(),
                l.param_ratio().to_string(),
                l.output_error.map_or("-".to_string(), |e| e.to_string()),
            ]
        })
        .collect();
    text.push_str(&aligned_table(
        ["layer", "shape", "rank", "method", "stored", "ratio", "output_error"],
        &layer_rows,
    ));
    text
}
