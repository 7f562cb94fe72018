//! Acceptance gate for the toolkit. Each test checks one contract and
//! prints a single PASS/FAIL line; tolerances and budgets are pinned
//! here, not configurable.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use asvd::decompose::{self, Absorption, Method, MethodSpec};
use asvd::kvcache::{self, KvRankSpec};
use asvd::rng::SplitMix64;
use asvd::sensitivity::{
    allocate_param_target, prefix_allocation, LayerChoice, MetricKind, SensitivityProfile,
    SensitivityRecord,
};
use asvd::stats::ActivationStats;
use asvd::svd;
use asvd::tinymodel::{synth_token_batches, CalibrationSet, LayerKind, LayerRef, LayerSlot};
use asvd::transform::{ScalingTransform, StatKind};
use asvd::{Error, Matrix, TinyModel, TinyModelConfig};

fn check(name: &str, body: impl FnOnce()) {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body));
    match result {
        Ok(()) => println!("{name}: PASS"),
        Err(p) => {
            println!("{name}: FAIL");
            std::panic::resume_unwind(p);
        }
    }
}

fn assert_within(elapsed: Duration, budget: Duration, what: &str) {
    assert!(
        elapsed <= budget,
        "{what} took {elapsed:?}, budget is {budget:?}"
    );
}

fn gaussian_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.next_gaussian())
}

fn random_orthonormal(rng: &mut SplitMix64, n: usize) -> Matrix {
    svd::svd(&gaussian_matrix(rng, n, n)).unwrap().u
}

/// Eigenvalues of a symmetric matrix by classical two-sided Jacobi
/// rotations; an oracle independent of the library's SVD.
fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Rank-k candidate from Gaussian factors, given its best scalar multiple
/// so the comparison is not decided by magnitude.
fn scaled_candidate(rng: &mut SplitMix64, w: &Matrix, k: usize) -> Matrix {
    let (m, n) = w.shape();
    let product = gaussian_matrix(rng, m, k).matmul(&gaussian_matrix(rng, k, n));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        for (c, t) in product.row(i).iter().zip(w.row(i)) {
            num += c * t;
            den += c * c;
        }
    }
    product.scale(if den > 0.0 { num / den } else { 0.0 })
}

#[test]
fn criterion_01_best_rank_k_approximation() {
    check("criterion 1 (best rank-k approximation, oracle + candidates)", || {
        let start = Instant::now();
        let mut rng = SplitMix64::new(0xC1);
        for trial in 0..100 {
            // Shapes up to 64x96; the first trial pins the largest.
            let (m, n) = if trial == 0 {
                (64, 96)
            } else {
                (6 + rng.below(59) as usize, 6 + rng.below(91) as usize)
            };
            let w = gaussian_matrix(&mut rng, m, n);
            let full = m.min(n);
            let k = 1 + rng.below(full as u64 - 1) as usize;

            let f = svd::truncated_svd(&w, k).unwrap();
            let residual = f.u.mul_diag_right(&f.singular).matmul(&f.vt).sub(&w);
            let res_sq = residual.frob_norm().powi(2);

            // Discarded spectrum from the independent eigensolver, taken
            // on the short-side Gram to avoid spurious zero eigenvalues.
            let gram = if m <= n {
                w.matmul(&w.transpose())
            } else {
                w.transpose().matmul(&w)
            };
            let tail_sq: f64 = symmetric_eigenvalues(&gram)
                .iter()
                .skip(k)
                .map(|&l| l.max(0.0))
                .sum();
            assert!(
                (res_sq - tail_sq).abs() <= 1e-9 * tail_sq.max(1e-300),
                "trial {trial} ({m}x{n}, rank {k}): residual^2 {res_sq} vs discarded {tail_sq}"
            );

            let res = res_sq.sqrt();
            for _ in 0..200 {
                let cand = scaled_candidate(&mut rng, &w, k).sub(&w).frob_norm();
                assert!(
                    res <= cand + 1e-9,
                    "trial {trial}: candidate beat the truncation ({cand} < {res})"
                );
            }
        }
        assert_within(start.elapsed(), Duration::from_secs(10), "criterion 1");
    });
}

#[test]
fn criterion_02_outlier_advantage() {
    check("criterion 2 (activation outliers favor scaled decompositions)", || {
        let start = Instant::now();
        let mut rng = SplitMix64::new(0xC2);
        let (n, tokens, k) = (64, 512, 16);
        let mut asvd_wins = 0;
        let mut plus_holds = 0;
        for _ in 0..100 {
            let w = gaussian_matrix(&mut rng, n, n);
            let mut x = gaussian_matrix(&mut rng, n, tokens);
            // Three distinct outlier channels, magnified well past the bulk.
            let mut channels = Vec::new();
            while channels.len() < 3 {
                let ch = rng.below(n as u64) as usize;
                if !channels.contains(&ch) {
                    channels.push(ch);
                }
            }
            for &ch in &channels {
                for t in 0..tokens {
                    x.set(ch, t, x[(ch, t)] * 100.0);
                }
            }
            let stats = ActivationStats::from_activations(&x);

            let mut err = BTreeMap::new();
            for method in [Method::Svd, Method::Asvd, Method::AsvdPlus] {
                let spec = MethodSpec { method, ..MethodSpec::default() };
                let layer = decompose::decompose_layer(&w, &spec, Some(&stats), k).unwrap();
                err.insert(method.as_str(), decompose::output_error(&w, &layer, &x));
            }
            if err["asvd"] < err["svd"] {
                asvd_wins += 1;
            }
            if err["asvd_plus"] <= err["asvd"] + 1e-9 {
                plus_holds += 1;
            }
        }
        assert!(asvd_wins >= 95, "diagonal scaling beat plain SVD in only {asvd_wins}/100");
        assert!(plus_holds >= 99, "whitening matched diagonal in only {plus_holds}/100");
        assert_within(start.elapsed(), Duration::from_secs(30), "criterion 2");
    });
}

#[test]
fn criterion_03_whitening_optimality() {
    check("criterion 3 (whitened truncation minimizes output error)", || {
        let start = Instant::now();
        let mut rng = SplitMix64::new(0xC3);
        let (n, tokens, k) = (32, 96, 8);
        for trial in 0..20 {
            let w = gaussian_matrix(&mut rng, n, n);
            let x = gaussian_matrix(&mut rng, n, tokens);
            let stats = ActivationStats::from_activations(&x);
            let gram = stats.gram();

            let spec = MethodSpec { method: Method::AsvdPlus, ..MethodSpec::default() };
            let layer = decompose::decompose_layer(&w, &spec, Some(&stats), k).unwrap();
            let best = decompose::output_error_from_gram(&w, &layer, gram);

            let svd_spec = MethodSpec { method: Method::Svd, ..MethodSpec::default() };
            let plain = decompose::decompose_layer(&w, &svd_spec, None, k).unwrap();
            let svd_err = decompose::output_error_from_gram(&w, &plain, gram);
            assert!(
                best <= svd_err + 1e-8,
                "trial {trial}: whitened error {best} exceeds plain SVD {svd_err}"
            );

            for _ in 0..500 {
                let cand = scaled_candidate(&mut rng, &w, k);
                let d = cand.sub(&w);
                let cand_err = {
                    let mut total = 0.0;
                    for i in 0..n {
                        let row = d.row(i);
                        let gd = gram.matvec(row);
                        total += row.iter().zip(&gd).map(|(a, b)| a * b).sum::<f64>();
                    }
                    total.max(0.0).sqrt()
                };
                assert!(
                    best <= cand_err + 1e-8,
                    "trial {trial}: candidate error {cand_err} beat whitened {best}"
                );
            }
        }
        assert_within(start.elapsed(), Duration::from_secs(60), "criterion 3");
    });
}

#[test]
fn criterion_04_budget_allocator_matches_exhaustive() {
    check("criterion 4 (budget allocator equals exhaustive scan)", || {
        let start = Instant::now();
        let mut rng = SplitMix64::new(0xC4);
        let all_ratios: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        for trial in 0..50 {
            let n_layers = 1 + rng.below(12) as usize;
            let n_ratios = 1 + rng.below(9) as usize;
            let mut records = Vec::new();
            for li in 0..n_layers {
                let layer = LayerRef::new(li, LayerKind::QProj);
                let rows = 4 + rng.below(37) as usize;
                let cols = 4 + rng.below(37) as usize;
                for &ratio in &all_ratios[..n_ratios] {
                    records.push(SensitivityRecord {
                        layer,
                        rows,
                        cols,
                        ratio,
                        rank: decompose::rank_for_ratio(rows, cols, ratio).unwrap(),
                        metric: rng.next_f64(),
                    });
                }
            }
            let profile = SensitivityProfile {
                metric: MetricKind::OutputError,
                baseline: 0.0,
                records,
            };
            let target = 0.02 + 0.98 * rng.next_f64();

            let exhaustive = (0..=profile.records.len())
                .map(|s| prefix_allocation(&profile, s).unwrap())
                .find(|a| a.param_ratio <= target + 1e-12);

            match (allocate_param_target(&profile, target), exhaustive) {
                (Ok(got), Some(want)) => {
                    assert!(got.param_ratio <= target + 1e-12, "trial {trial}: over budget");
                    assert_eq!(got.split_index, want.split_index, "trial {trial}");
                    assert_eq!(got.choices, want.choices, "trial {trial}");
                }
                (Err(Error::InfeasibleBudget { best_achievable }), None) => {
                    let floor = prefix_allocation(&profile, profile.records.len())
                        .unwrap()
                        .param_ratio;
                    assert_eq!(best_achievable, floor, "trial {trial}");
                }
                (got, want) => panic!("trial {trial}: {got:?} vs exhaustive {want:?}"),
            }
        }
        assert_within(start.elapsed(), Duration::from_secs(5), "criterion 4");
    });
}

#[test]
fn criterion_05_transform_identity() {
    check("criterion 5 (scale-then-unscale is lossless)", || {
        let mut rng = SplitMix64::new(0xC5);
        for trial in 0..100 {
            let channels = 2 + rng.below(30) as usize;
            let rows = 2 + rng.below(30) as usize;
            let x = gaussian_matrix(&mut rng, channels, channels * 3);
            let stats = ActivationStats::from_activations(&x);
            let transform = if trial % 2 == 0 {
                let kind = if trial % 4 == 0 { StatKind::AbsMean } else { StatKind::AbsMax };
                let alpha = [0.25, 0.5, 1.0][trial % 3];
                ScalingTransform::from_stats(&stats, kind, alpha).unwrap()
            } else {
                ScalingTransform::whitening(&stats).unwrap()
            };
            let w = gaussian_matrix(&mut rng, rows, channels);
            let back = transform
                .apply_inverse_right(&transform.apply_right(&w).unwrap())
                .unwrap();
            let rel = back.sub(&w).frob_norm() / w.frob_norm();
            assert!(rel < 1e-9, "trial {trial}: relative error {rel}");
        }
    });
}

#[test]
fn criterion_06_kv_cache_exactness() {
    check("criterion 6 (latent KV cache tracks the materialized model)", || {
        let model = TinyModel::synth(TinyModelConfig::default()).unwrap();
        let cfg = model.config().clone();
        assert_eq!((cfg.d_model, cfg.n_blocks), (64, 2));

        let batches = synth_token_batches(cfg.vocab, cfg.seed, 2, 48);
        let calib = CalibrationSet::collect(&model, &batches).unwrap();
        let spec = MethodSpec::default();
        let (kv_model, report) =
            kvcache::kv_decompose(&model, &calib, &spec, &KvRankSpec::UniformRatio(0.5)).unwrap();

        // Exact ratio arithmetic: r_k + r_v latent floats against 2N.
        let (rank_k, rank_v) = (report.blocks[0].rank_k, report.blocks[0].rank_v);
        assert_eq!(
            report.memory_ratio,
            (rank_k + rank_v) as f64 / (2 * cfg.d_model) as f64
        );

        let tokens = synth_token_batches(cfg.vocab, 123, 1, 32).remove(0);
        let cached = kvcache::generate_with_cache(&kv_model, &tokens).unwrap();
        let materialized = kv_model.materialize().forward_traced(&tokens).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in cached.attn_outputs.iter().zip(&materialized.attn_outputs) {
            worst = worst.max(a.max_abs_diff(b));
        }
        assert!(worst < 1e-9, "attention outputs deviate by {worst}");
    });
}

#[test]
fn criterion_07_absorption_quantization_ordering() {
    check("criterion 7 (balanced absorption quantizes best)", || {
        let mut rng = SplitMix64::new(0xC7);
        let (n, k, bits) = (64, 16, 6);
        let sing: Vec<f64> = (0..n).map(|i| 0.8f64.powi(i as i32)).collect();
        let mut beat_u = 0;
        let mut beat_v = 0;
        for _ in 0..100 {
            let u = random_orthonormal(&mut rng, n);
            let v = random_orthonormal(&mut rng, n);
            let w = u.mul_diag_right(&sing).matmul(&v.transpose());
            let gram = gaussian_matrix(&mut rng, n, 2 * n).gram();

            let mut err = BTreeMap::new();
            for absorption in [Absorption::SqrtSplit, Absorption::IntoU, Absorption::IntoV] {
                let spec = MethodSpec {
                    method: Method::Svd,
                    absorption,
                    ..MethodSpec::default()
                };
                let layer = decompose::decompose_layer(&w, &spec, None, k).unwrap();
                err.insert(
                    spec.absorption.as_str(),
                    asvd::quantized_output_error(&layer, &w, &gram, bits).unwrap(),
                );
            }
            if err["sqrt_split"] <= err["into_u"] {
                beat_u += 1;
            }
            if err["sqrt_split"] <= err["into_v"] {
                beat_v += 1;
            }
        }
        assert!(beat_u >= 90, "balanced beat one-sided-U in only {beat_u}/100");
        assert!(beat_v >= 90, "balanced beat one-sided-V in only {beat_v}/100");
    });
}

#[test]
fn criterion_08_ratio_arithmetic() {
    check("criterion 8 (parameter and MAC ratios agree)", || {
        let mut rng = SplitMix64::new(0xC8);
        for _ in 0..1000 {
            let m = 1 + rng.below(512) as usize;
            let n = 1 + rng.below(512) as usize;
            let k = 1 + rng.below(600) as usize;
            assert_eq!(decompose::param_ratio(m, n, k), decompose::mac_ratio(m, n, k));
        }
        assert_eq!(decompose::rank_for_ratio(4096, 4096, 0.5).unwrap(), 1024);
        assert_eq!(decompose::param_ratio(4096, 4096, 2048), 1.0);
    });
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_asvd"))
        .args(args)
        .status()
        .expect("spawn CLI");
    assert!(status.success(), "asvd {args:?} exited with {status}");
}

fn run_pipeline(dir: &Path) {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    run_cli(&["synth", "--out", &p("model.bin")]);
    run_cli(&["calibrate", "--model", &p("model.bin"), "--out", &p("calib.bin")]);
    run_cli(&[
        "profile",
        "--model",
        &p("model.bin"),
        "--calib",
        &p("calib.bin"),
        "--out",
        &p("profile.txt"),
        "--metric",
        "output_error",
    ]);
    run_cli(&[
        "compress",
        "--model",
        &p("model.bin"),
        "--calib",
        &p("calib.bin"),
        "--profile",
        &p("profile.txt"),
        "--out",
        &p("compressed.bin"),
        "--target-ratio",
        "0.9",
        "--report",
        &p("report.txt"),
    ]);
    run_cli(&[
        "evaluate",
        "--model",
        &p("compressed.bin"),
        "--calib",
        &p("calib.bin"),
        "--baseline",
        &p("model.bin"),
        "--out",
        &p("eval.txt"),
    ]);
}

#[test]
fn criterion_09_end_to_end_pipeline() {
    check("criterion 9 (CLI pipeline is fast, on target, reproducible)", || {
        let start = Instant::now();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_pipeline(dir_a.path());
        run_pipeline(dir_b.path());

        let files = ["model.bin", "calib.bin", "profile.txt", "compressed.bin", "report.txt", "eval.txt"];
        for f in files {
            let a = std::fs::read(dir_a.path().join(f)).unwrap();
            let b = std::fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }

        // Achieved ratio obeys the budget and sits within one record of
        // it: backing off the last substitution would exceed the target.
        let text = std::fs::read_to_string(dir_a.path().join("profile.txt")).unwrap();
        let profile = SensitivityProfile::from_text(&text).unwrap();
        let target = 0.9;
        let alloc = allocate_param_target(&profile, target).unwrap();
        assert!(alloc.param_ratio <= target + 1e-12);
        assert!(alloc.choices.values().any(|c| matches!(c, LayerChoice::Rank(_))));
        if alloc.split_index > 0 {
            let one_less = prefix_allocation(&profile, alloc.split_index - 1).unwrap();
            assert!(one_less.param_ratio > target + 1e-12);
        }

        let report = std::fs::read_to_string(dir_a.path().join("report.txt")).unwrap();
        let reported: f64 = report
            .lines()
            .find_map(|l| l.strip_prefix("param_ratio "))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(reported, alloc.param_ratio);

        assert_within(start.elapsed(), Duration::from_secs(120), "criterion 9");
    });
}

#[test]
fn criterion_10_perplexity_sanity() {
    check("criterion 10 (perplexity harness calibration points)", || {
        let cfg = TinyModelConfig {
            vocab: 64,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 128,
            max_seq: 64,
            seed: 9,
        };

        // Identical embedding rows make every logit column constant, so
        // the predictive distribution is uniform over the vocabulary.
        let uniform = {
            let model = TinyModel::synth(cfg.clone()).unwrap();
            let row: Vec<f64> = (0..cfg.d_model).map(|j| (j as f64 * 0.37).sin()).collect();
            let embed = Matrix::from_fn(cfg.vocab, cfg.d_model, |_, j| row[j]);
            model.with_embed(embed).unwrap()
        };
        let tokens = synth_token_batches(cfg.vocab, 5, 1, 48).remove(0);
        let ppl = uniform.perplexity(&tokens).unwrap();
        assert!(
            (ppl - cfg.vocab as f64).abs() < 1e-9,
            "uniform model perplexity {ppl} vs vocab {}",
            cfg.vocab
        );

        // A huge identity embedding with silenced residual branches keeps
        // the hidden state one-hot, so a constant sequence is predicted
        // with probability one.
        let certain = {
            let mut model = TinyModel::synth(cfg.clone())
                .unwrap()
                .with_embed(Matrix::identity(cfg.vocab).scale(1000.0))
                .unwrap()
                .with_pos(Matrix::zeros(cfg.max_seq, cfg.d_model))
                .unwrap();
            for b in 0..cfg.n_blocks {
                let o = LayerRef::new(b, LayerKind::OProj);
                let d = LayerRef::new(b, LayerKind::DownProj);
                model = model
                    .swap_layer(o, LayerSlot::Dense(Matrix::zeros(cfg.d_model, cfg.d_model)))
                    .unwrap();
                model = model
                    .swap_layer(d, LayerSlot::Dense(Matrix::zeros(cfg.d_model, cfg.d_ff)))
                    .unwrap();
            }
            model
        };
        let constant = vec![5u32; 32];
        let ppl_one = certain.perplexity(&constant).unwrap();
        assert!((ppl_one - 1.0).abs() < 1e-9, "certain model perplexity {ppl_one}");
    });
}
