//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 and 6 are correctness properties and fail the test run.
//! Criteria 4 and 5 are desk-scale reproductions of empirical trends; they
//! are reported, and only enforced when `MCL_ACCEPTANCE_STRICT=1`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use mcl_core::causal::{counterfactual_category, effect_profile, factual_category, CausalEffect, EffectProfile};
use mcl_core::checkpoint::Checkpoint;
use mcl_core::cli::{self, Cli, EffectsReport};
use mcl_core::imgops::{apply_factor, Factor, FactorMode, TransformSpec};
use mcl_core::model::{Network, NetworkSpec};
use mcl_core::objective::mapping_weights;
use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const GRAD_P99: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-6;
const INVERSION_TOL: f64 = 0.01;
const ABLATION_GAP: f64 = 1.0;
const LIMIT_1: Duration = Duration::from_secs(60);
const LIMIT_2: Duration = Duration::from_secs(60);
const LIMIT_3: Duration = Duration::from_secs(60);
const LIMIT_4: Duration = Duration::from_secs(20 * 60);
const LIMIT_5: Duration = Duration::from_secs(30 * 60);
const LIMIT_6: Duration = Duration::from_secs(10 * 60);

// Desk-scale benchmark.
const FIG5_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_SEEDS: usize = 3;
const EPOCHS: usize = 3;
const EFFECT_SAMPLES: usize = 200;
const TARGET_SEED: u64 = 7;

struct Outcome {
    id: u8,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

impl Outcome {
    fn print(&self) {
        println!(
            "[{}] criterion {}: {} :: {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        );
    }
}

fn timed(id: u8, title: &'static str, limit: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = start.elapsed();
    if elapsed > limit {
        pass = false;
        detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
    }
    let o = Outcome { id, title, pass, detail, elapsed };
    o.print();
    o
}

fn criterion_1() -> (bool, String) {
    let mut graph_errs = Vec::new();
    for i in 0..24 {
        graph_errs.extend(graph_rel_errors(&random_graph(i)));
    }
    let mut loss_errs = Vec::new();
    for seed in 0..3 {
        loss_errs.extend(total_loss_rel_errors(&tiny_problem(seed)));
    }
    let gp = percentile(&graph_errs, 0.99);
    let lp = percentile(&loss_errs, 0.99);
    (
        gp <= GRAD_P99 && lp <= GRAD_P99,
        format!(
            "24 graphs ({} entries) p99 {gp:.2e}; total loss ({} entries) p99 {lp:.2e}; bound {GRAD_P99:e}",
            graph_errs.len(),
            loss_errs.len()
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let catalog = FactorMode::All.catalog().unwrap();
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + case);
        let classes = rng.gen_range(2..6);
        let spec = NetworkSpec { height: 12, width: 12, channels: 1 + 2 * (case as usize % 2), classes, feature_dim: 8, factors: 16, conv_channels: [3, 4], weight_hidden: 4 };
        let net = Network::<f64>::init(spec, case).unwrap();
        let x = random_image(&mut rng, 12, 12, net.spec.channels);
        let m = [1, 3, 5][case as usize % 3];
        let id = rng.gen();
        let got = effect_profile(&net, &x, &catalog, m, id).unwrap();
        let want = oracle_profile(&net, &x, &catalog, m, id);
        for (e, w) in got.effects.iter().zip(&want) {
            for (a, b) in e.effect.iter().zip(w) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let mut null_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = Network::<f32>::init(NetworkSpec::new(12, 12, 1, 10, 16), 1).unwrap();
    for _ in 0..10 {
        let x = random_image(&mut rng, 12, 12, 1);
        let y = factual_category(&net, &x).unwrap();
        for f in Factor::ALL {
            if let Some(d) = f.identity_degree() {
                let y_hat = counterfactual_category(&net, &x, f, &[Some(d)], rng.gen()).unwrap();
                null_ok &= y_hat == y;
            }
        }
    }
    (
        worst <= ORACLE_TOL && null_ok,
        format!("max |profile - brute force| {worst:.2e} (bound {ORACLE_TOL:e}); null interventions exactly zero: {null_ok}"),
    )
}

fn criterion_3() -> (bool, String) {
    let mut simplex_fail = 0;
    for i in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let k = [14, 16, 12, 4][i as usize % 4];
        let classes = rng.gen_range(2..11);
        let spec = NetworkSpec { height: 4, width: 4, channels: 1, classes, feature_dim: 2, factors: k, conv_channels: [1, 1], weight_hidden: 32 };
        let mut net = Network::<f64>::init(spec, i).unwrap();
        let scale = rng.gen_range(0.1..5.0);
        for p in [&mut net.weigher.fc1_w, &mut net.weigher.fc1_b, &mut net.weigher.fc2_w, &mut net.weigher.fc2_b] {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        let profile = EffectProfile {
            sample_id: i,
            effects: (0..k)
                .map(|j| {
                    let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    let mean = 1.0 / classes as f64;
                    CausalEffect { factor: Factor::ALL[j % 16], effect: raw.iter().map(|v| v / s - mean).collect() }
                })
                .collect(),
        };
        let w = mapping_weights(&net, &profile).unwrap();
        let ok = w.values().len() == k
            && w.values().iter().all(|&v| v > 0.0 && v <= 1.0)
            && (w.values().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL;
        simplex_fail += (!ok) as usize;
    }

    let mut transform_fail = Vec::new();
    for f in Factor::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(f.index() as u64 + 40);
        let mut ok = true;
        for _ in 0..100 {
            let c = if rng.gen_bool(0.5) { 1 } else { 3 };
            let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
            let x = random_image(&mut rng, h, w, c);
            if let Some(d) = f.identity_degree() {
                let spec = TransformSpec { factor: f, degree: Some(d), noise_seed: Some(rng.gen()) };
                ok &= apply_factor(&x, &spec).unwrap() == x;
            }
            if matches!(f, Factor::Invert | Factor::Flip) {
                let spec = TransformSpec::new(f, None);
                ok &= apply_factor(&apply_factor(&x, &spec).unwrap(), &spec).unwrap() == x;
            }
            for _ in 0..3 {
                let spec = TransformSpec { factor: f, degree: f.sample_degree(&mut rng), noise_seed: Some(rng.gen()) };
                let y = apply_factor(&x, &spec).unwrap();
                ok &= y.shape() == x.shape() && y.pixels().iter().all(|v| (0.0..=1.0).contains(v));
                ok &= apply_factor(&x, &spec).unwrap() == y;
            }
        }
        if !ok {
            transform_fail.push(f.name());
        }
    }
    (
        simplex_fail == 0 && transform_fail.is_empty(),
        format!(
            "{simplex_fail}/1000 weight vectors off the simplex; factors failing identity/involution/range checks on 100 images: {:?}",
            transform_fail
        ),
    )
}

fn run(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["mcl"];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    let mut sink = Vec::new();
    cli::dispatch(parsed.command, &mut sink).map_err(|e| e.to_string())
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/mnist2k").join(name).display().to_string()
}

fn bench_config(dir: &Path, seed: u64, variant: &str, targets: &[PathBuf]) -> PathBuf {
    let targets: Vec<String> = targets.iter().map(|t| format!("\"{}\"", t.display())).collect();
    let text = format!(
        r#"{{
  "seed": {seed},
  "epochs": {EPOCHS},
  "variant": "{variant}",
  "factor_mode": "digits",
  "source_train": "{}",
  "targets": [{}],
  "train_limit": 1000,
  "test_limit": 1000,
  "m": 5,
  "am_factors": 3,
  "conv_channels": [16, 32],
  "loss_weights": {{"classification": 1.0, "causal_alignment": 0.3, "marginal_alignment": 0.3}}
}}
"#,
        fixture("train-images-idx3-ubyte"),
        targets.join(", ")
    );
    let p = dir.join(format!("{variant}-{seed}.json"));
    std::fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, seed: u64, variant: &str, targets: &[PathBuf]) -> Result<PathBuf, String> {
    let cfg = bench_config(dir, seed, variant, targets);
    let out = dir.join(format!("{variant}-{seed}"));
    run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--quiet"])?;
    Ok(out)
}

fn target_accuracy(run_dir: &Path) -> f64 {
    let csv = std::fs::read_to_string(run_dir.join(cli::METRICS_FILE)).unwrap();
    let line = csv.lines().find(|l| l.contains(",target:")).expect("target row");
    line.rsplit(',').next().unwrap().parse().unwrap()
}

fn generate_targets(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let input = fixture("test-images-idx3-ubyte");
    let out = dir.join("targets");
    (1..=5)
        .map(|s| {
            let sev = s.to_string();
            let seed = TARGET_SEED.to_string();
            run(&["gen-corrupt", "--input", &input, "--factor", "NoiseGaussian", "--severity", &sev, "--seed", &seed, "--out", out.to_str().unwrap()])?;
            Ok(out.join(format!("NoiseGaussian-s{s}.json")))
        })
        .collect()
}

/// Non-decreasing with at most one adjacent drop, itself no larger than the tolerance.
fn nearly_monotone(values: &[f64]) -> bool {
    let drops: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= INVERSION_TOL)
}

fn criterion_4(dir: &Path, targets: &[PathBuf]) -> (bool, String) {
    let mut passing = 0;
    let mut notes = Vec::new();
    for seed in FIG5_SEEDS {
        let run_dir = match train(dir, seed, "full", &targets[2..3]) {
            Ok(d) => d,
            Err(e) => return (false, format!("seed {seed}: training failed: {e}")),
        };
        let ckpt = run_dir.join(cli::CHECKPOINT_FILE);
        let mut series = Vec::new();
        let mut top_at_5 = false;
        for (s, t) in targets.iter().enumerate() {
            let out = run_dir.join(format!("effects-s{}.json", s + 1));
            let limit = EFFECT_SAMPLES.to_string();
            if let Err(e) = run(&["effects", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", t.to_str().unwrap(), "--limit", &limit, "--out", out.to_str().unwrap()]) {
                return (false, format!("seed {seed}: effects failed: {e}"));
            }
            let report: EffectsReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
            let w = report.mean_weight(Factor::NoiseGaussian).expect("NoiseGaussian in catalog");
            series.push(w);
            if s == 4 {
                let best = report.mean_weights.iter().cloned().fold(f64::MIN, f64::max);
                top_at_5 = w == best;
                let arg = report.catalog[report.mean_weights.iter().position(|&v| v == best).unwrap()];
                notes.push(format!(
                    "seed {seed}: w_NG {} argmax@5 {arg}",
                    series.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>().join("/")
                ));
            }
        }
        if nearly_monotone(&series) && top_at_5 {
            passing += 1;
        }
    }
    (passing >= 3, format!("{passing}/5 seeds monotone with NoiseGaussian on top at severity 5 (need 3); {}", notes.join("; ")))
}

fn criterion_5(dir: &Path, targets: &[PathBuf]) -> (bool, String) {
    let s3 = &targets[2..3];
    let mut means = Vec::new();
    for variant in ["base", "dt", "dta", "full"] {
        let mut accs = Vec::new();
        for seed in &FIG5_SEEDS[..ABLATION_SEEDS] {
            let run_dir = dir.join(format!("{variant}-{seed}"));
            let run_dir = if run_dir.join(cli::METRICS_FILE).exists() {
                run_dir
            } else {
                match train(dir, *seed, variant, s3) {
                    Ok(d) => d,
                    Err(e) => return (false, format!("{variant} seed {seed}: {e}")),
                }
            };
            accs.push(target_accuracy(&run_dir));
        }
        means.push((variant, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let get = |v: &str| means.iter().find(|(n, _)| *n == v).unwrap().1;
    let (base, dt, full) = (get("base"), get("dt"), get("full"));
    let pass = full - dt >= ABLATION_GAP && dt - base >= ABLATION_GAP;
    (
        pass,
        format!(
            "NoiseGaussian-s3 accuracy over {ABLATION_SEEDS} seeds: base {base:.2}, dt {dt:.2}, dta {:.2}, full {full:.2}; need full >= dt + {ABLATION_GAP} and dt >= base + {ABLATION_GAP}",
            get("dta")
        ),
    )
}

fn criterion_6(dir: &Path) -> (bool, String) {
    let text = format!(
        r#"{{"seed": 21, "epochs": 2, "variant": "full", "factor_mode": "digits", "source_train": "{}",
            "source_test": "{}", "train_limit": 200, "test_limit": 100, "am_factors": 3, "conv_channels": [16, 32],
            "loss_weights": {{"causal_alignment": 0.3, "marginal_alignment": 0.3}}}}"#,
        fixture("train-images-idx3-ubyte"),
        fixture("test-images-idx3-ubyte")
    );
    let cfg = dir.join("repro.json");
    std::fs::write(&cfg, text).unwrap();
    let mut outputs = Vec::new();
    for name in ["repro-a", "repro-b"] {
        let out = dir.join(name);
        if let Err(e) = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--quiet"]) {
            return (false, e);
        }
        let ckpt = std::fs::read(out.join(cli::CHECKPOINT_FILE)).unwrap();
        let metrics = std::fs::read(out.join(cli::METRICS_FILE)).unwrap();
        outputs.push((ckpt, metrics));
    }
    let same_ckpt = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;
    let loads = Checkpoint::from_bytes(&outputs[0].0).is_ok();
    (
        same_ckpt && same_metrics && loads,
        format!("checkpoint identical: {same_ckpt} ({} bytes); metrics identical: {same_metrics}", outputs[0].0.len()),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    std::env::set_var("MCL_THREADS", "1");
    let strict = std::env::var("MCL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let dir = tempfile::tempdir().unwrap();
    let mut outcomes = vec![
        timed(1, "gradient integrity", LIMIT_1, criterion_1),
        timed(2, "counterfactual oracle equivalence", LIMIT_2, criterion_2),
        timed(3, "simplex and transform invariants", LIMIT_3, criterion_3),
        timed(6, "reproducibility", LIMIT_6, || criterion_6(dir.path())),
    ];
    let targets = generate_targets(dir.path()).expect("target generation");
    outcomes.push(timed(4, "NoiseGaussian weight grows with severity", LIMIT_4, || criterion_4(dir.path(), &targets)));
    outcomes.push(timed(5, "ablation ordering full >= dt >= base", LIMIT_5, || criterion_5(dir.path(), &targets)));

    outcomes.sort_by_key(|o| o.id);
    println!("---- acceptance summary ----");
    for o in &outcomes {
        o.print();
    }
    let hard: Vec<u8> = outcomes.iter().filter(|o| !o.pass && (strict || ![4, 5].contains(&o.id))).map(|o| o.id).collect();
    if !hard.is_empty() {
        eprintln!("criteria failed: {hard:?}");
        std::process::exit(1);
    }
}
