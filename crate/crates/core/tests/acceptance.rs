//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use gdan::config::RunConfig;
use gdan::data::{make_synth_benchmark, SynthBenchConfig};
use gdan::diagnostics::gradient_report;
use gdan::eval::{harmonic_mean, knn_predict, per_class_accuracy, sweep_synth_count};
use gdan::gradcheck::GRAD_CHECK_TOLERANCE;
use gdan::losses::kl_unit_gaussian;
use gdan::rng::Seeds;
use gdan::run::{self, AblationRow, TrainReport, BEST_CHECKPOINT, METRICS_FILE};
use gdan::training::{Checkpoint, Variant};
use gdan::Matrix;
use rand::Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Seeds out of five on which a trend must hold.
const MIN_SEEDS: usize = 4;

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

const KL_PAIRS: usize = 10;
const KL_SAMPLES: usize = 1_000_000;
const KL_TOLERANCE: f64 = 1e-2;

const HARMONIC_TOLERANCE: f64 = 0.1;

const KNN_INSTANCES: usize = 100;
const KNN_BUDGET: Duration = Duration::from_secs(60);

const MIN_UNSEEN: f64 = 0.60;
const MIN_HARMONIC: f64 = 0.65;
const SEED_BUDGET: Duration = Duration::from_secs(300);

const ABLATION_SLACK: f64 = 0.02;
/// Smallest gap between the full model and a single-component row on the
/// same dataset in the published component analysis (aPY: 30.4 vs 11.5).
const STANDALONE_GAP: f64 = 0.189;

/// Slack for comparing accuracies that are exact ratios of small counts.
const EPS: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let worst = gradient_report(0..GRADCHECK_SEEDS).expect("gradient checks run");
    let elapsed = start.elapsed();
    let max = worst.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let all = worst.iter().all(|c| c.max_rel_error < GRAD_CHECK_TOLERANCE);
    let per: Vec<String> = worst.iter().map(|c| format!("{} {:.1e}", c.loss, c.max_rel_error)).collect();
    outcome(
        all && elapsed < GRADCHECK_BUDGET,
        format!(
            "max rel error {max:.2e} (tolerance {GRAD_CHECK_TOLERANCE:.0e}) over {GRADCHECK_SEEDS} seeds in {:.1}s [{}]",
            elapsed.as_secs_f64(),
            per.join(", ")
        ),
    )
}

/// Monte-Carlo estimate of KL(q || N(0, I)) for one diagonal Gaussian row.
fn kl_monte_carlo(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..KL_SAMPLES {
        let mut log_ratio = 0.0;
        for (&m, &lv) in mu.iter().zip(logvar) {
            let eps: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * lv).exp() * eps;
            // log q(z) - log p(z); the 2π terms cancel.
            log_ratio += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
        }
        total += log_ratio;
    }
    total / KL_SAMPLES as f64
}

fn kl_correctness() -> Outcome {
    let mut rng = Seeds::new(2024).stream("kl");
    let mut worst: f64 = 0.0;
    for _ in 0..KL_PAIRS {
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.0)).collect();
        let closed = kl_unit_gaussian(
            &Matrix::from_vec(1, 4, mu.clone()).unwrap(),
            &Matrix::from_vec(1, 4, lv.clone()).unwrap(),
        )
        .unwrap();
        worst = worst.max((closed - kl_monte_carlo(&mu, &lv, &mut rng)).abs());
    }
    let zero = kl_unit_gaussian(&Matrix::zeros(3, 5), &Matrix::zeros(3, 5)).unwrap();
    outcome(
        worst < KL_TOLERANCE && zero == 0.0,
        format!("worst |closed - MC| {worst:.2e} over {KL_PAIRS} pairs x {KL_SAMPLES} samples; kl(0,0) = {zero}"),
    )
}

fn metric_arithmetic() -> Outcome {
    let cub = harmonic_mean(0.393, 0.667).unwrap() * 100.0;
    let awa2 = harmonic_mean(0.321, 0.675).unwrap() * 100.0;
    // Class a: 2 of 2 right; class b: 0 of 8 right.
    let preds = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let truths = [0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
    let per_class = per_class_accuracy(&preds, &truths, &[0, 1]).unwrap().mean();
    let pass = (cub - 49.5).abs() <= HARMONIC_TOLERANCE && (awa2 - 43.5).abs() <= HARMONIC_TOLERANCE && per_class == 0.5;
    outcome(
        pass,
        format!("H(39.3, 66.7) = {cub:.2}, H(32.1, 67.5) = {awa2:.2}, per-class 2/2 vs 0/8 = {per_class}"),
    )
}

fn brute_force_nn(train: &Matrix, labels: &[usize], q: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for i in 0..train.rows() {
        let d: f64 = train.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, labels[i]);
        }
    }
    best.1
}

fn knn_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Seeds::new(7).stream("knn");
    let mut mismatches = 0;
    let mut queries_checked = 0;
    for instance in 0..KNN_INSTANCES {
        let n = rng.random_range(1..=500);
        let d = rng.random_range(1..=50);
        let m = rng.random_range(1..=60);
        // Every other instance sits on a coarse grid so exact ties occur.
        let grid = instance % 2 == 0;
        let value = |r: &mut gdan::rng::Rng| {
            if grid {
                r.random_range(0..3) as f64
            } else {
                r.random_range(-1.0..1.0)
            }
        };
        let train = Matrix::from_fn(n, d, |_, _| value(&mut rng));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..20)).collect();
        let queries = Matrix::from_fn(m, d, |_, _| value(&mut rng));
        let got = knn_predict(&train, &labels, &queries).unwrap();
        for (i, g) in got.iter().enumerate() {
            if *g != brute_force_nn(&train, &labels, queries.row(i)) {
                mismatches += 1;
            }
        }
        queries_checked += m;
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < KNN_BUDGET,
        format!(
            "{mismatches} mismatches over {KNN_INSTANCES} instances ({queries_checked} queries) in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Everything trained for one benchmark seed.
struct SeedRun {
    seed: u64,
    elapsed: Duration,
    reports: BTreeMap<Variant, TrainReport>,
    rows: Vec<AblationRow>,
    sweep: (f64, f64),
    sweep_retry: Option<(f64, f64)>,
}

impl SeedRun {
    fn unseen(&self, variant: Variant) -> f64 {
        self.reports[&variant].test.acc_unseen
    }
}

fn bench_config(seed: u64, dir: &Path) -> RunConfig {
    RunConfig {
        seed,
        output_dir: dir.to_path_buf(),
        ..RunConfig::desk_scale()
    }
}

/// U at 10 and 400 synthetic samples per class.
fn sweep_pair(ckpt: &Checkpoint, stream: &str, seed: u64) -> (f64, f64) {
    let ds = make_synth_benchmark(&SynthBenchConfig::default()).unwrap();
    let rows = sweep_synth_count(&ckpt.model, &ds, &[10, 400], true, &Seeds::new(seed).stream(stream)).unwrap();
    (rows[0].metrics.acc_unseen, rows[1].metrics.acc_unseen)
}

fn train_seed(seed: u64, root: &Path) -> SeedRun {
    let dir = root.join(format!("seed-{seed}"));
    let cfg = bench_config(seed, &dir);
    let start = Instant::now();
    let rows = run::run_ablation(&cfg).expect("ablation run");
    let elapsed = start.elapsed();
    let reports = Variant::ALL
        .into_iter()
        .map(|v| {
            let text = std::fs::read_to_string(dir.join(v.name()).join(METRICS_FILE)).unwrap();
            (v, serde_json::from_str(&text).unwrap())
        })
        .collect();
    let best = Checkpoint::load(&dir.join(Variant::FullGdan.name()).join(BEST_CHECKPOINT)).unwrap();
    let sweep = sweep_pair(&best, "sweep", seed);
    let sweep_retry = (sweep.1 + EPS < sweep.0).then(|| sweep_pair(&best, "sweep-retry", seed));
    SeedRun {
        seed,
        elapsed,
        reports,
        rows,
        sweep,
        sweep_retry,
    }
}

fn end_to_end(runs: &[SeedRun]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let t = &r.reports[&Variant::FullGdan].test;
        let pass = t.acc_unseen + EPS >= MIN_UNSEEN && t.harmonic + EPS >= MIN_HARMONIC && r.elapsed < SEED_BUDGET;
        ok += pass as usize;
        parts.push(format!(
            "seed {}: U {:.3} H {:.3}{}",
            r.seed,
            t.acc_unseen,
            t.harmonic,
            if pass { "" } else { " (miss)" }
        ));
    }
    let slowest = runs.iter().map(|r| r.elapsed.as_secs_f64()).fold(0.0, f64::max);
    outcome(
        ok >= MIN_SEEDS,
        format!(
            "{ok}/5 seeds with U >= {MIN_UNSEEN} and H >= {MIN_HARMONIC}; slowest seed (all six variants) {slowest:.0}s; {}",
            parts.join("; ")
        ),
    )
}

fn ablation_trend(runs: &[SeedRun]) -> Outcome {
    let mut trend_ok = 0;
    let mut gap_ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let full = r.unseen(Variant::FullGdan);
        let rivals = [Variant::CvaeOnly, Variant::GdanNoDisc, Variant::GdanNoReg];
        let trend = rivals.iter().all(|&v| full + EPS >= r.unseen(v) - ABLATION_SLACK);
        let standalone = [Variant::DiscriminatorOnly, Variant::RegressorOnly];
        let gap = standalone.iter().all(|&v| full - r.unseen(v) + EPS >= STANDALONE_GAP);
        trend_ok += trend as usize;
        gap_ok += gap as usize;
        let row = |label: &str| r.rows.iter().find(|x| x.row == label).unwrap().acc_unseen;
        parts.push(format!(
            "seed {}: GDAN {:.3} CVAE {:.3} w/o-Disc {:.3} w/o-Reg {:.3} Disc {:.3} Reg {:.3} Disc-GDAN {:.3} Reg-GDAN {:.3}",
            r.seed,
            full,
            r.unseen(Variant::CvaeOnly),
            r.unseen(Variant::GdanNoDisc),
            r.unseen(Variant::GdanNoReg),
            r.unseen(Variant::DiscriminatorOnly),
            r.unseen(Variant::RegressorOnly),
            row("Discriminator-GDAN"),
            row("Regressor-GDAN"),
        ));
    }
    outcome(
        trend_ok >= MIN_SEEDS && gap_ok >= MIN_SEEDS,
        format!(
            "full >= joint variants - {ABLATION_SLACK} on {trend_ok}/5 seeds; standalone at least {STANDALONE_GAP} below on {gap_ok}/5 seeds; {}",
            parts.join("; ")
        ),
    )
}

fn sweep_trend(runs: &[SeedRun]) -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for r in runs {
        let (u10, u400) = r.sweep;
        let mut text = format!("seed {}: U@10 {u10:.3} U@400 {u400:.3}", r.seed);
        let pass = match r.sweep_retry {
            None => true,
            Some((a, b)) => {
                text.push_str(&format!(", retry U@10 {a:.3} U@400 {b:.3}"));
                b + EPS >= a
            }
        };
        all &= pass;
        parts.push(text);
    }
    outcome(all, parts.join("; "))
}

fn determinism(first: &SeedRun, root: &Path) -> Outcome {
    let dir = root.join("determinism");
    let cfg = bench_config(first.seed, &dir);
    run::run_train(&cfg, false).expect("second run");
    let a = std::fs::read(root.join(format!("seed-{}", first.seed)).join("full-gdan").join(METRICS_FILE)).unwrap();
    let b = std::fs::read(dir.join(METRICS_FILE)).unwrap();
    outcome(
        a == b,
        format!("seed {}: metrics JSON {} bytes, identical = {}", first.seed, a.len(), a == b),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |id: u8, name: &'static str, o: Outcome| {
        println!("[{}] criterion {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient correctness", gradient_correctness());
    report(2, "KL correctness", kl_correctness());
    report(3, "metric arithmetic", metric_arithmetic());
    report(4, "1-NN oracle equivalence", knn_equivalence());

    let root = tempfile::tempdir().unwrap();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| train_seed(s, root.path())).collect();
    report(5, "end-to-end learning", end_to_end(&runs));
    report(6, "ablation trend", ablation_trend(&runs));
    report(7, "sweep trend", sweep_trend(&runs));
    report(8, "determinism", determinism(&runs[0], root.path()));
    println!("[SKIP] criterion 9 real-feature runs: non-gating, needs user-supplied converted feature files");

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed, 1 skipped",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
