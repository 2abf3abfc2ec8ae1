//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use logcoral::cli;
use logcoral::data::{DataSource, ShiftKind};
use logcoral::gradcheck::{random_matrix, random_spd, run_gradcheck, GradcheckConfig};
use logcoral::linalg::{matrix_exp, matrix_log, regularize_psd, sym_eig, sym_part, SymmetricMatrix};
use logcoral::losses::{coral_loss, logcoral_loss, mean_loss, LossWeights};
use logcoral::network::{evaluate, MetricRecord, TrainConfig, TrainState};
use logcoral::statistics::{batch_covariance, FeatureBatch, SmoothedStats};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).mapv(|v| v * v).sum().sqrt();
    num / b.mapv(|v| v * v).sum().sqrt().max(1e-300)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = std::collections::BTreeMap::<String, f64>::new();
    let mut failed = Vec::new();
    for dim in [2, 5, 16] {
        for seed in 0..100 {
            let config = GradcheckConfig {
                seed,
                dim,
                trials: 1,
                min_gap: 1e-3,
                ..GradcheckConfig::default()
            };
            for r in run_gradcheck(&config).expect("gradcheck runs") {
                let expected = if r.name.starts_with("logcoral") { 1e-4 } else { 1e-6 };
                let e = worst.entry(r.name.clone()).or_insert(0.0);
                *e = e.max(r.max_relative_error);
                if !r.passed || r.tolerance > expected {
                    failed.push(format!("{} d={dim} seed={seed}", r.name));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(60);
    Outcome::new(
        ok,
        format!("300 cases in {:.1}s; worst: {}; failures: {failed:?}", elapsed.as_secs_f64(), summary.join(", ")),
    )
}

fn spectral_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut log_exp, mut recon, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let d = 1 + case % 24;
        let c = random_spd(d, 1e-3, &mut rng);
        let back = matrix_exp(&matrix_log(&c).unwrap()).unwrap();
        log_exp = log_exp.max(rel(back.as_array(), c.as_array()));

        let m = sym_part(&random_matrix(d, d, &mut rng).view()).unwrap();
        let eig = sym_eig(&m).unwrap();
        recon = recon.max(rel(eig.reconstruct().as_array(), m.as_array()));

        let eps = 10f64.powf(rng.random_range(-6.0..0.0));
        let before = sym_eig(&c).unwrap().values;
        let after = sym_eig(&regularize_psd(&c, eps).unwrap()).unwrap().values;
        for (a, b) in after.iter().zip(before.iter()) {
            shift = shift.max((a - b - eps).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = log_exp <= 1e-8 && recon <= 1e-8 && shift <= 1e-10 && elapsed < Duration::from_secs(10);
    Outcome::new(
        ok,
        format!(
            "log/exp {log_exp:.1e}, reconstruction {recon:.1e}, shift {shift:.1e} in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn zero_distance_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    let tol = 1e-12;
    for case in 0..50 {
        let d = 1 + case % 10;
        let a = random_spd(d, 1e-3, &mut rng);
        let b = random_spd(d, 1e-3, &mut rng);
        let ma = Array1::from_iter(random_matrix(1, d, &mut rng).iter().copied());
        let mb = Array1::from_iter(random_matrix(1, d, &mut rng).iter().copied());
        let zero = SymmetricMatrix::zeros(d);

        let c = coral_loss(&a, &a).unwrap();
        let l = logcoral_loss(&a, &a, 1e-6).unwrap();
        let m = mean_loss(&ma.view(), &ma.view()).unwrap();
        if c.value != 0.0 || c.grad_source != zero || c.grad_target != zero {
            problems.push(format!("coral identical d={d}"));
        }
        if l.value != 0.0 || l.grad_source != zero || l.grad_target != zero {
            problems.push(format!("logcoral identical d={d}"));
        }
        if m.value != 0.0 || m.grad_source.iter().any(|v| *v != 0.0) || m.grad_target.iter().any(|v| *v != 0.0) {
            problems.push(format!("mean identical d={d}"));
        }

        let (ab, ba) = (coral_loss(&a, &b).unwrap(), coral_loss(&b, &a).unwrap());
        if (ab.value - ba.value).abs() > tol * ab.value.max(1.0)
            || rel(ab.grad_source.as_array(), ba.grad_target.as_array()) > tol
            || rel(ab.grad_target.as_array(), &-ab.grad_source.as_array()) > tol
        {
            problems.push(format!("coral swap d={d}"));
        }
        let (ab, ba) = (logcoral_loss(&a, &b, 1e-6).unwrap(), logcoral_loss(&b, &a, 1e-6).unwrap());
        if (ab.value - ba.value).abs() > tol * ab.value.max(1.0)
            || rel(ab.grad_source.as_array(), ba.grad_target.as_array()) > tol
            || rel(ab.grad_target.as_array(), ba.grad_source.as_array()) > tol
        {
            problems.push(format!("logcoral swap d={d}"));
        }
        let (ab, ba) = (mean_loss(&ma.view(), &mb.view()).unwrap(), mean_loss(&mb.view(), &ma.view()).unwrap());
        let diff = (&ab.grad_source - &ba.grad_target).mapv(f64::abs).sum()
            + (&ab.grad_target + &ab.grad_source).mapv(f64::abs).sum();
        if (ab.value - ba.value).abs() > tol * ab.value.max(1.0) || diff > tol {
            problems.push(format!("mean swap d={d}"));
        }
    }
    Outcome::new(problems.is_empty(), format!("50 cases; problems: {problems:?}"))
}

fn naive_covariance(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = Array2::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            for j in 0..d {
                c[[i, j]] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    c / (n as f64 - 1.0)
}

fn covariance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let d = rng.random_range(1..20);
        let offset: f64 = rng.random_range(-10.0..10.0);
        let x = random_matrix(n, d, &mut rng) + offset;
        let fast = batch_covariance(&FeatureBatch::unlabeled(x.clone()).unwrap()).unwrap();
        let slow = naive_covariance(&x);
        let err = (fast.as_array() - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(err);
    }
    Outcome::new(worst <= 1e-10, format!("1000 batches, max abs error {worst:.1e}"))
}

/// Final target accuracy for one method and seed on the default benchmark.
fn benchmark_run(weights: &str, seed: u64) -> (f64, Vec<MetricRecord>) {
    let config = TrainConfig {
        data: DataSource::Synthetic {
            shift: ShiftKind::Benchmark,
            seed,
        },
        weights: weights.parse::<LossWeights>().unwrap(),
        seed,
        ..TrainConfig::default()
    };
    let data = config.data.load().unwrap();
    let mut state = TrainState::for_dataset(config, &data).unwrap();
    let mut log = Vec::new();
    state.run(&data, |r| log.push(*r)).unwrap();
    (evaluate(state.model(), &data.target).unwrap(), log)
}

const SEEDS: u64 = 5;

fn adaptation_gain() -> Outcome {
    let start = Instant::now();
    let acc = |w: &str| median((0..SEEDS).map(|s| benchmark_run(w, s).0).collect());
    let baseline = acc("cls=1");
    let coral = acc("cls=1,coral=1");
    let logcoral = acc("cls=1,logcoral=1");
    let combined = acc("cls=1,logcoral=1,mean=1");
    let elapsed = start.elapsed();
    let gain = 100.0 * (combined - baseline);
    let ok = gain >= 3.0 && logcoral >= coral - 0.005 && elapsed < Duration::from_secs(300);
    Outcome::new(
        ok,
        format!(
            "median target acc: baseline {baseline:.3}, coral {coral:.3}, logcoral {logcoral:.3}, logcoral+mean {combined:.3} (gain {gain:+.1} pt) in {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Window sizes (in steps) used to compare a logged metric when alignment
/// switches on and at the end of training.
const START_WINDOW: usize = 20;
const END_WINDOW: usize = 100;

fn relative_change(log: &[MetricRecord], metric: impl Fn(&MetricRecord) -> f64) -> f64 {
    let avg = |rs: &[MetricRecord]| rs.iter().map(&metric).sum::<f64>() / rs.len() as f64;
    let warmup = TrainConfig::default().warmup_steps;
    let begin = log.iter().position(|r| r.step > warmup).unwrap();
    let first = avg(&log[begin..begin + START_WINDOW]);
    let last = avg(&log[log.len() - END_WINDOW..]);
    last / first - 1.0
}

fn weak_correlation() -> Outcome {
    let start = Instant::now();
    let changes = |w: &str| {
        let runs: Vec<_> = (0..SEEDS).map(|s| benchmark_run(w, s).1).collect();
        let log = median(runs.iter().map(|r| relative_change(r, |m| m.loss_logcoral)).collect());
        let mean = median(runs.iter().map(|r| relative_change(r, |m| m.loss_mean)).collect());
        (log, mean)
    };
    let (mean_only_log, mean_only_mean) = changes("cls=1,mean=1");
    let (log_only_log, log_only_mean) = changes("cls=1,logcoral=1");
    let (both_log, both_mean) = changes("cls=1,logcoral=1,mean=1");
    let elapsed = start.elapsed();
    let ok = mean_only_log.abs() < 0.25
        && mean_only_mean <= -0.5
        && log_only_mean > -0.25
        && both_log <= -0.5
        && both_mean <= -0.5
        && elapsed < Duration::from_secs(300);
    Outcome::new(
        ok,
        format!(
            "median relative change (logcoral, mean): mean-only ({mean_only_log:+.2}, {mean_only_mean:+.2}), \
             logcoral-only ({log_only_log:+.2}, {log_only_mean:+.2}), both ({both_log:+.2}, {both_mean:+.2}) in {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("logcoral").chain(args.iter().copied()), &mut out, &mut err);
    if code != 0 {
        eprintln!("{}", String::from_utf8_lossy(&err));
    }
    code
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let common = [
        "--seed",
        "11",
        "--warmup",
        "100",
        "--eval-every",
        "25",
        "--weights",
        "cls=1,coral=0.5,logcoral=1,mean=1",
    ];
    let train = |out: &str, steps: &str, extra: &[&str]| {
        let mut args = vec!["train", "--out", out, "--steps", steps];
        args.extend_from_slice(extra);
        run_cli(&args)
    };

    let (a, b, c) = (path("a"), path("b"), path("c"));
    let mut codes = vec![train(&a, "200", &common), train(&b, "200", &common), train(&c, "50", &common)];
    let ckpt = format!("{c}/checkpoint.json");
    codes.push(train(&c, "200", &["--resume", &ckpt]));
    if codes.iter().any(|c| *c != 0) {
        return Outcome::new(false, format!("exit codes {codes:?}"));
    }
    let read = |p: String| std::fs::read(p).unwrap();
    let repeat = read(format!("{a}/metrics.jsonl")) == read(format!("{b}/metrics.jsonl"));
    let resume_log = read(format!("{a}/metrics.jsonl")) == read(format!("{c}/metrics.jsonl"));
    let resume_ckpt = read(format!("{a}/checkpoint.json")) == read(format!("{c}/checkpoint.json"));
    Outcome::new(
        repeat && resume_log && resume_ckpt,
        format!("repeat run identical: {repeat}; resumed log identical: {resume_log}; resumed checkpoint identical: {resume_ckpt}"),
    )
}

fn moving_average_contract() -> Outcome {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let first = random_spd(d, 1e-3, &mut rng).scale(10.0);
    let batch = random_spd(d, 1e-3, &mut rng);
    let first_mean = Array1::from_elem(d, 10.0);
    let batch_mean = Array1::from_iter(random_matrix(1, d, &mut rng).iter().copied());

    let mut stats = SmoothedStats::new(d, 0.9).unwrap().update(&first, &first_mean).unwrap();
    let seeded = *stats.cov() == first && *stats.mean() == first_mean;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let next = stats.update(&batch, &batch_mean).unwrap();
        let gap = stats.cov().sub(&batch);
        let next_gap = next.cov().sub(&batch);
        for (g, n) in gap.as_array().iter().zip(next_gap.as_array().iter()) {
            worst = worst.max((n / g - 0.9).abs());
        }
        for ((m, n), b) in stats.mean().iter().zip(next.mean().iter()).zip(batch_mean.iter()) {
            worst = worst.max(((n - b) / (m - b) - 0.9).abs());
        }
        stats = next;
    }
    Outcome::new(
        seeded && worst <= 1e-12,
        format!("first update seeds verbatim: {seeded}; max |ratio − 0.9| over 50 steps {worst:.1e}"),
    )
}

type Check = fn() -> Outcome;

#[test]
fn acceptance() {
    let criteria: [(&str, Check); 8] = [
        ("gradient oracles", gradient_oracles),
        ("spectral identities", spectral_identities),
        ("zero-distance axioms", zero_distance_axioms),
        ("covariance oracle", covariance_oracle),
        ("adaptation gain", adaptation_gain),
        ("weak correlation of mean and LogCORAL", weak_correlation),
        ("determinism", determinism),
        ("moving-average contract", moving_average_contract),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check();
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        // Written past the test harness's capture so the report always shows.
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{tag}] {}. {name}: {}", i + 1, outcome.detail).unwrap();
        out.flush().unwrap();
        if !outcome.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
