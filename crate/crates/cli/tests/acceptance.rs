//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use lpr_core::harness::{sweep, CellRun, RunOutcome};
use lpr_core::{verify, Method, RunConfig, SweepGrid, VerifyOptions};

struct Line {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn line(id: u32, name: &'static str, passed: bool, detail: String) -> Line {
    let l = Line { id, name, passed, detail };
    println!(
        "[{}] criterion {:>2} {:<26} {}",
        if l.passed { "PASS" } else { "FAIL" },
        l.id,
        l.name,
        l.detail
    );
    l
}

/// Criteria backed by a named self-check, with their runtime budgets.
const ALGEBRA: &[(u32, &str, Option<u64>)] = &[
    (1, "omega_zero_reduction", Some(10)),
    (2, "proximal_oracle", Some(5)),
    (3, "woodbury_equivalence", Some(5)),
    (4, "contraction", None),
    (5, "projection_limit", None),
    (6, "replay_annihilation", None),
    (7, "weighted_recovery", None),
    (8, "gradient_check", None),
    (9, "metric_fixtures", None),
    (10, "reservoir_statistics", None),
];

fn algebraic() -> Vec<Line> {
    let report = verify(&VerifyOptions::default());
    ALGEBRA
        .iter()
        .map(|&(id, name, budget)| match report.get(name) {
            Some(c) => {
                let in_time = budget.is_none_or(|b| c.seconds < b as f64);
                line(id, name, c.passed && in_time, c.to_string())
            }
            None => line(id, name, false, "check missing from report".into()),
        })
        .collect()
}

/// One-sided sign test: P(X ≥ wins) for X ~ Binomial(n, 1/2).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

fn outcomes(runs: &[CellRun], cell: usize) -> Vec<&RunOutcome> {
    let mut v: Vec<&CellRun> = runs.iter().filter(|r| r.cell == cell).collect();
    v.sort_by_key(|r| r.seed);
    v.iter()
        .map(|r| r.outcome.as_ref().expect("run failed"))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

const OMEGA_GRID: [f64; 5] = [0.04, 0.25, 1.0, 4.0, 100.0];
const EVAL_SEEDS: std::ops::RangeInclusive<u64> = 1..=20;

fn table_trend() -> Line {
    let start = Instant::now();
    let base = RunConfig::default();
    let s = &base.stream;
    assert_eq!(
        (s.num_tasks, s.input_dim, s.classes_per_task, s.batches_per_task),
        (5, 32, 2, 200)
    );

    // Select omega0 and beta by mean final validation accuracy on seeds that
    // are not used for evaluation.
    let tuning = sweep(
        &SweepGrid {
            base: RunConfig { method: Method::Lpr, ..base.clone() },
            omega0: OMEGA_GRID.to_vec(),
            beta: vec![1.0, 2.0],
            seeds: vec![1000, 1001, 1002],
            ..Default::default()
        },
        None,
    )
    .expect("tuning sweep");
    let best = tuning.best_cell().expect("a tuned cell");
    let (omega0, beta) = (best.omega0, best.beta);

    let eval = sweep(
        &SweepGrid {
            base: RunConfig { omega0, beta, ..base },
            methods: vec![Method::Er, Method::Lpr],
            seeds: EVAL_SEEDS.collect(),
            ..Default::default()
        },
        None,
    )
    .expect("evaluation sweep");
    let er = outcomes(&eval.runs, 0);
    let lpr = outcomes(&eval.runs, 1);

    let acc = (mean(er.iter().map(|o| o.summary.acc)), mean(lpr.iter().map(|o| o.summary.acc)));
    let aaa = (mean(er.iter().map(|o| o.summary.aaa)), mean(lpr.iter().map(|o| o.summary.aaa)));
    let tv = (mean(er.iter().map(|o| o.task1_tv)), mean(lpr.iter().map(|o| o.task1_tv)));
    let pairs: Vec<(f64, f64)> = er.iter().zip(&lpr).map(|(e, l)| (e.task1_tv, l.task1_tv)).collect();
    let wins = pairs.iter().filter(|(e, l)| l < e).count();
    let non_ties = pairs.iter().filter(|(e, l)| l != e).count();
    let p = sign_test_p(wins, non_ties);
    let elapsed = start.elapsed();

    let passed = acc.1 >= acc.0
        && aaa.1 >= aaa.0
        && tv.1 < tv.0
        && p < 0.05
        && elapsed < Duration::from_secs(600);
    line(
        11,
        "table_trend",
        passed,
        format!(
            "omega0 {omega0} beta {beta}; acc ER {:.4} LPR {:.4}; AAA ER {:.4} LPR {:.4}; \
             task-1 TV ER {:.4} LPR {:.4}, LPR lower on {wins}/{non_ties} seeds (sign test p = {p:.2e}); {:.0}s",
            acc.0, acc.1, aaa.0, aaa.1, tv.0, tv.1, elapsed.as_secs_f64()
        ),
    )
}

fn analysis_signatures() -> Line {
    let base = RunConfig::default();
    let res = sweep(
        &SweepGrid {
            base: base.clone(),
            methods: vec![Method::Er, Method::Lpr],
            omega0: vec![1.0, 4.0],
            seeds: (1..=5).collect(),
            ..Default::default()
        },
        None,
    )
    .expect("analysis sweep");
    // Cells: (er, 1), (er, 4), (lpr, 1), (lpr, 4).
    let er_drift = mean(outcomes(&res.runs, 0).iter().map(|o| o.summary.mean_drift));
    let mut drift_ok = true;
    let mut ratio_ok = true;
    let mut max_ratio: f64 = 0.0;
    let mut parts = vec![format!("drift ER {er_drift:.3}")];
    for (cell, omega0) in [(2, 1.0), (3, 4.0)] {
        let runs = outcomes(&res.runs, cell);
        let drift = mean(runs.iter().map(|o| o.summary.mean_drift));
        drift_ok &= drift < er_drift;
        parts.push(format!("LPR(omega0={omega0}) {drift:.3}"));
        for o in &runs {
            // Before the first refresh the preconditioner is the identity.
            for r in o.log.records.iter().filter(|r| r.tau > base.refresh_interval) {
                for ratio in [&r.ratio_new, &r.ratio_replay].into_iter().flatten() {
                    max_ratio = max_ratio.max(ratio.aggregate);
                    ratio_ok &= ratio.aggregate < 1.0;
                }
            }
        }
    }
    parts.push(format!("max grad-norm ratio after first refresh {max_ratio:.4}"));

    // Ratio of new-data gradients in the first evaluation window of each task
    // against the task's average, for inspection.
    let o = outcomes(&res.runs, 3)[0];
    let b = &o.log.task_boundaries;
    let mut dips = Vec::new();
    let mut dipped = 0;
    for t in 1..b.len() {
        let within: Vec<f64> = o
            .log
            .records
            .iter()
            .filter(|r| r.tau > b[t - 1] && r.tau <= b[t])
            .filter_map(|r| r.ratio_new.as_ref().map(|x| x.aggregate))
            .collect();
        if let Some(first) = within.first() {
            let avg = mean(within.iter().copied());
            dipped += usize::from(*first < avg);
            dips.push(format!("{first:.3}/{avg:.3}"));
        }
    }
    // Qualitative only: reported, not asserted.
    parts.push(format!(
        "new-data ratio at task start below task mean for {dipped}/{} boundaries (start/mean {})",
        dips.len(),
        dips.join(" ")
    ));
    line(12, "analysis_signatures", drift_ok && ratio_ok, parts.join("; "))
}

fn verify_command() -> Line {
    let bin = env!("CARGO_BIN_EXE_lpr");
    let start = Instant::now();
    let clean = Command::new(bin).arg("verify").output().expect("spawn lpr verify");
    let elapsed = start.elapsed();
    let faulty = Command::new(bin)
        .args(["verify", "--inject-fault", "lambda_symmetry"])
        .output()
        .expect("spawn lpr verify with fault");
    let fault_text = String::from_utf8_lossy(&faulty.stderr);
    let passed = clean.status.success()
        && elapsed < Duration::from_secs(120)
        && !faulty.status.success()
        && fault_text.contains("lambda_symmetry");
    line(
        13,
        "verify_command",
        passed,
        format!(
            "clean exit {:?} in {:.2}s; injected fault exit {:?}, reported: {}",
            clean.status.code(),
            elapsed.as_secs_f64(),
            faulty.status.code(),
            fault_text.trim()
        ),
    )
}

fn main() -> ExitCode {
    let mut lines = algebraic();
    lines.push(table_trend());
    lines.push(analysis_signatures());
    lines.push(verify_command());
    let failed: Vec<u32> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("{} criteria, {} failed {:?}", lines.len(), failed.len(), failed);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
