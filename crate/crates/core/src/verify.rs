//! Self-check suite: algebraic oracles, gradient checks, metric fixtures and
//! sampling statistics, run as one command. Each check reports the observed
//! worst case next to the tolerance it was held to.

use std::fmt;
use std::time::Instant;

use crate::buffer::{Capacity, Item, ReplayBuffer};
use crate::error::{Error, Result};
use crate::harness::{Method, RunConfig, Trainer};
use crate::linalg::{matmul, Matrix};
use crate::metrics::{average_anytime_acc, total_variation, worst_case_acc, EvalRecord, RunLog};
use crate::net::{Activation, Layer, Network};
use crate::optim::{complement_projector, proximal_oracle, replay_gradient_annihilation_check};
use crate::precond::{build_lambda, weighted_lambda, woodbury_lambda, OmegaConfig, PreconditionerState};
use crate::rng::SplitMix64;
use crate::stream::{generate, Batch, SplitGaussianSpec};

/// Deliberate defects used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs one off-diagonal entry of a refreshed preconditioner.
    LambdaSymmetry,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda_symmetry" => Ok(Fault::LambdaSymmetry),
            other => Err(Error::Config(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} observed {:.3e} tolerance {:.3e} ({:.2}s){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// What a check body returns: observed value, tolerance, pass flag, detail.
struct Outcome {
    observed: f64,
    tolerance: f64,
    passed: bool,
    detail: String,
}

impl Outcome {
    /// Passes when `observed < tolerance`.
    fn below(observed: f64, tolerance: f64) -> Self {
        Self {
            observed,
            tolerance,
            passed: observed < tolerance,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }
}

type CheckFn = fn(&VerifyOptions) -> Result<Outcome>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("omega_zero_reduction", omega_zero_reduction),
    ("proximal_oracle", proximal_oracle_agreement),
    ("woodbury_equivalence", woodbury_equivalence),
    ("contraction", contraction),
    ("projection_limit", projection_limit),
    ("replay_annihilation", replay_annihilation),
    ("weighted_recovery", weighted_recovery),
    ("gradient_check", gradient_check),
    ("metric_fixtures", metric_fixtures),
    ("reservoir_statistics", reservoir_statistics),
    ("lambda_symmetry", lambda_symmetry),
];

/// Names of the checks [`verify`] runs, in order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|&(name, _)| name).collect()
}

/// Runs every check. Errors inside a check count as failures of that check.
pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    let checks = CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let out = f(opts).unwrap_or_else(|e| Outcome {
                observed: f64::NAN,
                tolerance: f64::NAN,
                passed: false,
                detail: format!("error: {e}"),
            });
            CheckResult {
                name,
                passed: out.passed && !out.observed.is_nan(),
                observed: out.observed,
                tolerance: out.tolerance,
                detail: out.detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    VerifyReport { checks }
}

fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn rel_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE))
}

fn small_config(method: Method, omega0: f64) -> RunConfig {
    RunConfig {
        method,
        omega0,
        refresh_interval: 1,
        stream: SplitGaussianSpec {
            num_tasks: 2,
            classes_per_task: 2,
            input_dim: 6,
            batches_per_task: 50,
            eval_points_per_task: 20,
            ..Default::default()
        },
        hidden: vec![12],
        capacity: Capacity::Bounded(40),
        ..Default::default()
    }
}

/// LPR with ω₀ = 0 and SGD with replay, same seed, 100 batches of 3 steps:
/// the largest parameter difference at any step.
fn omega_zero_reduction(opts: &VerifyOptions) -> Result<Outcome> {
    let mut er_cfg = small_config(Method::Er, 0.0);
    er_cfg.seed = opts.seed;
    let lpr_cfg = RunConfig { method: Method::Lpr, ..er_cfg.clone() };
    let (stream, _) = generate(er_cfg.stream_kind, &er_cfg.stream_spec())?;
    let mut er = Trainer::new(&er_cfg, stream.input_dim(), stream.total_classes)?;
    let mut lpr = Trainer::new(&lpr_cfg, stream.input_dim(), stream.total_classes)?;
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for (c, batch, _) in stream.iter() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        er.train_batch(batch, c + 1, false, |n| a.push(n.flat_params()))?;
        lpr.train_batch(batch, c + 1, false, |n| b.push(n.flat_params()))?;
        for (x, y) in a.iter().zip(&b) {
            let d = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
            steps += 1;
        }
    }
    Ok(Outcome::below(worst, 1e-12).with_detail(format!("{steps} steps compared")))
}

/// Closed-form layer update against a numerical minimizer of the proximal
/// objective over 100 random instances, error relative to `‖Θ‖_F`.
fn proximal_oracle_agreement(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x02);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 1 + rng.below(16);
        let k = 1 + rng.below(6);
        let m = 1 + rng.below(8);
        let eta = rng.uniform(0.01, 1.0);
        let omega = 10f64.powf(rng.uniform(-2.0, 2.0));
        let theta = random(d, k, &mut rng);
        let g = random(d, k, &mut rng);
        let z = random(m, d, &mut rng);
        let lambda = build_lambda(&z, omega)?;
        let closed = theta.sub(&matmul(&lambda, &g)?.scale(eta))?;
        let numeric = proximal_oracle(&theta, &g, &z, eta, omega)?;
        let err = closed.sub(&numeric)?.frobenius_norm() / theta.frobenius_norm();
        worst = worst.max(err);
    }
    Ok(Outcome::below(worst, 1e-6))
}

fn woodbury_equivalence(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x03);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &m in &[1, 3, 8, 16, 33, 64] {
        for &d in &[1, 2, 7, 16, 32] {
            for &omega in &[0.01, 1.0, 100.0] {
                let z = random(m, d, &mut rng);
                let direct = build_lambda(&z, omega)?;
                let wood = woodbury_lambda(&z, omega)?;
                worst = worst.max(rel_diff(&wood, &direct)?);
                cases += 1;
            }
        }
    }
    Ok(Outcome::below(worst, 1e-8).with_detail(format!("{cases} grid cells")))
}

/// Strict shrinkage whenever `Zg ≠ 0`, and norm preservation for gradients
/// in the null space of `ZᵀZ`. Observed value: the number of cases where
/// `‖Λg‖ ≥ ‖g‖` although `Zg ≠ 0`.
fn contraction(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x04);
    let mut worst_ratio: f64 = 0.0;
    let mut strict_violations = 0;
    let mut worst_equality: f64 = 0.0;
    for i in 0..1000 {
        let d = 2 + rng.below(10);
        let k = 1 + rng.below(4);
        let m = 1 + rng.below(d - 1);
        let omega = 10f64.powf(rng.uniform(-2.0, 2.0));
        let z = random(m, d, &mut rng);
        let lambda = build_lambda(&z, omega)?;
        let g = random(d, k, &mut rng);
        if matmul(&z, &g)?.frobenius_norm() > 0.0 {
            let r = matmul(&lambda, &g)?.frobenius_norm() / g.frobenius_norm();
            worst_ratio = worst_ratio.max(r);
            if r >= 1.0 {
                strict_violations += 1;
            }
        }
        // m < d, so the null space of ZᵀZ is nontrivial.
        if i % 4 == 0 {
            let null = matmul(&complement_projector(&z.transpose())?, &g)?;
            let n = null.frobenius_norm();
            let diff = (matmul(&lambda, &null)?.frobenius_norm() - n).abs() / n.max(1.0);
            worst_equality = worst_equality.max(diff);
        }
    }
    Ok(Outcome {
        observed: strict_violations as f64,
        tolerance: 0.0,
        passed: strict_violations == 0 && worst_equality <= 1e-12,
        detail: format!(
            "largest norm ratio {worst_ratio:.12}, null-space deviation {worst_equality:.3e} (tolerance 1e-12)"
        ),
    })
}

/// Very large ω with a full-row-rank `Z` (m < d): Λ approaches the projector
/// onto the complement of the row space, and replay-direction gradients are
/// shrunk by at least 1000×.
fn projection_limit(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x05);
    let omega = 1e8;
    let mut worst_dist: f64 = 0.0;
    let mut worst_shrink = f64::INFINITY;
    for _ in 0..20 {
        let d = 4 + rng.below(12);
        let m = 1 + rng.below(d - 1);
        let z = random(m, d, &mut rng);
        let lambda = build_lambda(&z, omega)?;
        let exact = complement_projector(&z.transpose())?;
        worst_dist = worst_dist.max(lambda.sub(&exact)?.frobenius_norm());
        let g = z.t_matmul(&random(m, 3, &mut rng))?;
        let shrink = g.frobenius_norm() / matmul(&lambda, &g)?.frobenius_norm();
        worst_shrink = worst_shrink.min(shrink);
    }
    Ok(Outcome {
        observed: worst_dist,
        tolerance: 1e-4,
        passed: worst_dist < 1e-4 && worst_shrink >= 1e3,
        detail: format!("minimum shrink factor {worst_shrink:.3e} (required 1e3)"),
    })
}

/// Replay gradients built from activations in the span of the basis vanish
/// under the exact complement projector.
fn replay_annihilation(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x06);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 3 + rng.below(14);
        let k = 1 + rng.below(d - 1);
        let m = 1 + rng.below(10);
        let out = 1 + rng.below(5);
        let phi = random(d, k, &mut rng);
        let a = random(k, m, &mut rng);
        let v = random(m, out, &mut rng);
        let g_norm = matmul(&phi, &a)?.matmul(&v)?.frobenius_norm();
        let residual = replay_gradient_annihilation_check(&phi, &a, &v)?;
        worst = worst.max(residual / g_norm.max(1.0));
    }
    Ok(Outcome::below(worst, 1e-8))
}

/// Uniform weights reproduce the plain preconditioner; a single orthonormal
/// row gives the eigenvalue `1/(1+ω)` along that row.
fn weighted_recovery(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x07);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = 1 + rng.below(12);
        let d = 1 + rng.below(12);
        let omega = 10f64.powf(rng.uniform(-2.0, 2.0));
        let z = random(m, d, &mut rng);
        let weighted = weighted_lambda(&z, &vec![omega; m])?;
        worst = worst.max(weighted.max_abs_diff(&build_lambda(&z, omega)?)?);

        let u = random(1, d, &mut rng);
        let u = u.scale(1.0 / u.frobenius_norm());
        let lam = weighted_lambda(&u, &[omega])?;
        let quad = matmul(&matmul(&u, &lam)?, &u.transpose())?.get(0, 0);
        worst = worst.max((quad - 1.0 / (1.0 + omega)).abs());
    }
    Ok(Outcome::below(worst, 1e-10))
}

fn activation_pattern(net: &Network, x: &Matrix) -> Result<Vec<bool>> {
    let trace = net.forward(x)?;
    Ok(trace.z[1..].iter().flat_map(|z| z.data().iter().map(|&v| v > 0.0)).collect())
}

/// Backprop against central differences on random small networks. Entries
/// whose perturbation flips a relu are skipped since the loss has a kink there.
fn gradient_check(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x08);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..8 {
        let depth = 1 + rng.below(3);
        let mut widths = vec![1 + rng.below(32)];
        for _ in 0..depth {
            widths.push(2 + rng.below(31));
        }
        let classes = *widths.last().expect("nonempty");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let act = if l + 2 == widths.len() { Activation::Identity } else { Activation::Relu };
                Layer::new(random(w[0] + 1, w[1], &mut rng), act)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Network::from_layers(layers)?;
        let n = 1 + rng.below(16);
        let x = random(n, widths[0], &mut rng);
        let labels = (0..n).map(|_| rng.below(classes)).collect();
        let batch = Batch::new(x.clone(), labels)?;
        let (_, grads) = net.loss_and_gradients(&batch)?;
        let base = activation_pattern(&net, &x)?;

        let mut fd = grads.clone();
        let mut keep = grads.clone();
        for l in 0..net.num_layers() {
            for idx in 0..net.layers()[l].theta.data().len() {
                let orig = net.layers()[l].theta.data()[idx];
                net.layers_mut()[l].theta.data_mut()[idx] = orig + h;
                let plus = net.loss_and_gradients(&batch)?.0;
                let kink_p = activation_pattern(&net, &x)? != base;
                net.layers_mut()[l].theta.data_mut()[idx] = orig - h;
                let minus = net.loss_and_gradients(&batch)?.0;
                let kink_m = activation_pattern(&net, &x)? != base;
                net.layers_mut()[l].theta.data_mut()[idx] = orig;
                if kink_p || kink_m {
                    fd.layers[l].data_mut()[idx] = 0.0;
                    keep.layers[l].data_mut()[idx] = 0.0;
                } else {
                    fd.layers[l].data_mut()[idx] = (plus - minus) / (2.0 * h);
                    checked += 1;
                }
            }
        }
        let mut diff = fd.clone();
        diff.add_scaled_assign(-1.0, &keep)?;
        let scale = keep.norm().max(fd.norm()).max(1e-8);
        worst = worst.max(diff.norm() / scale);
    }
    Ok(Outcome::below(worst, 1e-5).with_detail(format!("{checked} entries compared")))
}

fn record(tau: usize, acc: &[f64]) -> EvalRecord {
    EvalRecord {
        tau,
        per_task_acc: acc.to_vec(),
        loss: 0.0,
        ratio_new: None,
        ratio_replay: None,
        drift: None,
    }
}

fn fixture(boundaries: &[usize], recs: &[(usize, &[f64])]) -> Result<RunLog> {
    let mut log = RunLog::new(boundaries.to_vec());
    for (t, a) in recs {
        log.push(record(*t, a))?;
    }
    Ok(log)
}

/// Straightforward re-derivations used to cross-check the library metrics.
fn reference_aaa(log: &RunLog) -> f64 {
    let mut s = 0.0;
    for r in &log.records {
        let mut t = 0.0;
        for a in &r.per_task_acc {
            t += a;
        }
        s += t / r.per_task_acc.len() as f64;
    }
    s / log.records.len() as f64
}

fn reference_wc(log: &RunLog) -> f64 {
    let last = log.records.last().expect("nonempty");
    let k = last.per_task_acc.len();
    let mut s = last.per_task_acc[k - 1];
    for i in 0..k - 1 {
        let mut m = 1.0f64;
        for r in &log.records {
            if r.tau > log.task_boundaries[i] {
                m = m.min(r.per_task_acc[i]);
            }
        }
        s += m;
    }
    s / k as f64
}

fn reference_tv(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 1..xs.len() {
        s += (xs[i] - xs[i - 1]).abs();
    }
    s
}

fn metric_fixtures(opts: &VerifyOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let aaa = average_anytime_acc(&fixture(&[1, 2], &[(1, &[0.5]), (2, &[0.4, 0.8])])?)?;
    worst = worst.max((aaa - 0.55).abs());
    let wc = worst_case_acc(&fixture(
        &[2, 4],
        &[(1, &[0.9]), (2, &[0.95]), (3, &[0.4, 0.5]), (4, &[0.7, 0.8])],
    )?)?;
    worst = worst.max((wc - 0.6).abs());
    worst = worst.max((total_variation(&[0.2, 0.5, 0.3])? - 0.5).abs());
    let fixtures = worst;

    // Random logs with uneven task lengths and evaluation cadences.
    let mut rng = SplitMix64::new(opts.seed ^ 0x09);
    for _ in 0..200 {
        let tasks = 1 + rng.below(5);
        let mut boundaries = Vec::new();
        let mut end = 0;
        for _ in 0..tasks {
            end += 1 + rng.below(30);
            boundaries.push(end);
        }
        let mut log = RunLog::new(boundaries.clone());
        let mut tau = 0;
        while tau < end {
            tau = (tau + 1 + rng.below(4)).min(end);
            let k = boundaries.iter().filter(|&&b| b < tau).count() + 1;
            let acc: Vec<f64> = (0..k).map(|_| rng.below(101) as f64 / 100.0).collect();
            log.push(record(tau, &acc))?;
        }
        // Every earlier task needs a point after it ended; the final point
        // satisfies that since the last boundary is the final tau.
        worst = worst.max((average_anytime_acc(&log)? - reference_aaa(&log)).abs());
        worst = worst.max((worst_case_acc(&log)? - reference_wc(&log)).abs());
        let series = log.task_series(0);
        if series.len() >= 2 {
            worst = worst.max((total_variation(&series)? - reference_tv(&series)).abs());
        }
    }
    Ok(Outcome::below(worst, 1e-12).with_detail(format!("hand fixtures off by {fixtures:.1e}")))
}

/// Inclusion frequency of every stream position over 20000 reservoir runs,
/// compared with `capacity / N`. Observed value: the number of positions
/// outside 3σ. Under the null each position exceeds 3σ with probability
/// about 0.0027, so a handful of exceedances among 100 positions is expected;
/// more than 3 would be a 1-in-5000 event.
fn reservoir_statistics(opts: &VerifyOptions) -> Result<Outcome> {
    let cap = 10;
    let n = 100;
    let trials = 20_000;
    let mut rng = SplitMix64::new(opts.seed ^ 0x0A);
    let mut counts = vec![0usize; n];
    for _ in 0..trials {
        let mut buf = ReplayBuffer::new(Capacity::Bounded(cap));
        for i in 0..n {
            buf.offer(Item { features: vec![i as f64], label: 0 }, &mut rng);
        }
        for it in buf.items() {
            counts[it.features[0] as usize] += 1;
        }
    }
    let p = cap as f64 / n as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let mut outside = 0;
    let mut worst_z: f64 = 0.0;
    for &c in &counts {
        let z = (c as f64 / trials as f64 - p).abs() / sigma;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            outside += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(Outcome {
        observed: outside as f64,
        tolerance: 3.0,
        passed: outside <= 3 && total == cap * trials,
        detail: format!("largest deviation {worst_z:.2}σ over {n} positions"),
    })
}

/// Every refreshed preconditioner is symmetric with eigenvalues in (0, 1],
/// checked through `xᵀΛx ≤ xᵀx` on random probes.
fn lambda_symmetry(opts: &VerifyOptions) -> Result<Outcome> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x0B);
    let net = Network::new(&[6, 10, 8, 4], &mut rng)?;
    let mut buf = ReplayBuffer::new(Capacity::Bounded(30));
    for _ in 0..30 {
        let features = (0..6).map(|_| rng.normal()).collect();
        buf.offer(Item { features, label: 0 }, &mut rng);
    }
    let mut state = PreconditionerState::new(&net, 1, 1.0)?;
    state.refresh(&net, &buf, &OmegaConfig::new(4.0, 1.0)?, 1, &mut rng)?;
    if opts.fault == Some(Fault::LambdaSymmetry) {
        let lam = &mut state.lambdas_mut()[0];
        lam.set(0, 1, lam.get(0, 1) + 1e-3);
    }
    let mut worst: f64 = 0.0;
    let mut bound_violations = 0;
    for lam in state.lambdas() {
        worst = worst.max(lam.asymmetry());
        for _ in 0..20 {
            let x = random(lam.rows(), 1, &mut rng);
            let q = matmul(&x.transpose(), &matmul(lam, &x)?)?.get(0, 0);
            let xx = x.frobenius_norm().powi(2);
            if !(q > 0.0 && q <= xx * (1.0 + 1e-12)) {
                bound_violations += 1;
            }
        }
    }
    Ok(Outcome {
        observed: worst,
        tolerance: 1e-12,
        passed: worst <= 1e-12 && bound_violations == 0,
        detail: if bound_violations > 0 {
            format!("{bound_violations} probes outside (0, 1]")
        } else {
            String::new()
        },
    })
}
