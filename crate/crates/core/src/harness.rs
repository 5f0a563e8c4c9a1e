//! Training loop, single runs and seed sweeps.
//!
//! For every batch `τ` of the stream the loop takes `steps` gradient steps on
//! the new batch plus a replay sample, then adds the batch to the replay
//! buffer, then refreshes the preconditioners when `τ` is a multiple of the
//! refresh interval. Task boundaries are used for evaluation bookkeeping only.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{Capacity, ReplayBuffer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    average_anytime_acc, final_acc, grad_norm_ratio, mean_and_standard_error,
    representation_drift, total_variation, worst_case_acc, EvalRecord, GradRatio, RunLog,
};
use crate::net::{combined_replay_loss, Network};
use crate::optim::{lpr_step, projected_step, sgd_step, ProjectionMemory};
use crate::precond::{OmegaConfig, PreconditionerState};
use crate::rng::SplitMix64;
use crate::stream::{generate, Batch, SplitGaussianSpec, StreamKind};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LPR_OUT_DIR";

/// Mixed into the run seed so trainer randomness never replays the stream
/// generator's sequence.
const TRAINER_SALT: u64 = 0xA076_1D64_78BD_642F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Er,
    Lpr,
    Projection,
    SgdNoReplay,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Er => "er",
            Method::Lpr => "lpr",
            Method::Projection => "projection",
            Method::SgdNoReplay => "sgd_no_replay",
        }
    }

    fn uses_replay(self) -> bool {
        matches!(self, Method::Er | Method::Lpr)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "er" => Ok(Method::Er),
            "lpr" => Ok(Method::Lpr),
            "projection" => Ok(Method::Projection),
            "sgd_no_replay" => Ok(Method::SgdNoReplay),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub stream_kind: StreamKind,
    /// Stream shape. Its `seed` is replaced by the run seed.
    pub stream: SplitGaussianSpec,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub eta: f64,
    /// Gradient steps per incoming batch.
    pub steps: usize,
    /// Weight of the replay loss.
    pub alpha: f64,
    pub capacity: Capacity,
    pub omega0: f64,
    pub beta: f64,
    /// Preconditioner refresh interval, in batches.
    pub refresh_interval: usize,
    /// Fraction of the buffer used for a refresh.
    pub subsample: f64,
    /// Softness of the projection baseline.
    pub alpha_proj: f64,
    pub seed: u64,
    /// Evaluate every this many batches (and after the last one).
    pub eval_every: usize,
    /// Replay exemplars drawn per gradient step.
    pub replay_size: usize,
    /// Held-out task-1 points whose last hidden representation is tracked.
    pub drift_probes: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Er,
            stream_kind: StreamKind::ClassIncremental,
            stream: SplitGaussianSpec::default(),
            hidden: vec![64],
            eta: 0.05,
            steps: 3,
            alpha: 1.0,
            capacity: Capacity::Bounded(200),
            omega0: 1.0,
            beta: 1.0,
            refresh_interval: 10,
            subsample: 1.0,
            alpha_proj: 1.0,
            seed: 0,
            eval_every: 10,
            replay_size: 10,
            drift_probes: 32,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be at least 1".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!("subsample must be in (0, 1], got {}", self.subsample));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.alpha_proj > 0.0) {
            return bad(format!("alpha_proj must be > 0, got {}", self.alpha_proj));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        OmegaConfig::new(self.omega0, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        self.stream.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stream_spec(&self) -> SplitGaussianSpec {
        SplitGaussianSpec {
            seed: self.seed,
            ..self.stream.clone()
        }
    }
}

/// What one call to [`Trainer::train_batch`] observed.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub losses: Vec<f64>,
    pub ratio_new: Option<GradRatio>,
    pub ratio_replay: Option<GradRatio>,
}

/// Network, replay memory and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    method: Method,
    eta: f64,
    steps: usize,
    alpha: f64,
    replay_size: usize,
    omega: OmegaConfig,
    net: Network,
    buffer: ReplayBuffer,
    precond: PreconditionerState,
    projection: Option<ProjectionMemory>,
    replay_rng: SplitMix64,
    buffer_rng: SplitMix64,
    precond_rng: SplitMix64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, input_dim: usize, classes: usize) -> Result<Self> {
        let mut root = SplitMix64::new(cfg.seed ^ TRAINER_SALT);
        let mut init_rng = root.fork();
        let replay_rng = root.fork();
        let buffer_rng = root.fork();
        let precond_rng = root.fork();
        let mut widths = vec![input_dim];
        widths.extend(&cfg.hidden);
        widths.push(classes);
        let net = Network::new(&widths, &mut init_rng)?;
        let precond = PreconditionerState::new(&net, cfg.refresh_interval, cfg.subsample)?;
        let projection = match cfg.method {
            Method::Projection => Some(ProjectionMemory::new(&net, cfg.alpha_proj)?),
            _ => None,
        };
        Ok(Self {
            method: cfg.method,
            eta: cfg.eta,
            steps: cfg.steps,
            alpha: cfg.alpha,
            replay_size: cfg.replay_size,
            omega: OmegaConfig::new(cfg.omega0, cfg.beta)?,
            net,
            buffer: ReplayBuffer::new(cfg.capacity),
            precond,
            projection,
            replay_rng,
            buffer_rng,
            precond_rng,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn preconditioner(&self) -> &PreconditionerState {
        &self.precond
    }

    /// Trains on batch `tau` (1-based). `on_step` sees the network after every
    /// gradient step. With `probe_ratios` the first step also reports gradient
    /// norm ratios for the new and replay loss terms separately.
    pub fn train_batch(
        &mut self,
        batch: &Batch,
        tau: usize,
        probe_ratios: bool,
        mut on_step: impl FnMut(&Network),
    ) -> Result<BatchStats> {
        let dim = batch.dim();
        let mut stats = BatchStats::default();
        for s in 0..self.steps {
            let replay = if self.method.uses_replay() {
                self.buffer.sample_batch(self.replay_size, dim, &mut self.replay_rng)
            } else {
                Batch::empty(dim)
            };
            let (loss, grads) = combined_replay_loss(&self.net, batch, &replay, self.alpha)?;
            if probe_ratios && s == 0 && self.method == Method::Lpr {
                let (_, g_new) = self.net.loss_and_gradients(batch)?;
                stats.ratio_new = grad_norm_ratio(&g_new, &self.precond)?;
                if !replay.is_empty() && self.alpha > 0.0 {
                    let (_, g_rep) = self.net.loss_and_gradients(&replay)?;
                    stats.ratio_replay = grad_norm_ratio(&g_rep.scale(self.alpha), &self.precond)?;
                }
            }
            match self.method {
                Method::Er | Method::SgdNoReplay => sgd_step(&mut self.net, &grads, self.eta)?,
                Method::Lpr => lpr_step(&mut self.net, &grads, &self.precond, self.eta)?,
                Method::Projection => {
                    let proj = self.projection.as_ref().expect("projection memory");
                    projected_step(&mut self.net, &grads, proj.projectors(), self.eta)?
                }
            }
            stats.losses.push(loss);
            on_step(&self.net);
        }
        if self.method.uses_replay() {
            self.buffer.update(batch, &mut self.buffer_rng);
        }
        if let Some(proj) = self.projection.as_mut() {
            proj.record(&self.net, &batch.features)?;
        }
        if self.method == Method::Lpr && self.precond.is_due(tau) {
            self.precond
                .refresh(&self.net, &self.buffer, &self.omega, tau, &mut self.precond_rng)?;
        }
        Ok(stats)
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub omega0: f64,
    pub beta: f64,
    #[serde(rename = "T")]
    pub refresh_interval: usize,
    #[serde(rename = "p")]
    pub subsample: f64,
    pub capacity: String,
    pub acc: f64,
    pub aaa: f64,
    pub wc_acc: f64,
    pub mean_tv: f64,
    pub mean_drift: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Validation accuracies at every evaluation point.
    pub log: RunLog,
    /// Test accuracies at the final batch.
    pub test_log: RunLog,
    pub summary: RunSummary,
    /// Final validation accuracy (used for hyperparameter selection).
    pub val_acc: f64,
    /// Total variation of the first task's validation accuracy.
    pub task1_tv: f64,
    pub network: Network,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (stream, evals) = generate(cfg.stream_kind, &cfg.stream_spec())?;
    let mut trainer = Trainer::new(cfg, stream.input_dim(), stream.total_classes)?;

    let probe = evals.test[0].head(cfg.drift_probes).features;
    let hidden_of = |net: &Network| -> Result<Matrix> { Ok(net.forward(&probe)?.last_hidden()) };
    let mut prev_hidden = hidden_of(trainer.network())?;
    let mut drift_per_probe = vec![0.0; probe.rows()];
    let mut drift_since = 0.0;

    let boundaries: Vec<usize> = stream.task_boundaries.iter().map(|b| b + 1).collect();
    let mut log = RunLog::new(boundaries.clone());
    let mut losses = Vec::new();
    let mut ratios = (None, None);
    let last = stream.len();

    for (cursor, batch, _) in stream.iter() {
        let tau = cursor + 1;
        let is_eval = tau % cfg.eval_every == 0 || tau == last;
        // Ratios are probed on the first batch of each evaluation window.
        let probe_ratios = (tau - 1) % cfg.eval_every == 0;
        let stats = trainer.train_batch(batch, tau, probe_ratios, |_| {})?;
        losses.extend(stats.losses);
        if probe_ratios {
            ratios = (stats.ratio_new, stats.ratio_replay);
        }

        let hidden = hidden_of(trainer.network())?;
        for (i, d) in drift_per_probe.iter_mut().enumerate() {
            let step = representation_drift(&[prev_hidden.row(i).to_vec(), hidden.row(i).to_vec()])?;
            *d += step;
            drift_since += step / probe.rows() as f64;
        }
        prev_hidden = hidden;

        if is_eval {
            let k = stream.task_of_batch[cursor] + 1;
            let per_task_acc = evals.validation[..k]
                .iter()
                .map(|v| trainer.network().accuracy(v))
                .collect::<Result<Vec<_>>>()?;
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            losses.clear();
            let (ratio_new, ratio_replay) = std::mem::take(&mut ratios);
            log.push(EvalRecord {
                tau,
                per_task_acc,
                loss,
                ratio_new,
                ratio_replay,
                drift: Some(drift_since),
            })?;
            drift_since = 0.0;
        }
    }

    let k = stream.task_of_batch[last - 1] + 1;
    let mut test_log = RunLog::new(boundaries);
    test_log.push(EvalRecord {
        tau: last,
        per_task_acc: evals.test[..k]
            .iter()
            .map(|t| trainer.network().accuracy(t))
            .collect::<Result<Vec<_>>>()?,
        loss: f64::NAN,
        ratio_new: None,
        ratio_replay: None,
        drift: None,
    })?;

    let tvs: Vec<f64> = (0..k)
        .filter_map(|i| total_variation(&log.task_series(i)).ok())
        .collect();
    let task1_tv = total_variation(&log.task_series(0)).unwrap_or(0.0);
    let summary = RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        omega0: cfg.omega0,
        beta: cfg.beta,
        refresh_interval: cfg.refresh_interval,
        subsample: cfg.subsample,
        capacity: cfg.capacity.to_string(),
        acc: final_acc(&test_log)?,
        aaa: average_anytime_acc(&log)?,
        wc_acc: worst_case_acc(&log)?,
        mean_tv: if tvs.is_empty() { 0.0 } else { tvs.iter().sum::<f64>() / tvs.len() as f64 },
        mean_drift: drift_per_probe.iter().sum::<f64>() / drift_per_probe.len().max(1) as f64,
    };
    let outcome = RunOutcome {
        val_acc: final_acc(&log)?,
        log,
        test_log,
        summary,
        task1_tv,
        network: trainer.net,
    };
    if let Some(dir) = &cfg.output {
        write_run(dir, &outcome)?;
    }
    Ok(outcome)
}

/// Writes `log.jsonl` and a one-row `summary.csv` into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let log_file = BufWriter::new(fs::File::create(dir.join("log.jsonl"))?);
    outcome.log.write_jsonl(log_file)?;
    write_summaries(&dir.join("summary.csv"), std::slice::from_ref(&outcome.summary))
}

pub fn write_summaries(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn one_or<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Cartesian grid over a base config. Empty axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub base: RunConfig,
    pub methods: Vec<Method>,
    pub eta: Vec<f64>,
    pub omega0: Vec<f64>,
    pub beta: Vec<f64>,
    pub capacity: Vec<Capacity>,
    pub refresh_interval: Vec<usize>,
    pub subsample: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// Every configuration in the grid, without seeds applied.
    pub fn cells(&self) -> Vec<RunConfig> {
        let b = &self.base;
        let mut out = Vec::new();
        for &method in &one_or(&self.methods, b.method) {
            for &eta in &one_or(&self.eta, b.eta) {
                for &omega0 in &one_or(&self.omega0, b.omega0) {
                    for &beta in &one_or(&self.beta, b.beta) {
                        for &capacity in &one_or(&self.capacity, b.capacity) {
                            for &refresh_interval in &one_or(&self.refresh_interval, b.refresh_interval) {
                                for &subsample in &one_or(&self.subsample, b.subsample) {
                                    out.push(RunConfig {
                                        method,
                                        eta,
                                        omega0,
                                        beta,
                                        capacity,
                                        refresh_interval,
                                        subsample,
                                        ..b.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn seeds(&self) -> Vec<u64> {
        one_or(&self.seeds, self.base.seed)
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Mean ± standard error of one cell across its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub cell: usize,
    pub method: Method,
    pub eta: f64,
    pub omega0: f64,
    pub beta: f64,
    #[serde(rename = "T")]
    pub refresh_interval: usize,
    #[serde(rename = "p")]
    pub subsample: f64,
    pub capacity: String,
    pub runs: usize,
    pub failed: usize,
    pub acc_mean: f64,
    pub acc_se: f64,
    pub aaa_mean: f64,
    pub aaa_se: f64,
    pub wc_acc_mean: f64,
    pub wc_acc_se: f64,
    pub val_acc_mean: f64,
    pub mean_tv: f64,
    pub mean_drift: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<RunConfig>,
    pub runs: Vec<CellRun>,
    pub aggregates: Vec<CellAggregate>,
}

impl SweepResult {
    /// Cell with the highest mean final validation accuracy.
    pub fn best_cell(&self) -> Option<&CellAggregate> {
        self.aggregates
            .iter()
            .filter(|a| a.runs > 0)
            .max_by(|a, b| a.val_acc_mean.total_cmp(&b.val_acc_mean))
    }

    pub fn summaries(&self) -> Vec<RunSummary> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.summary.clone()))
            .collect()
    }
}

/// Runs every (cell, seed) pair on `jobs` worker threads (all cores when
/// `None`). A failing run is recorded and the sweep carries on.
pub fn sweep(grid: &SweepGrid, jobs: Option<usize>) -> Result<SweepResult> {
    let cells = grid.cells();
    let seeds = grid.seeds();
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let out_dir = grid.base.output.clone();
    let work: Vec<(usize, u64, RunConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, cfg)| {
            let out_dir = out_dir.clone();
            seeds.iter().map(move |&seed| {
                let output = out_dir
                    .as_ref()
                    .map(|d| d.join(format!("cell{c:03}_{}_seed{seed}", cfg.method.as_str())));
                (c, seed, RunConfig { seed, output, ..cfg.clone() })
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<CellRun> = pool.install(|| {
        work.into_par_iter()
            .map(|(cell, seed, cfg)| CellRun {
                cell,
                seed,
                outcome: run(&cfg).map_err(|e| e.to_string()),
            })
            .collect()
    });

    let aggregates = cells
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let ok: Vec<&RunOutcome> = runs
                .iter()
                .filter(|r| r.cell == c)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let failed = runs.iter().filter(|r| r.cell == c && r.outcome.is_err()).count();
            let stat = |f: &dyn Fn(&RunOutcome) -> f64| {
                mean_and_standard_error(&ok.iter().map(|o| f(o)).collect::<Vec<_>>())
            };
            let (acc_mean, acc_se) = stat(&|o| o.summary.acc);
            let (aaa_mean, aaa_se) = stat(&|o| o.summary.aaa);
            let (wc_acc_mean, wc_acc_se) = stat(&|o| o.summary.wc_acc);
            CellAggregate {
                cell: c,
                method: cfg.method,
                eta: cfg.eta,
                omega0: cfg.omega0,
                beta: cfg.beta,
                refresh_interval: cfg.refresh_interval,
                subsample: cfg.subsample,
                capacity: cfg.capacity.to_string(),
                runs: ok.len(),
                failed,
                acc_mean,
                acc_se,
                aaa_mean,
                aaa_se,
                wc_acc_mean,
                wc_acc_se,
                val_acc_mean: stat(&|o| o.val_acc).0,
                mean_tv: stat(&|o| o.summary.mean_tv).0,
                mean_drift: stat(&|o| o.summary.mean_drift).0,
            }
        })
        .collect();

    let result = SweepResult {
        cells,
        runs,
        aggregates,
    };
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
        write_summaries(&dir.join("summary.csv"), &result.summaries())?;
        let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
        for a in &result.aggregates {
            w.serialize(a)?;
        }
        w.flush()?;
    }
    Ok(result)
}
