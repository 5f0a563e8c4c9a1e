//! Deterministic synthetic task streams.
//!
//! Each class is an isotropic Gaussian blob. A class-incremental stream
//! assigns disjoint class blocks to tasks; a domain-incremental stream keeps
//! one label set and moves the class means from task to task.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// A labeled mini-batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "batch has {} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Batch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Batch {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    ClassIncremental,
    DomainIncremental,
}

fn default_eval_points() -> usize {
    200
}

fn default_true() -> bool {
    true
}

/// Parameters of a split-Gaussian stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitGaussianSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
    pub cluster_std: f64,
    pub batches_per_task: usize,
    pub n_tau: usize,
    pub seed: u64,
    /// Validation and test points drawn per task (each split).
    #[serde(default = "default_eval_points")]
    pub eval_points_per_task: usize,
    /// Randomize the order in which class blocks are presented.
    #[serde(default = "default_true")]
    pub shuffle_task_order: bool,
    /// Per-task drift of the class means in a domain-incremental stream,
    /// in units of `cluster_separation`.
    #[serde(default)]
    pub drift: f64,
    /// Standard deviation of the Gaussian the class means are drawn from.
    /// Defaults to a spread that makes the separation constraint easy to meet.
    #[serde(default)]
    pub mean_spread: Option<f64>,
}

impl Default for SplitGaussianSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 2,
            input_dim: 32,
            cluster_separation: 2.0,
            cluster_std: 1.0,
            batches_per_task: 200,
            n_tau: 10,
            seed: 0,
            eval_points_per_task: default_eval_points(),
            shuffle_task_order: true,
            drift: 0.0,
            mean_spread: None,
        }
    }
}

impl SplitGaussianSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(format!("stream spec: {m}")));
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive");
        }
        if self.classes_per_task == 0 {
            return bad("classes_per_task must be positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if !(self.cluster_separation > 0.0) {
            return bad("cluster_separation must be positive");
        }
        if !(self.cluster_std >= 0.0) {
            return bad("cluster_std must be non-negative");
        }
        if self.batches_per_task == 0 || self.n_tau == 0 {
            return bad("batches_per_task and n_tau must be positive");
        }
        if !(self.drift >= 0.0) {
            return bad("drift must be non-negative");
        }
        Ok(())
    }

    fn spread(&self, num_means: usize) -> f64 {
        self.mean_spread.unwrap_or_else(|| {
            let d = self.input_dim as f64;
            self.cluster_separation * (num_means as f64).powf(1.0 / d).max(1.0) / d.sqrt()
                * 1.5
        })
    }
}

/// The online training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub batches: Vec<Batch>,
    /// Task position of every batch, nondecreasing.
    pub task_of_batch: Vec<usize>,
    /// 0-based index of each task's last batch.
    pub task_boundaries: Vec<usize>,
    pub n_tau: usize,
    pub total_classes: usize,
    /// Labels present in each task, by task position.
    pub task_classes: Vec<Vec<usize>>,
    /// Class means for each task position, one row per entry of `task_classes`.
    pub task_means: Vec<Matrix>,
}

/// Held-out points for every task position.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub validation: Vec<Batch>,
    pub test: Vec<Batch>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_boundaries.len()
    }

    pub fn input_dim(&self) -> usize {
        self.batches.first().map_or(0, Batch::dim)
    }

    /// Batch at `cursor` and whether it opens a new task. `None` once the
    /// stream is exhausted.
    pub fn next_batch(&self, cursor: usize) -> Option<(&Batch, bool)> {
        let batch = self.batches.get(cursor)?;
        let new_task = cursor == 0 || self.task_of_batch[cursor] != self.task_of_batch[cursor - 1];
        Some((batch, new_task))
    }

    pub fn iter(&self) -> StreamIter<'_> {
        StreamIter {
            stream: self,
            cursor: 0,
        }
    }

    /// Writes one row per sample: `task,batch,label,x0,...`.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["task".to_string(), "batch".into(), "label".into()];
        header.extend((0..self.input_dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (b, batch) in self.batches.iter().enumerate() {
            for (i, &label) in batch.labels.iter().enumerate() {
                let mut rec = vec![
                    self.task_of_batch[b].to_string(),
                    b.to_string(),
                    label.to_string(),
                ];
                rec.extend(batch.features.row(i).iter().map(|v| format!("{v:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`TaskStream::write_table`]. Class means are
    /// not part of the table and come back empty.
    pub fn read_table<R: Read>(reader: R) -> Result<TaskStream> {
        let mut r = csv::Reader::from_reader(reader);
        let mut rows: Vec<(usize, usize, usize, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_usize = |k: usize| -> Result<usize> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Input(format!("bad integer field {k} in stream table")))
            };
            let task = parse_usize(0)?;
            let batch = parse_usize(1)?;
            let label = parse_usize(2)?;
            let x = rec
                .iter()
                .skip(3)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("bad float in stream table: {e}")))?;
            rows.push((task, batch, label, x));
        }
        let mut batches: Vec<Batch> = Vec::new();
        let mut task_of_batch = Vec::new();
        let mut start = 0;
        while start < rows.len() {
            let b = rows[start].1;
            if b != batches.len() {
                return Err(Error::Input(format!("stream table batch index {b} out of order")));
            }
            let end = start + rows[start..].iter().take_while(|r| r.1 == b).count();
            let feats: Vec<&[f64]> = rows[start..end].iter().map(|r| r.3.as_slice()).collect();
            let features = Matrix::from_rows(&feats);
            let labels = rows[start..end].iter().map(|r| r.2).collect();
            task_of_batch.push(rows[start].0);
            batches.push(Batch::new(features, labels)?);
            start = end;
        }
        if task_of_batch.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("stream table tasks are not nondecreasing".into()));
        }
        let num_tasks = task_of_batch.last().map_or(0, |t| t + 1);
        let task_boundaries = (0..num_tasks)
            .map(|t| task_of_batch.iter().rposition(|&x| x == t).unwrap_or(0))
            .collect();
        let mut task_classes = vec![Vec::new(); num_tasks];
        for (b, batch) in batches.iter().enumerate() {
            let classes = &mut task_classes[task_of_batch[b]];
            for &l in &batch.labels {
                if !classes.contains(&l) {
                    classes.push(l);
                }
            }
        }
        task_classes.iter_mut().for_each(|c| c.sort_unstable());
        let total_classes = task_classes.iter().flatten().max().map_or(0, |m| m + 1);
        let n_tau = batches.first().map_or(0, Batch::len);
        Ok(TaskStream {
            batches,
            task_of_batch,
            task_boundaries,
            n_tau,
            total_classes,
            task_classes,
            task_means: Vec::new(),
        })
    }
}

pub struct StreamIter<'a> {
    stream: &'a TaskStream,
    cursor: usize,
}

impl<'a> Iterator for StreamIter<'a> {
    type Item = (usize, &'a Batch, bool);

    fn next(&mut self) -> Option<Self::Item> {
        let (batch, new_task) = self.stream.next_batch(self.cursor)?;
        let c = self.cursor;
        self.cursor += 1;
        Some((c, batch, new_task))
    }
}

/// Means at pairwise distance at least `separation`, by rejection.
fn place_means(
    count: usize,
    dim: usize,
    separation: f64,
    spread: f64,
    rng: &mut SplitMix64,
) -> Result<Matrix> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    while means.len() < count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..dim).map(|_| spread * rng.normal()).collect();
            let ok = means.iter().all(|m| {
                m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation
            });
            if ok {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {count} means at separation {separation} in dimension {dim} \
                 (placed {})",
                means.len()
            )));
        }
    }
    Ok(Matrix::from_rows(&means))
}

fn draw(
    means: &Matrix,
    classes: &[usize],
    pick: impl Fn(usize, &mut SplitMix64) -> usize,
    n: usize,
    std: f64,
    rng: &mut SplitMix64,
) -> Batch {
    let dim = means.cols();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = pick(i, rng);
        labels.push(classes[k]);
        data.extend(means.row(k).iter().map(|&m| m + std * rng.normal()));
    }
    Batch {
        features: Matrix::new(n, dim, data).expect("sized"),
        labels,
    }
}

fn assemble(
    spec: &SplitGaussianSpec,
    task_classes: Vec<Vec<usize>>,
    task_means: Vec<Matrix>,
    total_classes: usize,
    rng: &mut SplitMix64,
) -> (TaskStream, EvalSets) {
    let mut train_rng = rng.fork();
    let mut val_rng = rng.fork();
    let mut test_rng = rng.fork();
    let mut batches = Vec::new();
    let mut task_of_batch = Vec::new();
    let mut task_boundaries = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (t, (classes, means)) in task_classes.iter().zip(&task_means).enumerate() {
        let c = classes.len();
        for _ in 0..spec.batches_per_task {
            batches.push(draw(
                means,
                classes,
                |_, r| r.below(c),
                spec.n_tau,
                spec.cluster_std,
                &mut train_rng,
            ));
            task_of_batch.push(t);
        }
        task_boundaries.push(batches.len() - 1);
        let balanced = |i: usize, _: &mut SplitMix64| i % c;
        validation.push(draw(
            means,
            classes,
            balanced,
            spec.eval_points_per_task,
            spec.cluster_std,
            &mut val_rng,
        ));
        test.push(draw(
            means,
            classes,
            balanced,
            spec.eval_points_per_task,
            spec.cluster_std,
            &mut test_rng,
        ));
    }
    (
        TaskStream {
            batches,
            task_of_batch,
            task_boundaries,
            n_tau: spec.n_tau,
            total_classes,
            task_classes,
            task_means,
        },
        EvalSets { validation, test },
    )
}

/// Tasks with mutually exclusive labels. Labels are global class ids, so the
/// classifier needs `num_tasks · classes_per_task` outputs.
pub fn generate_class_incremental(spec: &SplitGaussianSpec) -> Result<(TaskStream, EvalSets)> {
    spec.validate()?;
    let total = spec.num_tasks * spec.classes_per_task;
    let mut rng = SplitMix64::new(spec.seed);
    let mut mean_rng = rng.fork();
    let mut order_rng = rng.fork();
    let means = place_means(
        total,
        spec.input_dim,
        spec.cluster_separation,
        spec.spread(total),
        &mut mean_rng,
    )?;
    let mut order: Vec<usize> = (0..spec.num_tasks).collect();
    if spec.shuffle_task_order {
        order_rng.shuffle(&mut order);
    }
    let c = spec.classes_per_task;
    let task_classes: Vec<Vec<usize>> = order
        .iter()
        .map(|&block| (block * c..(block + 1) * c).collect())
        .collect();
    let task_means = task_classes
        .iter()
        .map(|classes| means.select_rows(classes))
        .collect();
    Ok(assemble(spec, task_classes, task_means, total, &mut rng))
}

/// Class means for task `t` of a domain-incremental stream: the base means
/// rotated by `t · drift · π/8` in the plane of the first two coordinates and
/// translated by `t · drift · separation` along a fixed unit direction.
fn drifted_means(base: &Matrix, direction: &[f64], t: usize, drift: f64, separation: f64) -> Matrix {
    let angle = t as f64 * drift * std::f64::consts::PI / 8.0;
    let (s, c) = angle.sin_cos();
    let shift = t as f64 * drift * separation;
    Matrix::from_fn(base.rows(), base.cols(), |i, j| {
        let rotated = match j {
            0 if base.cols() > 1 => c * base.get(i, 0) - s * base.get(i, 1),
            1 => s * base.get(i, 0) + c * base.get(i, 1),
            _ => base.get(i, j),
        };
        rotated + shift * direction[j]
    })
}

/// One label set shared by every task; the class means move between tasks.
pub fn generate_domain_incremental(spec: &SplitGaussianSpec) -> Result<(TaskStream, EvalSets)> {
    spec.validate()?;
    let c = spec.classes_per_task;
    let mut rng = SplitMix64::new(spec.seed);
    let mut mean_rng = rng.fork();
    let mut order_rng = rng.fork();
    let base = place_means(
        c,
        spec.input_dim,
        spec.cluster_separation,
        spec.spread(c),
        &mut mean_rng,
    )?;
    let mut direction: Vec<f64> = (0..spec.input_dim).map(|_| mean_rng.normal()).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= norm);

    let mut order: Vec<usize> = (0..spec.num_tasks).collect();
    if spec.shuffle_task_order {
        order_rng.shuffle(&mut order);
    }
    let classes: Vec<usize> = (0..c).collect();
    let task_classes = vec![classes; spec.num_tasks];
    let task_means = order
        .iter()
        .map(|&t| drifted_means(&base, &direction, t, spec.drift, spec.cluster_separation))
        .collect();
    Ok(assemble(spec, task_classes, task_means, c, &mut rng))
}

pub fn generate(kind: StreamKind, spec: &SplitGaussianSpec) -> Result<(TaskStream, EvalSets)> {
    match kind {
        StreamKind::ClassIncremental => generate_class_incremental(spec),
        StreamKind::DomainIncremental => generate_domain_incremental(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SplitGaussianSpec {
        SplitGaussianSpec {
            num_tasks: 3,
            classes_per_task: 2,
            input_dim: 4,
            batches_per_task: 5,
            n_tau: 4,
            eval_points_per_task: 50,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_class_incremental(&small_spec()).unwrap();
        let b = generate_class_incremental(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 10;
        assert_ne!(a.0, generate_class_incremental(&other).unwrap().0);
        let d1 = generate_domain_incremental(&small_spec()).unwrap();
        let d2 = generate_domain_incremental(&small_spec()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn class_incremental_structure() {
        let (stream, evals) = generate_class_incremental(&small_spec()).unwrap();
        assert_eq!(stream.len(), 15);
        assert_eq!(stream.task_boundaries, vec![4, 9, 14]);
        assert!(stream.task_of_batch.windows(2).all(|w| w[0] <= w[1]));
        assert!(stream.batches.iter().all(|b| b.len() == 4));
        let mut all: Vec<usize> = stream.task_classes.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        for (b, batch) in stream.batches.iter().enumerate() {
            let classes = &stream.task_classes[stream.task_of_batch[b]];
            assert!(batch.labels.iter().all(|l| classes.contains(l)));
        }
        assert_eq!(evals.validation.len(), 3);
        assert!(evals.test.iter().all(|b| b.len() == 50));
    }

    #[test]
    fn means_respect_separation() {
        let spec = SplitGaussianSpec {
            num_tasks: 10,
            classes_per_task: 2,
            input_dim: 2,
            ..small_spec()
        };
        let (stream, _) = generate_class_incremental(&spec).unwrap();
        let rows: Vec<Vec<f64>> = stream
            .task_means
            .iter()
            .flat_map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())
            .collect();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= spec.cluster_separation);
            }
        }
    }

    #[test]
    fn infeasible_separation_is_an_error() {
        let spec = SplitGaussianSpec {
            num_tasks: 20,
            mean_spread: Some(0.01),
            ..small_spec()
        };
        assert!(matches!(
            generate_class_incremental(&spec),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn cursor_semantics() {
        let (stream, _) = generate_class_incremental(&small_spec()).unwrap();
        let (first, new_task) = stream.next_batch(0).unwrap();
        assert!(new_task);
        assert_eq!(first, &stream.batches[0]);
        assert_eq!(stream.task_of_batch[0], 0);
        assert!(!stream.next_batch(1).unwrap().1);
        let t1 = stream.task_boundaries[0];
        assert!(stream.next_batch(t1 + 1).unwrap().1);
        assert!(stream.next_batch(stream.len()).is_none());
        let visited: Vec<usize> = stream.iter().map(|(c, _, _)| c).collect();
        assert_eq!(visited, (0..stream.len()).collect::<Vec<_>>());
        let starts = stream.iter().filter(|(_, _, n)| *n).count();
        assert_eq!(starts, stream.num_tasks());
    }

    #[test]
    fn domain_incremental_drift() {
        let spec = SplitGaussianSpec {
            drift: 0.0,
            shuffle_task_order: false,
            ..small_spec()
        };
        let (stream, _) = generate_domain_incremental(&spec).unwrap();
        assert_eq!(stream.total_classes, 2);
        assert!(stream.task_means.windows(2).all(|w| w[0] == w[1]));

        let spec = SplitGaussianSpec {
            drift: 0.5,
            ..spec
        };
        let (stream, evals) = generate_domain_incremental(&spec).unwrap();
        assert_ne!(stream.task_means[0], stream.task_means[1]);
        // Sample means of the balanced eval sets sit on the drifted means.
        let n_per_class = 25.0;
        for (t, val) in evals.validation.iter().enumerate() {
            for k in 0..2 {
                let idx: Vec<usize> = (0..val.len()).filter(|i| val.labels[*i] == k).collect();
                for j in 0..spec.input_dim {
                    let mean: f64 = idx.iter().map(|&i| val.features.get(i, j)).sum::<f64>() / idx.len() as f64;
                    let bound = 3.0 * spec.cluster_std / f64::sqrt(n_per_class);
                    assert!((mean - stream.task_means[t].get(k, j)).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn table_round_trip() {
        let (stream, _) = generate_class_incremental(&small_spec()).unwrap();
        let mut buf = Vec::new();
        stream.write_table(&mut buf).unwrap();
        let back = TaskStream::read_table(buf.as_slice()).unwrap();
        assert_eq!(back.batches, stream.batches);
        assert_eq!(back.task_of_batch, stream.task_of_batch);
        assert_eq!(back.task_boundaries, stream.task_boundaries);
        assert_eq!(back.total_classes, stream.total_classes);
    }
}
