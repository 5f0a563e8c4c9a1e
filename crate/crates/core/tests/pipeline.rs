use lpr_core::linalg::Matrix;
use lpr_core::optim::{lpr_step, sgd_step};
use lpr_core::precond::OmegaConfig;
use lpr_core::stream::generate;
use lpr_core::{
    run, Batch, Capacity, Method, Network, PreconditionerState, ReplayBuffer, RunConfig,
    SplitGaussianSpec, SplitMix64, StreamKind, TaskStream, Trainer,
};
use proptest::prelude::*;

fn small(method: Method, seed: u64) -> RunConfig {
    RunConfig {
        method,
        seed,
        stream: SplitGaussianSpec {
            num_tasks: 3,
            classes_per_task: 2,
            input_dim: 8,
            batches_per_task: 60,
            eval_points_per_task: 100,
            ..Default::default()
        },
        hidden: vec![16],
        capacity: Capacity::Bounded(60),
        ..Default::default()
    }
}

#[test]
fn buffer_is_updated_after_the_batch_steps() {
    // With an empty buffer during batch 1, replay contributes nothing, so ER
    // and no-replay SGD agree exactly until batch 2.
    let er_cfg = small(Method::Er, 3);
    let sgd_cfg = RunConfig { method: Method::SgdNoReplay, ..er_cfg.clone() };
    let (stream, _) = generate(er_cfg.stream_kind, &er_cfg.stream_spec()).unwrap();
    let mut er = Trainer::new(&er_cfg, stream.input_dim(), stream.total_classes).unwrap();
    let mut sgd = Trainer::new(&sgd_cfg, stream.input_dim(), stream.total_classes).unwrap();
    er.train_batch(&stream.batches[0], 1, false, |_| {}).unwrap();
    sgd.train_batch(&stream.batches[0], 1, false, |_| {}).unwrap();
    assert_eq!(er.network(), sgd.network());
    assert_eq!(er.buffer().len(), stream.batches[0].len());
    er.train_batch(&stream.batches[1], 2, false, |_| {}).unwrap();
    sgd.train_batch(&stream.batches[1], 2, false, |_| {}).unwrap();
    assert_ne!(er.network(), sgd.network());
}

#[test]
fn replay_reduces_forgetting() {
    for seed in [1, 2] {
        let er = run(&small(Method::Er, seed)).unwrap();
        let sgd = run(&small(Method::SgdNoReplay, seed)).unwrap();
        let first = |o: &lpr_core::RunOutcome| o.test_log.records[0].per_task_acc[0];
        assert!(first(&er) > first(&sgd), "seed {seed}: {} vs {}", first(&er), first(&sgd));
    }
}

#[test]
fn lpr_keeps_first_task_steadier_than_er() {
    let mut wins = 0;
    for seed in 1..=4 {
        let er = run(&small(Method::Er, seed)).unwrap();
        let lpr = run(&RunConfig { omega0: 4.0, ..small(Method::Lpr, seed) }).unwrap();
        wins += usize::from(lpr.task1_tv < er.task1_tv);
        assert!(lpr.summary.mean_drift < er.summary.mean_drift);
    }
    assert!(wins >= 3, "LPR steadier on only {wins}/4 seeds");
}

#[test]
fn every_method_runs_on_a_domain_incremental_stream() {
    for method in [Method::Er, Method::Lpr, Method::Projection, Method::SgdNoReplay] {
        let cfg = RunConfig {
            stream_kind: StreamKind::DomainIncremental,
            stream: SplitGaussianSpec { drift: 1.0, ..small(method, 5).stream },
            ..small(method, 5)
        };
        let out = run(&cfg).unwrap();
        assert!(out.summary.acc > 0.5, "{method:?} acc {}", out.summary.acc);
        assert_eq!(out.log.records.last().unwrap().per_task_acc.len(), 3);
    }
}

#[test]
fn training_on_a_reloaded_stream_table_is_identical() {
    let cfg = small(Method::Lpr, 9);
    let (stream, _) = generate(cfg.stream_kind, &cfg.stream_spec()).unwrap();
    let mut table = Vec::new();
    stream.write_table(&mut table).unwrap();
    let reloaded = TaskStream::read_table(table.as_slice()).unwrap();
    let mut a = Trainer::new(&cfg, stream.input_dim(), stream.total_classes).unwrap();
    let mut b = Trainer::new(&cfg, reloaded.input_dim(), reloaded.total_classes).unwrap();
    for ((c, x, _), (_, y, _)) in stream.iter().zip(reloaded.iter()) {
        a.train_batch(x, c + 1, false, |_| {}).unwrap();
        b.train_batch(y, c + 1, false, |_| {}).unwrap();
    }
    assert_eq!(a.network(), b.network());
}

fn gaussian(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preconditioned_updates_are_never_larger(
        seed in any::<u64>(),
        hidden in 1usize..12,
        stored in 1usize..40,
        omega0 in 0.0f64..50.0,
    ) {
        let mut rng = SplitMix64::new(seed);
        let net = Network::new(&[5, hidden, 3], &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(Capacity::Unlimited);
        let labels = (0..stored).map(|_| rng.below(3)).collect();
        buf.update(&Batch::new(gaussian(stored, 5, &mut rng), labels).unwrap(), &mut rng);
        let mut state = PreconditionerState::new(&net, 1, 1.0).unwrap();
        state.refresh(&net, &buf, &OmegaConfig::new(omega0, 1.0).unwrap(), 1, &mut rng).unwrap();

        let labels = (0..4).map(|_| rng.below(3)).collect();
        let batch = Batch::new(gaussian(4, 5, &mut rng), labels).unwrap();
        let (_, grads) = net.loss_and_gradients(&batch).unwrap();
        let mut plain = net.clone();
        let mut pre = net.clone();
        sgd_step(&mut plain, &grads, 0.1).unwrap();
        lpr_step(&mut pre, &grads, &state, 0.1).unwrap();
        for l in 0..net.num_layers() {
            let d_sgd = plain.layers()[l].theta.sub(&net.layers()[l].theta).unwrap().frobenius_norm();
            let d_lpr = pre.layers()[l].theta.sub(&net.layers()[l].theta).unwrap().frobenius_norm();
            prop_assert!(d_lpr <= d_sgd * (1.0 + 1e-12), "layer {}: {} > {}", l, d_lpr, d_sgd);
        }
    }
}
