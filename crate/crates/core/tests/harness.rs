use cmntm_core::harness::experiments::{
    ablate_num_memories, ablation_csv, memory_retention, timing, timing_csv, turn_importance, turn_order, Scored,
};
use cmntm_core::harness::{datasets, evaluate, evaluate_oracle, run_training, write_metrics, METRICS_HEADER};
use cmntm_core::synthdata::gen_block_reveal;
use cmntm_core::{Checkpoint, Error, ModelKind, RunConfig, Split, TaskConfig, Trainer, Transaction};
use std::path::Path;

fn small(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.train.epochs = epochs;
    cfg.train.train_count = 128;
    cfg.train.val_count = 64;
    cfg.train.test_count = 64;
    cfg
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let cfg = small(1, 0);
    let [train, val, _] = datasets(&cfg).unwrap();
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let rows = run_training(&mut tr, &train, &val, |_, _| Ok(())).unwrap();
    assert!(rows.is_empty());
    let init = Trainer::new(cfg).unwrap().checkpoint();
    assert_eq!(tr.checkpoint().to_bytes(), init.to_bytes());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let cfg = small(2, 4);
    let [train, val, _] = datasets(&cfg).unwrap();
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let full_rows = run_training(&mut full, &train, &val, |_, _| Ok(())).unwrap();

    let mut first = cfg.clone();
    first.train.epochs = 2;
    let mut half = Trainer::new(first).unwrap();
    run_training(&mut half, &train, &val, |_, _| Ok(())).unwrap();
    let bytes = half.checkpoint().to_bytes();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap()).unwrap();
    resumed.config.train.epochs = 4;
    let tail = run_training(&mut resumed, &train, &val, |_, _| Ok(())).unwrap();

    let (a, b) = (full.checkpoint(), resumed.checkpoint());
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam_m, b.adam_m);
    assert_eq!(a.adam_v, b.adam_v);
    assert_eq!((a.epoch, a.step), (b.epoch, b.step));
    assert_eq!(&full_rows[2..], &tail[..]);
}

#[test]
fn one_step_lowers_the_micro_batch_loss() {
    let mut decreased = 0;
    for seed in 0..10 {
        let cfg = small(seed, 1);
        let ds = gen_block_reveal(&cfg.task, 8, Split::Train).unwrap();
        let batch: Vec<&Transaction> = ds.transactions.iter().collect();
        let seeds: Vec<u64> = (0..8).map(|i| seed * 100 + i).collect();
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.batch_loss(&batch, &ds.db, &seeds).unwrap();
        let reported = tr.step(&batch, &ds.db, &seeds).unwrap();
        assert_eq!(before, reported);
        let after = tr.batch_loss(&batch, &ds.db, &seeds).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 9, "{decreased}/10 steps lowered the loss");
}

#[test]
fn non_finite_parameters_abort_with_norms() {
    let cfg = small(3, 1);
    let ds = gen_block_reveal(&cfg.task, 4, Split::Train).unwrap();
    let batch: Vec<&Transaction> = ds.transactions.iter().collect();
    let mut tr = Trainer::new(cfg).unwrap();
    let e = tr.store.entries_mut().iter_mut().find(|e| e.trainable).unwrap();
    e.tensor.data_mut()[0] = f32::NAN;
    match tr.step(&batch, &ds.db, &[1, 2, 3, 4]) {
        Err(Error::Diverged { diagnostic, .. }) => {
            assert!(
                diagnostic.contains("parameter norm") && diagnostic.contains("gradient norm"),
                "{diagnostic}"
            )
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn evaluation_is_repeatable_and_near_chance_untrained() {
    let mut total = 0.0;
    let seeds = 0..4u64;
    let n = seeds.clone().count() as f64;
    let ds = gen_block_reveal(&TaskConfig::default(), 500, Split::Test).unwrap();
    for seed in seeds {
        let tr = Trainer::new(RunConfig::default().with_seed(seed + 40)).unwrap();
        let a = tr.evaluate(&ds).unwrap();
        assert_eq!(a, tr.evaluate(&ds).unwrap());
        for v in [a.r1, a.r5, a.r8, a.r10] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(a.mean_r5_r8, (a.r5 + a.r8) / 2.0);
        total += a.r5;
    }
    let mean = total / n;
    assert!((mean - 5.0 / 256.0).abs() <= 0.01, "untrained R@5 {mean}");
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let tr = Trainer::new(RunConfig::default()).unwrap();
    let task = TaskConfig {
        dim: 16,
        ..TaskConfig::default()
    };
    let ds = gen_block_reveal(&task, 4, Split::Test).unwrap();
    assert!(tr.evaluate(&ds).is_err());
}

#[test]
fn noiseless_oracle_scores_one() {
    let task = TaskConfig {
        noise_std: 0.0,
        ..TaskConfig::default()
    };
    let ds = gen_block_reveal(&task, 300, Split::Test).unwrap();
    let r = evaluate_oracle(&ds).unwrap();
    assert_eq!(r.mean_r5_r8, 1.0);
    assert_eq!(r.r1, 1.0);
}

#[test]
fn untrained_baselines_share_the_retrieval_path() {
    let ds = gen_block_reveal(&TaskConfig::default(), 64, Split::Test).unwrap();
    for kind in [ModelKind::Mean, ModelKind::Ewma] {
        let mut cfg = RunConfig::default();
        cfg.train.model = kind;
        let tr = Trainer::new(cfg).unwrap();
        assert!(tr.store.entries().is_empty());
        let r = evaluate(&tr.model, &tr.store, &ds, 0).unwrap();
        assert_eq!(r.count, 64);
        assert!(r.r5 > 5.0 / 256.0, "{kind:?} {r:?}");
    }
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let cfg = small(4, 3);
    let [train, val, _] = datasets(&cfg).unwrap();
    let mut tr = Trainer::new(cfg).unwrap();
    let rows = run_training(&mut tr, &train, &val, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0], (i + 1) as f64);
        assert!(f[2..].iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f[6], (f[3] + f[4]) / 2.0);
    }
}

#[test]
fn memory_ablation_tables() {
    let cfg = small(5, 1);
    let [train, val, test] = datasets(&cfg).unwrap();
    let one = ablate_num_memories(&cfg, &[1], &train, &val, &test).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].pct_change, Some(0.0));
    let rows = ablate_num_memories(&cfg, &[1, 2, 4], &train, &val, &test).unwrap();
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "C,mean_r5_r8,pct_change_vs_c1");
    assert_eq!(lines.len(), 4);
    for (line, c) in lines[1..].iter().zip([1, 2, 4]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].parse::<usize>().unwrap(), c);
        assert!((0.0..=1.0).contains(&f[1].parse::<f64>().unwrap()));
        f[2].parse::<f64>().unwrap();
    }
}

#[test]
fn turn_importance_full_history_is_standard_evaluation() {
    let cfg = small(6, 0);
    let [_, _, test] = datasets(&cfg).unwrap();
    let model = Trainer::new(cfg.clone()).unwrap();
    let mut lcfg = cfg;
    lcfg.train.model = ModelKind::Lstm;
    let lstm = Trainer::new(lcfg).unwrap();
    let rep = turn_importance(Scored::from(&model), Scored::from(&lstm), &test, 6).unwrap();
    assert_eq!(rep.rows.len(), test.max_turns);
    assert_eq!(rep.rows[0].k, 0);
    let last = rep.rows.last().unwrap();
    assert_eq!(last.model, evaluate(&model.model, &model.store, &test, 6).unwrap());
    assert_eq!(last.baseline, evaluate(&lstm.model, &lstm.store, &test, 6).unwrap());
    assert!(rep.to_csv().lines().count() == test.max_turns + 1);
}

#[test]
fn single_turn_order_overlap_is_one() {
    let mut cfg = small(7, 0);
    cfg.task.max_turns = 1;
    let ds = gen_block_reveal(&cfg.task, 40, Split::Test).unwrap();
    let tr = Trainer::new(cfg).unwrap();
    let rep = turn_order(Scored::from(&tr), &ds, 7).unwrap();
    assert_eq!(rep.transactions, 40);
    assert_eq!(rep.mean_overlap, 1.0);
}

#[test]
fn retention_turn_one_rates_agree() {
    let cfg = small(8, 0);
    let [_, _, test] = datasets(&cfg).unwrap();
    let tr = Trainer::new(cfg).unwrap();
    let rep = memory_retention(Scored::from(&tr), &test, 8).unwrap();
    let t1 = rep.turn(1).unwrap();
    assert_eq!(t1.stateful, t1.reset);
    for r in &rep.rows {
        assert!((0.0..=1.0).contains(&r.stateful) && (0.0..=1.0).contains(&r.reset));
        assert!(r.chance > 0.0 && r.chance < 1.0);
    }
}

#[test]
fn timing_schema() {
    let ds = gen_block_reveal(&TaskConfig::default(), 4, Split::Test).unwrap();
    let cfg = RunConfig::default().train.cascade;
    let rows = timing(std::slice::from_ref(&cfg), &ds.transactions, 5, 0).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ms_per_txn > 0.0);
    let csv = timing_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("C,P,M,mean_r5_r8,ms_per_txn"));
    let f: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&f[..4], &["2", "16", "32", ""]);
}

#[test]
fn same_seed_runs_write_identical_checkpoints() {
    let cfg = small(9, 2);
    let bytes: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let [train, val, _] = datasets(&cfg).unwrap();
            let mut tr = Trainer::new(cfg.clone()).unwrap();
            run_training(&mut tr, &train, &val, |_, _| Ok(())).unwrap();
            tr.checkpoint().to_bytes()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
    let other = {
        let cfg = small(10, 2);
        let [train, val, _] = datasets(&cfg).unwrap();
        let mut tr = Trainer::new(cfg).unwrap();
        run_training(&mut tr, &train, &val, |_, _| Ok(())).unwrap();
        tr.checkpoint().to_bytes()
    };
    assert_ne!(bytes[0], other);
}
