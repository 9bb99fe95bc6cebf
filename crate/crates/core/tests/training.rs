mod common;

use common::*;
use wavegan::checkpoint::{read_checkpoint, CheckpointIndex};
use wavegan::data::{Dataset, Partition};
use wavegan::train::{lr_schedule, read_metrics, run_training, RunOptions, Trainer, METRICS_FILE};

#[test]
fn short_run_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = synthetic(&data, 4, 6, 16, 3, 11);
    let (seen, _) = Dataset::load(&data, &manifest, Partition::Seen, 16, None).unwrap();
    let mut cfg = tiny_config(16);
    cfg.train.iterations = 10;
    cfg.train.checkpoint_interval = 5;
    let run = dir.path().join("run");
    let outcome = run_training(&seen, &manifest, &cfg, &run, &RunOptions::default()).unwrap();

    let index = CheckpointIndex::read(&run).unwrap().expect("index written");
    assert_eq!(index.checkpoints.iter().map(|e| e.step).collect::<Vec<_>>(), vec![5, 10]);
    let last = outcome.final_checkpoint.unwrap();
    let (meta, tensors) = read_checkpoint(&last).unwrap();
    assert!(meta.is_final);
    assert_eq!(meta.step, 10);
    assert!(tensors.keys().any(|k| k.starts_with("g.")) && tensors.keys().any(|k| k.starts_with("opt_d.")));
    let trainer = Trainer::load(&last).unwrap();
    assert_eq!(trainer.step(), 10);

    let rows = read_metrics(&run.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|(_, p)| p.named().iter().all(|(_, v)| v.is_finite())));
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = synthetic(&data, 4, 6, 16, 3, 12);
    let (seen, _) = Dataset::load(&data, &manifest, Partition::Seen, 16, None).unwrap();
    let mut cfg = tiny_config(16);
    cfg.train.iterations = 4;
    cfg.train.checkpoint_interval = 2;
    let run = dir.path().join("run");
    let stop = RunOptions {
        stop_after: Some(2),
        ..Default::default()
    };
    run_training(&seen, &manifest, &cfg, &run, &stop).unwrap();
    cfg.train.lr *= 2.0;
    let resume = RunOptions {
        resume: true,
        ..Default::default()
    };
    assert!(run_training(&seen, &manifest, &cfg, &run, &resume).is_err());
}

#[test]
fn schedule_is_flat_then_linear_to_zero() {
    let mut cfg = tiny_config(16).train;
    cfg.iterations = 100;
    cfg.lr = 1e-3;
    cfg.decay_start_iteration = Some(60);
    assert_eq!(lr_schedule(0, &cfg), 1e-3);
    assert_eq!(lr_schedule(60, &cfg), 1e-3);
    assert!((lr_schedule(80, &cfg) - 0.5e-3).abs() < 1e-12);
    assert!(lr_schedule(99, &cfg) < 1e-4);
}
