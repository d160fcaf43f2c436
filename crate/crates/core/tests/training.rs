use relssl::data::{generate_synthetic, DatasetSplit, GeneratorConfig};
use relssl::evaluation::topk_accuracy;
use relssl::training::{resume, train, Checkpoint, TrainConfig, TrainError, Trainer, Variant};
use relssl::ModelParams;

fn small_split() -> DatasetSplit {
    let cfg = GeneratorConfig {
        branching: vec![2, 2, 2],
        input_dim: 8,
        level_sigma: vec![2.0, 1.5, 1.0],
        leaf_sigma: 0.5,
        labeled_per_species: 6,
        unlabeled_per_species: 6,
        ood_unlabeled_per_species: 6,
        test_per_species: 8,
        ood_fraction: 0.25,
        seed: 3,
    };
    generate_synthetic(&cfg).unwrap().1
}

fn config(variant: Variant, steps: usize) -> TrainConfig {
    TrainConfig {
        variant,
        total_steps: steps,
        batch_size: 8,
        mu: 2,
        hidden_dims: vec![12],
        base_lr: 0.05,
        triplet_samples: 64,
        ..Default::default()
    }
}

#[test]
fn zero_steps_returns_initial_params() {
    let split = small_split();
    let cfg = config(Variant::LabelTransfer, 0);
    let fresh: Trainer<f64> = Trainer::new(cfg.clone(), &split).unwrap();
    let initial: ModelParams = fresh.params().clone();
    let out = train::<f64>(cfg, &split).unwrap();
    assert_eq!(out.checkpoint.params, initial);
    assert_eq!(out.checkpoint.step, 0);
    assert!(out.metrics.is_empty());
}

#[test]
fn baseline_never_touches_relation_losses() {
    let split = small_split();
    let out = train::<f64>(config(Variant::BaselineSupervised, 40), &split).unwrap();
    assert_eq!(out.metrics.len(), 40);
    for m in &out.metrics {
        assert_eq!(m.report.l_r, 0.0);
        assert_eq!(m.report.l_u, 0.0);
        assert_eq!(m.report.selected_pair_count + m.report.selected_triplet_count, 0);
    }
    assert!(out.checkpoint.params.transfer.as_slice().iter().all(|&w| w == 0.0));
}

#[test]
fn same_seed_gives_identical_logs() {
    let split = small_split();
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        let path = dir.path().join(format!("run{run}.jsonl"));
        let cfg = TrainConfig { metrics_path: Some(path.clone()), ..config(Variant::TripletCr, 30) };
        train::<f64>(cfg, &split).unwrap();
        logs.push(std::fs::read(path).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);

    let other = TrainConfig { seed: 1, ..config(Variant::TripletCr, 30) };
    let a = train::<f64>(config(Variant::TripletCr, 30), &split).unwrap();
    let b = train::<f64>(other, &split).unwrap();
    assert_ne!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn resume_matches_straight_run() {
    let split = small_split();
    let dir = tempfile::tempdir().unwrap();
    let straight_log = dir.path().join("straight.jsonl");
    let split_log = dir.path().join("split.jsonl");
    let ckpt_path = dir.path().join("mid.json");

    for variant in [Variant::LabelTransfer, Variant::RelationPl] {
        let base = config(variant, 24);
        let straight =
            train::<f64>(TrainConfig { metrics_path: Some(straight_log.clone()), ..base.clone() }, &split).unwrap();

        let cfg =
            TrainConfig { metrics_path: Some(split_log.clone()), checkpoint_path: Some(ckpt_path.clone()), ..base };
        let mut first: Trainer<f64> = Trainer::new(cfg.clone(), &split).unwrap();
        first.run_until(11).unwrap();
        first.save_checkpoint().unwrap();
        drop(first);
        let loaded = Checkpoint::<f64>::load(&ckpt_path).unwrap();
        assert_eq!(loaded.step, 11);
        let resumed = resume(loaded, cfg, &split).unwrap();

        assert_eq!(resumed.checkpoint.params, straight.checkpoint.params);
        assert_eq!(resumed.checkpoint.velocity, straight.checkpoint.velocity);
        assert_eq!(std::fs::read(&split_log).unwrap(), std::fs::read(&straight_log).unwrap());
    }
}

#[test]
fn resume_rejects_a_changed_config() {
    let split = small_split();
    let cfg = config(Variant::LabelTransfer, 10);
    let mut trainer: Trainer<f64> = Trainer::new(cfg.clone(), &split).unwrap();
    trainer.run_until(5).unwrap();
    let ckpt = trainer.checkpoint();
    let altered = TrainConfig { base_lr: 0.02, ..cfg.clone() };
    assert!(matches!(resume(ckpt.clone(), altered, &split), Err(TrainError::HashMismatch { .. })));
    // bookkeeping keys are not part of the identity
    let moved = TrainConfig { eval_every: 3, ..cfg };
    assert!(resume(ckpt, moved, &split).is_ok());
}

#[test]
fn resume_at_final_step_is_a_no_op() {
    let split = small_split();
    let cfg = config(Variant::LabelTransfer, 6);
    let done = train::<f64>(cfg.clone(), &split).unwrap();
    let again = resume(done.checkpoint.clone(), cfg, &split).unwrap();
    assert!(again.metrics.is_empty());
    assert_eq!(again.checkpoint.params, done.checkpoint.params);
}

#[test]
fn empty_unlabeled_pool_gives_zero_unlabeled_loss() {
    let mut split = small_split();
    split.unlabeled_in.clear();
    split.unlabeled_out.clear();
    for variant in [Variant::RelationPl, Variant::TripletCr, Variant::LabelTransfer] {
        let out = train::<f64>(config(variant, 15), &split).unwrap();
        assert!(out.metrics.iter().all(|m| m.report.l_u == 0.0));
        assert!(out.metrics.iter().any(|m| m.report.l_r > 0.0));
    }
}

#[test]
fn baseline_learns_separable_data() {
    let gen = GeneratorConfig {
        branching: vec![3, 3, 3],
        input_dim: 8,
        level_sigma: vec![3.0, 2.0, 1.5],
        leaf_sigma: 0.2,
        seed: 5,
        ..Default::default()
    };
    let split = generate_synthetic(&gen).unwrap().1;
    let steps = 500;
    let out = train::<f64>(config(Variant::BaselineSupervised, steps), &split).unwrap();
    let window = |k: usize| out.metrics[k * 100..(k + 1) * 100].iter().map(|m| m.report.l_c).sum::<f64>() / 100.0;
    for k in 1..steps / 100 {
        assert!(window(k) <= window(k - 1), "window {k}: {} > {}", window(k), window(k - 1));
    }
    let categories = split.category_index();
    let top1 = topk_accuracy(&out.checkpoint.params, &split.test_in, &categories, 1).unwrap();
    let chance = 1.0 / categories.len() as f64;
    assert!(top1 >= 10.0 * chance, "top1 {top1} vs chance {chance}");
}

#[test]
fn non_finite_loss_dumps_a_diagnostic() {
    // finite on disk, but infinite once narrowed to f32
    let mut split = small_split();
    for s in &mut split.labeled {
        s.features[0] = 1e300;
    }
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("m.jsonl");
    let cfg = TrainConfig { metrics_path: Some(log.clone()), ..config(Variant::LabelTransfer, 5) };
    match train::<f32>(cfg, &split) {
        Err(TrainError::NonFinite(diag)) => {
            assert!(!diag.labeled_ids.is_empty());
            assert!(relssl::training::diagnostic_path(&log).exists());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.checkpoint.step)),
    }
}
