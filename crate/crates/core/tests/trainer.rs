use freqseg::attention::AttentionKind;
use freqseg::data::{Dataset, Mask, SceneConfig, SegSample};
use freqseg::model::{Model, ModelConfig};
use freqseg::numerics::Tensor;
use freqseg::trainer::*;
use freqseg::Error;

fn tiny_model(attention: AttentionKind, fem: bool) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        n_agent: 4,
        attention,
        fem_enabled: fem,
        encoder_channels: [4, 8, 8, 8],
        ..Default::default()
    }
}

fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_model(AttentionKind::Maca, true),
        iterations,
        batch: 2,
        eval_every: 2,
        lr: 5e-3,
        ..Default::default()
    }
}

fn scenes(seed: u64, first: u64, n: usize) -> Dataset {
    let cfg = SceneConfig {
        h: 32,
        w: 32,
        seed,
        ..Default::default()
    };
    Dataset::generate(&cfg, first, n).unwrap()
}

#[test]
fn zero_iterations_and_batch_rejected() {
    let ds = scenes(0, 0, 2);
    assert!(matches!(train::<f32>(&tiny_train(0), &ds, None), Err(Error::Config(_))));
    let cfg = TrainConfig { batch: 0, ..tiny_train(1) };
    assert!(matches!(train::<f32>(&cfg, &ds, None), Err(Error::Config(_))));
}

#[test]
fn one_iteration_is_one_step_and_one_record() {
    let ds = scenes(0, 0, 2);
    let out = train::<f32>(&tiny_train(1), &ds, None).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.losses.len(), 1);
    assert_eq!(out.log.records().len(), 1);
    assert_eq!(out.log.records()[0].iter, 1);
}

#[test]
fn records_follow_eval_schedule() {
    let ds = scenes(0, 0, 2);
    let cfg = TrainConfig { eval_every: 2, ..tiny_train(5) };
    let out = train::<f32>(&cfg, &ds, None).unwrap();
    let iters: Vec<usize> = out.log.records().iter().map(|r| r.iter).collect();
    assert_eq!(iters, [2, 4, 5]);
    assert!(out.log.records().iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.miou)));
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let ds = scenes(0, 0, 2);
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..tiny_train(3) };
    let out = train::<f64>(&cfg, &ds, None).unwrap();
    let init = Model::<f64>::new(cfg.model.clone()).unwrap();
    for ((_, a), (_, b)) in out.model.params.iter().zip(init.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn poly_schedule_closed_form() {
    let (lr0, total) = (0.02, 2000);
    for t in [0, total / 2, total - 1] {
        let want = lr0 * (1.0 - t as f64 / total as f64).powf(1.0);
        assert!((poly_lr(lr0, t, total) - want).abs() < 1e-15);
    }
    assert_eq!(poly_lr(lr0, total, total), 0.0);
}

#[test]
fn class_count_mismatch_is_config_error() {
    let ds = scenes(0, 0, 2);
    let m = Model::<f32>::new(ModelConfig { num_classes: 3, ..tiny_model(AttentionKind::Ca, false) }).unwrap();
    assert!(matches!(evaluate(&m, &ds), Err(Error::Config(_))));
    let cfg = TrainConfig {
        model: ModelConfig { num_classes: 5, ..tiny_model(AttentionKind::Ca, false) },
        ..tiny_train(1)
    };
    assert!(matches!(train::<f32>(&cfg, &ds, None), Err(Error::Config(_))));
}

#[test]
fn evaluation_is_deterministic_and_survives_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = scenes(0, 0, 3);
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..tiny_train(2)
    };
    let out = train::<f32>(&cfg, &ds, None).unwrap();
    let eval = scenes(0, 100, 3);
    let a = evaluate(&out.model, &eval).unwrap();
    let b = evaluate(&out.model, &eval).unwrap();
    assert_eq!(a, b);
    let back = Model::<f32>::load(&dir.path().join("ckpt")).unwrap();
    let c = evaluate(&back, &eval).unwrap();
    assert_eq!(a, c);
    assert!(dir.path().join("ckpt/train.cfg").exists());
}

#[test]
fn hand_built_two_sample_evaluation() {
    let mut m = Model::<f64>::new(ModelConfig { num_classes: 2, ..tiny_model(AttentionKind::Mca, true) }).unwrap();
    // Zero head weights and a positive class-1 bias: every pixel predicts class 1.
    let w = m.params.id("head.weight").unwrap();
    *m.params.get_mut(w) = Tensor::zeros(m.params.get(w).shape().to_vec());
    let b = m.params.id("head.bias").unwrap();
    *m.params.get_mut(b) = Tensor::new([2], vec![0.0, 1.0]).unwrap();
    let ds = Dataset {
        samples: vec![
            SegSample {
                image: Tensor::full([32, 32, 3], 0.5),
                mask: Mask::from_fn(32, 32, |_, x| usize::from(x >= 16)),
            },
            SegSample {
                image: Tensor::full([32, 32, 3], 0.2),
                mask: Mask::filled(32, 32, 1),
            },
        ],
        num_classes: 2,
    };
    let r = evaluate(&m, &ds).unwrap();
    assert_eq!(r.confusion.get(0, 1), 512);
    assert_eq!(r.confusion.get(1, 1), 1536);
    assert_eq!(r.confusion.get(0, 0) + r.confusion.get(1, 0), 0);
    assert_eq!(r.pix_acc, 0.75);
    assert_eq!(r.miou, (0.0 + 0.75) / 2.0);
    assert_eq!((r.boundary.pred_total, r.boundary.gt_total), (0, 32));
    assert_eq!(r.boundary_f, 0.0);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let ds = scenes(0, 0, 3);
    let a = train::<f32>(&tiny_train(2), &ds, None).unwrap();
    let b = train::<f32>(&tiny_train(2), &ds, None).unwrap();
    assert_eq!(a.losses, b.losses);
    for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn seed_isolation() {
    let cfg = tiny_train(2);
    let (d0, d1) = (scenes(0, 0, 3), scenes(1, 0, 3));
    // Data seed moves metrics, model init untouched.
    let a = train::<f32>(&cfg, &d0, None).unwrap();
    let b = train::<f32>(&cfg, &d1, None).unwrap();
    assert_ne!(a.losses, b.losses);
    let init = |c: &TrainConfig| Model::<f32>::new(c.model.clone()).unwrap().params;
    assert_eq!(init(&cfg).iter().count(), init(&cfg).iter().count());
    assert!(init(&cfg).iter().zip(init(&cfg).iter()).all(|(x, y)| x == y));
    // Model seed moves init, data untouched.
    let mut other = cfg.clone();
    other.model.seed = 5;
    assert!(init(&cfg).iter().zip(init(&other).iter()).any(|(x, y)| x != y));
    assert_eq!(scenes(0, 0, 3).samples, d0.samples);
}

#[test]
fn csv_log_has_header_and_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log/metrics.csv");
    let ds = scenes(0, 0, 2);
    let cfg = TrainConfig { log_path: Some(path.clone()), eval_every: 1, ..tiny_train(3) };
    let out = train::<f32>(&cfg, &ds, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,loss,pix_acc,miou,boundary_f,seconds");
    assert_eq!(lines.len(), 4);
    assert_eq!(out.log.to_csv(), text);
    for (line, rec) in lines[1..].iter().zip(out.log.records()) {
        assert!(line.starts_with(&format!("{},", rec.iter)));
        assert_eq!(line.split(',').count(), 6);
    }
}

#[test]
fn smoothed_loss_windows() {
    let losses: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(smoothed_loss(&losses, 10, 3), Some(9.0));
    assert_eq!(smoothed_loss(&losses, 2, 20), Some(1.5));
    assert_eq!(smoothed_loss(&losses, 11, 3), None);
    assert_eq!(smoothed_loss(&losses, 0, 3), None);
}

#[test]
fn degenerate_grid_equals_single_run() {
    let train_set = scenes(0, 0, 3);
    let base = tiny_train(2);
    let grid = AblationGrid {
        attention: vec![AttentionKind::Maca],
        fem: vec![true],
        tau: vec![0.5],
        seeds: vec![4],
    };
    let results = ablate::<f32>(&base, &grid, &train_set, None, None).unwrap();
    assert_eq!(results.len(), 1);
    let mut single = base.clone();
    single.model.seed = 4;
    single.seed = 4;
    let want = *train::<f32>(&single, &train_set, None).unwrap().log.last().unwrap();
    let got = results[0].runs[0].clone().unwrap();
    // Wall time is the only field allowed to differ.
    assert_eq!(MetricsRecord { seconds: want.seconds, ..got }, want);
    assert_eq!(results[0].median_miou(), want.miou);
}

#[test]
fn grids_enumerate_expected_cells() {
    let table = AblationGrid::table().cells();
    assert_eq!(table.len(), 6);
    assert_eq!(table.iter().filter(|c| c.fem_enabled).count(), 3);
    let sweep = AblationGrid::tau_sweep().cells();
    let taus: Vec<f64> = sweep.iter().map(|c| c.fem_tau).collect();
    assert_eq!(taus, [0.1, 0.2, 0.3, 0.4, 0.5]);
    assert_eq!(AblationGrid::table().seeds.len(), 3);
}

#[test]
fn tau_sweep_emits_five_rows_and_failures_do_not_abort() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = scenes(0, 0, 2);
    let grid = AblationGrid { seeds: vec![0], ..AblationGrid::tau_sweep() };
    let results = ablate::<f32>(&tiny_train(1), &grid, &train_set, None, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv, ablation_csv(&results));

    // A cell whose config cannot build is recorded as failed; the next still runs.
    let bad = AblationGrid {
        attention: vec![AttentionKind::Maca],
        fem: vec![true],
        tau: vec![2.0, 0.5],
        seeds: vec![0],
    };
    let results = ablate::<f32>(&tiny_train(1), &bad, &train_set, None, None).unwrap();
    assert_eq!(results[0].failures(), 1);
    assert_eq!(results[1].failures(), 0);
}

#[test]
fn table_grid_orders_parameter_counts() {
    let grid = AblationGrid { seeds: vec![0], ..AblationGrid::table() };
    let cells = grid.cells();
    let count = |a, fem| {
        let c = cells.iter().find(|c| c.attention == a && c.fem_enabled == fem).unwrap();
        let cfg = ModelConfig { attention: c.attention, fem_enabled: c.fem_enabled, ..Default::default() };
        Model::<f32>::new(cfg).unwrap().num_params()
    };
    for fem in [false, true] {
        let (ca, mca, maca) = (
            count(AttentionKind::Ca, fem),
            count(AttentionKind::Mca, fem),
            count(AttentionKind::Maca, fem),
        );
        assert!(ca < mca && mca < maca);
    }
}
