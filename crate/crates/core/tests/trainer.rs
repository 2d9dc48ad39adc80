use acpo::features::{FeatureVector, ModelKind};
use acpo::mlp::Mlp;
use acpo::server::{LoadedModel, SpecError};
use acpo::trainer::*;
use acpo::tuner::LogRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lu_vector(trip: f64, size: f64) -> FeatureVector {
    let mut v = vec![0.0; ModelKind::LU.len()];
    let mut fv = FeatureVector::from_values(ModelKind::LU, &v).unwrap();
    fv.set("TripCount", trip);
    fv.set("MaxTripCount", trip);
    fv.set("Size", size);
    v = fv.raw();
    FeatureVector::from_values(ModelKind::LU, &v).unwrap()
}

fn row(program: &str, iteration: usize, region: &str, choice: u64, speedup: f64, fv: FeatureVector) -> LogRow {
    LogRow {
        program: program.into(),
        iteration,
        region: region.into(),
        instance: region.into(),
        kind: ModelKind::LU,
        choice,
        features: fv,
        cost: 100.0 / speedup,
        size: 10,
        speedup,
    }
}

#[test]
fn slow_trials_are_pruned() {
    let rows = vec![
        row("p", 0, "L", 4, 0.9, lu_vector(0.0, 3.0)),
        row("p", 1, "M", 8, 1.2, lu_vector(0.0, 5.0)),
    ];
    let ds = build_dataset(&rows, ModelKind::LU, 1.0).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds[0].source, ("p".to_string(), 1, "M".to_string()));
    assert!(matches!(
        build_dataset(&rows[..1], ModelKind::LU, 1.0),
        Err(TrainError::Empty(_))
    ));
}

#[test]
fn label_is_best_trial_choice() {
    let fv = lu_vector(0.0, 3.0);
    let rows = vec![
        row("p", 0, "L", 4, 1.1, fv.clone()),
        row("p", 1, "L", 8, 1.3, fv.clone()),
    ];
    let ds = build_dataset(&rows, ModelKind::LU, 1.0).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(class_labels(ModelKind::LU)[ds[0].label], 8);
    // floor 1.05 keeps only the 1.3 trial, a 1.04 trial would go
    let rows = vec![
        row("p", 0, "L", 4, 1.04, fv.clone()),
        row("p", 1, "M", 2, 1.06, lu_vector(0.0, 9.0)),
    ];
    let ds = build_dataset(&rows, ModelKind::LU, 1.05).unwrap();
    assert_eq!(ds.len(), 1);
    assert!(ds.iter().all(|s| s.speedup >= 1.05));
}

#[test]
fn full_unroll_choices_share_a_class() {
    assert_eq!(canonical_count(16, 10.0), 64);
    assert_eq!(canonical_count(64, 10.0), 64);
    assert_eq!(canonical_count(8, 10.0), 8);
    assert_eq!(canonical_count(8, 0.0), 8);
    assert_eq!(canonical_count(0, 10.0), 0);
    assert_eq!(canonical_count(32, 100.0), 32);
}

#[test]
fn identical_vectors_keep_best_label() {
    let fv = lu_vector(0.0, 3.0);
    let rows = vec![
        row("p", 0, "L", 4, 1.2, fv.clone()),
        row("q", 0, "K", 16, 1.5, fv.clone()),
    ];
    let ds = build_dataset(&rows, ModelKind::LU, 1.0).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(class_labels(ModelKind::LU)[ds[0].label], 16);
}

/// Two well separated clusters on `Size`.
fn separable(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let hi = i % 2 == 1;
            let size = if hi { 40.0 } else { 4.0 } + rng.gen_range(-2.0..2.0);
            Sample {
                features: lu_vector(rng.gen_range(0.0..3.0), size),
                label: if hi { 1 } else { 3 },
                weight: 1.0,
                source: ("syn".into(), i, format!("L{i}")),
                speedup: 1.0,
            }
        })
        .collect()
}

#[test]
fn separable_set_is_learned() {
    let data = separable(60, 1);
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let (model, report) = train(&data, ModelKind::LU, &cfg).unwrap();
    assert!(report.train_top1 >= 0.99, "{}", report.train_top1);
    assert_eq!(report.loss.len(), 50);
    assert_eq!(model.net.dims(), Mlp::standard_dims(30, 7));
    assert!(report.loss.last().unwrap() < &report.loss[0]);
}

#[test]
fn training_is_deterministic() {
    let data = separable(30, 2);
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train(&data, ModelKind::LU, &cfg).unwrap();
    let (b, _) = train(&data, ModelKind::LU, &cfg).unwrap();
    a.export(&dir.path().join("a"), "m").unwrap();
    b.export(&dir.path().join("b"), "m").unwrap();
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "m.weights"), read("b", "m.weights"));
    assert_eq!(read("a", "m.acpo"), read("b", "m.acpo"));
}

#[test]
fn single_class_is_rejected() {
    let mut data = separable(10, 3);
    data.iter_mut().for_each(|s| s.label = 2);
    assert!(matches!(
        train(&data, ModelKind::LU, &TrainConfig::default()),
        Err(TrainError::OneClass(1))
    ));
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&separable(10, 3), ModelKind::LU, &bad), Err(TrainError::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e200,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&separable(20, 4), ModelKind::LU, &cfg),
        Err(TrainError::Diverged { .. })
    ));
}

fn program_rows(program: &str) -> Vec<LogRow> {
    vec![
        row(program, 0, "A", 64, 1.5, lu_vector(12.0, 2.0)),
        row(program, 0, "B", 2, 1.5, lu_vector(0.0, 60.0)),
        row(program, 1, "A", 4, 1.2, lu_vector(12.0, 2.0)),
    ]
}

#[test]
fn loocv_of_identical_programs_matches_training() {
    let rows: Vec<LogRow> = ["p", "q", "r"].iter().flat_map(|p| program_rows(p)).collect();
    let cfg = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let (report, models) = loocv(&rows, ModelKind::LU, &cfg).unwrap();
    assert_eq!(report.folds.len(), 3);
    let all = build_dataset(&rows, ModelKind::LU, 1.0).unwrap();
    // identical vectors across programs collapse to one sample each
    assert_eq!(all.len(), 2);
    let (full, _) = train(&all, ModelKind::LU, &cfg).unwrap();
    for (f, (p, m)) in report.folds.iter().zip(&models) {
        assert_eq!(&f.program, p);
        let own: Vec<LogRow> = rows.iter().filter(|r| &r.program == p).cloned().collect();
        let test = build_dataset(&own, ModelKind::LU, 1.0).unwrap();
        assert_eq!(f.top1, full.top1(&test));
        assert_eq!(f.top1, m.top1(&test));
    }
    assert_eq!(report.geomean, 1.0);
    let (again, _) = loocv(&rows, ModelKind::LU, &cfg).unwrap();
    assert_eq!(again, report);
    assert!(report.table().ends_with("geomean,,,1.0000\n"));
}

#[test]
fn loocv_folds_exclude_held_out_program() {
    let mut rows = program_rows("p");
    rows.extend(vec![
        row("q", 0, "C", 8, 1.4, lu_vector(30.0, 5.0)),
        row("q", 0, "D", 0, 1.4, lu_vector(0.0, 80.0)),
    ]);
    rows.push(row("r", 0, "E", 16, 1.1, lu_vector(20.0, 3.0)));
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (report, _) = loocv(&rows, ModelKind::LU, &cfg).unwrap();
    for f in &report.folds {
        let train_rows: Vec<LogRow> = rows.iter().filter(|r| r.program != f.program).cloned().collect();
        let ds = build_dataset(&train_rows, ModelKind::LU, 1.0).unwrap();
        assert!(ds.iter().all(|s| s.source.0 != f.program));
        assert_eq!(ds.len(), f.train_samples);
    }
    assert!(matches!(
        loocv(&program_rows("p"), ModelKind::LU, &cfg),
        Err(TrainError::TooFewPrograms)
    ));
}

#[test]
fn export_reload_is_prediction_identical() {
    let data = separable(40, 5);
    let (model, _) = train(
        &data,
        ModelKind::LU,
        &TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = model.export(dir.path(), "model-lu").unwrap();
    let loaded = LoadedModel::load(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let raw: Vec<f64> = (0..30).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let p = loaded.predict(&raw).unwrap();
        let z = model.net.forward(&model.standardize(&raw)).unwrap();
        assert_eq!(p.probabilities, z);
        assert_eq!(p.class_index, model.predict_class(&raw));
    }

    let wpath = dir.path().join("model-lu.weights");
    let text = std::fs::read_to_string(&wpath).unwrap();
    let broken: String = text.replacen("LAYER", "LAYRE", 1);
    std::fs::write(&wpath, broken).unwrap();
    assert!(matches!(LoadedModel::load(&spec), Err(SpecError::Weights { .. })));
    std::fs::write(&wpath, &text).unwrap();

    let spec_text = std::fs::read_to_string(&spec).unwrap();
    let line = spec_text.lines().find(|l| l.starts_with("schema=")).unwrap();
    std::fs::write(&spec, spec_text.replace(line, "schema=99")).unwrap();
    assert!(matches!(LoadedModel::load(&spec), Err(SpecError::Version { .. })));
}

#[test]
fn gradient_check_small_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let dims = vec![rng.gen_range(2..6), rng.gen_range(2..7), rng.gen_range(2..5), rng.gen_range(2..4)];
        let mut net = Mlp::he_init(&dims, &mut rng);
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect();
        nudge_off_kinks(&mut net, &x, 1e-3);
        let label = rng.gen_range(0..dims[3]);
        let err = gradient_check(&net, &x, label, 1e-4, 1e-6);
        assert!(err <= 1e-4, "{err}");
    }
    let zero = Mlp::zeros(&[3, 4, 3]);
    let err = gradient_check(&zero, &[1.0, -1.0, 0.5], 1, 1e-4, 1e-6);
    assert!(err.is_finite() && err <= 1e-4, "{err}");
}
