//! Committed artifacts that must be reproducible from the sources. Set
//! `ACPO_BLESS=1` to rewrite them instead of comparing.

use std::path::{Path, PathBuf};

use acpo::cost::CostModel;
use acpo::features::{schema_text, ModelKind};
use acpo::suite::{load_suite, optima_table, Benchmark};
use acpo::trainer::{build_dataset, train, TrainConfig};
use acpo::tuner::{enumerate_search_space, parse_trial_log, tune, write_trial_log, Strategy};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn suite() -> Vec<Benchmark> {
    load_suite(&root().join("benchmarks/suite.manifest")).unwrap()
}

fn check(path: &Path, actual: &[u8]) {
    if std::env::var_os("ACPO_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{} differs from a fresh build", path.display());
}

fn kinds() -> [(ModelKind, &'static str); 2] {
    [(ModelKind::LU, "lu"), (ModelKind::FI, "fi")]
}

#[test]
fn exhaustive_optima() {
    let s = suite();
    for (kind, tag) in kinds() {
        let table = optima_table(&s, kind, &CostModel::default()).unwrap();
        check(&root().join(format!("benchmarks/golden/optima-{tag}.csv")), table.as_bytes());
    }
}

fn golden_log_names(tag: &str) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(root().join("benchmarks/golden/logs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(&format!(".{tag}.log")))
        .collect();
    v.sort();
    v
}

/// 100 hill-climbing iterations with seed 7 per program.
#[test]
fn trial_logs() {
    let cm = CostModel::default();
    for (kind, tag) in kinds() {
        let mut made = Vec::new();
        for b in &suite() {
            let space = enumerate_search_space(&b.module, &[kind]);
            if space.is_empty() {
                continue;
            }
            let log = tune(&b.name, &b.evaluator(&cm), space, Strategy::HillClimb, 100, 7).unwrap();
            let name = format!("{}.{tag}.log", b.name);
            check(&root().join("benchmarks/golden/logs").join(&name), write_trial_log(&log, kind).unwrap().as_bytes());
            made.push(name);
        }
        made.sort();
        assert_eq!(made, golden_log_names(tag));
    }
}

#[test]
fn schemas() {
    for (kind, tag) in kinds() {
        check(&root().join(format!("schemas/{tag}.schema")), schema_text(kind).as_bytes());
    }
}

/// The bundled models are what training on the golden logs with seed 7
/// produces.
#[test]
fn bundled_models() {
    for (kind, tag) in kinds() {
        let mut rows = Vec::new();
        for n in golden_log_names(tag) {
            let text = std::fs::read_to_string(root().join("benchmarks/golden/logs").join(n)).unwrap();
            rows.extend(parse_trial_log(&text).unwrap());
        }
        let cfg = TrainConfig::default();
        let samples = build_dataset(&rows, kind, cfg.speedup_floor).unwrap();
        let (model, _) = train(&samples, kind, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = format!("model-{tag}");
        model.export(dir.path(), &stem).unwrap();
        for ext in ["acpo", "weights"] {
            let fresh = std::fs::read(dir.path().join(format!("{stem}.{ext}"))).unwrap();
            check(&root().join(format!("models/{stem}.{ext}")), &fresh);
        }
    }
}
