//! Datasets from trial logs, SGD training of the classifier, leave-one-out
//! evaluation and export to model files.

mod gradcheck;

pub use gradcheck::{gradient_check, nudge_off_kinks};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::features::{FeatureVector, ModelKind, SCHEMA_VERSION};
use crate::mlp::{argmax, Mlp};
use crate::passes::UnrollDecision;
use crate::server::{write_spec, write_weights, LoadedModel, ModelSpec, OutputType, SpecError};
use crate::tuner::{LogRow, UNROLL_CLASSES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty after pruning (speedup floor {0})")]
    Empty(f64),
    #[error("training needs at least two classes, found {0}")]
    OneClass(usize),
    #[error("loss diverged at epoch {epoch}: {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("leave-one-out needs at least two programs")]
    TooFewPrograms,
    #[error("choice {0} is not a class label")]
    Label(u64),
    #[error("writing model: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Class labels a model of `kind` predicts.
pub fn class_labels(kind: ModelKind) -> Vec<i64> {
    match kind {
        ModelKind::LU => UNROLL_CLASSES.iter().map(|c| *c as i64).collect(),
        ModelKind::FI => vec![0, 1],
    }
}

/// Largest class count that yields the same decision as `count` for a
/// loop with this `TripCount` feature (0 meaning unknown). Every full
/// unroll of a loop with at most 64 iterations becomes class 64.
pub fn canonical_count(count: u64, trip_feature: f64) -> u64 {
    let trip = (trip_feature > 0.0).then_some(trip_feature as u64);
    let want = UnrollDecision::from_count(count, trip);
    UNROLL_CLASSES
        .iter()
        .rev()
        .copied()
        .find(|c| UnrollDecision::from_count(*c, trip) == want)
        .unwrap_or(count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: usize,
    pub weight: f64,
    /// `(program, iteration, region)`.
    pub source: (String, usize, String),
    pub speedup: f64,
}

/// Samples of `kind` from trial-log rows: rows of trials below
/// `speedup_floor` are dropped, each region is labelled with its choice in
/// the best surviving trial, identical vectors keep the best label.
pub fn build_dataset(rows: &[LogRow], kind: ModelKind, speedup_floor: f64) -> Result<Vec<Sample>, TrainError> {
    let classes = class_labels(kind);
    let kept: Vec<&LogRow> = rows
        .iter()
        .filter(|r| r.kind == kind && r.speedup >= speedup_floor)
        .collect();
    // best trial per (program, region)
    let mut best: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in &kept {
        let key = (r.program.as_str(), r.region.as_str());
        let cand = (r.speedup, r.iteration);
        match best.get(&key) {
            Some((s, it)) if *s > cand.0 || (*s == cand.0 && *it <= cand.1) => {}
            _ => {
                best.insert(key, cand);
            }
        }
    }
    let mut by_vector: BTreeMap<Vec<u64>, Sample> = BTreeMap::new();
    for r in &kept {
        let key = (r.program.as_str(), r.region.as_str());
        if best[&key].1 != r.iteration {
            continue;
        }
        let label_value = match kind {
            ModelKind::LU => canonical_count(r.choice, r.features.get("TripCount").unwrap_or(0.0)),
            ModelKind::FI => r.choice.min(1),
        };
        let label = classes
            .iter()
            .position(|c| *c == label_value as i64)
            .ok_or(TrainError::Label(r.choice))?;
        let bits: Vec<u64> = r.features.values.iter().map(|(_, v)| v.to_bits()).collect();
        let s = Sample {
            features: r.features.clone(),
            label,
            weight: 1.0,
            source: (r.program.clone(), r.iteration, r.region.clone()),
            speedup: r.speedup,
        };
        match by_vector.get(&bits) {
            Some(old) if old.speedup >= s.speedup => {}
            _ => {
                by_vector.insert(bits, s);
            }
        }
    }
    if by_vector.is_empty() {
        return Err(TrainError::Empty(speedup_floor));
    }
    let mut out: Vec<Sample> = by_vector.into_values().collect();
    out.sort_by(|a, b| a.source.cmp(&b.source));
    Ok(out)
}

/// Scale sample weights by the inverse frequency of their label.
pub fn balance_weights(samples: &mut [Sample]) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples.iter() {
        *counts.entry(s.label).or_default() += 1;
    }
    let n = samples.len() as f64;
    let k = counts.len() as f64;
    for s in samples.iter_mut() {
        s.weight = n / (k * counts[&s.label] as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub speedup_floor: f64,
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            learning_rate: 0.02,
            seed: 7,
            speedup_floor: 1.0,
            balance_classes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(self.speedup_floor > 0.0) {
            return Err(TrainError::Config("speedup floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub net: Mlp,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub classes: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub kind: String,
    pub samples: usize,
    pub loss: Vec<f64>,
    pub train_top1: f64,
    pub config: TrainConfig,
}

/// Mean and population standard deviation per feature; zero spreads become 1.
pub fn standardization(samples: &[Sample]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, |s| s.features.values.len());
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, (_, v)) in mean.iter_mut().zip(&s.features.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, m), (_, v)) in var.iter_mut().zip(&mean).zip(&s.features.values) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl TrainedModel {
    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict_class(&self, raw: &[f64]) -> usize {
        let p = self.net.forward(&self.standardize(raw)).expect("input width matches");
        argmax(&p)
    }

    pub fn top1(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict_class(&s.features.raw()) == s.label)
            .count();
        hits as f64 / samples.len() as f64
    }

    pub fn spec(&self, name: &str, weights: &str) -> ModelSpec {
        let schema = self.kind.features();
        ModelSpec {
            name: name.to_string(),
            schema_version: SCHEMA_VERSION,
            features: schema.iter().map(|(n, t)| (n.to_string(), *t)).collect(),
            outputs: match self.kind {
                ModelKind::LU => vec![
                    ("LU-Type".into(), OutputType::Int),
                    ("LU-Count".into(), OutputType::Int),
                ],
                ModelKind::FI => vec![("FI-ShouldInline".into(), OutputType::Bool)],
            },
            classes: self.classes.clone(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            weights: weights.to_string(),
        }
    }

    /// Write `<stem>.acpo` and `<stem>.weights` into `dir`; returns the
    /// spec path.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<PathBuf, TrainError> {
        std::fs::create_dir_all(dir)?;
        let wname = format!("{stem}.weights");
        std::fs::write(dir.join(&wname), write_weights(&self.net))?;
        let spec_path = dir.join(format!("{stem}.acpo"));
        std::fs::write(&spec_path, write_spec(&self.spec(self.kind.name(), &wname)))?;
        Ok(spec_path)
    }

    pub fn to_loaded(&self) -> Result<LoadedModel, SpecError> {
        LoadedModel::new(self.spec(self.kind.name(), "-"), self.net.clone())
    }
}

/// Mini-batch SGD on weighted cross-entropy.
pub fn train(samples: &[Sample], kind: ModelKind, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport), TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Empty(cfg.speedup_floor));
    }
    let present: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    if present.len() < 2 {
        return Err(TrainError::OneClass(present.len()));
    }
    let classes = class_labels(kind);
    let mut data = samples.to_vec();
    if cfg.balance_classes {
        balance_weights(&mut data);
    }
    let (mean, std) = standardization(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Mlp::he_init(&Mlp::standard_dims(kind.len(), classes.len()), &mut rng);
    let mut model = TrainedModel {
        kind,
        net,
        mean,
        std,
        classes,
    };
    let xs: Vec<Vec<f64>> = data.iter().map(|s| model.standardize(&s.features.raw())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad: Option<Mlp> = None;
            for &i in batch {
                let (loss, g) = model
                    .net
                    .loss_and_grad(&xs[i], data[i].label, data[i].weight)
                    .expect("dims match");
                total += loss;
                match &mut grad {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => grad = Some(g),
                }
            }
            if let Some(g) = grad {
                model.net.axpy(-cfg.learning_rate / batch.len() as f64, &g);
            }
        }
        let mean_loss = total / data.len() as f64;
        let finite = (0..model.net.param_count()).all(|p| model.net.param(p).is_finite());
        if !mean_loss.is_finite() || !finite {
            return Err(TrainError::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        losses.push(mean_loss);
    }
    let report = TrainReport {
        kind: kind.name().to_string(),
        samples: data.len(),
        train_top1: model.top1(&data),
        loss: losses,
        config: cfg.clone(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub program: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoocvReport {
    pub folds: Vec<FoldResult>,
    pub geomean: f64,
}

impl LoocvReport {
    pub fn table(&self) -> String {
        let mut s = String::from("program,train,test,top1\n");
        for f in &self.folds {
            let _ = writeln!(s, "{},{},{},{:.4}", f.program, f.train_samples, f.test_samples, f.top1);
        }
        let _ = writeln!(s, "geomean,,,{:.4}", self.geomean);
        s
    }
}

pub fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if xs.iter().any(|x| *x <= 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Samples split by program (from the source tags).
pub fn by_program(samples: &[Sample]) -> BTreeMap<String, Vec<Sample>> {
    let mut out: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.source.0.clone()).or_default().push(s.clone());
    }
    out
}

/// Train on all programs but one and score top-1 on the held-out one, for
/// every program. `rows` is the pooled trial log.
pub fn loocv(rows: &[LogRow], kind: ModelKind, cfg: &TrainConfig) -> Result<(LoocvReport, Vec<(String, TrainedModel)>), TrainError> {
    let programs: BTreeSet<&str> = rows.iter().filter(|r| r.kind == kind).map(|r| r.program.as_str()).collect();
    if programs.len() < 2 {
        return Err(TrainError::TooFewPrograms);
    }
    let mut folds = Vec::new();
    let mut models = Vec::new();
    for p in &programs {
        let (test_rows, train_rows): (Vec<LogRow>, Vec<LogRow>) =
            rows.iter().cloned().partition(|r| r.program == *p);
        let train_set = build_dataset(&train_rows, kind, cfg.speedup_floor)?;
        let test_set = build_dataset(&test_rows, kind, cfg.speedup_floor).unwrap_or_default();
        let (model, _) = train(&train_set, kind, cfg)?;
        folds.push(FoldResult {
            program: p.to_string(),
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            top1: model.top1(&test_set),
        });
        models.push((p.to_string(), model));
    }
    let accs: Vec<f64> = folds.iter().map(|f| f.top1).collect();
    Ok((
        LoocvReport {
            geomean: geomean(&accs),
            folds,
        },
        models,
    ))
}
