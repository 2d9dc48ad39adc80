//! Benchmark suite manifest and the tune, train, deploy loop over it.
//!
//! Manifest lines are `name file input...`; `#` starts a comment. The file
//! is relative to the manifest's directory and the inputs are the entry
//! function's arguments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{ratio_f64, CostModel, Measurement};
use crate::features::ModelKind;
use crate::ir::{interpret, parse_module, IRModule, ParseError};
use crate::mlif::MlInterface;
use crate::passes::{run_pipeline, OnFailure, PipelineConfig, PipelineError, PipelineOutput};
use crate::server::InferenceServer;
use crate::trainer::{build_dataset, geomean, train, TrainConfig, TrainError};
use crate::tuner::{enumerate_search_space, tune, Evaluator, LogRow, Strategy, TuneError, TuneLog, EXHAUSTIVE_LIMIT};

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{name}: {source}")]
    Parse { name: String, source: ParseError },
    #[error("{0}")]
    Tune(#[from] TuneError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{program}: {source}")]
    Pipeline { program: String, source: PipelineError },
    #[error("{program}: {msg}")]
    Run { program: String, msg: String },
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub path: PathBuf,
    pub input: Vec<i64>,
    pub module: IRModule,
}

fn read(path: &Path) -> Result<String, SuiteError> {
    std::fs::read_to_string(path).map_err(|e| SuiteError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn parse_manifest(text: &str) -> Result<Vec<(String, String, Vec<i64>)>, SuiteError> {
    let mut out: Vec<(String, String, Vec<i64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(file)) = (parts.next(), parts.next()) else {
            return Err(SuiteError::Manifest {
                line: i + 1,
                msg: "expected `name file input...`".into(),
            });
        };
        let input = parts
            .map(|t| {
                t.parse::<i64>().map_err(|_| SuiteError::Manifest {
                    line: i + 1,
                    msg: format!("bad input `{t}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if out.iter().any(|(n, _, _)| n == name) {
            return Err(SuiteError::Manifest {
                line: i + 1,
                msg: format!("duplicate program `{name}`"),
            });
        }
        out.push((name.to_string(), file.to_string(), input));
    }
    Ok(out)
}

pub fn load_suite(manifest: &Path) -> Result<Vec<Benchmark>, SuiteError> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    parse_manifest(&read(manifest)?)?
        .into_iter()
        .map(|(name, file, input)| {
            let path = dir.join(file);
            let module = parse_module(&read(&path)?).map_err(|source| SuiteError::Parse {
                name: name.clone(),
                source,
            })?;
            Ok(Benchmark {
                name,
                path,
                input,
                module,
            })
        })
        .collect()
}

impl Benchmark {
    pub fn evaluator<'a>(&'a self, cm: &'a CostModel) -> Evaluator<'a> {
        Evaluator::new(&self.module, &self.input, cm)
    }

    /// Build with `cfg` (and `mlif` when given) and measure.
    pub fn measure(&self, cfg: &PipelineConfig, mlif: Option<&Arc<MlInterface>>, cm: &CostModel) -> Result<Measurement, SuiteError> {
        self.build(cfg, mlif, cm).map(|(_, m)| m)
    }

    /// Like [`Benchmark::measure`] but also returns the pipeline output.
    pub fn build(
        &self,
        cfg: &PipelineConfig,
        mlif: Option<&Arc<MlInterface>>,
        cm: &CostModel,
    ) -> Result<(PipelineOutput, Measurement), SuiteError> {
        let out = run_pipeline(&self.module, cfg, mlif).map_err(|source| SuiteError::Pipeline {
            program: self.name.clone(),
            source,
        })?;
        let profile = interpret(&out.module, &self.input, Default::default()).map_err(|e| SuiteError::Run {
            program: self.name.clone(),
            msg: e.to_string(),
        })?;
        let size = out.module.size();
        let m = Measurement {
            cost: cm.cost(&profile, size),
            size,
            profile,
        };
        Ok((out, m))
    }
}

/// Exhaustive optimum of the `kinds` space, or `None` above the limit.
pub fn exhaustive_optimum(b: &Benchmark, kinds: &[ModelKind], cm: &CostModel) -> Result<Option<TuneLog>, SuiteError> {
    let space = enumerate_search_space(&b.module, kinds);
    if space.size() > EXHAUSTIVE_LIMIT {
        return Ok(None);
    }
    let n = space.size() as usize;
    Ok(Some(tune(&b.name, &b.evaluator(cm), space, Strategy::Exhaustive, n, 0)?))
}

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    pub kind: ModelKind,
    pub iterations: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub train: TrainConfig,
    pub cost_model: CostModel,
    /// Fraction of the exhaustive improvement a held-out build must recover.
    pub recovery_bound: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            kind: ModelKind::LU,
            iterations: 100,
            strategy: Strategy::HillClimb,
            seed: 7,
            train: TrainConfig::default(),
            cost_model: CostModel::default(),
            recovery_bound: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramOutcome {
    pub program: String,
    pub default_cost: f64,
    pub optimum_cost: f64,
    pub ml_cost: f64,
    pub default_size: usize,
    pub ml_size: usize,
    /// Share of the possible improvement the ML build achieved; `None` when
    /// the default build is already optimal.
    pub recovery: Option<f64>,
    pub speedup: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopReport {
    pub outcomes: Vec<ProgramOutcome>,
    pub geomean_speedup: f64,
}

impl ClosedLoopReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed) && self.geomean_speedup >= 1.0
    }
}

/// Tune every program with `cfg` settings; logs in suite order.
pub fn tune_suite(suite: &[Benchmark], cfg: &ClosedLoopConfig) -> Result<Vec<TuneLog>, SuiteError> {
    suite
        .iter()
        .map(|b| {
            let space = enumerate_search_space(&b.module, &[cfg.kind]);
            Ok(tune(&b.name, &b.evaluator(&cfg.cost_model), space, cfg.strategy, cfg.iterations, cfg.seed)?)
        })
        .collect()
}

/// Hold out each program in turn: train on the other programs' trial rows,
/// export, serve in-process and compile the held-out program with advice.
pub fn closed_loop(suite: &[Benchmark], cfg: &ClosedLoopConfig, work_dir: &Path) -> Result<ClosedLoopReport, SuiteError> {
    let logs = tune_suite(suite, cfg)?;
    deploy_loocv(suite, &logs, cfg, work_dir)
}

/// The train, export and measure half of [`closed_loop`] over existing logs.
pub fn deploy_loocv(suite: &[Benchmark], logs: &[TuneLog], cfg: &ClosedLoopConfig, work_dir: &Path) -> Result<ClosedLoopReport, SuiteError> {
    let rows: BTreeMap<&str, Vec<LogRow>> = logs.iter().map(|l| (l.program.as_str(), Vec::<LogRow>::from(l))).collect();
    let outcomes: Vec<ProgramOutcome> = suite
        .par_iter()
        .map(|b| -> Result<ProgramOutcome, SuiteError> {
            let train_rows: Vec<LogRow> = rows
                .iter()
                .filter(|(p, _)| **p != b.name)
                .flat_map(|(_, r)| r.iter().cloned())
                .collect();
            let samples = build_dataset(&train_rows, cfg.kind, cfg.train.speedup_floor)?;
            let (model, _) = train(&samples, cfg.kind, &cfg.train)?;
            let dir = work_dir.join(&b.name);
            let stem = match cfg.kind {
                ModelKind::LU => "model-lu",
                ModelKind::FI => "model-fi",
            };
            let spec = model.export(&dir, stem)?;
            let spec = std::fs::canonicalize(&spec).unwrap_or(spec).display().to_string();
            let mlif = MlInterface::in_process(Arc::new(Mutex::new(InferenceServer::new())));
            let mut pc = PipelineConfig {
                on_failure: OnFailure::Abort,
                ..PipelineConfig::default()
            };
            match cfg.kind {
                ModelKind::LU => {
                    pc.enable_acpo_lu = true;
                    pc.lu_model = spec;
                }
                ModelKind::FI => {
                    pc.enable_acpo_fi = true;
                    pc.fi_model = spec;
                }
            }
            let ml = b.measure(&pc, Some(&mlif), &cfg.cost_model)?;
            let default = b.measure(&PipelineConfig::default(), None, &cfg.cost_model)?;
            let optimum = exhaustive_optimum(b, &[cfg.kind], &cfg.cost_model)?
                .and_then(|l| l.best().and_then(|t| t.measurement.clone()))
                .map_or(ratio_f64(&default.cost), |m| ratio_f64(&m.cost));
            let (d, o, c) = (ratio_f64(&default.cost), optimum, ratio_f64(&ml.cost));
            let recovery = (d > o).then(|| (d - c) / (d - o));
            let passed = match recovery {
                Some(r) => r >= cfg.recovery_bound,
                None => c <= d,
            };
            Ok(ProgramOutcome {
                program: b.name.clone(),
                default_cost: d,
                optimum_cost: o,
                ml_cost: c,
                default_size: default.size,
                ml_size: ml.size,
                recovery,
                speedup: d / c,
                passed,
            })
        })
        .collect::<Result<_, _>>()?;
    let speedups: Vec<f64> = outcomes.iter().map(|o| o.speedup).collect();
    Ok(ClosedLoopReport {
        geomean_speedup: geomean(&speedups),
        outcomes,
    })
}

/// CSV of default and exhaustive-optimum costs; spaces over the limit get
/// empty optimum fields.
pub fn optima_table(suite: &[Benchmark], kind: ModelKind, cm: &CostModel) -> Result<String, SuiteError> {
    let mut s = String::from("program,space,default_cost,optimum_cost,configuration\n");
    for b in suite {
        let base = b.measure(&PipelineConfig::default(), None, cm)?;
        let space = enumerate_search_space(&b.module, &[kind]).size();
        let best = exhaustive_optimum(b, &[kind], cm)?
            .and_then(|log| log.best().and_then(|t| t.measurement.as_ref().map(|m| (t.configuration.clone(), m.cost))));
        match best {
            Some((cfg, cost)) => {
                let cfg: Vec<String> = cfg.iter().map(u64::to_string).collect();
                s.push_str(&format!("{},{space},{},{cost},{}\n", b.name, base.cost, cfg.join(" ")));
            }
            None => s.push_str(&format!("{},{space},{},,\n", b.name, base.cost)),
        }
    }
    Ok(s)
}
