//! Per-region search over unroll counts and inline bits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{ratio_f64, speedup_of, Cost, CostModel, Measurement};
use crate::features::{FeatureVector, ModelKind};
use crate::ir::{interpret, IRModule, InterpConfig, InterpError};
use crate::passes::{
    inline_legality, run_pipeline, unroll_legality, Decision, DecisionSource, Overrides,
    PipelineConfig, PipelineError,
};

/// Unroll counts the classifier and the tuner choose from.
pub const UNROLL_CLASSES: [u64; 7] = [0, 2, 4, 8, 16, 32, 64];

/// Largest space the exhaustive strategy will enumerate.
pub const EXHAUSTIVE_LIMIT: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: String,
    pub kind: ModelKind,
    pub domain: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchSpace {
    pub regions: Vec<Region>,
}

/// One value per region, in region order.
pub type Configuration = Vec<u64>;

impl SearchSpace {
    pub fn size(&self) -> u64 {
        self.regions
            .iter()
            .try_fold(1u64, |acc, r| acc.checked_mul(r.domain.len() as u64))
            .unwrap_or(u64::MAX)
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn overrides(&self, cfg: &[u64]) -> Overrides {
        let mut o = Overrides::default();
        for (r, v) in self.regions.iter().zip(cfg) {
            match r.kind {
                ModelKind::LU => {
                    o.loops.insert(r.id.clone(), *v);
                }
                ModelKind::FI => {
                    o.sites.insert(r.id.clone(), *v != 0);
                }
            }
        }
        o
    }

    /// The `n`-th configuration in mixed-radix order (last region fastest).
    pub fn nth(&self, mut n: u64) -> Configuration {
        let mut out = vec![0; self.regions.len()];
        for (k, r) in self.regions.iter().enumerate().rev() {
            let d = r.domain.len() as u64;
            out[k] = r.domain[(n % d) as usize];
            n /= d;
        }
        out
    }

    pub fn random(&self, rng: &mut impl Rng) -> Configuration {
        self.regions
            .iter()
            .map(|r| *r.domain.choose(rng).expect("non-empty domain"))
            .collect()
    }

    pub fn contains(&self, cfg: &[u64]) -> bool {
        cfg.len() == self.regions.len()
            && self.regions.iter().zip(cfg).all(|(r, v)| r.domain.contains(v))
    }
}

/// Legal, tunable regions of `m` in traversal order: loops per function in
/// pre-order, then call sites.
pub fn enumerate_search_space(m: &IRModule, kinds: &[ModelKind]) -> SearchSpace {
    let mut regions = Vec::new();
    if kinds.contains(&ModelKind::LU) {
        for f in &m.functions {
            for l in f.loops() {
                if l.pragma.is_none() && unroll_legality(&l.id, f).is_legal() {
                    regions.push(Region {
                        id: l.id.clone(),
                        kind: ModelKind::LU,
                        domain: UNROLL_CLASSES.to_vec(),
                    });
                }
            }
        }
    }
    if kinds.contains(&ModelKind::FI) {
        for cs in m.call_sites() {
            if inline_legality(&cs.id, m).is_legal() {
                regions.push(Region {
                    id: cs.id,
                    kind: ModelKind::FI,
                    domain: vec![0, 1],
                });
            }
        }
    }
    SearchSpace { regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Random,
    HillClimb,
    Exhaustive,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "hillclimb" => Ok(Strategy::HillClimb),
            "exhaustive" => Ok(Strategy::Exhaustive),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::HillClimb => "hillclimb",
            Strategy::Exhaustive => "exhaustive",
        })
    }
}

/// Proposal state. Hill climbing walks single-region moves from the best
/// configuration of the current climb and restarts at a random unvisited
/// point once every neighbour has been tried.
pub struct Proposer {
    space: SearchSpace,
    strategy: Strategy,
    rng: ChaCha8Rng,
    visited: HashSet<Configuration>,
    climb_best: Option<(Configuration, Cost)>,
    next_exhaustive: u64,
}

impl Proposer {
    pub fn new(space: SearchSpace, strategy: Strategy, seed: u64) -> Self {
        Proposer {
            space,
            strategy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            visited: HashSet::new(),
            climb_best: None,
            next_exhaustive: 0,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Report the cost of a proposed configuration (None when invalid).
    pub fn observe(&mut self, cfg: &[u64], cost: Option<Cost>) {
        self.visited.insert(cfg.to_vec());
        if let Some(c) = cost {
            let better = self.climb_best.as_ref().is_none_or(|(_, b)| c < *b);
            if better {
                self.climb_best = Some((cfg.to_vec(), c));
            }
        }
    }

    fn random_unvisited(&mut self) -> Configuration {
        for _ in 0..64 {
            let c = self.space.random(&mut self.rng);
            if !self.visited.contains(&c) {
                return c;
            }
        }
        self.space.random(&mut self.rng)
    }

    /// Next configuration, or None when the exhaustive walk is done.
    pub fn propose(&mut self) -> Option<Configuration> {
        match self.strategy {
            Strategy::Random => Some(self.space.random(&mut self.rng)),
            Strategy::Exhaustive => {
                if self.next_exhaustive >= self.space.size() {
                    return None;
                }
                let c = self.space.nth(self.next_exhaustive);
                self.next_exhaustive += 1;
                Some(c)
            }
            Strategy::HillClimb => {
                let Some((best, _)) = self.climb_best.clone() else {
                    return Some(self.random_unvisited());
                };
                let mut moves: Vec<(usize, u64)> = self
                    .space
                    .regions
                    .iter()
                    .enumerate()
                    .flat_map(|(k, r)| r.domain.iter().map(move |v| (k, *v)))
                    .filter(|(k, v)| best[*k] != *v)
                    .collect();
                moves.shuffle(&mut self.rng);
                for (k, v) in moves {
                    let mut c = best.clone();
                    c[k] = v;
                    if !self.visited.contains(&c) {
                        return Some(c);
                    }
                }
                // local optimum: restart
                self.climb_best = None;
                Some(self.random_unvisited())
            }
        }
    }
}

/// Region-level slice of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub region: String,
    /// The decided instance (a copy of the region may carry another id).
    pub instance: String,
    pub kind: ModelKind,
    pub choice: u64,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningTrial {
    pub iteration: usize,
    pub configuration: Configuration,
    /// None when the build failed or did not terminate.
    pub measurement: Option<Measurement>,
    pub speedup: f64,
    pub rows: Vec<TrialRow>,
}

impl TuningTrial {
    pub fn valid(&self) -> bool {
        self.measurement.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneLog {
    pub program: String,
    pub space: SearchSpace,
    pub baseline: Measurement,
    pub trials: Vec<TuningTrial>,
}

impl TuneLog {
    pub fn best(&self) -> Option<&TuningTrial> {
        self.trials
            .iter()
            .filter(|t| t.valid())
            .min_by(|a, b| {
                let (ca, cb) = (cost_of(a), cost_of(b));
                ca.cmp(&cb).then(a.iteration.cmp(&b.iteration))
            })
    }

    pub fn distinct_configurations(&self) -> usize {
        self.trials
            .iter()
            .map(|t| &t.configuration)
            .collect::<HashSet<_>>()
            .len()
    }
}

fn cost_of(t: &TuningTrial) -> Cost {
    t.measurement.as_ref().expect("valid trial").cost
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("baseline build failed: {0}")]
    Baseline(PipelineError),
    #[error("baseline run failed: {0}")]
    BaselineRun(InterpError),
    #[error("configuration {0:?} is outside the search space")]
    OutOfSpace(Configuration),
    #[error("writing trial log: {0}")]
    Io(#[from] io::Error),
    #[error("reading trial log: {0}")]
    Log(String),
}

/// Builds and measures configurations of one program.
pub struct Evaluator<'a> {
    pub module: &'a IRModule,
    pub input: &'a [i64],
    pub cost_model: &'a CostModel,
    pub base: PipelineConfig,
    pub interp: InterpConfig,
}

/// Outcome of building and running one configuration.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub measurement: Option<Measurement>,
    pub rows: Vec<TrialRow>,
    pub error: Option<String>,
}

impl Evaluator<'_> {
    pub fn new<'a>(module: &'a IRModule, input: &'a [i64], cm: &'a CostModel) -> Evaluator<'a> {
        Evaluator {
            module,
            input,
            cost_model: cm,
            base: PipelineConfig::default(),
            interp: InterpConfig::default(),
        }
    }

    /// DefaultHeuristic build.
    pub fn baseline(&self) -> Result<Measurement, TuneError> {
        let mut cfg = self.base.clone();
        cfg.overrides = Overrides::default();
        cfg.enable_acpo_fi = false;
        cfg.enable_acpo_lu = false;
        let out = run_pipeline(self.module, &cfg, None).map_err(TuneError::Baseline)?;
        let profile = interpret(&out.module, self.input, self.interp).map_err(TuneError::BaselineRun)?;
        let size = out.module.size();
        Ok(Measurement {
            cost: self.cost_model.cost(&profile, size),
            size,
            profile,
        })
    }

    pub fn evaluate(&self, space: &SearchSpace, cfg: &[u64]) -> Evaluation {
        let mut pc = self.base.clone();
        pc.enable_acpo_fi = false;
        pc.enable_acpo_lu = false;
        pc.overrides = space.overrides(cfg);
        let out = match run_pipeline(self.module, &pc, None) {
            Ok(o) => o,
            Err(e) => {
                return Evaluation {
                    measurement: None,
                    rows: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        let by_id: BTreeMap<&str, (usize, &Region)> = space
            .regions
            .iter()
            .enumerate()
            .map(|(k, r)| (r.id.as_str(), (k, r)))
            .collect();
        let rows = out
            .trace
            .by_source(DecisionSource::Autotuner)
            .filter_map(|rec| {
                let key = match rec.decision {
                    Decision::Unroll(_) => rec.root.as_str(),
                    Decision::Inline(_) => rec.region.as_str(),
                };
                let (k, r) = by_id.get(key)?;
                Some(TrialRow {
                    region: r.id.clone(),
                    instance: rec.region.clone(),
                    kind: r.kind,
                    choice: cfg[*k],
                    features: rec.features.clone()?,
                })
            })
            .collect();
        match interpret(&out.module, self.input, self.interp) {
            Ok(profile) => {
                let size = out.module.size();
                Evaluation {
                    measurement: Some(Measurement {
                        cost: self.cost_model.cost(&profile, size),
                        size,
                        profile,
                    }),
                    rows,
                    error: None,
                }
            }
            Err(e) => Evaluation {
                measurement: None,
                rows,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Run `iterations` trials. Proposals are made in batches and evaluated in
/// parallel; the log order is the proposal order.
pub fn tune(
    program: &str,
    ev: &Evaluator<'_>,
    space: SearchSpace,
    strategy: Strategy,
    iterations: usize,
    seed: u64,
) -> Result<TuneLog, TuneError> {
    let baseline = ev.baseline()?;
    let mut proposer = Proposer::new(space.clone(), strategy, seed);
    let mut memo: HashMap<Configuration, Evaluation> = HashMap::new();
    let mut trials = Vec::with_capacity(iterations);
    let batch = if strategy == Strategy::HillClimb { 1 } else { 64 };
    while trials.len() < iterations {
        let mut wanted = Vec::new();
        while wanted.len() < batch && trials.len() + wanted.len() < iterations {
            match proposer.propose() {
                Some(c) => {
                    if strategy != Strategy::HillClimb {
                        proposer.observe(&c, None);
                    }
                    wanted.push(c)
                }
                None => break,
            }
        }
        if wanted.is_empty() {
            break;
        }
        let fresh: Vec<&Configuration> = {
            let mut seen = HashSet::new();
            wanted
                .iter()
                .filter(|c| !memo.contains_key(*c) && seen.insert((*c).clone()))
                .collect()
        };
        let evals: Vec<(Configuration, Evaluation)> = fresh
            .par_iter()
            .map(|c| ((*c).clone(), ev.evaluate(&space, c)))
            .collect();
        memo.extend(evals);
        for c in wanted {
            let e = &memo[&c];
            let cost = e.measurement.as_ref().map(|m| m.cost);
            if strategy == Strategy::HillClimb {
                proposer.observe(&c, cost);
            }
            trials.push(TuningTrial {
                iteration: trials.len(),
                speedup: cost.map_or(0.0, |c| speedup_of(&baseline.cost, &c)),
                configuration: c,
                measurement: e.measurement.clone(),
                rows: e.rows.clone(),
            });
        }
    }
    Ok(TuneLog {
        program: program.to_string(),
        space,
        baseline,
        trials,
    })
}

/// Trial-log CSV: one row per decided region instance per trial.
pub fn write_trial_log(log: &TuneLog, kind: ModelKind) -> Result<String, TuneError> {
    let mut out = Vec::new();
    let header_note = format!(
        "# program={} iterations={} configurations={} baseline_cost={}\n",
        log.program,
        log.trials.len(),
        log.distinct_configurations(),
        log.baseline.cost
    );
    out.extend_from_slice(header_note.as_bytes());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["program", "iteration", "region_id", "instance", "kind", "choice"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(kind.feature_names().iter().map(|s| s.to_string()));
    header.extend(["cost", "size", "speedup"].iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| TuneError::Log(e.to_string()))?;
    for t in &log.trials {
        let Some(m) = &t.measurement else { continue };
        for r in t.rows.iter().filter(|r| r.kind == kind) {
            let mut rec = vec![
                log.program.clone(),
                t.iteration.to_string(),
                r.region.clone(),
                r.instance.clone(),
                kind.name().to_string(),
                r.choice.to_string(),
            ];
            rec.extend(r.features.values.iter().map(|(_, v)| crate::mlif::format_number(*v)));
            rec.push(m.cost.to_string());
            rec.push(m.size.to_string());
            rec.push(crate::mlif::format_number(t.speedup));
            w.write_record(&rec).map_err(|e| TuneError::Log(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| TuneError::Log(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// One parsed trial-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub program: String,
    pub iteration: usize,
    pub region: String,
    pub instance: String,
    pub kind: ModelKind,
    pub choice: u64,
    pub features: FeatureVector,
    pub cost: f64,
    pub size: usize,
    pub speedup: f64,
}

pub fn parse_trial_log(text: &str) -> Result<Vec<LogRow>, TuneError> {
    let bad = |m: String| TuneError::Log(m);
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let kind = ModelKind::parse(&rec[4]).ok_or_else(|| bad(format!("bad kind `{}`", &rec[4])))?;
        let n = kind.len();
        if rec.len() != 6 + n + 3 {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let values = (0..n).map(|i| num(&rec[6 + i])).collect::<Result<Vec<_>, _>>()?;
        let cost = crate::cost::parse_ratio(&rec[6 + n])
            .map(|c| ratio_f64(&c))
            .map_err(|e| bad(e.to_string()))?;
        rows.push(LogRow {
            program: rec[0].to_string(),
            iteration: rec[1].parse().map_err(|_| bad("bad iteration".into()))?,
            region: rec[2].to_string(),
            instance: rec[3].to_string(),
            kind,
            choice: rec[5].parse().map_err(|_| bad("bad choice".into()))?,
            features: FeatureVector::from_values(kind, &values).map_err(|e| bad(e.to_string()))?,
            cost,
            size: rec[7 + n].parse().map_err(|_| bad("bad size".into()))?,
            speedup: num(&rec[8 + n])?,
        });
    }
    Ok(rows)
}

impl From<&TuneLog> for Vec<LogRow> {
    fn from(log: &TuneLog) -> Self {
        log.trials
            .iter()
            .filter_map(|t| t.measurement.as_ref().map(|m| (t, m)))
            .flat_map(|(t, m)| {
                t.rows.iter().map(move |r| LogRow {
                    program: log.program.clone(),
                    iteration: t.iteration,
                    region: r.region.clone(),
                    instance: r.instance.clone(),
                    kind: r.kind,
                    choice: r.choice,
                    features: r.features.clone(),
                    cost: m.cost_f64(),
                    size: m.size,
                    speedup: t.speedup,
                })
            })
            .collect()
    }
}
