//! The fixed pass order: inline, unroll, cleanup, unroll again. Each
//! inlining and unrolling decision is resolved from its highest-priority
//! source and recorded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::clone::module_namegens;
use super::inline::{inline_in_place, remove_dead_functions};
use super::unroll::unroll_in_place;
use super::{cleanup_module, inline_legality, unroll_legality, InlineError, UnrollDecision, UnrollError, UnrollType};
use crate::features::{extract_fi_features, extract_lu_features, FeatureVector, ModelKind, UnrollPrefs};
use crate::ir::{
    build_loop_forest, items_inst_count, root_of, verify_module, IRModule, Loop, NameGen,
    UnrollPragma, VerifyError,
};
use crate::mlif::{format_number, MlInterface};
use crate::model::{AcpoModel, Advice};
use crate::server::Value;

/// Inline callees of at most this many instructions by default.
pub const DEFAULT_INLINE_LIMIT: usize = 12;
/// Fully unroll loops with at most this trip count...
pub const DEFAULT_FULL_TRIP: u64 = 8;
/// ...and at most this many body instructions.
pub const DEFAULT_FULL_BODY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnFailure {
    #[default]
    Abort,
    Fallback,
}

impl std::str::FromStr for OnFailure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abort" => Ok(OnFailure::Abort),
            "fallback" | "fallback-heuristic" => Ok(OnFailure::Fallback),
            _ => Err(format!("expected abort or fallback, got `{s}`")),
        }
    }
}

/// Per-region choices injected by the autotuner, keyed by original loop id
/// and call-site id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub loops: BTreeMap<String, u64>,
    pub sites: BTreeMap<String, bool>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub enable_acpo_lu: bool,
    pub enable_acpo_fi: bool,
    pub user_unroll_count: Option<u64>,
    pub lu_model: String,
    pub fi_model: String,
    pub on_failure: OnFailure,
    pub prefs: UnrollPrefs,
    pub overrides: Overrides,
    /// Keep models loaded on the server after the module is done.
    pub persistent: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            enable_acpo_lu: false,
            enable_acpo_fi: false,
            user_unroll_count: None,
            lu_model: "models/model-lu.acpo".into(),
            fi_model: "models/model-fi.acpo".into(),
            on_failure: OnFailure::Abort,
            prefs: UnrollPrefs::default(),
            overrides: Overrides::default(),
            persistent: false,
        }
    }
}

impl PipelineConfig {
    pub fn acpo_enabled(&self) -> bool {
        self.enable_acpo_lu || self.enable_acpo_fi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecisionSource {
    UserFlag,
    Pragma,
    Autotuner,
    MLModel,
    DefaultHeuristic,
}

impl DecisionSource {
    pub fn name(self) -> &'static str {
        match self {
            DecisionSource::UserFlag => "UserFlag",
            DecisionSource::Pragma => "Pragma",
            DecisionSource::Autotuner => "Autotuner",
            DecisionSource::MLModel => "MLModel",
            DecisionSource::DefaultHeuristic => "DefaultHeuristic",
        }
    }
}

impl fmt::Display for DecisionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the unroll decision for `l` comes from, highest priority first.
pub fn resolve_unroll_source(l: &Loop, cfg: &PipelineConfig) -> DecisionSource {
    if cfg.user_unroll_count.is_some() {
        DecisionSource::UserFlag
    } else if l.pragma.is_some() {
        DecisionSource::Pragma
    } else if cfg.overrides.loops.contains_key(l.root_id()) {
        DecisionSource::Autotuner
    } else if cfg.enable_acpo_lu {
        DecisionSource::MLModel
    } else {
        DecisionSource::DefaultHeuristic
    }
}

pub fn resolve_inline_source(site: &str, cfg: &PipelineConfig) -> DecisionSource {
    if cfg.overrides.sites.contains_key(site) {
        DecisionSource::Autotuner
    } else if cfg.enable_acpo_fi {
        DecisionSource::MLModel
    } else {
        DecisionSource::DefaultHeuristic
    }
}

/// The stand-in for the baseline unroll heuristic.
pub fn default_unroll(l: &Loop) -> UnrollDecision {
    match l.trip_count() {
        Some(t) if t <= DEFAULT_FULL_TRIP && items_inst_count(&l.body) <= DEFAULT_FULL_BODY => {
            UnrollDecision::from_count(t, Some(t))
        }
        _ => UnrollDecision::NONE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PassName {
    Inline,
    Unroll1,
    Unroll2,
}

impl PassName {
    pub fn name(self) -> &'static str {
        match self {
            PassName::Inline => "inline",
            PassName::Unroll1 => "unroll#1",
            PassName::Unroll2 => "unroll#2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Unroll(UnrollDecision),
    Inline(bool),
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Unroll(d) => write!(f, "{d}"),
            Decision::Inline(true) => f.write_str("inline"),
            Decision::Inline(false) => f.write_str("keep"),
        }
    }
}

/// Wall time spent on model-driven decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overhead {
    pub feature_collection: Duration,
    pub feature_set: Duration,
    pub inference: Duration,
    pub assignment: Duration,
}

impl Overhead {
    pub const ROWS: [&'static str; 5] = [
        "feature collection",
        "feature set",
        "inference",
        "assignment",
        "total",
    ];

    pub fn total(&self) -> Duration {
        self.feature_collection + self.feature_set + self.inference + self.assignment
    }

    pub fn rows(&self) -> [(&'static str, Duration); 5] {
        [
            (Self::ROWS[0], self.feature_collection),
            (Self::ROWS[1], self.feature_set),
            (Self::ROWS[2], self.inference),
            (Self::ROWS[3], self.assignment),
            (Self::ROWS[4], self.total()),
        ]
    }

    pub fn add(&mut self, o: &Overhead) {
        self.feature_collection += o.feature_collection;
        self.feature_set += o.feature_set;
        self.inference += o.inference;
        self.assignment += o.assignment;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub pass: PassName,
    pub function: String,
    pub region: String,
    /// Original region id the autotuner keys on.
    pub root: String,
    pub source: DecisionSource,
    pub legal: bool,
    pub reasons: Vec<String>,
    /// Loop body or callee instruction count when decided.
    pub size: usize,
    pub features: Option<FeatureVector>,
    pub advice: Option<Vec<(String, Value)>>,
    pub decision: Decision,
    pub note: Option<String>,
    pub overhead: Overhead,
}

/// First 16 hex digits of SHA-256 over `name=value` pairs.
pub fn feature_hash(fv: &FeatureVector) -> String {
    let text: Vec<String> = fv
        .values
        .iter()
        .map(|(n, v)| format!("{n}={}", format_number(*v)))
        .collect();
    let digest = Sha256::digest(text.join(",").as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineTrace {
    pub records: Vec<DecisionRecord>,
    pub log: Vec<String>,
    pub overhead: Overhead,
}

pub const TRACE_CSV_HEADER: &str = "pass,function,region,root,source,legal,feature_hash,advice,decision,note";

impl PipelineTrace {
    pub fn log_text(&self) -> String {
        let mut s = self.log.join("\n");
        s.push('\n');
        s
    }

    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRACE_CSV_HEADER.split(',')).expect("in-memory write");
        for r in &self.records {
            let advice = r
                .advice
                .as_ref()
                .map(|a| {
                    a.iter()
                        .map(|(n, v)| format!("{n}={}", v.wire()))
                        .collect::<Vec<_>>()
                        .join(";")
                })
                .unwrap_or_default();
            let legal = if r.legal { "1".into() } else { r.reasons.join(";") };
            w.write_record([
                r.pass.name(),
                &r.function,
                &r.region,
                &r.root,
                r.source.name(),
                &legal,
                &r.features.as_ref().map(feature_hash).unwrap_or_default(),
                &advice,
                &r.decision.to_string(),
                r.note.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 fields")
    }

    pub fn by_source(&self, source: DecisionSource) -> impl Iterator<Item = &DecisionRecord> {
        self.records.iter().filter(move |r| r.source == source)
    }

    pub fn find(&self, region: &str) -> Option<&DecisionRecord> {
        self.records.iter().find(|r| r.region == region)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub module: IRModule,
    pub trace: PipelineTrace,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input module is invalid: {0}")]
    Input(VerifyError),
    #[error("ML-guided passes are enabled but no model server is connected")]
    NoServer,
    #[error("inference failed for {region}: {diagnostic}")]
    Inference { region: String, diagnostic: String },
    #[error(transparent)]
    Unroll(#[from] UnrollError),
    #[error(transparent)]
    Inline(#[from] InlineError),
    #[error("pipeline produced an invalid module: {0}")]
    Output(VerifyError),
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    lu: Option<AcpoModel>,
    fi: Option<AcpoModel>,
    loops: NameGen,
    sites: NameGen,
    trace: PipelineTrace,
    /// Loops whose nounroll pragma came from the input.
    user_disabled: BTreeSet<String>,
    decided: BTreeSet<String>,
}

const RULE: &str = "--------------------------------------------";

impl Run<'_> {
    fn say(&mut self, line: impl Into<String>) {
        self.trace.log.push(line.into());
    }

    fn model_failed(&mut self, region: &str, advice: &Advice) -> Result<(), PipelineError> {
        let diagnostic = advice.diagnostic.clone().unwrap_or_default();
        match self.cfg.on_failure {
            OnFailure::Abort => {
                self.say(format!("ML advice unavailable: {diagnostic}"));
                Err(PipelineError::Inference {
                    region: region.to_string(),
                    diagnostic,
                })
            }
            OnFailure::Fallback => {
                self.say(format!("ML advice unavailable, using default heuristic: {diagnostic}"));
                Ok(())
            }
        }
    }

    fn inline_phase(&mut self, m: &mut IRModule) -> Result<(), PipelineError> {
        for scc in m.sccs_bottom_up() {
            for func in &scc {
                let Some(f) = m.function(func) else { continue };
                let sites = f.call_sites();
                if sites.is_empty() {
                    continue;
                }
                self.say(format!("Inlining calls in: {func}"));
                let mut changed = false;
                for cs in sites {
                    changed |= self.decide_site(m, func, &cs.id)?;
                }
                if changed {
                    self.say(format!("Updated inlining SCC: ({})", scc.join(", ")));
                }
                self.say(RULE);
            }
        }
        remove_dead_functions(m);
        Ok(())
    }

    fn decide_site(&mut self, m: &mut IRModule, func: &str, site: &str) -> Result<bool, PipelineError> {
        let Some(cs) = m.call_sites().into_iter().find(|c| c.id == site) else {
            return Ok(false);
        };
        let callee_size = m.function(&cs.callee).map_or(0, |f| f.inst_count());
        let legality = inline_legality(site, m);
        let mut rec = DecisionRecord {
            pass: PassName::Inline,
            function: func.to_string(),
            region: site.to_string(),
            root: root_of(site).to_string(),
            source: DecisionSource::DefaultHeuristic,
            legal: legality.is_legal(),
            reasons: legality.reasons.clone(),
            size: callee_size,
            features: None,
            advice: None,
            decision: Decision::Inline(false),
            note: None,
            overhead: Overhead::default(),
        };
        if !rec.legal {
            self.say(format!("  {site} -> {}: not inlinable ({})", cs.callee, rec.reasons.join(", ")));
            self.trace.records.push(rec);
            return Ok(false);
        }
        let t = Instant::now();
        let fv = extract_fi_features(site, m, None);
        let collect = t.elapsed();
        rec.features = fv.clone();
        rec.source = resolve_inline_source(site, self.cfg);
        let mut inline = callee_size <= DEFAULT_INLINE_LIMIT;
        match rec.source {
            DecisionSource::Autotuner => inline = self.cfg.overrides.sites[site],
            DecisionSource::MLModel => {
                self.say("--- ACPOModel is activated ---");
                self.say(format!("Registering FI features: {}", ModelKind::FI.len()));
                self.say("Calling ML IF for inference");
                let model = self.fi.as_mut().ok_or(PipelineError::NoServer)?;
                let advice = match fv.map(|f| model.set_custom_features(f)) {
                    Some(Ok(())) => model.get_advice(),
                    Some(Err(e)) => Advice {
                        diagnostic: Some(e.to_string()),
                        ..Advice::default()
                    },
                    None => Advice {
                        diagnostic: Some("no features".into()),
                        ..Advice::default()
                    },
                };
                let t = Instant::now();
                rec.overhead.feature_collection = collect;
                rec.overhead.feature_set = advice.timings.set;
                rec.overhead.inference = advice.timings.inference;
                match advice.bool("FI-ShouldInline").filter(|_| advice.present) {
                    Some(b) => {
                        inline = b;
                        rec.advice = Some(advice.fields.clone());
                        self.say(format!("ACPOModel inline prediction: {}", u8::from(b)));
                    }
                    None => {
                        self.model_failed(site, &advice)?;
                        rec.source = DecisionSource::DefaultHeuristic;
                        rec.note = advice.diagnostic.clone().map(|d| format!("fallback: {d}"));
                    }
                }
                rec.overhead.assignment = t.elapsed();
                self.trace.overhead.add(&rec.overhead);
            }
            _ => {}
        }
        rec.decision = Decision::Inline(inline);
        if rec.source != DecisionSource::MLModel {
            self.say(format!(
                "  {site} -> {}: {} ({})",
                cs.callee,
                if inline { "inlining" } else { "not inlining" },
                rec.source
            ));
        }
        self.trace.records.push(rec);
        if inline {
            inline_in_place(m, site, &mut self.loops, &mut self.sites)?;
        }
        Ok(inline)
    }

    fn unroll_phase(&mut self, m: &mut IRModule, pass: PassName) -> Result<(), PipelineError> {
        for fi in 0..m.functions.len() {
            let forest = build_loop_forest(&m.functions[fi]);
            let order: Vec<String> = forest
                .post_order()
                .into_iter()
                .map(|i| &forest.loops[i])
                .filter(|l| pass != PassName::Unroll1 || l.is_innermost())
                .map(|l| l.id.clone())
                .collect();
            for id in order {
                self.decide_loop(m, fi, &id, pass)?;
            }
        }
        Ok(())
    }

    fn decide_loop(&mut self, m: &mut IRModule, fi: usize, id: &str, pass: PassName) -> Result<(), PipelineError> {
        let f = &m.functions[fi];
        let Some(l) = f.find_loop(id) else { return Ok(()) };
        if self.decided.contains(id) {
            return Ok(());
        }
        if l.unroll_disabled() && !self.user_disabled.contains(id) {
            // copies and remainders made by earlier transformations
            return Ok(());
        }
        self.decided.insert(id.to_string());
        let fname = f.name.clone();
        let trip = l.trip_count();
        let size = items_inst_count(&l.body);
        self.say(format!("Loop Unroll: F[{fname}] Loop {id}"));
        self.say(format!("    Loop Size = {size}"));
        let legality = unroll_legality(id, f);
        let mut rec = DecisionRecord {
            pass,
            function: fname,
            region: id.to_string(),
            root: l.root_id().to_string(),
            source: resolve_unroll_source(l, self.cfg),
            legal: legality.is_legal(),
            reasons: legality.reasons.clone(),
            size,
            features: None,
            advice: None,
            decision: Decision::Unroll(UnrollDecision::NONE),
            note: None,
            overhead: Overhead::default(),
        };
        if !rec.legal {
            self.say(format!("not unrolling: illegal ({})", rec.reasons.join(", ")));
            self.finish_loop(m, fi, id, rec, UnrollDecision::NONE)?;
            return Ok(());
        }
        let t = Instant::now();
        let fv = extract_lu_features(id, f, &self.cfg.prefs);
        let collect = t.elapsed();
        rec.features = fv.clone();
        let default = default_unroll(l);
        let wanted = match rec.source {
            DecisionSource::UserFlag => Some(self.cfg.user_unroll_count.unwrap_or(0)),
            DecisionSource::Pragma => Some(l.pragma_unroll_count().map_or(0, u64::from)),
            DecisionSource::Autotuner => Some(self.cfg.overrides.loops[l.root_id()]),
            _ => None,
        };
        let pragma = l.pragma;
        let mut decision = match wanted {
            Some(c) => UnrollDecision::from_count(c, trip),
            None => default,
        };
        if rec.source == DecisionSource::MLModel {
            self.say("--- ACPOModel is activated ---");
            self.say(format!("Registering LU features: {}", ModelKind::LU.len()));
            self.say("Calling ML IF for inference");
            let model = self.lu.as_mut().ok_or(PipelineError::NoServer)?;
            let advice = match fv.map(|f| model.set_custom_features(f)) {
                Some(Ok(())) => model.get_advice(),
                Some(Err(e)) => Advice {
                    diagnostic: Some(e.to_string()),
                    ..Advice::default()
                },
                None => Advice {
                    diagnostic: Some("no features".into()),
                    ..Advice::default()
                },
            };
            let t = Instant::now();
            rec.overhead.feature_collection = collect;
            rec.overhead.feature_set = advice.timings.set;
            rec.overhead.inference = advice.timings.inference;
            let parsed = advice
                .present
                .then(|| {
                    let kind = UnrollType::from_code(advice.int("LU-Type")?)?;
                    let count = u64::try_from(advice.int("LU-Count")?).ok()?;
                    Some(UnrollDecision { kind, count })
                })
                .flatten();
            match parsed {
                Some(d) => {
                    let (fixed, note) = d.revalidate(trip);
                    rec.advice = Some(advice.fields.clone());
                    rec.note = note;
                    decision = fixed;
                    self.say("Final unroll type post-legality checks is: ");
                }
                None => {
                    let mut advice = advice;
                    if advice.present {
                        advice.diagnostic = Some(format!("malformed advice {:?}", advice.fields));
                    }
                    self.model_failed(id, &advice)?;
                    rec.source = DecisionSource::DefaultHeuristic;
                    rec.note = advice.diagnostic.map(|d| format!("fallback: {d}"));
                }
            }
            rec.overhead.assignment = t.elapsed();
            self.trace.overhead.add(&rec.overhead);
        } else if rec.source == DecisionSource::Pragma && pragma == Some(UnrollPragma::Disable) {
            self.say("not unrolling: nounroll pragma");
        } else {
            self.say(format!("Decision source: {}", rec.source));
        }
        self.finish_loop(m, fi, id, rec, decision)
    }

    fn finish_loop(
        &mut self,
        m: &mut IRModule,
        fi: usize,
        id: &str,
        mut rec: DecisionRecord,
        decision: UnrollDecision,
    ) -> Result<(), PipelineError> {
        if let Some(n) = &rec.note {
            self.say(format!("  {n}"));
        }
        match decision.kind {
            UnrollType::None => {
                if rec.legal {
                    self.say("not unrolling loop");
                }
            }
            UnrollType::Full => {
                self.say("COMPLETELY UNROLLING loop ");
                self.say(format!("with trip count {}!", decision.count));
            }
            UnrollType::Partial => {
                self.say(format!("    partially unrolling with count: {}", decision.count));
                self.say("UNROLLING loop ");
            }
            UnrollType::Runtime => {
                self.say(format!("runtime with the unroll count of: {}", decision.count));
                self.say("UNROLLING loop ");
            }
        }
        self.say(RULE);
        rec.decision = Decision::Unroll(decision);
        self.trace.records.push(rec);
        let f = &mut m.functions[fi];
        if let Some(l) = f.find_loop_mut(id) {
            l.pragma = Some(UnrollPragma::Disable);
        }
        unroll_in_place(f, id, decision, &mut self.loops, &mut self.sites)?;
        Ok(())
    }
}

/// Run the pipeline on a copy of `m`. With ACPO enabled, `mlif` must be a
/// connected interface; models are loaded lazily, at most once each.
pub fn run_pipeline(
    m: &IRModule,
    cfg: &PipelineConfig,
    mlif: Option<&Arc<MlInterface>>,
) -> Result<PipelineOutput, PipelineError> {
    verify_module(m).map_err(PipelineError::Input)?;
    if cfg.acpo_enabled() && mlif.is_none() && cfg.on_failure == OnFailure::Abort {
        return Err(PipelineError::NoServer);
    }
    let mut cfg = cfg.clone();
    if mlif.is_none() {
        cfg.enable_acpo_lu = false;
        cfg.enable_acpo_fi = false;
    }
    let mut module = m.clone();
    let (loops, sites) = module_namegens(&module);
    let handle = |kind, path: &str| mlif.map(|c| AcpoModel::new(kind, c.clone(), path));
    let mut run = Run {
        cfg: &cfg,
        lu: if cfg.enable_acpo_lu { handle(ModelKind::LU, &cfg.lu_model) } else { None },
        fi: if cfg.enable_acpo_fi { handle(ModelKind::FI, &cfg.fi_model) } else { None },
        loops,
        sites,
        trace: PipelineTrace::default(),
        user_disabled: BTreeSet::new(),
        decided: BTreeSet::new(),
    };
    if cfg.acpo_enabled() {
        run.say(format!("ML interface: {}", mlif.map(|c| c.endpoint().to_string()).unwrap_or_default()));
    }
    let result = (|| {
        run.inline_phase(&mut module)?;
        run.user_disabled = module
            .functions
            .iter()
            .flat_map(|f| f.loops())
            .filter(|l| l.unroll_disabled())
            .map(|l| l.id.clone())
            .collect();
        run.unroll_phase(&mut module, PassName::Unroll1)?;
        cleanup_module(&mut module);
        run.unroll_phase(&mut module, PassName::Unroll2)
    })();
    if !cfg.persistent {
        for h in [run.lu.as_mut(), run.fi.as_mut()].into_iter().flatten() {
            h.free();
        }
    }
    result?;
    verify_module(&module).map_err(PipelineError::Output)?;
    Ok(PipelineOutput {
        module,
        trace: run.trace,
    })
}
