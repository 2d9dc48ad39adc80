//! Loop and call-site features, their schema, and correlation analysis.

mod schema;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ir::{
    build_loop_forest, BinOp, Block, ExecutionProfile, Function, IRModule, Inst, Item, LoopForest,
    Operand,
};

pub use schema::{
    parse_schema, schema_text, FeatureType, ModelKind, SchemaError, FI_FEATURES, LU_FEATURES,
    SCHEMA_VERSION,
};
pub use stats::{correlation_report, pearson, CorrelationReport, Pearson, StatsError};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub kind: ModelKind,
    pub values: Vec<(String, f64)>,
    pub schema_version: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("{kind} vector needs {expected} features, got {got}")]
    Arity {
        kind: ModelKind,
        expected: usize,
        got: usize,
    },
    #[error("feature {index} should be `{expected}`, got `{got}`")]
    Name {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("schema version {0} does not match {SCHEMA_VERSION}")]
    Version(u32),
    #[error("vector is for {got}, handle expects {expected}")]
    Kind { expected: ModelKind, got: ModelKind },
}

impl FeatureVector {
    /// Build a vector in schema order from raw values.
    pub fn from_values(kind: ModelKind, values: &[f64]) -> Result<Self, FeatureError> {
        if values.len() != kind.len() {
            return Err(FeatureError::Arity {
                kind,
                expected: kind.len(),
                got: values.len(),
            });
        }
        Ok(FeatureVector {
            kind,
            values: kind
                .feature_names()
                .into_iter()
                .zip(values)
                .map(|(n, v)| (n.to_string(), *v))
                .collect(),
            schema_version: SCHEMA_VERSION,
        })
    }

    /// Check names, order, count and version against the schema.
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FeatureError::Version(self.schema_version));
        }
        let names = self.kind.feature_names();
        if self.values.len() != names.len() {
            return Err(FeatureError::Arity {
                kind: self.kind,
                expected: names.len(),
                got: self.values.len(),
            });
        }
        for (index, ((got, _), expected)) in self.values.iter().zip(names).enumerate() {
            if got != expected {
                return Err(FeatureError::Name {
                    index,
                    expected: expected.to_string(),
                    got: got.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn raw(&self) -> Vec<f64> {
        self.values.iter().map(|(_, v)| *v).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Replace one named value.
    pub fn set(&mut self, name: &str, value: f64) -> bool {
        match self.values.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => {
                slot.1 = value;
                true
            }
            None => false,
        }
    }
}

/// Unroll-pass configuration reported in the first five loop features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnrollPrefs {
    /// 0 means unset.
    pub partial_threshold: u32,
    pub allow_remainder: bool,
    pub unroll_remainder: bool,
    pub allow_expensive_trip_count: bool,
    pub force: bool,
}

impl Default for UnrollPrefs {
    fn default() -> Self {
        UnrollPrefs {
            partial_threshold: 0,
            allow_remainder: true,
            unroll_remainder: false,
            allow_expensive_trip_count: false,
            force: false,
        }
    }
}

fn b(v: bool) -> f64 {
    f64::from(u8::from(v))
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Default)]
struct BlockStats {
    blocks: usize,
    insts: usize,
    loads: usize,
    stores: usize,
    terms: usize,
    store_targets: usize,
}

impl BlockStats {
    fn add(&mut self, blk: &Block) {
        self.blocks += 1;
        self.insts += blk.inst_count();
        self.loads += blk.insts.iter().filter(|i| i.is_load()).count();
        self.stores += blk.insts.iter().filter(|i| i.is_store()).count();
        self.terms += usize::from(blk.term.is_some());
        let targets: BTreeSet<&str> = blk
            .insts
            .iter()
            .filter_map(|i| match i {
                Inst::Store { array, .. } => Some(array.as_str()),
                _ => None,
            })
            .collect();
        self.store_targets += targets.len();
    }

    fn of(blocks: &[&Block]) -> Self {
        let mut s = BlockStats::default();
        for blk in blocks {
            s.add(blk);
        }
        s
    }
}

/// Variables other than `iv` updated by `v = add v, c` or `v = sub v, c`
/// with a constant `c` in the loop's own blocks.
fn induction_like(own: &[&Block], iv: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for blk in own {
        for inst in &blk.insts {
            if let Inst::Bin {
                op: BinOp::Add | BinOp::Sub,
                dst,
                lhs,
                rhs,
            } = inst
            {
                let self_update = (lhs.as_var() == Some(dst) && matches!(rhs, Operand::Const(_)))
                    || (rhs.as_var() == Some(dst) && matches!(lhs, Operand::Const(_)));
                if self_update && dst != iv {
                    out.insert(dst.clone());
                }
            }
        }
    }
    out
}

fn blocks_by_label(f: &Function) -> BTreeMap<&str, &Block> {
    f.blocks().into_iter().map(|b| (b.label.as_str(), b)).collect()
}

fn pick<'a>(labels: &[String], by: &BTreeMap<&str, &'a Block>) -> Vec<&'a Block> {
    labels.iter().filter_map(|l| by.get(l.as_str()).copied()).collect()
}

/// The 30 loop features, in schema order, for loop `loop_id` of `f` as it
/// currently stands.
pub fn extract_lu_features(
    loop_id: &str,
    f: &Function,
    prefs: &UnrollPrefs,
) -> Option<FeatureVector> {
    let forest = build_loop_forest(f);
    extract_lu_with_forest(loop_id, f, &forest, prefs)
}

pub(crate) fn extract_lu_with_forest(
    loop_id: &str,
    f: &Function,
    forest: &LoopForest,
    prefs: &UnrollPrefs,
) -> Option<FeatureVector> {
    let idx = forest.index_of(loop_id)?;
    let info = &forest.loops[idx];
    let l = f.find_loop(loop_id)?;
    let nest = &forest.loops[forest.outermost_of(idx)];
    let by = blocks_by_label(f);
    let own_blocks = pick(&info.own_blocks, &by);
    let all_blocks = pick(&info.blocks, &by);
    let nest_blocks = pick(&nest.blocks, &by);
    let own = BlockStats::of(&own_blocks);
    let all = BlockStats::of(&all_blocks);
    let nst = BlockStats::of(&nest_blocks);
    let trip = l.trip_count();
    let trip_v = trip.map_or(0.0, |t| t as f64);

    let values = [
        f64::from(prefs.partial_threshold),
        b(prefs.allow_remainder),
        b(prefs.unroll_remainder),
        b(prefs.allow_expensive_trip_count),
        b(prefs.force),
        trip_v,
        trip_v,
        own.insts as f64,
        l.init.as_const().map_or(0.0, |v| v as f64),
        l.end.as_const().map_or(0.0, |v| v as f64),
        l.step as f64,
        (1 + all.terms + info.children.len()) as f64,
        (1 + induction_like(&own_blocks, &l.iv).len()) as f64,
        ratio(all.store_targets, all.blocks),
        ratio(all.insts, all.blocks),
        nst.loads as f64,
        nst.stores as f64,
        nst.insts as f64,
        ratio(nst.loads, nst.blocks),
        ratio(nst.stores, nst.blocks),
        own.loads as f64,
        own.stores as f64,
        all.insts as f64,
        ratio(own.loads, own.blocks),
        ratio(own.stores, own.blocks),
        b(info.is_innermost()),
        b(info.is_outermost()),
        info.height as f64,
        all.blocks as f64,
        b(trip.is_some()),
    ];
    Some(FeatureVector::from_values(ModelKind::LU, &values).expect("30 values"))
}

/// Longest call-graph path from each function to a leaf, computed over the
/// strongly connected components (a component counts as one node).
pub fn call_heights(m: &IRModule) -> BTreeMap<String, usize> {
    let sccs = m.sccs_bottom_up();
    let graph = m.call_graph();
    let mut comp_of = BTreeMap::new();
    for (i, c) in sccs.iter().enumerate() {
        for f in c {
            comp_of.insert(f.clone(), i);
        }
    }
    let mut height = vec![0usize; sccs.len()];
    for (i, c) in sccs.iter().enumerate() {
        let mut h = 0;
        for f in c {
            for callee in &graph[f] {
                let j = comp_of[callee];
                if j != i {
                    h = h.max(height[j] + 1);
                }
            }
        }
        height[i] = h;
    }
    comp_of
        .into_iter()
        .map(|(f, i)| (f, height[i]))
        .collect()
}

fn call_count(f: &Function) -> usize {
    f.blocks()
        .iter()
        .flat_map(|b| b.insts.iter())
        .filter(|i| matches!(i, Inst::Call { .. }))
        .count()
}

/// The 13 call-site features for `site`. Block frequency comes from the
/// profile when one is given, otherwise `8^loop_depth`.
pub fn extract_fi_features(
    site: &str,
    m: &IRModule,
    profile: Option<&ExecutionProfile>,
) -> Option<FeatureVector> {
    let cs = m.call_sites().into_iter().find(|c| c.id == site)?;
    let caller = m.function(&cs.caller)?;
    let callee = m.function(&cs.callee)?;
    let users = m.users();
    let heights = call_heights(m);
    let freq = match profile {
        Some(p) => p.per_site_calls.get(site).copied().unwrap_or(0) as f64,
        None => 8f64.powi(cs.loop_depth as i32),
    };
    let calls = call_count(callee);
    let values = [
        freq,
        heights[&cs.callee] as f64,
        caller.blocks().len() as f64,
        callee.blocks().len() as f64,
        users[&cs.caller] as f64,
        users[&cs.callee] as f64,
        callee.inst_count() as f64,
        caller.inst_count() as f64,
        cs.loop_depth as f64,
        calls as f64,
        b(calls == 0),
        cs.args as f64,
        callee.max_loop_depth() as f64,
    ];
    Some(FeatureVector::from_values(ModelKind::FI, &values).expect("13 values"))
}

/// Straight walk of loop ids in a function body (pre-order).
pub fn loop_ids_in(items: &[Item]) -> Vec<String> {
    let mut out = Vec::new();
    crate::ir::visit_items(items, &mut |item| {
        if let Item::Loop(l) = item {
            out.push(l.id.clone());
        }
    });
    out
}
