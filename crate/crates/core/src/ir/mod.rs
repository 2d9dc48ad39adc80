//! The miniature structured IR.
//!
//! A module holds global integer arrays and functions. A function body is an
//! ordered list of items, each either a labeled basic block or a counted loop
//! whose body is again a list of items. Control flows from one item to the
//! next unless a block ends in a terminator; `br` may target any label of the
//! function, which is how early exits and (deliberately) irreducible regions
//! are expressed.
//!
//! Identifiers derived by transformations carry a `.`-separated suffix. The
//! part before the first `.` is the *root* of a loop or call-site id and names
//! the source region it was cloned from.

mod forest;
mod interp;
mod names;
mod parse;
mod print;
mod verify;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use forest::{build_loop_forest, LoopForest, LoopInfo};
pub use interp::{interpret, lower_cfg, Cfg, ExecutionProfile, InterpConfig, InterpError};
pub use names::NameGen;
pub use parse::{parse_module, ParseError};
pub use print::print_module;
pub use verify::{verify_module, VerifyError};

/// Default dynamic-instruction budget for one interpreter run.
pub const DEFAULT_STEP_LIMIT: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Var(String),
    Const(i64),
}

impl Operand {
    pub fn var(name: impl Into<String>) -> Self {
        Operand::Var(name.into())
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            Operand::Const(c) => Some(*c),
            Operand::Var(_) => None,
        }
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            Operand::Const(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Lt,
    Eq,
}

impl BinOp {
    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Lt,
        BinOp::Eq,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Lt => "lt",
            BinOp::Eq => "eq",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Wrapping 64-bit semantics; shift amounts are taken modulo 64.
    pub fn eval(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl((b & 63) as u32),
            BinOp::Shr => a.wrapping_shr((b & 63) as u32),
            BinOp::Lt => (a < b) as i64,
            BinOp::Eq => (a == b) as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inst {
    Bin {
        op: BinOp,
        dst: String,
        lhs: Operand,
        rhs: Operand,
    },
    Mov {
        dst: String,
        src: Operand,
    },
    Load {
        dst: String,
        array: String,
        index: Operand,
    },
    Store {
        array: String,
        index: Operand,
        value: Operand,
    },
    Call {
        dst: Option<String>,
        callee: String,
        args: Vec<Operand>,
        site: String,
    },
}

impl Inst {
    pub fn dst(&self) -> Option<&str> {
        match self {
            Inst::Bin { dst, .. } | Inst::Mov { dst, .. } | Inst::Load { dst, .. } => Some(dst),
            Inst::Call { dst, .. } => dst.as_deref(),
            Inst::Store { .. } => None,
        }
    }

    pub fn dst_mut(&mut self) -> Option<&mut String> {
        match self {
            Inst::Bin { dst, .. } | Inst::Mov { dst, .. } | Inst::Load { dst, .. } => Some(dst),
            Inst::Call { dst, .. } => dst.as_mut(),
            Inst::Store { .. } => None,
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Inst::Bin { lhs, rhs, .. } => vec![lhs, rhs],
            Inst::Mov { src, .. } => vec![src],
            Inst::Load { index, .. } => vec![index],
            Inst::Store { index, value, .. } => vec![index, value],
            Inst::Call { args, .. } => args.iter().collect(),
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Inst::Bin { lhs, rhs, .. } => vec![lhs, rhs],
            Inst::Mov { src, .. } => vec![src],
            Inst::Load { index, .. } => vec![index],
            Inst::Store { index, value, .. } => vec![index, value],
            Inst::Call { args, .. } => args.iter_mut().collect(),
        }
    }

    /// No side effects besides writing `dst`.
    pub fn is_pure(&self) -> bool {
        matches!(self, Inst::Bin { .. } | Inst::Mov { .. } | Inst::Load { .. })
    }

    pub fn is_load(&self) -> bool {
        matches!(self, Inst::Load { .. })
    }

    pub fn is_store(&self) -> bool {
        matches!(self, Inst::Store { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Br(String),
    CondBr {
        cond: Operand,
        then_label: String,
        else_label: String,
    },
    Ret(Option<Operand>),
}

impl Terminator {
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Terminator::Br(l) => vec![l],
            Terminator::CondBr {
                then_label,
                else_label,
                ..
            } => vec![then_label, else_label],
            Terminator::Ret(_) => vec![],
        }
    }

    pub fn targets_mut(&mut self) -> Vec<&mut String> {
        match self {
            Terminator::Br(l) => vec![l],
            Terminator::CondBr {
                then_label,
                else_label,
                ..
            } => vec![then_label, else_label],
            Terminator::Ret(_) => vec![],
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Terminator::CondBr { cond, .. } => vec![cond],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Terminator::CondBr { cond, .. } => vec![cond],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }

    pub fn is_branch(&self) -> bool {
        !matches!(self, Terminator::Ret(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
    pub term: Option<Terminator>,
}

impl Block {
    pub fn new(label: impl Into<String>) -> Self {
        Block {
            label: label.into(),
            insts: Vec::new(),
            term: None,
        }
    }

    pub fn with_insts(label: impl Into<String>, insts: Vec<Inst>) -> Self {
        Block {
            label: label.into(),
            insts,
            term: None,
        }
    }

    /// Instructions plus the terminator, if any.
    pub fn inst_count(&self) -> usize {
        self.insts.len() + usize::from(self.term.is_some())
    }

    pub fn falls_through(&self) -> bool {
        self.term.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnrollPragma {
    /// `#pragma unroll N`
    Count(u32),
    /// `#pragma nounroll`; also set by the unroll pass on loops it has decided.
    Disable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub id: String,
    pub iv: String,
    pub init: Operand,
    pub end: Operand,
    pub step: i64,
    pub pragma: Option<UnrollPragma>,
    pub body: Vec<Item>,
}

impl Loop {
    /// Exact trip count when both bounds are constants.
    ///
    /// The loop runs while `iv < end` (positive step) or `iv > end`
    /// (negative step), so the count is `ceil((end - init) / step)` clamped
    /// at zero.
    pub fn trip_count(&self) -> Option<u64> {
        let init = self.init.as_const()?;
        let end = self.end.as_const()?;
        Some(trip_count(init, end, self.step))
    }

    pub fn pragma_unroll_count(&self) -> Option<u32> {
        match self.pragma {
            Some(UnrollPragma::Count(n)) => Some(n),
            _ => None,
        }
    }

    pub fn unroll_disabled(&self) -> bool {
        self.pragma == Some(UnrollPragma::Disable)
    }

    pub fn root_id(&self) -> &str {
        root_of(&self.id)
    }
}

/// `ceil((end - init) / step)` clamped to zero, in exact 128-bit arithmetic.
pub fn trip_count(init: i64, end: i64, step: i64) -> u64 {
    assert!(step != 0, "loop step must be non-zero");
    let span = end as i128 - init as i128;
    let step = step as i128;
    if (span > 0) != (step > 0) || span == 0 {
        return 0;
    }
    let (span, step) = (span.abs(), step.abs());
    ((span + step - 1) / step) as u64
}

/// Part of a derived identifier before the first `.`.
pub fn root_of(id: &str) -> &str {
    id.split('.').next().unwrap_or(id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Block(Block),
    Loop(Loop),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Array {
    pub name: String,
    pub len: usize,
    /// Leading initial values; the rest is zero.
    pub init: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IRModule {
    pub name: String,
    pub arrays: Vec<Array>,
    pub functions: Vec<Function>,
    pub entry: String,
}

/// A call instruction located inside a function.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSite {
    pub id: String,
    pub caller: String,
    pub callee: String,
    pub block: String,
    pub args: usize,
    /// Number of enclosing loops.
    pub loop_depth: usize,
}

impl CallSite {
    pub fn root_id(&self) -> &str {
        root_of(&self.id)
    }
}

impl Function {
    pub fn new(name: impl Into<String>, params: Vec<String>, body: Vec<Item>) -> Self {
        Function {
            name: name.into(),
            params,
            body,
        }
    }

    /// Static size: instructions and terminators of every block plus four
    /// control instructions per loop (head and latch each move the induction
    /// variable and test it).
    pub fn size(&self) -> usize {
        items_size(&self.body)
    }

    pub fn inst_count(&self) -> usize {
        items_inst_count(&self.body)
    }

    pub fn blocks(&self) -> Vec<&Block> {
        let mut out = Vec::new();
        collect_blocks(&self.body, &mut out);
        out
    }

    pub fn loops(&self) -> Vec<&Loop> {
        let mut out = Vec::new();
        collect_loops(&self.body, &mut out);
        out
    }

    pub fn find_loop(&self, id: &str) -> Option<&Loop> {
        self.loops().into_iter().find(|l| l.id == id)
    }

    pub fn find_loop_mut(&mut self, id: &str) -> Option<&mut Loop> {
        find_loop_mut(&mut self.body, id)
    }

    pub fn call_sites(&self) -> Vec<CallSite> {
        let mut out = Vec::new();
        collect_sites(&self.name, &self.body, 0, &mut out);
        out
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.blocks().into_iter().map(|b| b.label.clone()).collect()
    }

    /// Every variable name mentioned (read, written, parameter or iv).
    pub fn variables(&self) -> BTreeSet<String> {
        let mut vars: BTreeSet<String> = self.params.iter().cloned().collect();
        visit_items(&self.body, &mut |item| match item {
            Item::Block(b) => {
                for inst in &b.insts {
                    if let Some(d) = inst.dst() {
                        vars.insert(d.to_string());
                    }
                    for op in inst.operands() {
                        if let Operand::Var(v) = op {
                            vars.insert(v.clone());
                        }
                    }
                }
                if let Some(t) = &b.term {
                    for op in t.operands() {
                        if let Operand::Var(v) = op {
                            vars.insert(v.clone());
                        }
                    }
                }
            }
            Item::Loop(l) => {
                vars.insert(l.iv.clone());
                for op in [&l.init, &l.end] {
                    if let Operand::Var(v) = op {
                        vars.insert(v.clone());
                    }
                }
            }
        });
        vars
    }

    /// Maximum loop nesting depth (0 without loops).
    pub fn max_loop_depth(&self) -> usize {
        fn depth(items: &[Item]) -> usize {
            items
                .iter()
                .map(|i| match i {
                    Item::Loop(l) => 1 + depth(&l.body),
                    Item::Block(_) => 0,
                })
                .max()
                .unwrap_or(0)
        }
        depth(&self.body)
    }
}

pub fn items_size(items: &[Item]) -> usize {
    items
        .iter()
        .map(|i| match i {
            Item::Block(b) => b.inst_count(),
            Item::Loop(l) => 4 + items_size(&l.body),
        })
        .sum()
}

/// Block instructions (with terminators) across the items, nested loops
/// included, without loop control overhead.
pub fn items_inst_count(items: &[Item]) -> usize {
    items
        .iter()
        .map(|i| match i {
            Item::Block(b) => b.inst_count(),
            Item::Loop(l) => items_inst_count(&l.body),
        })
        .sum()
}

/// Pre-order walk over every item, descending into loop bodies.
pub fn visit_items<'a>(items: &'a [Item], f: &mut dyn FnMut(&'a Item)) {
    for item in items {
        f(item);
        if let Item::Loop(l) = item {
            visit_items(&l.body, f);
        }
    }
}

pub fn visit_items_mut(items: &mut [Item], f: &mut dyn FnMut(&mut Item)) {
    for item in items.iter_mut() {
        f(item);
        if let Item::Loop(l) = item {
            visit_items_mut(&mut l.body, f);
        }
    }
}

pub fn visit_blocks_mut(items: &mut [Item], f: &mut dyn FnMut(&mut Block)) {
    visit_items_mut(items, &mut |item| {
        if let Item::Block(b) = item {
            f(b)
        }
    });
}

fn collect_blocks<'a>(items: &'a [Item], out: &mut Vec<&'a Block>) {
    visit_items(items, &mut |item| {
        if let Item::Block(b) = item {
            out.push(b)
        }
    });
}

fn collect_loops<'a>(items: &'a [Item], out: &mut Vec<&'a Loop>) {
    visit_items(items, &mut |item| {
        if let Item::Loop(l) = item {
            out.push(l)
        }
    });
}

fn find_loop_mut<'a>(items: &'a mut [Item], id: &str) -> Option<&'a mut Loop> {
    for item in items.iter_mut() {
        if let Item::Loop(l) = item {
            if l.id == id {
                return Some(l);
            }
            if let Some(found) = find_loop_mut(&mut l.body, id) {
                return Some(found);
            }
        }
    }
    None
}

fn collect_sites(caller: &str, items: &[Item], depth: usize, out: &mut Vec<CallSite>) {
    for item in items {
        match item {
            Item::Block(b) => {
                for inst in &b.insts {
                    if let Inst::Call {
                        callee, args, site, ..
                    } = inst
                    {
                        out.push(CallSite {
                            id: site.clone(),
                            caller: caller.to_string(),
                            callee: callee.clone(),
                            block: b.label.clone(),
                            args: args.len(),
                            loop_depth: depth,
                        });
                    }
                }
            }
            Item::Loop(l) => collect_sites(caller, &l.body, depth + 1, out),
        }
    }
}

impl IRModule {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn entry_function(&self) -> &Function {
        self.function(&self.entry)
            .expect("verified module has its entry function")
    }

    pub fn size(&self) -> usize {
        self.functions.iter().map(Function::size).sum()
    }

    pub fn call_sites(&self) -> Vec<CallSite> {
        self.functions.iter().flat_map(|f| f.call_sites()).collect()
    }

    pub fn loop_count(&self) -> usize {
        self.functions.iter().map(|f| f.loops().len()).sum()
    }

    /// Caller → callees (with multiplicity collapsed), in function order.
    pub fn call_graph(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut g: BTreeMap<String, BTreeSet<String>> = self
            .functions
            .iter()
            .map(|f| (f.name.clone(), BTreeSet::new()))
            .collect();
        for cs in self.call_sites() {
            g.entry(cs.caller).or_default().insert(cs.callee);
        }
        g
    }

    /// Number of call sites targeting each function.
    pub fn users(&self) -> BTreeMap<String, usize> {
        let mut users: BTreeMap<String, usize> =
            self.functions.iter().map(|f| (f.name.clone(), 0)).collect();
        for cs in self.call_sites() {
            *users.entry(cs.callee).or_default() += 1;
        }
        users
    }

    /// All loop ids across functions.
    pub fn loop_ids(&self) -> BTreeSet<String> {
        self.functions
            .iter()
            .flat_map(|f| f.loops().into_iter().map(|l| l.id.clone()))
            .collect()
    }

    pub fn site_ids(&self) -> BTreeSet<String> {
        self.call_sites().into_iter().map(|c| c.id).collect()
    }

    /// Strongly connected components of the call graph in bottom-up order
    /// (callees before callers). Each component lists functions in module
    /// order.
    pub fn sccs_bottom_up(&self) -> Vec<Vec<String>> {
        let names: Vec<&str> = self.functions.iter().map(|f| f.name.as_str()).collect();
        let index: BTreeMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let graph = self.call_graph();
        let succ: Vec<Vec<usize>> = names
            .iter()
            .map(|n| {
                graph[*n]
                    .iter()
                    .filter_map(|c| index.get(c.as_str()).copied())
                    .collect()
            })
            .collect();
        let comps = tarjan(&succ);
        comps
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c.into_iter().map(|i| names[i].to_string()).collect()
            })
            .collect()
    }
}

/// Tarjan's algorithm; components come out in reverse topological order,
/// i.e. sinks first.
fn tarjan(succ: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        succ: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn strong(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for &w in &s.succ[v] {
            match s.index[w] {
                None => {
                    strong(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            loop {
                let w = s.stack.pop().expect("tarjan stack");
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            s.out.push(comp);
        }
    }
    let n = succ.len();
    let mut s = State {
        succ,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            strong(&mut s, v);
        }
    }
    s.out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trip_count_rounds_up_and_clamps() {
        assert_eq!(trip_count(0, 64, 1), 64);
        assert_eq!(trip_count(0, 10, 4), 3);
        assert_eq!(trip_count(10, 0, -3), 4);
        assert_eq!(trip_count(5, 5, 1), 0);
        assert_eq!(trip_count(5, 0, 1), 0);
        assert_eq!(trip_count(0, 5, -1), 0);
    }

    #[test]
    fn root_strips_derived_suffixes() {
        assert_eq!(root_of("L0"), "L0");
        assert_eq!(root_of("L0.u3.c1"), "L0");
    }

    #[test]
    fn binop_wraps() {
        assert_eq!(BinOp::Add.eval(i64::MAX, 1), i64::MIN);
        assert_eq!(BinOp::Shl.eval(1, 65), 2);
        assert_eq!(BinOp::Lt.eval(-1, 0), 1);
    }
}
