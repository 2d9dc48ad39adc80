//! Lowering to a flat control-flow graph and a deterministic interpreter.
//!
//! A loop lowers to a head block (`iv = init`, snapshot `end`, test) and a
//! latch block (`iv += step`, test, jump back). Each costs two dynamic
//! instructions. Explicit terminators, calls and returns cost one each; the
//! implicit return at the end of a function body returns 0.
//!
//! `branches_taken` counts control transfers that do not fall through: every
//! `br`, every call and return, a loop head that skips its body, and each
//! taken backedge.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{BinOp, IRModule, Inst, Item, Operand, Terminator, DEFAULT_STEP_LIMIT};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpError {
    #[error("step limit of {limit} instructions exceeded (nontermination)")]
    NonTermination { limit: u64 },
    #[error("entry function expects {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("call depth limit of {limit} exceeded")]
    CallDepth { limit: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct InterpConfig {
    pub step_limit: u64,
    pub max_call_depth: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            step_limit: DEFAULT_STEP_LIMIT,
            max_call_depth: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionProfile {
    pub dynamic_instructions: u64,
    pub branches_taken: u64,
    pub loads: u64,
    pub stores: u64,
    pub calls: u64,
    /// Body entries per loop id.
    pub per_loop_iterations: BTreeMap<String, u64>,
    /// Taken backedges per loop id.
    pub per_loop_backedges: BTreeMap<String, u64>,
    /// Executions per call-site id.
    pub per_site_calls: BTreeMap<String, u64>,
    pub result: i64,
}

#[derive(Debug, Clone, Copy)]
enum LOp {
    Slot(u32),
    Imm(i64),
}

#[derive(Debug, Clone)]
enum LInst {
    Bin(BinOp, u32, LOp, LOp),
    Mov(u32, LOp),
    Load(u32, u32, LOp),
    Store(u32, LOp, LOp),
    Call {
        dst: Option<u32>,
        func: u32,
        args: Vec<LOp>,
        site: u32,
    },
}

#[derive(Debug, Clone)]
enum LTerm {
    Goto(usize),
    Br(usize),
    CondBr(LOp, usize, usize),
    Ret(Option<LOp>),
    ImplicitRet,
    Head {
        lp: u32,
        iv: u32,
        init: LOp,
        end: LOp,
        end_slot: u32,
        step: i64,
        body: usize,
        exit: usize,
    },
    Latch {
        lp: u32,
        iv: u32,
        end_slot: u32,
        step: i64,
        body: usize,
        exit: usize,
    },
}

#[derive(Debug, Clone)]
struct LBlock {
    name: String,
    insts: Vec<LInst>,
    term: LTerm,
}

#[derive(Debug, Clone)]
struct LFunc {
    nslots: usize,
    nparams: usize,
    blocks: Vec<LBlock>,
    entry: usize,
}

struct LModule {
    funcs: Vec<LFunc>,
    arrays: Vec<(usize, Vec<i64>)>,
    loop_names: Vec<String>,
    site_names: Vec<String>,
    entry: usize,
}

struct Names<'m> {
    funcs: HashMap<&'m str, u32>,
    arrays: HashMap<&'m str, u32>,
    loops: Vec<String>,
    sites: Vec<String>,
}

struct FnLowering<'a, 'm> {
    names: &'a mut Names<'m>,
    slots: HashMap<String, u32>,
    nslots: u32,
    labels: HashMap<String, usize>,
    blocks: Vec<Option<LBlock>>,
}

impl<'a, 'm> FnLowering<'a, 'm> {
    fn slot(&mut self, var: &str) -> u32 {
        if let Some(&s) = self.slots.get(var) {
            return s;
        }
        let s = self.nslots;
        self.nslots += 1;
        self.slots.insert(var.to_string(), s);
        s
    }

    fn hidden_slot(&mut self) -> u32 {
        let s = self.nslots;
        self.nslots += 1;
        s
    }

    fn op(&mut self, o: &Operand) -> LOp {
        match o {
            Operand::Const(c) => LOp::Imm(*c),
            Operand::Var(v) => LOp::Slot(self.slot(v)),
        }
    }

    fn alloc(&mut self) -> usize {
        self.blocks.push(None);
        self.blocks.len() - 1
    }

    fn assign_labels(&mut self, items: &[Item]) {
        for item in items {
            match item {
                Item::Block(b) => {
                    let idx = self.alloc();
                    self.labels.insert(b.label.clone(), idx);
                }
                Item::Loop(l) => self.assign_labels(&l.body),
            }
        }
    }

    fn lower_seq(&mut self, items: &[Item], next: usize) -> usize {
        let mut succ = next;
        for item in items.iter().rev() {
            succ = match item {
                Item::Block(b) => {
                    let idx = self.labels[&b.label];
                    let insts = b.insts.iter().map(|i| self.inst(i)).collect();
                    let term = match &b.term {
                        None => LTerm::Goto(succ),
                        Some(Terminator::Br(l)) => LTerm::Br(self.labels[l]),
                        Some(Terminator::CondBr {
                            cond,
                            then_label,
                            else_label,
                        }) => {
                            let c = self.op(cond);
                            LTerm::CondBr(c, self.labels[then_label], self.labels[else_label])
                        }
                        Some(Terminator::Ret(v)) => LTerm::Ret(v.as_ref().map(|v| self.op(v))),
                    };
                    self.blocks[idx] = Some(LBlock {
                        name: b.label.clone(),
                        insts,
                        term,
                    });
                    idx
                }
                Item::Loop(l) => {
                    let lp = self.names.loops.len() as u32;
                    self.names.loops.push(l.id.clone());
                    let head = self.alloc();
                    let latch = self.alloc();
                    let body = self.lower_seq(&l.body, latch);
                    let iv = self.slot(&l.iv);
                    let init = self.op(&l.init);
                    let end = self.op(&l.end);
                    let end_slot = self.hidden_slot();
                    self.blocks[head] = Some(LBlock {
                        name: format!("{}.head", l.id),
                        insts: Vec::new(),
                        term: LTerm::Head {
                            lp,
                            iv,
                            init,
                            end,
                            end_slot,
                            step: l.step,
                            body,
                            exit: succ,
                        },
                    });
                    self.blocks[latch] = Some(LBlock {
                        name: format!("{}.latch", l.id),
                        insts: Vec::new(),
                        term: LTerm::Latch {
                            lp,
                            iv,
                            end_slot,
                            step: l.step,
                            body,
                            exit: succ,
                        },
                    });
                    head
                }
            };
        }
        succ
    }

    fn inst(&mut self, i: &Inst) -> LInst {
        match i {
            Inst::Bin { op, dst, lhs, rhs } => {
                let (a, b) = (self.op(lhs), self.op(rhs));
                LInst::Bin(*op, self.slot(dst), a, b)
            }
            Inst::Mov { dst, src } => {
                let s = self.op(src);
                LInst::Mov(self.slot(dst), s)
            }
            Inst::Load { dst, array, index } => {
                let idx = self.op(index);
                LInst::Load(self.slot(dst), self.names.arrays[array.as_str()], idx)
            }
            Inst::Store {
                array,
                index,
                value,
            } => {
                let (i, v) = (self.op(index), self.op(value));
                LInst::Store(self.names.arrays[array.as_str()], i, v)
            }
            Inst::Call {
                dst,
                callee,
                args,
                site,
            } => {
                let args = args.iter().map(|a| self.op(a)).collect();
                let dst = dst.as_ref().map(|d| self.slot(d));
                let site_idx = self.names.sites.len() as u32;
                self.names.sites.push(site.clone());
                LInst::Call {
                    dst,
                    func: self.names.funcs[callee.as_str()],
                    args,
                    site: site_idx,
                }
            }
        }
    }
}

fn lower_module(m: &IRModule) -> LModule {
    let mut names = Names {
        funcs: m
            .functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i as u32))
            .collect(),
        arrays: m
            .arrays
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.as_str(), i as u32))
            .collect(),
        loops: Vec::new(),
        sites: Vec::new(),
    };
    let mut funcs = Vec::new();
    for f in &m.functions {
        let mut fl = FnLowering {
            names: &mut names,
            slots: HashMap::new(),
            nslots: 0,
            labels: HashMap::new(),
            blocks: Vec::new(),
        };
        for p in &f.params {
            fl.slot(p);
        }
        fl.assign_labels(&f.body);
        let ret = fl.alloc();
        fl.blocks[ret] = Some(LBlock {
            name: format!("{}.return", f.name),
            insts: Vec::new(),
            term: LTerm::ImplicitRet,
        });
        let entry = fl.lower_seq(&f.body, ret);
        funcs.push(LFunc {
            nslots: fl.nslots as usize,
            nparams: f.params.len(),
            blocks: fl
                .blocks
                .into_iter()
                .map(|b| b.expect("every block lowered"))
                .collect(),
            entry,
        });
    }
    LModule {
        funcs,
        arrays: m.arrays.iter().map(|a| (a.len, a.init.clone())).collect(),
        loop_names: names.loops,
        site_names: names.sites,
        entry: names.funcs[m.entry.as_str()] as usize,
    }
}

/// Flat control-flow graph of one function, for analyses that want plain
/// nodes and edges.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub names: Vec<String>,
    pub succs: Vec<Vec<usize>>,
    pub entry: usize,
}

impl Cfg {
    pub fn node(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Lower `function` of `m` into a [`Cfg`]. Loop heads are named
/// `<loop>.head`, latches `<loop>.latch`, and the implicit return
/// `<function>.return`.
pub fn lower_cfg(m: &IRModule, function: &str) -> Option<Cfg> {
    let fidx = m.functions.iter().position(|f| f.name == function)?;
    let lm = lower_module(m);
    let f = &lm.funcs[fidx];
    let succs = f
        .blocks
        .iter()
        .map(|b| match &b.term {
            LTerm::Goto(n) | LTerm::Br(n) => vec![*n],
            LTerm::CondBr(_, t, e) => vec![*t, *e],
            LTerm::Ret(_) | LTerm::ImplicitRet => vec![],
            LTerm::Head { body, exit, .. } | LTerm::Latch { body, exit, .. } => {
                vec![*body, *exit]
            }
        })
        .collect();
    Some(Cfg {
        names: f.blocks.iter().map(|b| b.name.clone()).collect(),
        succs,
        entry: f.entry,
    })
}

struct Machine<'a> {
    m: &'a LModule,
    cfg: InterpConfig,
    mem: Vec<Vec<i64>>,
    steps: u64,
    branches: u64,
    loads: u64,
    stores: u64,
    calls: u64,
    iterations: Vec<u64>,
    backedges: Vec<u64>,
    site_calls: Vec<u64>,
}

impl<'a> Machine<'a> {
    #[inline]
    fn tick(&mut self, n: u64) -> Result<(), InterpError> {
        self.steps += n;
        if self.steps > self.cfg.step_limit {
            Err(InterpError::NonTermination {
                limit: self.cfg.step_limit,
            })
        } else {
            Ok(())
        }
    }

    fn run(&mut self, fidx: usize, args: &[i64], depth: usize) -> Result<i64, InterpError> {
        if depth > self.cfg.max_call_depth {
            return Err(InterpError::CallDepth {
                limit: self.cfg.max_call_depth,
            });
        }
        let m = self.m;
        let f = &m.funcs[fidx];
        let mut slots = vec![0i64; f.nslots];
        slots[..f.nparams].copy_from_slice(args);
        let val = |slots: &[i64], o: LOp| match o {
            LOp::Slot(s) => slots[s as usize],
            LOp::Imm(c) => c,
        };
        let mut b = f.entry;
        loop {
            let blk = &f.blocks[b];
            for inst in &blk.insts {
                self.tick(1)?;
                match inst {
                    LInst::Bin(op, d, x, y) => {
                        slots[*d as usize] = op.eval(val(&slots, *x), val(&slots, *y));
                    }
                    LInst::Mov(d, x) => slots[*d as usize] = val(&slots, *x),
                    LInst::Load(d, arr, idx) => {
                        let mem = &self.mem[*arr as usize];
                        let i = val(&slots, *idx).rem_euclid(mem.len() as i64) as usize;
                        slots[*d as usize] = mem[i];
                        self.loads += 1;
                    }
                    LInst::Store(arr, idx, v) => {
                        let value = val(&slots, *v);
                        let mem = &mut self.mem[*arr as usize];
                        let i = val(&slots, *idx).rem_euclid(mem.len() as i64) as usize;
                        mem[i] = value;
                        self.stores += 1;
                    }
                    LInst::Call {
                        dst,
                        func,
                        args,
                        site,
                    } => {
                        self.branches += 1;
                        self.calls += 1;
                        self.site_calls[*site as usize] += 1;
                        let argv: Vec<i64> = args.iter().map(|a| val(&slots, *a)).collect();
                        let r = self.run(*func as usize, &argv, depth + 1)?;
                        if let Some(d) = dst {
                            slots[*d as usize] = r;
                        }
                    }
                }
            }
            match &blk.term {
                LTerm::Goto(n) => b = *n,
                LTerm::Br(n) => {
                    self.tick(1)?;
                    self.branches += 1;
                    b = *n;
                }
                LTerm::CondBr(c, t, e) => {
                    self.tick(1)?;
                    self.branches += 1;
                    b = if val(&slots, *c) != 0 { *t } else { *e };
                }
                LTerm::Ret(v) => {
                    self.tick(1)?;
                    self.branches += 1;
                    return Ok(v.map_or(0, |v| val(&slots, v)));
                }
                LTerm::ImplicitRet => {
                    self.tick(1)?;
                    self.branches += 1;
                    return Ok(0);
                }
                LTerm::Head {
                    lp,
                    iv,
                    init,
                    end,
                    end_slot,
                    step,
                    body,
                    exit,
                } => {
                    self.tick(2)?;
                    let i = val(&slots, *init);
                    let e = val(&slots, *end);
                    slots[*iv as usize] = i;
                    slots[*end_slot as usize] = e;
                    if continues(i, e, *step) {
                        self.iterations[*lp as usize] += 1;
                        b = *body;
                    } else {
                        self.branches += 1;
                        b = *exit;
                    }
                }
                LTerm::Latch {
                    lp,
                    iv,
                    end_slot,
                    step,
                    body,
                    exit,
                } => {
                    self.tick(2)?;
                    let i = slots[*iv as usize].wrapping_add(*step);
                    slots[*iv as usize] = i;
                    if continues(i, slots[*end_slot as usize], *step) {
                        self.iterations[*lp as usize] += 1;
                        self.backedges[*lp as usize] += 1;
                        self.branches += 1;
                        b = *body;
                    } else {
                        b = *exit;
                    }
                }
            }
        }
    }
}

#[inline]
fn continues(i: i64, end: i64, step: i64) -> bool {
    if step > 0 {
        i < end
    } else {
        i > end
    }
}

/// Run the entry function of a verified module on `input`.
pub fn interpret(
    m: &IRModule,
    input: &[i64],
    cfg: InterpConfig,
) -> Result<ExecutionProfile, InterpError> {
    let lm = lower_module(m);
    let entry = &lm.funcs[lm.entry];
    if entry.nparams != input.len() {
        return Err(InterpError::Arity {
            expected: entry.nparams,
            got: input.len(),
        });
    }
    let mem = lm
        .arrays
        .iter()
        .map(|(len, init)| {
            let mut v = vec![0i64; *len];
            v[..init.len()].copy_from_slice(init);
            v
        })
        .collect();
    let mut machine = Machine {
        m: &lm,
        cfg,
        mem,
        steps: 0,
        branches: 0,
        loads: 0,
        stores: 0,
        calls: 0,
        iterations: vec![0; lm.loop_names.len()],
        backedges: vec![0; lm.loop_names.len()],
        site_calls: vec![0; lm.site_names.len()],
    };
    let result = machine.run(lm.entry, input, 0)?;
    let fold = |names: &[String], counts: &[u64]| {
        let mut out = BTreeMap::new();
        for (n, c) in names.iter().zip(counts) {
            *out.entry(n.clone()).or_insert(0) += *c;
        }
        out
    };
    Ok(ExecutionProfile {
        dynamic_instructions: machine.steps,
        branches_taken: machine.branches,
        loads: machine.loads,
        stores: machine.stores,
        calls: machine.calls,
        per_loop_iterations: fold(&lm.loop_names, &machine.iterations),
        per_loop_backedges: fold(&lm.loop_names, &machine.backedges),
        per_site_calls: fold(&lm.site_names, &machine.site_calls),
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn run(text: &str, input: &[i64]) -> Result<ExecutionProfile, InterpError> {
        interpret(&parse_module(text).unwrap(), input, InterpConfig::default())
    }

    #[test]
    fn sums_one_to_ten() {
        let p = run(
            "func main() {\ne:\n s = mov 0\nloop L (i = 1 to 11 step 1) {\nb:\n s = add s, i\n}\nx:\n ret s\n}\n",
            &[],
        )
        .unwrap();
        assert_eq!(p.result, 55);
        assert_eq!(p.per_loop_iterations["L"], 10);
        assert_eq!(p.per_loop_backedges["L"], 9);
        // mov, 10 adds, head 2, latch 2 x 10, ret
        assert_eq!(p.dynamic_instructions, 1 + 10 + 2 + 20 + 1);
        assert_eq!(p.branches_taken, 9 + 1);
    }

    #[test]
    fn infinite_loop_hits_step_limit() {
        let m = parse_module("func main() {\ne:\n br e\n}\n").unwrap();
        let err = interpret(
            &m,
            &[],
            InterpConfig {
                step_limit: 1000,
                ..InterpConfig::default()
            },
        )
        .unwrap_err();
        assert_eq!(err, InterpError::NonTermination { limit: 1000 });
    }

    #[test]
    fn runtime_bound_and_negative_step() {
        let p = run(
            "func main(n) {\ne:\n s = mov 0\nloop L (i = n to 0 step -2) {\nb:\n s = add s, i\n}\nx:\n ret s\n}\n",
            &[9],
        )
        .unwrap();
        assert_eq!(p.result, 9 + 7 + 5 + 3 + 1);
        assert_eq!(p.per_loop_iterations["L"], 5);
    }

    #[test]
    fn calls_memory_and_depth() {
        let text = "\
array a[4] = {1, 2, 3, 4}
func get(i) {
e:
  v = load a[i]
  ret v
}
func main() {
e:
  x = call get(5)
  store a[-1], 10
  y = load a[3]
  r = add x, y
  ret r
}
";
        let p = run(text, &[]).unwrap();
        assert_eq!(p.result, 2 + 10);
        assert_eq!(p.calls, 1);
        assert_eq!(p.per_site_calls["cs0"], 1);
        assert_eq!((p.loads, p.stores), (2, 1));

        let rec = "func main() {\ne:\n x = call main()\n ret x\n}\n";
        assert_eq!(
            run(rec, &[]).unwrap_err(),
            InterpError::CallDepth { limit: 256 }
        );
        assert!(matches!(run(text, &[1]), Err(InterpError::Arity { .. })));
    }

    #[test]
    fn cfg_names_loop_blocks() {
        let m = parse_module("func main() {\nloop L (i = 0 to 3 step 1) {\nb:\n x = mov i\n}\n}\n")
            .unwrap();
        let cfg = lower_cfg(&m, "main").unwrap();
        let head = cfg.node("L.head").unwrap();
        let latch = cfg.node("L.latch").unwrap();
        let body = cfg.node("b").unwrap();
        assert_eq!(cfg.entry, head);
        assert_eq!(cfg.succs[latch][0], body);
        assert_eq!(cfg.succs[body], vec![latch]);
    }
}
