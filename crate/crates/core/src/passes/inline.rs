//! Function inlining at individual call sites.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::clone::Renamer;
use super::LegalityReport;
use crate::ir::{Block, Function, IRModule, Inst, Item, NameGen, Operand, Terminator};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InlineError {
    #[error("no call site `{0}`")]
    UnknownSite(String),
    #[error("call site `{site}` cannot be inlined: {reasons}")]
    Illegal { site: String, reasons: String },
}

/// Functions reachable from `from` in the call graph (excluding `from`
/// unless it lies on a cycle).
fn reachable(graph: &BTreeMap<String, BTreeSet<String>>, from: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<&str> = graph
        .get(from)
        .map(|s| s.iter().map(String::as_str).collect())
        .unwrap_or_default();
    while let Some(f) = stack.pop() {
        if seen.insert(f.to_string()) {
            if let Some(next) = graph.get(f) {
                stack.extend(next.iter().map(String::as_str));
            }
        }
    }
    seen
}

pub fn inline_legality(site: &str, m: &IRModule) -> LegalityReport {
    let Some(cs) = m.call_sites().into_iter().find(|c| c.id == site) else {
        return LegalityReport::illegal("missing");
    };
    let mut reasons = Vec::new();
    if cs.callee == m.entry {
        reasons.push("entry".to_string());
    }
    let graph = m.call_graph();
    if cs.callee == cs.caller || reachable(&graph, &cs.callee).contains(&cs.caller) {
        reasons.push("recursive".to_string());
    }
    LegalityReport { reasons }
}

/// Inline call site `site`, returning the transformed module.
pub fn apply_inline(m: &IRModule, site: &str) -> Result<IRModule, InlineError> {
    let mut out = m.clone();
    let (mut loops, mut sites) = super::clone::module_namegens(m);
    inline_in_place(&mut out, site, &mut loops, &mut sites)?;
    Ok(out)
}

pub(crate) fn inline_in_place(
    m: &mut IRModule,
    site: &str,
    loops: &mut NameGen,
    sites: &mut NameGen,
) -> Result<(), InlineError> {
    let cs = m
        .call_sites()
        .into_iter()
        .find(|c| c.id == site)
        .ok_or_else(|| InlineError::UnknownSite(site.to_string()))?;
    let report = inline_legality(site, m);
    if !report.is_legal() {
        return Err(InlineError::Illegal {
            site: site.to_string(),
            reasons: report.reasons.join(","),
        });
    }
    let callee = m.function(&cs.callee).expect("verified callee").clone();
    let caller = m.function_mut(&cs.caller).expect("verified caller");
    let mut labels = NameGen::new(caller.labels());
    let mut vars = NameGen::new(caller.variables());
    let mut ctx = Splice {
        callee: &callee,
        site,
        labels: &mut labels,
        vars: &mut vars,
        loops,
        sites,
    };
    let found = ctx.splice(&mut caller.body);
    debug_assert!(found, "call site located by call_sites()");
    Ok(())
}

struct Splice<'a> {
    callee: &'a Function,
    site: &'a str,
    labels: &'a mut NameGen,
    vars: &'a mut NameGen,
    loops: &'a mut NameGen,
    sites: &'a mut NameGen,
}

impl Splice<'_> {
    fn splice(&mut self, items: &mut Vec<Item>) -> bool {
        for i in 0..items.len() {
            match &mut items[i] {
                Item::Block(b) => {
                    let Some(k) = b.insts.iter().position(
                        |inst| matches!(inst, Inst::Call { site, .. } if site == self.site),
                    ) else {
                        continue;
                    };
                    let replacement = self.expand(b, k);
                    items.splice(i..=i, replacement);
                    return true;
                }
                Item::Loop(l) => {
                    if self.splice(&mut l.body) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn expand(&mut self, b: &Block, k: usize) -> Vec<Item> {
        let Inst::Call { dst, args, .. } = &b.insts[k] else {
            unreachable!("position matched a call")
        };
        let callee = self.callee;
        let tag = self.site.to_string();

        let callee_vars = callee.variables();
        let mut var_map = HashMap::new();
        for v in &callee_vars {
            var_map.insert(v.clone(), self.vars.fresh(v, &tag));
        }

        let mut pre = Block::with_insts(b.label.clone(), b.insts[..k].to_vec());
        for (p, a) in callee.params.iter().zip(args) {
            pre.insts.push(Inst::Mov {
                dst: var_map[p].clone(),
                src: a.clone(),
            });
        }
        for v in upward_exposed(callee) {
            pre.insts.push(Inst::Mov {
                dst: var_map[&v].clone(),
                src: Operand::Const(0),
            });
        }

        let cont_label = self.labels.fresh(&b.label, &format!("{tag}.cont"));
        let mut body = Renamer {
            labels: self.labels,
            loops: self.loops,
            sites: self.sites,
            tag: tag.clone(),
            vars: var_map,
        }
        .clone_items(&callee.body);

        let last_is_ret = matches!(
            body.last(),
            Some(Item::Block(Block { term: Some(Terminator::Ret(_)), .. }))
        );
        let n = body.len();
        for (idx, item) in body.iter_mut().enumerate() {
            let is_last = idx + 1 == n;
            crate::ir::visit_blocks_mut(std::slice::from_mut(item), &mut |blk| {
                if let Some(Terminator::Ret(v)) = &blk.term {
                    if let Some(d) = dst {
                        blk.insts.push(Inst::Mov {
                            dst: d.clone(),
                            src: v.clone().unwrap_or(Operand::Const(0)),
                        });
                    }
                    blk.term = Some(Terminator::Br(cont_label.clone()));
                }
            });
            if is_last && last_is_ret {
                if let Item::Block(blk) = item {
                    blk.term = None;
                }
            }
        }
        if !last_is_ret {
            if let Some(d) = dst {
                let label = self.labels.fresh(&b.label, &format!("{tag}.ret0"));
                body.push(Item::Block(Block::with_insts(
                    label,
                    vec![Inst::Mov {
                        dst: d.clone(),
                        src: Operand::Const(0),
                    }],
                )));
            }
        }

        let mut post = Block::with_insts(cont_label, b.insts[k + 1..].to_vec());
        post.term = b.term.clone();

        let mut out = vec![Item::Block(pre)];
        out.extend(body);
        out.push(Item::Block(post));
        out
    }
}

/// Non-parameter variables the callee may read before writing. Every such
/// variable starts at zero in a fresh activation, so the inlined copy must
/// reset it.
fn upward_exposed(f: &Function) -> BTreeSet<String> {
    let params: BTreeSet<&str> = f.params.iter().map(String::as_str).collect();
    let mut read = BTreeSet::new();
    crate::ir::visit_items(&f.body, &mut |item| match item {
        Item::Block(b) => {
            for inst in &b.insts {
                for op in inst.operands() {
                    if let Operand::Var(v) = op {
                        read.insert(v.clone());
                    }
                }
            }
            if let Some(t) = &b.term {
                for op in t.operands() {
                    if let Operand::Var(v) = op {
                        read.insert(v.clone());
                    }
                }
            }
        }
        Item::Loop(l) => {
            for op in [&l.init, &l.end] {
                if let Operand::Var(v) = op {
                    read.insert(v.clone());
                }
            }
        }
    });
    // Straight-line callees: a variable written before its first read is
    // never exposed.
    if let [Item::Block(b)] = f.body.as_slice() {
        let mut written = BTreeSet::new();
        let mut exposed = BTreeSet::new();
        for inst in &b.insts {
            for op in inst.operands() {
                if let Operand::Var(v) = op {
                    if !written.contains(v) {
                        exposed.insert(v.clone());
                    }
                }
            }
            if let Some(d) = inst.dst() {
                written.insert(d.to_string());
            }
        }
        if let Some(t) = &b.term {
            for op in t.operands() {
                if let Operand::Var(v) = op {
                    if !written.contains(v) {
                        exposed.insert(v.clone());
                    }
                }
            }
        }
        read = exposed;
    }
    read.into_iter()
        .filter(|v| !params.contains(v.as_str()))
        .collect()
}

/// Drop functions that are neither the entry nor called from anywhere.
pub fn remove_dead_functions(m: &mut IRModule) -> Vec<String> {
    let mut removed = Vec::new();
    loop {
        let users = m.users();
        let dead: Vec<String> = m
            .functions
            .iter()
            .filter(|f| f.name != m.entry && users.get(&f.name) == Some(&0))
            .map(|f| f.name.clone())
            .collect();
        if dead.is_empty() {
            return removed;
        }
        m.functions.retain(|f| !dead.contains(&f.name));
        removed.extend(dead);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, parse_module, verify_module, InterpConfig};

    fn result(m: &IRModule, input: &[i64]) -> i64 {
        interpret(m, input, InterpConfig::default()).unwrap().result
    }

    const PROG: &str = "\
array a[4] = {5, 6, 7, 8}
func add3(x, y) {
e:
  t = add x, y
  u = add t, 3
  ret u
}
func pick(c) {
e:
  br c, yes, no
yes:
  r = load a[1]
  ret r
no:
  acc = add acc, 1
}
func main(n) {
e:
  s = mov 0
loop L (i = 0 to 4 step 1) {
b:
  v = call add3(s, i) @c0
  s = add s, v
}
x:
  w = call pick(n) @c1
  z = call pick(n) @c2
  s = add s, w
  s = add s, z
  ret s
}
";

    #[test]
    fn inlining_preserves_results() {
        let m = parse_module(PROG).unwrap();
        for site in ["c0", "c1", "c2"] {
            let inl = apply_inline(&m, site).unwrap();
            verify_module(&inl).unwrap();
            for n in [0, 1] {
                assert_eq!(result(&inl, &[n]), result(&m, &[n]), "{site} n={n}");
            }
            let before = interpret(&m, &[1], InterpConfig::default()).unwrap().calls;
            let after = interpret(&inl, &[1], InterpConfig::default()).unwrap().calls;
            let per_run = if site == "c0" { 4 } else { 1 };
            assert_eq!(before - after, per_run);
        }
    }

    #[test]
    fn loop_body_grows_by_callee_minus_call() {
        let m = parse_module(PROG).unwrap();
        let inl = apply_inline(&m, "c0").unwrap();
        let size = |m: &IRModule| {
            crate::ir::items_inst_count(&m.entry_function().find_loop("L").unwrap().body)
        };
        // callee has 3 instructions including `ret`; the ret becomes the
        // result move, params add one move each.
        let callee = m.function("add3").unwrap().inst_count();
        assert_eq!(size(&inl), size(&m) - 1 + callee + 2);
    }

    #[test]
    fn recursion_and_entry_are_illegal() {
        let text = "\
func f(n) {
e:
  x = call g(n) @s0
  ret x
}
func g(n) {
e:
  x = call f(n) @s1
  ret x
}
func h(n) {
e:
  x = call h(n) @s2
  ret x
}
func main() {
e:
  a = call f(1) @s3
  b = call h(1) @s4
  c = call main() @s5
}
";
        let m = parse_module(text).unwrap();
        for s in ["s0", "s1", "s2"] {
            assert_eq!(inline_legality(s, &m).reasons, vec!["recursive"], "{s}");
        }
        assert!(inline_legality("s3", &m).is_legal());
        assert!(inline_legality("s5", &m).reasons.contains(&"entry".to_string()));
        assert!(matches!(
            apply_inline(&m, "s0"),
            Err(InlineError::Illegal { .. })
        ));
        assert!(matches!(apply_inline(&m, "nope"), Err(InlineError::UnknownSite(_))));
    }

    #[test]
    fn dead_callees_are_removed() {
        let m = parse_module(PROG).unwrap();
        let mut inl = apply_inline(&m, "c0").unwrap();
        assert_eq!(remove_dead_functions(&mut inl), vec!["add3".to_string()]);
        assert_eq!(result(&inl, &[1]), result(&m, &[1]));
    }
}
