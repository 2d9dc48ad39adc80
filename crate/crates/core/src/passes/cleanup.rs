//! Scalar cleanup between the two unroll instances: block-local constant
//! and copy propagation, branch folding, unreachable-item removal, block
//! merging and dead-definition removal, iterated to a fixpoint.

use std::collections::{BTreeSet, HashMap};

use crate::ir::{visit_items, Block, Function, IRModule, Inst, Item, Operand, Terminator};

const MAX_ROUNDS: usize = 16;

pub fn cleanup_module(m: &mut IRModule) {
    for f in &mut m.functions {
        cleanup_function(f);
    }
}

pub fn cleanup_function(f: &mut Function) {
    for _ in 0..MAX_ROUNDS {
        let mut changed = false;
        let targets = branch_targets(&f.body);
        changed |= propagate(&mut f.body, &targets);
        let targets = branch_targets(&f.body);
        changed |= remove_unreachable(&mut f.body, true, &targets);
        let targets = branch_targets(&f.body);
        changed |= merge_blocks(&mut f.body, &targets);
        changed |= remove_dead_defs(f);
        if !changed {
            break;
        }
    }
}

fn branch_targets(items: &[Item]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    visit_items(items, &mut |item| {
        if let Item::Block(Block { term: Some(t), .. }) = item {
            out.extend(t.targets().into_iter().map(str::to_string));
        }
    });
    out
}

type Env = HashMap<String, Operand>;

fn subst(env: &Env, op: &mut Operand) -> bool {
    if let Operand::Var(v) = op {
        if let Some(val) = env.get(v) {
            *op = val.clone();
            return true;
        }
    }
    false
}

/// Record that `dst` now holds `val` (or something unknown).
fn assign(env: &mut Env, dst: &str, val: Option<Operand>) {
    env.retain(|_, v| v.as_var() != Some(dst));
    match val {
        Some(v) if v.as_var() != Some(dst) => {
            env.insert(dst.to_string(), v);
        }
        _ => {
            env.remove(dst);
        }
    }
}

fn propagate(items: &mut [Item], targets: &BTreeSet<String>) -> bool {
    let mut changed = false;
    let mut env = Env::new();
    for item in items.iter_mut() {
        match item {
            Item::Block(b) => {
                if targets.contains(&b.label) {
                    env.clear();
                }
                for inst in &mut b.insts {
                    for op in inst.operands_mut() {
                        changed |= subst(&env, op);
                    }
                    if let Inst::Bin { op, dst, lhs, rhs } = inst {
                        if let (Some(a), Some(c)) = (lhs.as_const(), rhs.as_const()) {
                            *inst = Inst::Mov {
                                dst: std::mem::take(dst),
                                src: Operand::Const(op.eval(a, c)),
                            };
                            changed = true;
                        }
                    }
                    match inst {
                        Inst::Mov { dst, src } => {
                            let (d, s) = (dst.clone(), src.clone());
                            assign(&mut env, &d, Some(s));
                        }
                        other => {
                            if let Some(d) = other.dst() {
                                let d = d.to_string();
                                assign(&mut env, &d, None);
                            }
                        }
                    }
                }
                if let Some(t) = &mut b.term {
                    for op in t.operands_mut() {
                        changed |= subst(&env, op);
                    }
                    if let Terminator::CondBr {
                        cond: Operand::Const(c),
                        then_label,
                        else_label,
                    } = t
                    {
                        let target = if *c != 0 { then_label } else { else_label };
                        *t = Terminator::Br(std::mem::take(target));
                        changed = true;
                    }
                }
            }
            Item::Loop(l) => {
                changed |= subst(&env, &mut l.init);
                changed |= subst(&env, &mut l.end);
                changed |= propagate(&mut l.body, targets);
                env.clear();
            }
        }
    }
    changed
}

fn has_targeted_label(items: &[Item], targets: &BTreeSet<String>) -> bool {
    let mut found = false;
    visit_items(items, &mut |item| {
        if let Item::Block(b) = item {
            found |= targets.contains(&b.label);
        }
    });
    found
}

fn remove_unreachable(items: &mut Vec<Item>, live_in: bool, targets: &BTreeSet<String>) -> bool {
    let mut changed = false;
    let mut live = live_in;
    let mut keep = Vec::with_capacity(items.len());
    for mut item in std::mem::take(items) {
        match &mut item {
            Item::Block(b) => {
                let here = live || targets.contains(&b.label);
                live = here && b.term.is_none();
                if here {
                    keep.push(item);
                } else {
                    changed = true;
                }
            }
            Item::Loop(l) => {
                let entered = has_targeted_label(&l.body, targets);
                let here = live || entered;
                changed |= remove_unreachable(&mut l.body, live, targets);
                if here {
                    keep.push(item);
                } else {
                    changed = true;
                }
                live = here;
            }
        }
    }
    *items = keep;
    changed
}

fn merge_blocks(items: &mut Vec<Item>, targets: &BTreeSet<String>) -> bool {
    let mut changed = false;
    let mut out: Vec<Item> = Vec::with_capacity(items.len());
    for mut item in std::mem::take(items) {
        if let Item::Loop(l) = &mut item {
            changed |= merge_blocks(&mut l.body, targets);
        }
        if let (Some(Item::Block(prev)), Item::Block(next)) = (out.last_mut(), &item) {
            if prev.term == Some(Terminator::Br(next.label.clone())) {
                prev.term = None;
                changed = true;
            }
            if prev.term.is_none() && !targets.contains(&next.label) {
                prev.insts.extend(next.insts.iter().cloned());
                prev.term = next.term.clone();
                changed = true;
                continue;
            }
        }
        out.push(item);
    }
    *items = out;
    changed
}

fn reads(items: &[Item]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut add = |op: &Operand| {
        if let Operand::Var(v) = op {
            out.insert(v.clone());
        }
    };
    visit_items(items, &mut |item| match item {
        Item::Block(b) => {
            for inst in &b.insts {
                inst.operands().into_iter().for_each(&mut add);
            }
            if let Some(t) = &b.term {
                t.operands().into_iter().for_each(&mut add);
            }
        }
        Item::Loop(l) => {
            add(&l.init);
            add(&l.end);
        }
    });
    out
}

fn remove_dead_defs(f: &mut Function) -> bool {
    let live = reads(&f.body);
    let mut changed = false;
    crate::ir::visit_blocks_mut(&mut f.body, &mut |b| {
        let before = b.insts.len();
        b.insts.retain(|inst| {
            if let Inst::Mov {
                dst,
                src: Operand::Var(s),
            } = inst
            {
                if dst == s {
                    return false;
                }
            }
            !(inst.is_pure() && inst.dst().is_some_and(|d| !live.contains(d)))
        });
        changed |= b.insts.len() != before;
        changed |= remove_overwritten(b);
    });
    changed
}

/// Drop pure definitions overwritten later in the same block before any
/// read.
fn remove_overwritten(b: &mut Block) -> bool {
    let n = b.insts.len();
    let mut dead = vec![false; n];
    for k in 0..n {
        let inst = &b.insts[k];
        let Some(d) = inst.dst().filter(|_| inst.is_pure()) else {
            continue;
        };
        for later in &b.insts[k + 1..] {
            if later.operands().iter().any(|o| o.as_var() == Some(d)) {
                break;
            }
            if later.dst() == Some(d) {
                dead[k] = true;
                break;
            }
        }
    }
    if !dead.contains(&true) {
        return false;
    }
    let mut k = 0;
    b.insts.retain(|_| {
        k += 1;
        !dead[k - 1]
    });
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, parse_module, print_module, InterpConfig};

    #[test]
    fn folds_constants_into_loop_bounds_and_branches() {
        let text = "\
func main() {
e:
  n = mov 4
  m = add n, 4
  c = lt n, m
  br c, t, f
t:
  s = mov 0
loop L (i = 0 to m step 1) {
b:
  s = add s, i
}
x:
  ret s
f:
  ret 99
}
";
        let mut m = parse_module(text).unwrap();
        let before = interpret(&m, &[], InterpConfig::default()).unwrap().result;
        cleanup_module(&mut m);
        crate::ir::verify_module(&m).unwrap();
        let f = m.entry_function();
        assert_eq!(f.find_loop("L").unwrap().trip_count(), Some(8));
        assert!(!f.labels().contains("f"), "{}", print_module(&m));
        assert_eq!(interpret(&m, &[], InterpConfig::default()).unwrap().result, before);
        // everything before the loop folds away except the accumulator init
        let first = f.blocks()[0];
        assert_eq!(first.insts.len(), 1, "{}", print_module(&m));
    }

    #[test]
    fn keeps_targeted_blocks_and_live_values() {
        let text = "\
func main(n) {
e:
  x = mov 1
  br n, a, b
a:
  x = add x, 1
b:
  y = mov x
  y = mov 5
  ret y
}
";
        let mut m = parse_module(text).unwrap();
        cleanup_module(&mut m);
        let f = m.entry_function();
        assert!(f.labels().contains("a") && f.labels().contains("b"));
        for n in [0, 1] {
            assert_eq!(interpret(&m, &[n], InterpConfig::default()).unwrap().result, 5);
        }
        let b = f.blocks().into_iter().find(|b| b.label == "b").unwrap();
        assert!(b.insts.is_empty(), "{}", print_module(&m));
    }
}
