//! Loop unrolling: legality, decision normalization and the transformation.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::clone::{module_namegens, Renamer};
use super::LegalityReport;
use crate::ir::{
    build_loop_forest, items_inst_count, BinOp, Block, Function, IRModule, Inst, Item, Loop,
    NameGen, Operand, UnrollPragma,
};

/// Largest loop body (instructions, nested loops included) the pass will
/// duplicate.
pub const UNROLL_SIZE_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnrollType {
    None = 0,
    Full = 1,
    Partial = 2,
    Runtime = 3,
}

impl UnrollType {
    pub fn from_code(code: i64) -> Option<Self> {
        Some(match code {
            0 => UnrollType::None,
            1 => UnrollType::Full,
            2 => UnrollType::Partial,
            3 => UnrollType::Runtime,
            _ => return None,
        })
    }

    pub fn code(self) -> i64 {
        self as i64
    }

    pub fn name(self) -> &'static str {
        match self {
            UnrollType::None => "none",
            UnrollType::Full => "full",
            UnrollType::Partial => "partial",
            UnrollType::Runtime => "runtime",
        }
    }
}

impl fmt::Display for UnrollType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnrollDecision {
    pub kind: UnrollType,
    pub count: u64,
}

impl UnrollDecision {
    pub const NONE: UnrollDecision = UnrollDecision {
        kind: UnrollType::None,
        count: 0,
    };

    /// The decision a bare count implies for a loop with the given trip
    /// count: the same rule the model server uses to derive `LU-Type`.
    pub fn from_count(count: u64, trip: Option<u64>) -> Self {
        match (count, trip) {
            (0 | 1, _) => UnrollDecision::NONE,
            (c, Some(t)) if c >= t => UnrollDecision {
                kind: UnrollType::Full,
                count: t,
            },
            (c, Some(_)) => UnrollDecision {
                kind: UnrollType::Partial,
                count: c,
            },
            (c, None) => UnrollDecision {
                kind: UnrollType::Runtime,
                count: c,
            },
        }
    }

    /// Re-check a proposed decision against the loop. The result is what the
    /// transformation will actually do; the note explains any change.
    pub fn revalidate(self, trip: Option<u64>) -> (UnrollDecision, Option<String>) {
        let fixed = UnrollDecision::from_count(self.count, trip);
        let same = fixed == self
            || (self.kind == UnrollType::None && fixed.kind == UnrollType::None);
        if same {
            return (fixed, None);
        }
        let note = format!(
            "advice {} x{} adjusted to {} x{} (trip count {})",
            self.kind,
            self.count,
            fixed.kind,
            fixed.count,
            trip.map_or_else(|| "unknown".to_string(), |t| t.to_string())
        );
        (fixed, Some(note))
    }
}

impl fmt::Display for UnrollDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.count)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UnrollError {
    #[error("no loop `{0}` in the function")]
    LoopNotFound(String),
    #[error("full unroll of loop `{0}` needs a known trip count")]
    FullUnknownTrip(String),
    #[error("full unroll of loop `{id}` by {count} does not match trip count {trip}")]
    FullCountMismatch { id: String, count: u64, trip: u64 },
    #[error("partial unroll of loop `{0}` needs a known trip count")]
    PartialUnknownTrip(String),
    #[error("unroll count {count} for loop `{id}` is below 2")]
    CountTooSmall { id: String, count: u64 },
}

pub fn unroll_legality(loop_id: &str, f: &Function) -> LegalityReport {
    let forest = build_loop_forest(f);
    let Some(info) = forest.get(loop_id) else {
        return LegalityReport::illegal("missing");
    };
    let mut reasons = Vec::new();
    if !info.reducible {
        reasons.push("irreducible".to_string());
    }
    let body = f
        .find_loop(loop_id)
        .map_or(0, |l| items_inst_count(&l.body));
    if body > UNROLL_SIZE_CAP {
        reasons.push("size".to_string());
    }
    LegalityReport { reasons }
}

/// Apply `decision` to loop `loop_id` of function `func`, returning the new
/// function. Fresh names are drawn against the whole module.
pub fn apply_unroll(
    m: &IRModule,
    func: &str,
    loop_id: &str,
    decision: UnrollDecision,
) -> Result<Function, UnrollError> {
    let f = m
        .function(func)
        .ok_or_else(|| UnrollError::LoopNotFound(loop_id.to_string()))?;
    let (mut loops, mut sites) = module_namegens(m);
    let mut f = f.clone();
    unroll_in_place(&mut f, loop_id, decision, &mut loops, &mut sites)?;
    Ok(f)
}

/// In-place variant with caller-supplied module-wide name generators.
pub(crate) fn unroll_in_place(
    f: &mut Function,
    loop_id: &str,
    decision: UnrollDecision,
    loops: &mut NameGen,
    sites: &mut NameGen,
) -> Result<(), UnrollError> {
    if decision.kind == UnrollType::None {
        return if f.find_loop(loop_id).is_some() {
            Ok(())
        } else {
            Err(UnrollError::LoopNotFound(loop_id.to_string()))
        };
    }
    let mut labels = NameGen::new(f.labels());
    let mut vars = NameGen::new(f.variables());
    let mut ctx = Ctx {
        labels: &mut labels,
        vars: &mut vars,
        loops,
        sites,
    };
    let done = replace_loop(&mut f.body, loop_id, &mut |l| ctx.expand(l, decision))?;
    if done {
        Ok(())
    } else {
        Err(UnrollError::LoopNotFound(loop_id.to_string()))
    }
}

fn replace_loop(
    items: &mut Vec<Item>,
    id: &str,
    expand: &mut dyn FnMut(&Loop) -> Result<Vec<Item>, UnrollError>,
) -> Result<bool, UnrollError> {
    for i in 0..items.len() {
        if let Item::Loop(l) = &mut items[i] {
            if l.id == id {
                let new_items = expand(l)?;
                items.splice(i..=i, new_items);
                return Ok(true);
            }
            if replace_loop(&mut l.body, id, expand)? {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

struct Ctx<'a> {
    labels: &'a mut NameGen,
    vars: &'a mut NameGen,
    loops: &'a mut NameGen,
    sites: &'a mut NameGen,
}

impl Ctx<'_> {
    fn copy(&mut self, items: &[Item], tag: &str, vars: HashMap<String, String>) -> Vec<Item> {
        Renamer {
            labels: self.labels,
            loops: self.loops,
            sites: self.sites,
            tag: tag.to_string(),
            vars,
        }
        .clone_items(items)
    }

    fn mov_block(&mut self, base: &str, tag: &str, dst: &str, value: i64) -> Item {
        let label = self.labels.fresh(base, tag);
        Item::Block(Block::with_insts(
            label,
            vec![Inst::Mov {
                dst: dst.to_string(),
                src: Operand::Const(value),
            }],
        ))
    }

    fn expand(&mut self, l: &Loop, d: UnrollDecision) -> Result<Vec<Item>, UnrollError> {
        let trip = l.trip_count();
        match d.kind {
            UnrollType::None => Ok(vec![Item::Loop(l.clone())]),
            UnrollType::Full => {
                let t = trip.ok_or_else(|| UnrollError::FullUnknownTrip(l.id.clone()))?;
                if d.count != t {
                    return Err(UnrollError::FullCountMismatch {
                        id: l.id.clone(),
                        count: d.count,
                        trip: t,
                    });
                }
                Ok(self.full(l, t))
            }
            UnrollType::Partial => {
                let t = trip.ok_or_else(|| UnrollError::PartialUnknownTrip(l.id.clone()))?;
                self.check_count(l, d.count)?;
                Ok(self.partial(l, t, d.count))
            }
            UnrollType::Runtime => {
                self.check_count(l, d.count)?;
                Ok(self.runtime(l, d.count))
            }
        }
    }

    fn check_count(&self, l: &Loop, count: u64) -> Result<(), UnrollError> {
        if count < 2 {
            return Err(UnrollError::CountTooSmall {
                id: l.id.clone(),
                count,
            });
        }
        Ok(())
    }

    fn init_const(l: &Loop) -> i64 {
        l.init.as_const().expect("known trip count implies constant init")
    }

    /// `init + n*step` in the interpreter's wrapping arithmetic.
    fn iv_at(l: &Loop, n: u64) -> i64 {
        Self::init_const(l).wrapping_add((n as i64).wrapping_mul(l.step))
    }

    fn full(&mut self, l: &Loop, t: u64) -> Vec<Item> {
        let mut out = Vec::new();
        for j in 0..t {
            out.push(self.mov_block(&l.id, &format!("f{j}"), &l.iv, Self::iv_at(l, j)));
            if j == 0 {
                out.extend(l.body.iter().cloned());
            } else {
                out.extend(self.copy(&l.body, &format!("u{j}"), HashMap::new()));
            }
        }
        out.push(self.mov_block(&l.id, "x", &l.iv, Self::iv_at(l, t)));
        out
    }

    /// Body of the widened main loop: the original body followed by `k-1`
    /// copies, each reading its own offset induction variable.
    fn widened_body(&mut self, l: &Loop, k: u64) -> Vec<Item> {
        let mut body: Vec<Item> = l.body.clone();
        for j in 1..k {
            let tag = format!("u{j}");
            let ivj = self.vars.fresh(&l.iv, &tag);
            let label = self.labels.fresh(&l.id, &format!("o{j}"));
            body.push(Item::Block(Block::with_insts(
                label,
                vec![Inst::Bin {
                    op: BinOp::Add,
                    dst: ivj.clone(),
                    lhs: Operand::var(&l.iv),
                    rhs: Operand::Const((j as i64).wrapping_mul(l.step)),
                }],
            )));
            let vars = HashMap::from([(l.iv.clone(), ivj)]);
            body.extend(self.copy(&l.body, &tag, vars));
        }
        body
    }

    fn partial(&mut self, l: &Loop, t: u64, k: u64) -> Vec<Item> {
        let main_trips = t / k;
        let rem = t % k;
        let mut out = Vec::new();
        if main_trips > 0 {
            let body = self.widened_body(l, k);
            out.push(Item::Loop(Loop {
                id: l.id.clone(),
                iv: l.iv.clone(),
                init: l.init.clone(),
                end: Operand::Const(Self::iv_at(l, main_trips * k)),
                step: l.step.wrapping_mul(k as i64),
                pragma: Some(UnrollPragma::Disable),
                body,
            }));
        }
        for r in 0..rem {
            let n = main_trips * k + r;
            out.push(self.mov_block(&l.id, &format!("e{r}"), &l.iv, Self::iv_at(l, n)));
            out.extend(self.copy(&l.body, &format!("e{r}"), HashMap::new()));
        }
        if rem > 0 || main_trips == 0 {
            out.push(self.mov_block(&l.id, "x", &l.iv, Self::iv_at(l, t)));
        }
        out
    }

    fn runtime(&mut self, l: &Loop, k: u64) -> Vec<Item> {
        let end_copy = self.vars.fresh(&l.iv, "end");
        let limit = self.vars.fresh(&l.iv, "lim");
        let pre = Block::with_insts(
            self.labels.fresh(&l.id, "pre"),
            vec![
                Inst::Mov {
                    dst: end_copy.clone(),
                    src: l.end.clone(),
                },
                Inst::Bin {
                    op: BinOp::Sub,
                    dst: limit.clone(),
                    lhs: Operand::var(&end_copy),
                    rhs: Operand::Const(((k - 1) as i64).wrapping_mul(l.step)),
                },
            ],
        );
        let main_body = self.widened_body(l, k);
        let main = Loop {
            id: l.id.clone(),
            iv: l.iv.clone(),
            init: l.init.clone(),
            end: Operand::var(&limit),
            step: l.step.wrapping_mul(k as i64),
            pragma: Some(UnrollPragma::Disable),
            body: main_body,
        };
        let rem_body = self.copy(&l.body, "r", HashMap::new());
        let remainder = Loop {
            id: self.loops.fresh(&l.id, "r"),
            iv: l.iv.clone(),
            init: Operand::var(&l.iv),
            end: Operand::var(&end_copy),
            step: l.step,
            pragma: Some(UnrollPragma::Disable),
            body: rem_body,
        };
        vec![Item::Block(pre), Item::Loop(main), Item::Loop(remainder)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{interpret, parse_module, InterpConfig};

    const SUM10: &str = "\
array a[16] = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}
func main(n) {
entry:
  s = mov 0
loop L (i = 0 to 10 step 1) {
body:
  x = load a[i]
  s = add s, x
}
exit:
  t = add s, i
  ret t
}
";

    fn run(m: &IRModule, input: &[i64]) -> crate::ir::ExecutionProfile {
        interpret(m, input, InterpConfig::default()).unwrap()
    }

    fn with(m: &IRModule, f: Function) -> IRModule {
        let mut out = m.clone();
        let name = f.name.clone();
        *out.function_mut(&name).unwrap() = f;
        crate::ir::verify_module(&out).unwrap();
        out
    }

    #[test]
    fn from_count_rule() {
        assert_eq!(UnrollDecision::from_count(1, Some(10)), UnrollDecision::NONE);
        assert_eq!(
            UnrollDecision::from_count(16, Some(10)),
            UnrollDecision { kind: UnrollType::Full, count: 10 }
        );
        assert_eq!(
            UnrollDecision::from_count(4, Some(10)).kind,
            UnrollType::Partial
        );
        assert_eq!(UnrollDecision::from_count(4, None).kind, UnrollType::Runtime);
        let (d, note) = UnrollDecision {
            kind: UnrollType::Full,
            count: 32,
        }
        .revalidate(Some(8));
        assert_eq!(d, UnrollDecision { kind: UnrollType::Full, count: 8 });
        assert!(note.is_some());
        let (d, note) = UnrollDecision {
            kind: UnrollType::Full,
            count: 8,
        }
        .revalidate(None);
        assert_eq!(d.kind, UnrollType::Runtime);
        assert!(note.unwrap().contains("unknown"));
    }

    #[test]
    fn full_unroll_removes_backedges() {
        let m = parse_module(SUM10).unwrap();
        let base = run(&m, &[0]);
        let d = UnrollDecision { kind: UnrollType::Full, count: 10 };
        let u = with(&m, apply_unroll(&m, "main", "L", d).unwrap());
        let p = run(&u, &[0]);
        assert_eq!(p.result, base.result);
        assert_eq!(p.result, 55 + 10);
        assert!(p.branches_taken < base.branches_taken);
        assert_eq!(u.loop_count(), 0);
    }

    #[test]
    fn partial_unroll_splits_main_and_epilogue() {
        let m = parse_module(SUM10).unwrap();
        let d = UnrollDecision { kind: UnrollType::Partial, count: 4 };
        let u = with(&m, apply_unroll(&m, "main", "L", d).unwrap());
        let p = run(&u, &[0]);
        assert_eq!(p.result, 65);
        assert_eq!(p.per_loop_iterations["L"], 2);
        let l = u.entry_function().find_loop("L").unwrap();
        assert_eq!(l.step, 4);
        assert_eq!(l.trip_count(), Some(2));
        // two epilogue copies of the 2-instruction body follow the loop
        let loads = u
            .entry_function()
            .blocks()
            .iter()
            .flat_map(|b| b.insts.iter())
            .filter(|i| i.is_load())
            .count();
        assert_eq!(loads, 4 + 2);
    }

    #[test]
    fn runtime_unroll_handles_every_remainder() {
        let text = "\
array a[8] = {3, 1, 4, 1, 5, 9, 2, 6}
func main(n) {
entry:
  s = mov 0
loop L (i = 0 to n step 1) {
body:
  x = load a[i]
  s = add s, x
  s = mul s, 3
}
exit:
  s = add s, i
  ret s
}
";
        let m = parse_module(text).unwrap();
        for k in [2, 3, 4, 8] {
            let d = UnrollDecision { kind: UnrollType::Runtime, count: k };
            let u = with(&m, apply_unroll(&m, "main", "L", d).unwrap());
            for n in -2..20 {
                assert_eq!(run(&u, &[n]).result, run(&m, &[n]).result, "k={k} n={n}");
            }
        }
    }

    #[test]
    fn none_is_identity_and_errors_are_reported() {
        let m = parse_module(SUM10).unwrap();
        let f = apply_unroll(&m, "main", "L", UnrollDecision::NONE).unwrap();
        assert_eq!(&f, m.entry_function());
        let text = "func main(n) {\nloop L (i = 0 to n step 1) {\nb:\n x = add x, i\n}\n}\n";
        let m = parse_module(text).unwrap();
        let d = UnrollDecision { kind: UnrollType::Full, count: 4 };
        assert_eq!(
            apply_unroll(&m, "main", "L", d),
            Err(UnrollError::FullUnknownTrip("L".into()))
        );
        assert!(matches!(
            apply_unroll(&m, "main", "Q", UnrollDecision::NONE),
            Err(UnrollError::LoopNotFound(_))
        ));
    }

    #[test]
    fn legality_reasons() {
        let m = parse_module(SUM10).unwrap();
        assert!(unroll_legality("L", m.entry_function()).is_legal());
        let side = "func main() {\ne:\n br inside\nloop L (i = 0 to 4 step 1) {\ninside:\n x = add x, 1\n}\n}\n";
        let m = parse_module(side).unwrap();
        assert_eq!(
            unroll_legality("L", m.entry_function()).reasons,
            vec!["irreducible"]
        );
        let mut big = String::from("func main() {\nloop L (i = 0 to 4 step 1) {\nb:\n");
        for _ in 0..=UNROLL_SIZE_CAP {
            big.push_str(" x = add x, 1\n");
        }
        big.push_str("}\n}\n");
        let m = parse_module(&big).unwrap();
        assert_eq!(unroll_legality("L", m.entry_function()).reasons, vec!["size"]);
    }

    #[test]
    fn nested_loops_and_calls_get_fresh_ids() {
        let text = "\
func g(v) {
e:
  ret v
}
func main() {
e:
  s = mov 0
loop O (i = 0 to 3 step 1) {
  loop I (j = 0 to 2 step 1) {
  b:
    t = call g(j) @c0
    s = add s, t
    br skip
  skip:
    s = add s, i
  }
}
x:
  ret s
}
";
        let m = parse_module(text).unwrap();
        let base = run(&m, &[]).result;
        for d in [
            UnrollDecision { kind: UnrollType::Full, count: 3 },
            UnrollDecision { kind: UnrollType::Partial, count: 2 },
            UnrollDecision { kind: UnrollType::Runtime, count: 2 },
        ] {
            let u = with(&m, apply_unroll(&m, "main", "O", d).unwrap());
            assert_eq!(run(&u, &[]).result, base, "{d}");
            assert!(u.loop_ids().iter().all(|id| id.starts_with('O') || id.starts_with('I')));
            assert!(u.site_ids().iter().all(|s| crate::ir::root_of(s) == "c0"));
        }
    }
}
