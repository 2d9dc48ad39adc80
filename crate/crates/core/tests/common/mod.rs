//! Random well-formed IR programs for property tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPS: [&str; 10] = ["add", "sub", "mul", "and", "or", "xor", "shl", "shr", "lt", "eq"];

pub struct Gen {
    rng: ChaCha8Rng,
    out: Vec<String>,
    labels: usize,
    loops: usize,
    sites: usize,
    helpers: usize,
    /// Expected `(loop id, depth, parent)` per function, in source order.
    pub forest: Vec<(String, usize, Option<String>)>,
    pub max_depth: usize,
    pub allow_calls: bool,
}

impl Gen {
    pub fn new(seed: u64) -> Self {
        Gen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            out: Vec::new(),
            labels: 0,
            loops: 0,
            sites: 0,
            helpers: 0,
            forest: Vec::new(),
            max_depth: 3,
            allow_calls: true,
        }
    }

    fn label(&mut self) -> String {
        self.labels += 1;
        format!("b{}", self.labels)
    }

    fn operand(&mut self, vars: &[String]) -> String {
        if self.rng.gen_bool(0.3) {
            self.rng.gen_range(-4..20).to_string()
        } else {
            vars.choose(&mut self.rng).unwrap().clone()
        }
    }

    fn insts(&mut self, vars: &[String], fixed: usize, callee_from: usize) {
        let n = self.rng.gen_range(1..5);
        for _ in 0..n {
            let dst = vars[self.rng.gen_range(fixed..vars.len())].clone();
            match self.rng.gen_range(0..10) {
                0 | 1 => {
                    let idx = self.operand(vars);
                    let arr = if self.rng.gen_bool(0.5) { "a" } else { "b" };
                    self.out.push(format!("  {dst} = load {arr}[{idx}]"));
                }
                2 => {
                    let (idx, v) = (self.operand(vars), self.operand(vars));
                    self.out.push(format!("  store a[{idx}], {v}"));
                }
                3 if self.allow_calls && callee_from < self.helpers => {
                    let f = self.rng.gen_range(callee_from..self.helpers);
                    let arg = self.operand(vars);
                    let site = self.sites;
                    self.sites += 1;
                    self.out.push(format!("  {dst} = call h{f}({arg}) @c{site}"));
                }
                4 => {
                    let src = self.operand(vars);
                    self.out.push(format!("  {dst} = mov {src}"));
                }
                _ => {
                    let op = *OPS.choose(&mut self.rng).unwrap();
                    let (l, r) = (self.operand(vars), self.operand(vars));
                    self.out.push(format!("  {dst} = {op} {l}, {r}"));
                }
            }
        }
    }

    /// A list of items ending in a fall-through block. Forward branches only
    /// target the next block of the same list.
    fn items(&mut self, vars: &mut Vec<String>, fixed: usize, depth: usize, parent: Option<String>, params: &[String], callee_from: usize) {
        let n = self.rng.gen_range(1..4);
        let mut pending_branch: Option<(String, String)> = None;
        for k in 0..n {
            let is_loop = depth < self.max_depth && self.rng.gen_bool(0.45) && pending_branch.is_none();
            if is_loop {
                self.loops += 1;
                let id = format!("L{}", self.loops);
                let iv = format!("i{}", self.loops);
                let (init, end, step) = match self.rng.gen_range(0..4) {
                    0 => (0, self.rng.gen_range(0..13).to_string(), 1),
                    1 => (self.rng.gen_range(10..20), self.rng.gen_range(-2..5).to_string(), -1),
                    2 => (self.rng.gen_range(0..3), self.rng.gen_range(0..25).to_string(), self.rng.gen_range(2..4)),
                    // helper arguments are unbounded, so only main's `n`
                    _ => match params.first().filter(|p| *p == "n") {
                        Some(p) => (0, p.clone(), 1),
                        None => (0, "7".into(), 1),
                    },
                };
                match self.rng.gen_range(0..8) {
                    0 => self.out.push("#pragma nounroll".into()),
                    1 => self.out.push(format!("#pragma unroll {}", [2, 4, 8][self.rng.gen_range(0..3)])),
                    _ => {}
                }
                self.out.push(format!("loop {id} ({iv} = {init} to {end} step {step}) {{"));
                self.forest.push((id.clone(), depth + 1, parent.clone()));
                let l = self.label();
                self.out.push(format!("{l}:"));
                // the induction variable joins the read-only prefix
                let mut body_vars = vars.clone();
                body_vars.insert(fixed, iv.clone());
                self.insts(&body_vars, fixed + 1, callee_from);
                self.items(&mut body_vars, fixed + 1, depth + 1, Some(id), params, callee_from);
                self.out.push("}".into());
                // next item needs a label
                let l = self.label();
                self.out.push(format!("{l}:"));
                self.insts(vars, fixed, callee_from);
            } else {
                let l = match pending_branch.take() {
                    Some((_, target)) => target,
                    None => self.label(),
                };
                self.out.push(format!("{l}:"));
                self.insts(vars, fixed, callee_from);
                if k + 1 < n && self.rng.gen_bool(0.25) {
                    let target = self.label();
                    let c = self.operand(vars);
                    self.out.push(format!("  br {c}, {target}, {target}"));
                    pending_branch = Some((l, target));
                }
            }
        }
        if let Some((_, target)) = pending_branch {
            self.out.push(format!("{target}:"));
            self.insts(vars, fixed, callee_from);
        }
    }

    fn function(&mut self, name: &str, params: Vec<String>, callee_from: usize) {
        self.out.push(format!("func {name}({}) {{", params.join(", ")));
        let l = self.label();
        self.out.push(format!("{l}:"));
        let mut vars: Vec<String> = params.clone();
        let fixed = vars.len();
        for t in 0..3 {
            let v = format!("t{t}");
            let c = self.rng.gen_range(-3..9);
            self.out.push(format!("  {v} = mov {c}"));
            vars.push(v);
        }
        // params are read-only; everything from `fixed` on may be written
        self.items(&mut vars, fixed, 0, None, &params, callee_from);
        let r = self.operand(&vars);
        self.out.push(format!("  ret {r}"));
        self.out.push("}".into());
    }

    /// Main plus up to two helpers; helpers call only later helpers.
    pub fn program(&mut self) -> String {
        self.out.clear();
        self.helpers = if self.allow_calls { self.rng.gen_range(0..3) } else { 0 };
        let a: Vec<String> = (0..self.rng.gen_range(0..6)).map(|_| self.rng.gen_range(-9..9).to_string()).collect();
        if a.is_empty() {
            self.out.push("array a[16]".into());
        } else {
            self.out.push(format!("array a[16] = {{{}}}", a.join(", ")));
        }
        self.out.push("array b[8] = {1, 2, 3, 4}".into());
        self.function("main", vec!["n".into()], 0);
        let main_forest = std::mem::take(&mut self.forest);
        // shallow helpers keep nested call costs small
        let depth = self.max_depth;
        self.max_depth = depth.min(1);
        for h in 0..self.helpers {
            self.function(&format!("h{h}"), vec!["x".into()], h + 1);
        }
        self.max_depth = depth;
        // keep main's forest for the oracle; helpers' loops are appended after
        let helper_forest = std::mem::take(&mut self.forest);
        self.forest = main_forest;
        self.forest.extend(helper_forest);
        let mut s = self.out.join("\n");
        s.push('\n');
        s
    }
}

pub fn program(seed: u64) -> String {
    Gen::new(seed).program()
}
