mod common;

use acpo::ir::*;
use proptest::prelude::*;

#[test]
fn generated_programs_are_valid() {
    for seed in 0..500 {
        let text = common::program(seed);
        let m = parse_module(&text).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
        verify_module(&m).unwrap();
        interpret(&m, &[5], InterpConfig::default()).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
    }
}

/// Naive iteration count by stepping the induction variable.
fn simulated_trips(init: i64, end: i64, step: i64) -> u64 {
    let mut i = init as i128;
    let mut n = 0;
    while (step > 0 && i < end as i128) || (step < 0 && i > end as i128) {
        i += step as i128;
        n += 1;
    }
    n
}

/// Instruction lines per function, counted on the source text.
fn text_inst_counts(text: &str) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("func ") {
            out.push((rest.split('(').next().unwrap().to_string(), 0));
        } else if line.starts_with("  ") {
            out.last_mut().unwrap().1 += 1;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn print_parse_round_trip(seed in any::<u64>()) {
        let m = parse_module(&common::program(seed)).unwrap();
        let printed = print_module(&m);
        let again = parse_module(&printed).unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(print_module(&again), printed);
    }

    #[test]
    fn interpretation_is_deterministic(seed in any::<u64>(), n in 0i64..12) {
        let m = parse_module(&common::program(seed)).unwrap();
        let a = interpret(&m, &[n], InterpConfig::default()).unwrap();
        let b = interpret(&m, &[n], InterpConfig::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loop_forest_matches_nesting(seed in any::<u64>()) {
        let mut g = common::Gen::new(seed);
        let text = g.program();
        let m = parse_module(&text).unwrap();
        let mut got = Vec::new();
        for f in &m.functions {
            let forest = build_loop_forest(f);
            for l in &forest.loops {
                let parent = l.parent.map(|p| forest.loops[p].id.clone());
                got.push((l.id.clone(), l.depth, parent));
                prop_assert!(l.reducible);
                let h = if l.children.is_empty() { 1 } else {
                    1 + l.children.iter().map(|c| forest.loops[*c].height).max().unwrap()
                };
                prop_assert_eq!(l.height, h);
            }
        }
        prop_assert_eq!(got, g.forest);
    }

    #[test]
    fn instruction_counts_match_text(seed in any::<u64>()) {
        let text = common::program(seed);
        let m = parse_module(&text).unwrap();
        let counts: Vec<(String, usize)> = m.functions.iter().map(|f| (f.name.clone(), f.inst_count())).collect();
        prop_assert_eq!(counts, text_inst_counts(&text));
    }

    #[test]
    fn trip_count_matches_simulation(init in -40i64..40, end in -40i64..40, step in prop_oneof![-5i64..0, 1i64..6]) {
        prop_assert_eq!(trip_count(init, end, step), simulated_trips(init, end, step));
    }

    #[test]
    fn loop_iterations_match_trip_counts(init in -10i64..10, end in -10i64..30, step in prop_oneof![-3i64..0, 1i64..4]) {
        let text = format!(
            "func main() {{\ne:\n  s = mov 0\nloop L (i = {init} to {end} step {step}) {{\nb:\n  s = add s, i\n}}\nx:\n  ret s\n}}\n"
        );
        let m = parse_module(&text).unwrap();
        let p = interpret(&m, &[], InterpConfig::default()).unwrap();
        let trips = simulated_trips(init, end, step);
        prop_assert_eq!(p.per_loop_iterations.get("L").copied().unwrap_or(0), trips);
        let mut s = 0i64;
        let mut i = init;
        for _ in 0..trips { s += i; i += step; }
        prop_assert_eq!(p.result, s);
    }
}

#[test]
fn parse_errors_carry_positions() {
    let e = parse_module("func main() {\ne:\n  x = frob 1, 2\n  ret x\n}\n").unwrap_err();
    assert!(matches!(e, ParseError::Syntax { line: 3, .. }), "{e}");
    let e = parse_module("func main() {\ne:\n  br nowhere\n}\n").unwrap_err();
    assert!(matches!(e, ParseError::UnknownLabel { line: 3, .. }), "{e}");
    let e = parse_module("func main() {\ne:\n  ret 0\n}\nfunc main() {\nf:\n  ret 1\n}\n").unwrap_err();
    assert!(matches!(e, ParseError::DuplicateFunction { line: 5, .. }), "{e}");
}
