mod common;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use acpo::ir::{interpret, parse_module, InterpConfig, IRModule};
use acpo::mlif::MlInterface;
use acpo::passes::*;
use acpo::server::InferenceServer;
use proptest::prelude::*;

fn stub(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../conformance/models")
        .join(name)
        .canonicalize()
        .unwrap()
        .display()
        .to_string()
}

fn client() -> (Arc<MlInterface>, Arc<Mutex<InferenceServer>>) {
    let server = Arc::new(Mutex::new(InferenceServer::new()));
    (MlInterface::in_process(server.clone()), server)
}

fn one_loop(pragma: bool) -> IRModule {
    let p = if pragma { "#pragma unroll 8\n" } else { "" };
    parse_module(&format!(
        "array a[64]\nfunc main(n) {{\ne:\n  s = mov 0\n{p}loop L (i = 0 to 37 step 1) {{\nb:\n  v = load a[i]\n  s = add s, v\n  store a[i], s\n}}\nx:\n  ret s\n}}\n"
    ))
    .unwrap()
}

/// Every combination of user flag, pragma and model.
#[test]
fn priority_matrix() {
    for case in 0..8u8 {
        let (flag, pragma, ml) = (case & 4 != 0, case & 2 != 0, case & 1 != 0);
        let m = one_loop(pragma);
        let cfg = PipelineConfig {
            enable_acpo_lu: ml,
            user_unroll_count: flag.then_some(2),
            lu_model: stub("stub-lu.acpo"),
            ..PipelineConfig::default()
        };
        let (c, _) = client();
        let out = run_pipeline(&m, &cfg, Some(&c)).unwrap();
        let r = out.trace.find("L").unwrap();
        let (source, count) = if flag {
            (DecisionSource::UserFlag, 2)
        } else if pragma {
            (DecisionSource::Pragma, 8)
        } else if ml {
            (DecisionSource::MLModel, 4)
        } else {
            (DecisionSource::DefaultHeuristic, 0)
        };
        assert_eq!(r.source, source, "case {case}");
        match r.decision {
            Decision::Unroll(d) => assert_eq!(d.count, count, "case {case}"),
            d => panic!("{d}"),
        }
        assert_eq!(r.advice.is_some(), source == DecisionSource::MLModel);
    }
}

#[test]
fn missing_server_aborts_or_falls_back() {
    let m = one_loop(false);
    let cfg = PipelineConfig {
        enable_acpo_lu: true,
        ..PipelineConfig::default()
    };
    assert!(matches!(run_pipeline(&m, &cfg, None), Err(PipelineError::NoServer)));
    let fb = PipelineConfig {
        on_failure: OnFailure::Fallback,
        ..cfg
    };
    let out = run_pipeline(&m, &fb, None).unwrap();
    assert_eq!(out.trace.find("L").unwrap().source, DecisionSource::DefaultHeuristic);
}

#[test]
fn unloadable_model_aborts_or_falls_back() {
    let m = one_loop(false);
    let cfg = PipelineConfig {
        enable_acpo_lu: true,
        lu_model: stub("bad-version.acpo"),
        ..PipelineConfig::default()
    };
    let (c, _) = client();
    match run_pipeline(&m, &cfg, Some(&c)) {
        Err(PipelineError::Inference { region, diagnostic }) => {
            assert_eq!(region, "L");
            assert!(diagnostic.contains("schema version"), "{diagnostic}");
        }
        other => panic!("{other:?}"),
    }
    let fb = PipelineConfig {
        on_failure: OnFailure::Fallback,
        ..cfg
    };
    let out = run_pipeline(&m, &fb, Some(&c)).unwrap();
    let r = out.trace.find("L").unwrap();
    assert_eq!(r.source, DecisionSource::DefaultHeuristic);
    assert!(r.note.as_deref().unwrap().starts_with("fallback: "));
}

fn many_loops(n: usize) -> IRModule {
    let mut s = String::from("array a[64]\nfunc main(n) {\ne:\n  s = mov 0\n");
    for k in 0..n {
        s.push_str(&format!(
            "loop L{k} (i{k} = 0 to {} step 1) {{\nb{k}:\n  v = load a[i{k}]\n  s = add s, v\n}}\nx{k}:\n  s = add s, {k}\n",
            10 + 3 * k
        ));
    }
    s.push_str("  ret s\n}\n");
    parse_module(&s).unwrap()
}

/// One LOAD per model and one RUN per advised loop, whatever the loop count.
#[test]
fn model_loads_once_per_module() {
    for n in [5, 9] {
        let m = many_loops(n);
        let cfg = PipelineConfig {
            enable_acpo_lu: true,
            lu_model: stub("stub-lu.acpo"),
            ..PipelineConfig::default()
        };
        let (c, server) = client();
        let out = run_pipeline(&m, &cfg, Some(&c)).unwrap();
        c.close();
        let t = c.transcript();
        let verb = |v: &str| t.iter().filter(|(r, _)| r.split(' ').next() == Some(v)).count();
        assert_eq!(verb("LOAD"), 1);
        assert_eq!(verb("RUN"), n);
        assert_eq!(verb("CLOSE"), 1);
        assert_eq!(server.lock().unwrap().load_count(), 1);
        assert_eq!(out.trace.by_source(DecisionSource::MLModel).count(), n);
        assert_eq!(Overhead::ROWS.len(), 5);
        // a second close is a no-op
        c.close();
        assert_eq!(c.transcript().len(), t.len());
    }
}

#[test]
fn fi_advice_inlines_sites() {
    let m = parse_module(
        "func main(n) {\ne:\n  a = call big(n) @c0\n  ret a\n}\nfunc big(x) {\ne:\n  y = add x, 1\n  y = mul y, 3\n  y = xor y, 5\n  y = add y, 1\n  y = mul y, 3\n  y = xor y, 5\n  y = add y, 1\n  y = mul y, 3\n  y = xor y, 5\n  y = add y, 1\n  y = mul y, 3\n  y = xor y, 5\n  y = add y, 1\n  ret y\n}\n",
    )
    .unwrap();
    let base = run_pipeline(&m, &PipelineConfig::default(), None).unwrap();
    assert_eq!(base.trace.find("c0").unwrap().decision, Decision::Inline(false));
    let cfg = PipelineConfig {
        enable_acpo_fi: true,
        fi_model: stub("stub-fi.acpo"),
        ..PipelineConfig::default()
    };
    let (c, _) = client();
    let out = run_pipeline(&m, &cfg, Some(&c)).unwrap();
    let r = out.trace.find("c0").unwrap();
    assert_eq!(r.source, DecisionSource::MLModel);
    assert_eq!(r.decision, Decision::Inline(true));
    assert_eq!(out.module.functions.len(), 1);
    let run = |m: &IRModule| interpret(m, &[4], InterpConfig::default()).unwrap().result;
    assert_eq!(run(&out.module), run(&m));
}

#[test]
fn trace_csv_has_one_row_per_decision() {
    let m = many_loops(3);
    let out = run_pipeline(&m, &PipelineConfig::default(), None).unwrap();
    let csv = out.trace.csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_CSV_HEADER));
    assert_eq!(lines.count(), out.trace.records.len());
    assert!(out.trace.log_text().contains("Loop Unroll: F[main] Loop L0"));
}

const CLASSES: [u64; 7] = [0, 2, 4, 8, 16, 32, 64];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Any mix of per-region choices computes the same result.
    #[test]
    fn overrides_preserve_semantics(seed in any::<u64>(), picks in prop::collection::vec(0usize..7, 16), bits in any::<u16>(), n in 0i64..9) {
        let m = parse_module(&common::program(seed)).unwrap();
        let mut cfg = PipelineConfig::default();
        for (k, id) in m.loop_ids().into_iter().enumerate() {
            cfg.overrides.loops.insert(id, CLASSES[picks[k % picks.len()]]);
        }
        for (k, id) in m.site_ids().into_iter().enumerate() {
            cfg.overrides.sites.insert(id, bits >> (k % 16) & 1 == 1);
        }
        let out = run_pipeline(&m, &cfg, None).unwrap();
        let run = |m: &IRModule| interpret(m, &[n], InterpConfig::default()).unwrap();
        let (a, b) = (run(&m), run(&out.module));
        prop_assert_eq!(a.result, b.result);
    }

    #[test]
    fn model_advice_preserves_semantics(seed in any::<u64>(), n in 0i64..9) {
        let m = parse_module(&common::program(seed)).unwrap();
        let cfg = PipelineConfig {
            enable_acpo_lu: true,
            enable_acpo_fi: true,
            lu_model: stub("stub-lu.acpo"),
            fi_model: stub("stub-fi.acpo"),
            ..PipelineConfig::default()
        };
        let (c, _) = client();
        let out = run_pipeline(&m, &cfg, Some(&c)).unwrap();
        let run = |m: &IRModule| interpret(m, &[n], InterpConfig::default()).unwrap();
        prop_assert_eq!(run(&m).result, run(&out.module).result);
    }

    #[test]
    fn user_count_wins_on_every_legal_loop(seed in any::<u64>(), pick in 0usize..7) {
        let m = parse_module(&common::program(seed)).unwrap();
        let cfg = PipelineConfig {
            user_unroll_count: Some(CLASSES[pick]),
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&m, &cfg, None).unwrap();
        for r in out.trace.records.iter().filter(|r| r.pass != PassName::Inline && r.legal) {
            prop_assert_eq!(r.source, DecisionSource::UserFlag);
        }
    }
}
