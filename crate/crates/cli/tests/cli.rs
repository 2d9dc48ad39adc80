use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn acpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acpo"))
        .current_dir(root())
        .env_remove("ACPO_ENDPOINT")
        .args(args)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// `cost=... result=...` line printed by `compile --run`.
fn run_stats(o: &Output) -> String {
    text(&o.stderr).lines().find(|l| l.starts_with("cost=")).unwrap().to_string()
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(endpoint: &str, models: Option<&str>) -> Server {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_acpo"));
    cmd.current_dir(root()).args(["serve", "--endpoint", endpoint]);
    if let Some(m) = models {
        cmd.args(["--models", m]);
    }
    let mut child = cmd.stdout(Stdio::piped()).spawn().unwrap();
    let mut banner = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut banner).unwrap();
    assert_eq!(banner.trim_end(), format!("acpo server ready on {endpoint}"));
    Server(child)
}

fn ask(stream: &mut UnixStream, reader: &mut BufReader<UnixStream>, line: &str) -> String {
    writeln!(stream, "{line}").unwrap();
    let mut r = String::new();
    reader.read_line(&mut r).unwrap();
    r.trim_end().to_string()
}

#[test]
fn compile_without_acpo_preserves_result() {
    let src = root().join("benchmarks/dot.mir");
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.csv");
    let o = acpo(&["compile", src.to_str().unwrap(), "--run", "0", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("func main"));
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 1);
    assert!(std::fs::read_to_string(&trace).unwrap().contains("DefaultHeuristic"));
    let forced = acpo(&["compile", src.to_str().unwrap(), "--run", "0", "--unroll-count", "4", "--trace", trace.to_str().unwrap()]);
    assert!(forced.status.success(), "{}", text(&forced.stderr));
    let result = |s: String| s.split("result=").nth(1).unwrap().to_string();
    assert_eq!(result(run_stats(&o)), result(run_stats(&forced)));
    assert!(std::fs::read_to_string(&trace).unwrap().contains("UserFlag"));
}

#[test]
fn acpo_without_endpoint_aborts_or_falls_back() {
    let src = root().join("benchmarks/dot.mir");
    let o = acpo(&["compile", src.to_str().unwrap(), "--enable-acpo-lu"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("no endpoint"), "{}", text(&o.stderr));
    let o = acpo(&["compile", src.to_str().unwrap(), "--enable-acpo-lu", "--on-failure", "fallback"]);
    assert!(o.status.success());
    assert!(text(&o.stderr).contains("warning"));
}

fn compile_via(ep: &str, spawn: bool) {
    let tmp = tempfile::tempdir().unwrap();
    let src = root().join("benchmarks/dot.mir");
    let trace = tmp.path().join("t.csv");
    let mut args = vec!["compile", src.to_str().unwrap(), "--enable-acpo-lu", "--endpoint", ep, "--run", "0"];
    args.extend(["--trace", trace.to_str().unwrap()]);
    if spawn {
        args.push("--spawn-server");
    }
    let o = acpo(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(std::fs::read_to_string(&trace).unwrap().contains("MLModel"));
}

#[test]
fn compile_with_a_running_server_uses_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ep = format!("unix:{}", tmp.path().join("s.sock").display());
    let _server = serve(&ep, None);
    compile_via(&ep, false);
}

#[test]
fn compile_can_spawn_its_server() {
    let tmp = tempfile::tempdir().unwrap();
    compile_via(&format!("unix:{}", tmp.path().join("s.sock").display()), true);
}

#[test]
fn unknown_files_are_errors() {
    let o = acpo(&["compile", "no/such/file.mir"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("cannot read no/such/file.mir"));
    let o = acpo(&["replay", "no/such/transcript.txt"]);
    assert_eq!(o.status.code(), Some(2));
    let o = acpo(&["schema", "xx"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_iterations_write_empty_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let src = root().join("benchmarks/dot.mir");
    let o = acpo(&["tune", src.to_str().unwrap(), "--input", "0", "--iterations", "0", "--seed", "7", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("0 iterations"));
    let log = std::fs::read_to_string(tmp.path().join("dot.lu.log")).unwrap();
    assert!(acpo::tuner::parse_trial_log(&log).unwrap().is_empty());
}

#[test]
fn tune_and_train_produce_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("logs");
    for p in ["dot", "vsum", "saxpy"] {
        let src = root().join(format!("benchmarks/{p}.mir"));
        let input = if p == "saxpy" { "200" } else { "0" };
        let o = acpo(&["tune", src.to_str().unwrap(), "--input", input, "--iterations", "20", "--seed", "7", "--out", logs.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let out = tmp.path().join("m");
    let o = acpo(&["train", "--logs", logs.to_str().unwrap(), "--seed", "7", "--epochs", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(out.join("model-lu.report.json").exists());
    acpo::server::LoadedModel::load(&out.join("model-lu.acpo")).unwrap();
}

#[test]
fn replay_reports_mismatches() {
    let good = root().join("conformance/transcripts/04-status-free.txt");
    let o = acpo(&["replay", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stdout));
    assert!(text(&o.stdout).contains(": ok ("));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "> STATUS\n< OK 1\n> CLOSE\n< OK\n").unwrap();
    let o = acpo(&["replay", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stdout).contains("expected: OK 1"));
}

#[test]
fn schema_matches_checked_in_files() {
    for k in ["lu", "fi"] {
        let o = acpo(&["schema", k]);
        assert!(o.status.success());
        assert_eq!(text(&o.stdout), std::fs::read_to_string(root().join(format!("schemas/{k}.schema"))).unwrap());
    }
}

#[test]
fn report_of_identical_builds_is_neutral() {
    let src = root().join("benchmarks/dot.mir");
    let o = acpo(&["report", src.to_str().unwrap(), "--input", "0"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let (cmp, overhead) = out.split_once("\n\n").unwrap();
    let row: Vec<&str> = cmp.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "dot");
    assert_eq!(row[1], row[2]);
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[6].parse::<f64>().unwrap(), 1.0);
    assert!(cmp.lines().last().unwrap().starts_with("geomean,"));
    let phases: Vec<&str> = overhead.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(phases, acpo::passes::Overhead::ROWS);
}

#[test]
fn served_models_are_preloaded() {
    let tmp = tempfile::tempdir().unwrap();
    let sock = tmp.path().join("s.sock");
    let ep = format!("unix:{}", sock.display());
    let stub = root().join("conformance/models/stub-lu.acpo");
    let _server = serve(&ep, Some(stub.to_str().unwrap()));
    let mut s = UnixStream::connect(&sock).unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    assert_eq!(ask(&mut s, &mut r, "STATUS"), "OK 0");
    assert_eq!(ask(&mut s, &mut r, "RUN LU"), "ERR NOFEATURES no features set");
    assert_eq!(ask(&mut s, &mut r, &format!("LOAD {}", stub.display())), "OK LU");
    // a second server on the same socket is refused
    let o = acpo(&["serve", "--endpoint", &ep]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("already has a listening server"));
    assert_eq!(ask(&mut s, &mut r, "CLOSE"), "OK");
}
