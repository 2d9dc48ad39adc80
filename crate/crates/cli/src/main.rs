use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use acpo::cost::{ratio_f64, CostModel};
use acpo::features::{schema_text, ModelKind};
use acpo::ir::{parse_module, print_module};
use acpo::mlif::{serve_endpoint_then, ConnectOptions, Endpoint, MlInterface, SpawnCommand, ENDPOINT_ENV};
use acpo::passes::{OnFailure, PipelineConfig};
use acpo::report::{compare, comparison_table, overhead_table, region_overhead_table};
use acpo::server::{parse_transcript, replay, InferenceServer};
use acpo::suite::{load_suite, optima_table, Benchmark};
use acpo::trainer::{build_dataset, loocv, train, TrainConfig};
use acpo::tuner::{enumerate_search_space, parse_trial_log, tune, write_trial_log, LogRow, Strategy};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acpo", version, about = "ML-guided loop unrolling and inlining for a small IR")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize one IR file
    Compile(CompileArgs),
    /// Search per-region choices and write trial logs
    Tune(TuneArgs),
    /// Train a model from trial logs and export it
    Train(TrainArgs),
    /// Leave-one-program-out accuracy over trial logs
    Loocv(LoocvArgs),
    /// Run the model server on an endpoint
    Serve(ServeArgs),
    /// Compare default and ACPO builds of a suite
    Report(ReportArgs),
    /// Replay protocol transcripts against a fresh server
    Replay(ReplayArgs),
    /// Print a feature schema
    Schema { kind: String },
    /// Exhaustive optima of a suite
    Optima(OptimaArgs),
}

#[derive(Args, Clone)]
struct CostArgs {
    /// key=value cost-model file
    #[arg(long)]
    cost_config: Option<PathBuf>,
    /// Cost-model override, e.g. w_branch=8
    #[arg(long = "cost", value_name = "KEY=VALUE")]
    cost: Vec<String>,
}

impl CostArgs {
    fn model(&self) -> Result<CostModel> {
        let mut cm = match &self.cost_config {
            Some(p) => CostModel::from_config(&read(p)?)?,
            None => CostModel::default(),
        };
        for kv in &self.cost {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got `{kv}`"))?;
            cm.set(k, v)?;
        }
        cm.validate()?;
        Ok(cm)
    }
}

#[derive(Args, Clone)]
struct AcpoArgs {
    #[arg(long)]
    enable_acpo_lu: bool,
    #[arg(long)]
    enable_acpo_fi: bool,
    /// Force this unroll count on every legal loop
    #[arg(long)]
    unroll_count: Option<u64>,
    #[arg(long, default_value = "abort")]
    on_failure: OnFailure,
    #[arg(long, default_value = "models")]
    model_dir: PathBuf,
    /// pipe:<base>, unix:<path> or inproc
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Option<Endpoint>,
    /// Start `acpo serve` on the endpoint when nothing is listening
    #[arg(long)]
    spawn_server: bool,
}

impl AcpoArgs {
    fn model_path(&self, file: &str) -> String {
        let p = self.model_dir.join(file);
        std::fs::canonicalize(&p).unwrap_or(p).display().to_string()
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            enable_acpo_lu: self.enable_acpo_lu,
            enable_acpo_fi: self.enable_acpo_fi,
            user_unroll_count: self.unroll_count,
            lu_model: self.model_path("model-lu.acpo"),
            fi_model: self.model_path("model-fi.acpo"),
            on_failure: self.on_failure,
            ..PipelineConfig::default()
        }
    }

    /// A client when ACPO is enabled and an endpoint is known.
    fn connect(&self) -> Result<Option<Arc<MlInterface>>> {
        if !(self.enable_acpo_lu || self.enable_acpo_fi) {
            return Ok(None);
        }
        let Some(ep) = &self.endpoint else {
            return match self.on_failure {
                OnFailure::Abort => bail!("ACPO is enabled but no endpoint is given (--endpoint or {ENDPOINT_ENV})"),
                OnFailure::Fallback => {
                    eprintln!("warning: no model server endpoint; using default heuristics");
                    Ok(None)
                }
            };
        };
        let mut opts = ConnectOptions::default();
        if self.spawn_server {
            opts.spawn = Some(SpawnCommand {
                program: std::env::current_exe()?.display().to_string(),
                args: vec!["serve".into(), "--endpoint".into()],
            });
        }
        match MlInterface::connect(ep, opts) {
            Ok(c) => Ok(Some(c)),
            Err(e) if self.on_failure == OnFailure::Fallback => {
                eprintln!("warning: cannot reach model server at {ep} ({e}); using default heuristics");
                Ok(None)
            }
            Err(e) => Err(anyhow!("cannot reach model server at {ep}: {e}")),
        }
    }
}

/// Comma-separated entry arguments.
#[derive(Debug, Clone, Default)]
struct Inputs(Vec<i64>);

fn parse_input(s: &str) -> Result<Inputs, String> {
    if s.trim().is_empty() {
        return Ok(Inputs::default());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad input `{t}`")))
        .collect::<Result<_, _>>()
        .map(Inputs)
}

#[derive(Args)]
struct CompileArgs {
    file: PathBuf,
    /// Write optimized IR here instead of stdout
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write the decision trace (CSV)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the pass log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Run the result on these comma-separated arguments and print its cost
    #[arg(long, value_parser = parse_input)]
    run: Option<Inputs>,
    #[command(flatten)]
    acpo: AcpoArgs,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args)]
struct SuiteArg {
    /// Suite manifest, or a single .mir file
    target: PathBuf,
    /// Arguments for a single .mir file
    #[arg(long, value_parser = parse_input, default_value = "")]
    input: Inputs,
}

impl SuiteArg {
    fn load(&self) -> Result<Vec<Benchmark>> {
        if self.target.extension().is_some_and(|e| e == "mir") {
            let text = read(&self.target)?;
            let module = parse_module(&text).with_context(|| self.target.display().to_string())?;
            let name = self
                .target
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "program".into());
            Ok(vec![Benchmark {
                name,
                path: self.target.clone(),
                input: self.input.0.clone(),
                module,
            }])
        } else {
            Ok(load_suite(&self.target)?)
        }
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("expected lu or fi, got `{s}`"))
}

fn stem(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::LU => "model-lu",
        ModelKind::FI => "model-fi",
    }
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long, value_parser = parse_kind, default_value = "lu")]
    kind: ModelKind,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "hillclimb")]
    strategy: Strategy,
    /// Directory for `<program>.<kind>.log` files
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Trial-log files or directories of *.log files
    #[arg(long, required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
    #[arg(long, value_parser = parse_kind, default_value = "lu")]
    kind: ModelKind,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    /// Drop trials slower than this speedup
    #[arg(long, default_value_t = TrainConfig::default().speedup_floor)]
    speedup_floor: f64,
    #[arg(long)]
    balance_classes: bool,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            speedup_floor: self.speedup_floor,
            balance_classes: self.balance_classes,
        }
    }

    fn rows(&self) -> Result<Vec<LogRow>> {
        let mut files = Vec::new();
        for p in &self.logs {
            if p.is_dir() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                    .with_context(|| p.display().to_string())?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.extension().is_some_and(|x| x == "log"))
                    .collect();
                found.sort();
                files.extend(found);
            } else {
                files.push(p.clone());
            }
        }
        let mut rows = Vec::new();
        for f in files {
            let parsed = parse_trial_log(&read(&f)?).with_context(|| f.display().to_string())?;
            rows.extend(parsed.into_iter().filter(|r| r.kind == self.kind));
        }
        if rows.is_empty() {
            bail!("no {} rows in the given logs", self.kind.name());
        }
        Ok(rows)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Output directory for the .acpo, .weights and report files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LoocvArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Endpoint,
    /// Spec files to load before the first session
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[command(flatten)]
    acpo: AcpoArgs,
    #[command(flatten)]
    cost: CostArgs,
    /// Also print the per-region overhead breakdown
    #[arg(long)]
    per_region: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Directory relative LOAD paths resolve against
    #[arg(long, default_value = ".")]
    base: PathBuf,
}

#[derive(Args)]
struct OptimaArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long, value_parser = parse_kind, default_value = "lu")]
    kind: ModelKind,
    #[command(flatten)]
    cost: CostArgs,
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))
}

fn compile(a: CompileArgs) -> Result<()> {
    let text = read(&a.file)?;
    let module = parse_module(&text).with_context(|| a.file.display().to_string())?;
    let cm = a.cost.model()?;
    let mlif = a.acpo.connect()?;
    let cfg = a.acpo.pipeline();
    let b = Benchmark {
        name: a.file.display().to_string(),
        path: a.file.clone(),
        input: a.run.clone().unwrap_or_default().0,
        module,
    };
    let out = match &a.run {
        Some(_) => {
            let (out, m) = b.build(&cfg, mlif.as_ref(), &cm)?;
            eprintln!(
                "cost={} size={} dynamic={} branches={} result={}",
                ratio_f64(&m.cost),
                m.size,
                m.profile.dynamic_instructions,
                m.profile.branches_taken,
                m.profile.result
            );
            out
        }
        None => acpo::passes::run_pipeline(&b.module, &cfg, mlif.as_ref())?,
    };
    if let Some(c) = &mlif {
        c.close();
    }
    let ir = print_module(&out.module);
    match &a.output {
        Some(p) => write(p, &ir)?,
        None => print!("{ir}"),
    }
    if let Some(p) = &a.trace {
        write(p, &out.trace.csv())?;
    }
    if let Some(p) = &a.log {
        write(p, &out.trace.log_text())?;
    }
    Ok(())
}

fn tune_cmd(a: TuneArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let cm = a.cost.model()?;
    if a.iterations == 0 {
        eprintln!("warning: 0 iterations requested; logs will have no trials");
    }
    std::fs::create_dir_all(&a.out)?;
    for b in &suite {
        let space = enumerate_search_space(&b.module, &[a.kind]);
        if space.is_empty() {
            eprintln!("warning: {} has no {} regions; skipped", b.name, a.kind.name());
            continue;
        }
        let log = tune(&b.name, &b.evaluator(&cm), space, a.strategy, a.iterations, a.seed)?;
        let path = a.out.join(format!("{}.{}.log", b.name, a.kind.name().to_lowercase()));
        write(&path, &write_trial_log(&log, a.kind)?)?;
        let best = log
            .best()
            .and_then(|t| t.measurement.as_ref().map(|m| (t.speedup, ratio_f64(&m.cost))));
        match best {
            Some((s, c)) => println!("{}: {} trials, best cost {c} (speedup {s:.4})", b.name, log.trials.len()),
            None => println!("{}: {} trials", b.name, log.trials.len()),
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let rows = a.opts.rows()?;
    let cfg = a.opts.config();
    let samples = build_dataset(&rows, a.opts.kind, cfg.speedup_floor)?;
    let (model, report) = train(&samples, a.opts.kind, &cfg)?;
    let spec = model.export(&a.out, stem(a.opts.kind))?;
    let report_path = a.out.join(format!("{}.report.json", stem(a.opts.kind)));
    write(&report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!(
        "{}: {} samples, final loss {:.6}, train top-1 {:.4}",
        spec.display(),
        report.samples,
        report.loss.last().copied().unwrap_or(f64::NAN),
        report.train_top1
    );
    Ok(())
}

fn loocv_cmd(a: LoocvArgs) -> Result<()> {
    let rows = a.opts.rows()?;
    let (report, _) = loocv(&rows, a.opts.kind, &a.opts.config())?;
    print!("{}", report.table());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let mut server = InferenceServer::new();
    for m in &a.models {
        let line = format!("LOAD {}", m.display());
        let r = server.handle_line(&line);
        if matches!(r, acpo::mlif::Response::Err { .. }) {
            bail!("{line}: {r}");
        }
    }
    let banner = format!("acpo server ready on {}", a.endpoint);
    // stdout carries the protocol for inproc
    let ready = || match a.endpoint {
        Endpoint::InProcess => eprintln!("{banner}"),
        _ => {
            use std::io::Write;
            println!("{banner}");
            let _ = std::io::stdout().flush();
        }
    };
    serve_endpoint_then(&mut server, &a.endpoint, ready).with_context(|| format!("serving on {}", a.endpoint))?;
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let cm = a.cost.model()?;
    let mlif = a.acpo.connect()?;
    let cfg = PipelineConfig {
        persistent: true,
        ..a.acpo.pipeline()
    };
    let rows = compare(&suite, &cfg, mlif.as_ref(), &cm)?;
    if let Some(c) = &mlif {
        c.close();
    }
    print!("{}", comparison_table(&rows));
    println!();
    print!("{}", overhead_table(&rows));
    if a.per_region {
        println!();
        print!("{}", region_overhead_table(&rows));
    }
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> Result<bool> {
    let mut ok = true;
    for f in &a.files {
        let ex = parse_transcript(&read(f)?).with_context(|| f.display().to_string())?;
        let mut server = InferenceServer::with_base_dir(&a.base);
        let bad = replay(&mut server, &ex);
        if bad.is_empty() {
            println!("{}: ok ({} exchanges)", f.display(), ex.len());
        } else {
            ok = false;
            for m in bad {
                println!(
                    "{}:{}: {}\n  expected: {}\n  actual:   {}",
                    f.display(),
                    m.line,
                    m.request,
                    m.expected,
                    m.actual
                );
            }
        }
    }
    Ok(ok)
}

fn optima_cmd(a: OptimaArgs) -> Result<()> {
    let suite = a.suite.load()?;
    print!("{}", optima_table(&suite, a.kind, &a.cost.model()?)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Compile(a) => compile(a)?,
        Cmd::Tune(a) => tune_cmd(a)?,
        Cmd::Train(a) => train_cmd(a)?,
        Cmd::Loocv(a) => loocv_cmd(a)?,
        Cmd::Serve(a) => serve_cmd(a)?,
        Cmd::Report(a) => report_cmd(a)?,
        Cmd::Replay(a) => return replay_cmd(a),
        Cmd::Schema { kind } => print!("{}", schema_text(parse_kind(&kind).map_err(|e| anyhow!(e))?)),
        Cmd::Optima(a) => optima_cmd(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
