use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sinkscale::bench::{run_experiment, ExperimentConfig, ExperimentId, PartialConfig};
use sinkscale::diagnostics::diagnose;
use sinkscale::eot::{log_sk_run, solve_eot, Domain, EotProblem, LogMatrix};
use sinkscale::generators::{generate, Family, Params};
use sinkscale::matrix::read_vector;
use sinkscale::permanent::permanent;
use sinkscale::reduction::{auto_l, discretize, expand, verify_equivalence};
use sinkscale::scaling::{SkTrace, StopReason};
use sinkscale::{sk_run, Marginals, Matrix, ScalingInstance, TraceOptions};

const EXIT_INVALID: u8 = 2;
const EXIT_CELL_FAILURES: u8 = 3;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] sinkscale::Error),
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("writing {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sinkscale", version, about = "Sinkhorn-Knopp matrix scaling, entropic transport and experiment sweeps")]
struct Cli {
    /// TOML file with `seed`, `threads`, `out` and an optional `[bench]` table.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `gen`, the output prefix).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for `bench` (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run SK on a matrix towards target marginals.
    Scale(ScaleArgs),
    /// Solve an entropic transport problem by SK on its Gibbs kernel.
    Eot(EotArgs),
    /// Density, well-boundedness and scalability diagnostics.
    Diagnose(DiagnoseArgs),
    /// Expand a (u,v)-instance into an equivalent (1,1)-instance.
    Reduce(ReduceArgs),
    /// Exact permanent of a square matrix.
    Permanent(PermanentArgs),
    /// Generate an instance from one of the built-in families.
    Gen(GenArgs),
    /// Run an experiment sweep.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// Row targets (whitespace-separated reals).
    #[arg(long, value_name = "FILE")]
    u: Option<PathBuf>,
    /// Column targets.
    #[arg(long, value_name = "FILE")]
    v: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScaleArgs {
    /// Matrix in dense text or JSON form.
    #[arg(long, value_name = "FILE", required_unless_present = "log_matrix", conflicts_with = "log_matrix")]
    matrix: Option<PathBuf>,
    /// Matrix of logarithms (`-inf` for zeros); runs the log-domain engine.
    #[arg(long, value_name = "FILE")]
    log_matrix: Option<PathBuf>,
    #[command(flatten)]
    targets: TargetArgs,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    /// Stop after this many seconds.
    #[arg(long)]
    budget_secs: Option<f64>,
    /// Per-step trace CSV.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Add the permanent column to the trace (square, n <= 12).
    #[arg(long)]
    permanent: bool,
    /// Write the final scaled matrix.
    #[arg(long, value_name = "FILE")]
    result: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Auto,
    Direct,
    Log,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Auto => Domain::Auto,
            DomainArg::Direct => Domain::Direct,
            DomainArg::Log => Domain::Log,
        }
    }
}

#[derive(Args, Debug)]
struct EotArgs {
    /// Cost matrix; `inf` marks forbidden pairs.
    #[arg(long, value_name = "FILE")]
    cost: PathBuf,
    #[arg(long)]
    eta: f64,
    /// Targets default to uniform probability vectors.
    #[command(flatten)]
    targets: TargetArgs,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value = "off")]
    prescale: OnOff,
    #[arg(long, value_enum, default_value = "auto")]
    domain: DomainArg,
    #[arg(long, value_name = "OUT.csv")]
    trace: Option<PathBuf>,
    #[arg(long, value_name = "OUT.txt")]
    plan: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, value_name = "FILE")]
    matrix: PathBuf,
    #[command(flatten)]
    targets: TargetArgs,
    /// Also report density at this threshold.
    #[arg(long)]
    rho: Option<f64>,
    /// Scaled cost `ηC` for the well-boundedness report.
    #[arg(long, value_name = "FILE")]
    cost: Option<PathBuf>,
    /// Threshold for the well-boundedness report.
    #[arg(long, default_value_t = 2.0)]
    cost_rho: f64,
    /// Structured report (defaults to diagnostics.json under --out).
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReduceArgs {
    #[arg(long, value_name = "FILE")]
    matrix: PathBuf,
    #[command(flatten)]
    targets: TargetArgs,
    /// Discretization level; chosen from the targets' denominators when omitted.
    #[arg(long = "l", value_name = "L")]
    l: Option<u64>,
    /// Allow expanded sizes above the memory guard.
    #[arg(long)]
    allow_large: bool,
    /// Writes PREFIX.txt and PREFIX.json.
    #[arg(long, value_name = "PREFIX", default_value = "reduced")]
    output: PathBuf,
    /// Compare this many steps of both runs and print the largest deviation.
    #[arg(long, value_name = "STEPS")]
    verify: Option<usize>,
}

#[derive(Args, Debug)]
struct PermanentArgs {
    matrix: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    family: String,
    /// Comma-separated key=value list; vectors use `:` between entries.
    #[arg(long, default_value = "")]
    params: String,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Experiment id; overrides the config file.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    budget_secs: Option<f64>,
    /// Also write chart.svg.
    #[arg(long)]
    chart: bool,
}

#[derive(Debug, Default)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    bench: PartialConfig,
}

fn load_config(path: &Path) -> CliResult<FileConfig> {
    let err = |msg: String| CliError::Config { path: path.display().to_string(), msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    let mut cfg = FileConfig::default();
    if let Some(v) = table.remove("seed") {
        let s = v.as_integer().filter(|s| *s >= 0).ok_or_else(|| err("seed must be a nonnegative integer".into()))?;
        cfg.seed = Some(s as u64);
    }
    if let Some(v) = table.remove("threads") {
        let t = v.as_integer().filter(|t| *t >= 0).ok_or_else(|| err("threads must be a nonnegative integer".into()))?;
        cfg.threads = Some(t as usize);
    }
    if let Some(v) = table.remove("out") {
        cfg.out = Some(PathBuf::from(v.as_str().ok_or_else(|| err("out must be a string".into()))?));
    }
    if let Some(v) = table.remove("bench") {
        cfg.bench = v.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
    }
    if let Some(key) = table.keys().next() {
        return Err(err(format!("unknown key {key:?}")));
    }
    Ok(cfg)
}

struct Globals {
    seed: u64,
    threads: usize,
    out: Option<PathBuf>,
    bench: PartialConfig,
}

impl Globals {
    /// Relative paths land under `--out` when it is set.
    fn path(&self, p: &Path) -> PathBuf {
        match &self.out {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    let wrap = |source| CliError::Write { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(wrap)?;
    }
    std::fs::write(path, contents).map_err(wrap)
}

fn read_targets(t: &TargetArgs, dims: (usize, usize), uniform: bool) -> CliResult<Marginals> {
    let default = |len: usize| if uniform { vec![1.0 / len as f64; len] } else { vec![1.0; len] };
    let u = t.u.as_deref().map(read_vector).transpose()?.unwrap_or_else(|| default(dims.0));
    let v = t.v.as_deref().map(read_vector).transpose()?.unwrap_or_else(|| default(dims.1));
    if t.u.is_some() != t.v.is_some() {
        return Err(CliError::Usage("pass both --u and --v, or neither".into()));
    }
    Ok(Marginals::new(u, v)?)
}

fn stop_label(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::MaxIter => "max_iter reached",
        StopReason::Deadline => "budget exhausted",
    }
}

fn report_run(trace: &SkTrace, stop: StopReason) -> u8 {
    let last = trace.last().expect("at least one step");
    println!("status      {}", stop_label(stop));
    println!("iterations  {}", last.k);
    println!("final_error {:e}", last.total_err);
    if stop == StopReason::Converged {
        0
    } else {
        EXIT_CELL_FAILURES
    }
}

fn cmd_scale(g: &Globals, a: &ScaleArgs) -> CliResult<u8> {
    let deadline = a.budget_secs.map(|b| Instant::now() + Duration::from_secs_f64(b));
    if a.max_iter == 0 {
        return Err(CliError::Usage("--max-iter must be positive".into()));
    }
    let (trace, stop, result) = if let Some(path) = &a.log_matrix {
        let text = std::fs::read_to_string(path).map_err(sinkscale::Error::from)?;
        let lm = LogMatrix::parse_text(&text)?;
        let targets = read_targets(&a.targets, lm.shape(), false)?;
        let out = log_sk_run(&lm, &targets, a.eps, a.max_iter, None, deadline)?;
        (out.trace, out.stop, out.state.exp())
    } else {
        let m = Matrix::read(a.matrix.as_deref().expect("required by clap"))?.validated()?;
        let targets = read_targets(&a.targets, m.shape(), false)?;
        let inst = ScalingInstance::new(m, targets)?;
        let opts = TraceOptions { permanent: a.permanent, keep_states: false, deadline };
        let out = sk_run(&inst, a.eps, a.max_iter, &opts)?;
        (out.trace, out.stop, out.state.into_matrix())
    };
    if let Some(p) = &a.trace {
        write(&g.path(p), trace.to_csv())?;
    }
    if let Some(p) = &a.result {
        write(&g.path(p), result.to_text())?;
    }
    Ok(report_run(&trace, stop))
}

fn cmd_eot(g: &Globals, a: &EotArgs) -> CliResult<u8> {
    if a.max_iter == 0 {
        return Err(CliError::Usage("--max-iter must be positive".into()));
    }
    let cost = Matrix::read(&a.cost)?;
    let targets = read_targets(&a.targets, cost.shape(), true)?;
    let problem = EotProblem::new(cost, a.eta, targets, matches!(a.prescale, OnOff::On))?;
    let sol = solve_eot(&problem, a.eps, a.max_iter, a.domain.into())?;
    if let Some(p) = &a.trace {
        write(&g.path(p), sol.trace.to_csv())?;
    }
    if let Some(p) = &a.plan {
        write(&g.path(p), sol.plan.to_text())?;
    }
    println!("domain      {}", if sol.domain == Domain::Log { "log" } else { "direct" });
    Ok(report_run(&sol.trace, sol.stop))
}

fn cmd_diagnose(g: &Globals, a: &DiagnoseArgs) -> CliResult<u8> {
    let m = Matrix::read(&a.matrix)?.validated()?;
    let targets = read_targets(&a.targets, m.shape(), false)?;
    if let Some(r) = a.rho.filter(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(CliError::Usage(format!("--rho must lie in (0, 1], got {r}")));
    }
    let cost = a.cost.as_deref().map(Matrix::read).transpose()?;
    if cost.as_ref().is_some_and(|c| c.shape() != m.shape()) {
        return Err(CliError::Usage("--cost shape differs from --matrix".into()));
    }
    let inst = ScalingInstance::new(m, targets)?;
    let report = diagnose(&inst, a.rho, cost.as_ref().map(|c| (c, a.cost_rho)));
    print!("{}", report.to_table());
    let json_path = match (&a.json, &g.out) {
        (Some(p), _) => Some(g.path(p)),
        (None, Some(dir)) => Some(dir.join("diagnostics.json")),
        (None, None) => None,
    };
    if let Some(p) = json_path {
        write(&p, serde_json::to_string_pretty(&report).expect("plain record"))?;
    }
    Ok(0)
}

fn cmd_reduce(g: &Globals, a: &ReduceArgs) -> CliResult<u8> {
    let m = Matrix::read(&a.matrix)?.validated()?;
    if a.targets.u.is_none() || a.targets.v.is_none() {
        return Err(CliError::Usage("reduce needs --u and --v".into()));
    }
    let targets = read_targets(&a.targets, m.shape(), false)?;
    let l = match a.l {
        Some(l) => l,
        None => auto_l(&targets)
            .ok_or_else(|| CliError::Usage("targets have no small common denominator; pass --l".into()))?,
    };
    let inst = ScalingInstance::new(m, targets)?;
    let ti = discretize(inst.targets(), l)?;
    let reduced = expand(&inst, &ti, a.allow_large)?;
    let prefix = g.path(&a.output);
    let with_ext = |ext: &str| {
        let mut s = prefix.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    write(&with_ext(".txt"), reduced.g.to_text())?;
    write(&with_ext(".json"), serde_json::to_string_pretty(&reduced.sidecar()).expect("plain record"))?;
    println!("L           {}", ti.l);
    println!("R           {}", ti.r);
    println!("size        {}", reduced.size());
    if let Some(steps) = a.verify {
        let rep = verify_equivalence(&inst, l, steps, a.allow_large)?;
        println!("exact       {}", rep.exact);
        println!("max_dev     {:e}", rep.max_deviation);
        println!("max_spread  {:e}", rep.max_block_spread);
    }
    Ok(0)
}

fn cmd_permanent(a: &PermanentArgs) -> CliResult<u8> {
    let m = Matrix::read(&a.matrix)?.validated()?;
    let p = permanent(&m)?;
    println!("{p:e}");
    Ok(0)
}

fn cmd_gen(g: &Globals, a: &GenArgs) -> CliResult<u8> {
    let family: Family = a.family.parse()?;
    let params = Params::parse(&a.params)?;
    let gen = generate(family, &params, g.seed)?;
    let prefix = g.out.clone().unwrap_or_else(|| PathBuf::from(family.name()));
    let with_ext = |ext: &str| {
        let mut s = prefix.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    let vec_text = |x: &[f64]| x.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join("\n") + "\n";
    if let Some(inst) = &gen.instance {
        write(&with_ext(".txt"), inst.matrix().to_text())?;
    }
    if let Some(lm) = &gen.log_matrix {
        write(&with_ext(".log.txt"), lm.to_text())?;
    }
    write(&with_ext(".u"), vec_text(gen.targets.u()))?;
    write(&with_ext(".v"), vec_text(gen.targets.v()))?;
    write(&with_ext(".json"), serde_json::to_string_pretty(&gen.sidecar()).expect("plain record"))?;
    println!("{}", json!({ "family": family.name(), "prefix": prefix.display().to_string() }));
    Ok(0)
}

fn cmd_bench(g: &Globals, a: &BenchArgs) -> CliResult<u8> {
    let mut partial = g.bench.clone();
    if let Some(e) = &a.experiment {
        partial.experiment = Some(e.parse::<ExperimentId>()?);
    }
    partial.seed = Some(g.seed);
    if a.max_iter.is_some() {
        partial.max_iter = a.max_iter;
    }
    if a.budget_secs.is_some() {
        partial.budget_secs = a.budget_secs;
    }
    if a.chart {
        partial.chart = Some(true);
    }
    let cfg = ExperimentConfig::from_partial(partial, None)?;
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let res = run_experiment(&cfg, g.threads)?;
    write(&dir.join("results.csv"), res.to_csv())?;
    write(&dir.join("timings.csv"), res.timings_csv())?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(&cfg).expect("plain record"))?;
    if cfg.chart {
        write(&dir.join("chart.svg"), res.chart().render())?;
    }
    let failures = res.failures();
    println!("experiment  {}", cfg.experiment);
    println!("cells       {}", res.rows.len());
    println!("failures    {failures}");
    Ok(if failures > 0 { EXIT_CELL_FAILURES } else { 0 })
}

fn run(cli: Cli) -> CliResult<u8> {
    let file = cli.config.as_deref().map(load_config).transpose()?.unwrap_or_default();
    let g = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        threads: cli.threads.or(file.threads).unwrap_or(0),
        out: cli.out.or(file.out),
        bench: file.bench,
    };
    match &cli.command {
        Command::Scale(a) => cmd_scale(&g, a),
        Command::Eot(a) => cmd_eot(&g, a),
        Command::Diagnose(a) => cmd_diagnose(&g, a),
        Command::Reduce(a) => cmd_reduce(&g, a),
        Command::Permanent(a) => cmd_permanent(a),
        Command::Gen(a) => cmd_gen(&g, a),
        Command::Bench(a) => cmd_bench(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
