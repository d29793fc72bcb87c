//! Command-line front end: `run`, `certify`, `bench` and `selftest`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{self, CheckStatus, Tolerances};
use crate::error::{Error, Result};
use crate::io::{self, ExperimentSpec};
use crate::linalg::SpdMatrix;
use crate::objectives::Objective;
use crate::solvers::{self, Method, SolverConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CERTIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping run-level parallelism.
pub const THREADS_VAR: &str = "QN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sharpqn", version, about = "Dense quasi-Newton solvers with convergence certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write traces, summaries, certificates and a plot.
    Run(RunArgs),
    /// Re-certify the traces of an earlier run.
    Certify {
        /// An output directory of `run`, or one method directory inside it.
        dir: PathBuf,
    },
    /// Iteration counts and wall time over a grid of synthetic quadratics.
    Bench(BenchArgs),
    /// Run the embedded property checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_str(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method name, comma list or `all`; repeatable.
    #[arg(long)]
    method: Vec<String>,
    /// Dataset file, known dataset name, `synthetic-quadratic` or
    /// `synthetic-logistic`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    correction: Option<Switch>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_enum)]
    diagnostics: Option<Switch>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any further config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![10, 50, 100])]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 100.0])]
    kappas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Also write `bench.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command; returns the exit
/// code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Certify { dir } => cmd_certify(&dir),
        Command::Bench(a) => cmd_bench(a),
        Command::Selftest => cmd_selftest(),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidSpec(_) | Error::Parse { .. } => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::InvalidSpec(format!("{THREADS_VAR} must be a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn build_spec(a: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = match &a.config {
        Some(path) => ExperimentSpec::parse_config(&fs::read_to_string(path)?)?,
        None => ExperimentSpec::default(),
    };
    spec.threads = threads_from_env()?;
    if let Some(d) = &a.dataset {
        spec.set("dataset", d)?;
    }
    if let Some(mu) = a.mu {
        spec.mu_reg = Some(mu);
    }
    if let Some(seed) = a.seed {
        spec.set("seed", &seed.to_string())?;
    }
    if !a.method.is_empty() {
        spec.set("methods", &a.method.join(","))?;
    }
    if let Some(c) = a.correction {
        spec.set("correction", c.as_str())?;
    }
    if let Some(n) = a.max_iters {
        spec.solver.max_iters = n;
    }
    if let Some(d) = a.diagnostics {
        spec.set("diagnostics", d.as_str())?;
    }
    if let Some(out) = &a.out {
        spec.out_dir = out.clone();
    }
    for kv in &a.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidSpec(format!("--set expects key=value, got '{kv}'")))?;
        spec.set(k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

fn cmd_run(a: RunArgs) -> Result<i32> {
    let spec = build_spec(&a)?;
    let outcome = io::run_experiment(&spec)?;
    println!("problem: {}", outcome.problem);
    println!(
        "{:<22} {:>7} {:>12} {:>10} {:>12}",
        "method", "iters", "stop", "to 1e-10", "certified"
    );
    for (run, report) in outcome.runs.iter().zip(&outcome.reports) {
        println!(
            "{:<22} {:>7} {:>12} {:>10} {:>12}",
            run.config.method.name(),
            run.iterations(),
            format!("{:?}", run.terminal_reason),
            fmt_opt(run.first_reaching(1e-10)),
            if report.passed { "yes" } else { "NO" }
        );
        for name in report.failed_checks() {
            println!("    failed: {name}");
        }
    }
    println!("artifacts: {}", spec.out_dir.display());
    Ok(if outcome.all_certified() {
        EXIT_OK
    } else {
        EXIT_CERTIFICATION
    })
}

fn cmd_certify(dir: &std::path::Path) -> Result<i32> {
    let run_dirs = io::find_run_dirs(dir)?;
    if run_dirs.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "no run directories under {}",
            dir.display()
        )));
    }
    let mut all_passed = true;
    for run_dir in run_dirs {
        let run = io::load_run(&run_dir)?;
        let report = analysis::certify_run(&run, &Tolerances::default());
        let evaluated: Vec<String> = report
            .checks
            .iter()
            .filter(|(_, c)| c.status != CheckStatus::NotApplicable)
            .map(|(k, c)| format!("{k}={:?}", c.status))
            .collect();
        println!(
            "{}: {} ({})",
            run_dir.display(),
            if report.passed { "pass" } else { "FAIL" },
            evaluated.join(" ")
        );
        for name in report.failed_checks() {
            let c = &report.checks[name];
            if let Some(v) = c.violations.first() {
                println!("    {name}: first violation at t={} slack {:e}", v.t, v.slack);
            }
        }
        all_passed &= report.passed;
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_CERTIFICATION })
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let methods = [Method::Bfgs, Method::GreedyBfgs, Method::SharpenedQuadratic];
    let mut csv = String::from("d,kappa,method,iterations,to_1e-10,wall_ms\n");
    println!(
        "{:>5} {:>8} {:<22} {:>7} {:>10} {:>10}",
        "d", "kappa", "method", "iters", "to 1e-10", "ms"
    );
    for &d in &a.dims {
        for &kappa in &a.kappas {
            let p = io::synth_quadratic(d, kappa, a.seed)?;
            let x0 = solvers::default_start(d);
            for m in methods {
                let cfg = SolverConfig {
                    max_iters: a.max_iters,
                    diagnostics: false,
                    ..SolverConfig::new(m)
                };
                let start = Instant::now();
                let run = solvers::run(&p, &x0, &cfg)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let to = run.first_reaching(1e-10);
                println!(
                    "{d:>5} {kappa:>8} {:<22} {:>7} {:>10} {ms:>10.1}",
                    m.name(),
                    run.iterations(),
                    fmt_opt(to)
                );
                let _ = writeln!(
                    csv,
                    "{d},{kappa},{},{},{},{ms:.3}",
                    m.name(),
                    run.iterations(),
                    to.map(|t| t.to_string()).unwrap_or_default()
                );
            }
        }
    }
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("bench.csv"), csv)?;
    }
    Ok(EXIT_OK)
}

/// One named selftest outcome.
struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn selftest_checks() -> Result<Vec<Outcome>> {
    let mut out = Vec::new();

    let props = analysis::operator_property_suite(&[2, 5, 10], 300, 1)?;
    let worst = props.iter().map(|p| p.min_slack).fold(f64::INFINITY, f64::min);
    out.push(Outcome {
        name: "operator properties",
        passed: worst >= -1e-9,
        detail: format!("min slack {worst:e}"),
    });

    let p = io::synth_quadratic(20, 100.0, 1)?;
    let run = solvers::run(
        &p,
        &solvers::default_start(20),
        &SolverConfig::new(Method::SharpenedQuadratic),
    )?;
    let report = analysis::certify_run(&run, &Tolerances::default());
    out.push(Outcome {
        name: "quadratic run certification",
        passed: report.passed && report.complete,
        detail: format!("{} iterations", run.iterations()),
    });

    let ds = io::synth_logistic(200, 8, 3)?;
    let lp = ds.logistic(1e-2)?;
    let x = solvers::default_start(8).map(|v| v * 50.0);
    let v = nalgebra::DVector::from_fn(8, |i, _| (i as f64 + 1.0).sin());
    let ge = analysis::gradient_fd_error(&lp, &x, 1e-6);
    let he = analysis::hess_vec_fd_error(&lp, &x, &v, 1e-5);
    out.push(Outcome {
        name: "logistic derivatives",
        passed: ge <= 1e-5 && he <= 1e-4,
        detail: format!("gradient {ge:e}, hessian-vector {he:e}"),
    });

    let a = SpdMatrix::from_diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0])?;
    let g = SpdMatrix::scaled_identity(5, 6.0);
    let mc = analysis::randomized_decrease(&a, &g, 2000, 5)?;
    out.push(Outcome {
        name: "randomized decrease",
        passed: mc.mean <= mc.bound + 3.0 * mc.std_error,
        detail: format!("mean {:.4} bound {:.4}", mc.mean, mc.bound),
    });

    let c = lp.constants();
    let env = analysis::RateEnvelope::new(analysis::EnvelopeKind::SuperlinearQuadCase, c, 1.0);
    let t0 = (c.dim as f64 * c.kappa()).ceil() as usize;
    out.push(Outcome {
        name: "envelope threshold",
        passed: env.log_factor(t0) <= 0.0,
        detail: format!("log envelope at t={t0}: {:e}", env.log_factor(t0)),
    });
    Ok(out)
}

fn cmd_selftest() -> Result<i32> {
    let checks = selftest_checks()?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(if ok { EXIT_OK } else { EXIT_CERTIFICATION })
}
