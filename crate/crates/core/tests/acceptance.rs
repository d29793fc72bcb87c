//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sharpqn::analysis;
use sharpqn::error::Error;
use sharpqn::io::{self, ExperimentSpec, ProblemSource};
use sharpqn::kernel::{DirectionQuery, HessianApproxState};
use sharpqn::linalg::SpdMatrix;
use sharpqn::objectives::{self, Objective, QuadraticProblem};
use sharpqn::solvers::{self, Method, RunResult, SolverConfig, TerminalReason};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, Box<dyn Fn() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The twenty seeded quadratics shared by criteria 1 to 4.
fn quadratic_instances() -> Vec<(usize, f64, u64, QuadraticProblem)> {
    let shapes = [(5, 10.0), (5, 100.0), (20, 10.0), (20, 100.0), (50, 10.0), (50, 100.0)];
    (0..20u64)
        .map(|seed| {
            let (d, kappa) = shapes[seed as usize % shapes.len()];
            let p = io::synth_quadratic(d, kappa, 1000 + seed).expect("valid shape");
            (d, kappa, seed, p)
        })
        .collect()
}

fn run_quadratic(p: &QuadraticProblem, method: Method) -> RunResult {
    let cfg = SolverConfig {
        max_iters: 2000,
        ..SolverConfig::new(method)
    };
    solvers::run(p, &solvers::default_start(p.dim()), &cfg).expect("quadratic run")
}

fn sharpened_runs() -> Vec<(usize, f64, u64, RunResult)> {
    quadratic_instances()
        .into_iter()
        .map(|(d, k, s, p)| (d, k, s, run_quadratic(&p, Method::SharpenedQuadratic)))
        .collect()
}

fn criterion_1() -> Outcome {
    let mut checked = 0;
    for (d, kappa, seed, p) in quadratic_instances() {
        for method in Method::ALL.into_iter().filter(|m| m.is_quasi_newton()) {
            let run = run_quadratic(&p, method);
            for w in run.records.windows(2) {
                let (l0, l1) = (w[0].lambda.unwrap(), w[1].lambda.unwrap());
                if l0 < 1e-13 {
                    break;
                }
                let th = w[0].theta.ok_or("θ missing")?;
                let err = (l1 - th * l0).abs();
                ensure(err <= 1e-10 * l0, || {
                    format!(
                        "{method} d={d} κ={kappa} seed={seed} t={}: |λ₊ − θλ| = {err:e}, λ = {l0:e}",
                        w[0].t
                    )
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} steps across 20 instances and 5 methods"))
}

fn criterion_2() -> Outcome {
    let mut checked = 0;
    for (d, kappa, seed, run) in sharpened_runs() {
        let c = run.constants;
        let q = 1.0 - c.mu / c.lip;
        let l0 = run.lambda0().unwrap();
        for r in &run.records {
            let l = r.lambda.unwrap();
            let log_bound = r.t as f64 * q.ln() + l0.ln() + 1e-6f64.ln_1p();
            ensure(l <= 1e-300 || l.ln() <= log_bound, || {
                format!("d={d} κ={kappa} seed={seed} t={}: λ = {l:e} above envelope", r.t)
            })?;
            if let Some(th) = r.theta {
                ensure(th <= q + 1e-9, || {
                    format!("d={d} κ={kappa} seed={seed} t={}: θ = {th} > {q}", r.t)
                })?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} iterates within the linear envelope"))
}

fn criterion_3() -> Outcome {
    let mut checked = 0;
    for (d, kappa, seed, run) in sharpened_runs() {
        let c = run.constants;
        let df = c.dim as f64;
        let l0 = run.lambda0().unwrap();
        for r in run.records.iter().filter(|r| r.t >= 1) {
            let t = r.t as f64;
            let log_bound = t * (t - 1.0) / 4.0 * (1.0 - c.mu / (df * c.lip)).ln()
                + t / 2.0 * (df * c.lip / (t * c.mu)).ln()
                + l0.ln()
                + 1e-6f64.ln_1p();
            let l = r.lambda.unwrap();
            ensure(l <= 1e-300 || l.ln() <= log_bound, || {
                format!(
                    "d={d} κ={kappa} seed={seed} t={}: ln λ = {} above {log_bound}",
                    r.t,
                    l.ln()
                )
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} iterates within the superlinear envelope"))
}

fn criterion_4() -> Outcome {
    let mut worst_rec = f64::INFINITY;
    let mut worst_sum = f64::INFINITY;
    let mut sharpened = sharpened_runs();
    // The general path on a quadratic is also a Sharpened run.
    for (d, kappa, seed, p) in quadratic_instances().into_iter().take(6) {
        sharpened.push((d, kappa, seed, run_quadratic(&p, Method::SharpenedGeneral)));
    }
    for (d, kappa, seed, run) in &sharpened {
        let c = run.constants;
        let q = 1.0 - c.mu / (c.dim as f64 * c.lip);
        let s0 = run.records[0].sigma.ok_or("σ missing")?;
        let mut weighted = 0.0;
        for w in run.records.windows(2) {
            let (s, s1, th) = (
                w[0].sigma.unwrap(),
                w[1].sigma.unwrap(),
                w[0].theta.unwrap(),
            );
            let slack = q * (s - th * th) - s1;
            worst_rec = worst_rec.min(slack);
            ensure(slack >= -1e-8, || {
                format!("d={d} κ={kappa} seed={seed} t={}: recursion slack {slack:e}", w[0].t)
            })?;
            weighted += th * th / q.powi(w[0].t as i32);
            let slack = s0 - weighted;
            worst_sum = worst_sum.min(slack);
            ensure(slack >= -1e-6, || {
                format!("d={d} κ={kappa} seed={seed} t={}: weighted sum slack {slack:e}", w[0].t)
            })?;
        }
    }
    Ok(format!(
        "{} runs, worst recursion slack {worst_rec:e}, worst weighted-sum slack {worst_sum:e}",
        sharpened.len()
    ))
}

fn criterion_5() -> Outcome {
    let report = analysis::operator_property_suite(&[2, 5, 10], 10_000, 5).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for p in &report {
        ensure(p.checked > 0, || format!("{} never checked", p.name))?;
        ensure(p.min_slack >= -1e-9, || {
            format!("{}: min slack {:e}", p.name, p.min_slack)
        })?;
        parts.push(format!("{} {:.1e}", p.name, p.min_slack));
    }
    Ok(parts.join(", "))
}

fn criterion_6() -> Outcome {
    let p = io::synth_quadratic(10, 10.0, 6).map_err(|e| e.to_string())?;
    let g = SpdMatrix::scaled_identity(10, p.constants().lip);
    let mc = analysis::randomized_decrease(p.a(), &g, 10_000, 6).map_err(|e| e.to_string())?;
    let limit = mc.bound + 3.0 * mc.std_error;
    ensure(mc.mean <= limit, || {
        format!("mean σ₊ {} exceeds {limit}", mc.mean)
    })?;
    Ok(format!(
        "mean σ₊ {:.4} ≤ (1 − 1/d)σ {:.4} + 3·SE {:.4}",
        mc.mean, mc.bound, mc.std_error
    ))
}

/// Runs of the solver path followed by a 500-step stress of the two kinds of
/// intermediate update against drifting Hessians.
fn criterion_7() -> Outcome {
    let d = 50;
    let drift_tol = 1e-7 * (d as f64).sqrt();
    let ds = io::synth_logistic(600, d, 17).map_err(|e| e.to_string())?;
    let p = ds.logistic(1e-3).map_err(|e| e.to_string())?;
    let mut solver_checks = 0;
    for method in [Method::Bfgs, Method::SharpenedGeneral] {
        let cfg = SolverConfig {
            max_iters: 500,
            ..SolverConfig::new(method)
        };
        let run = solvers::run(&p, &solvers::default_start(d), &cfg).map_err(|e| e.to_string())?;
        for r in &run.records {
            if let Some(res) = r.secant_residual {
                ensure(res <= 1e-8, || format!("{method} t={}: secant residual {res:e}", r.t))?;
                solver_checks += 1;
            }
            let drift = r.inverse_drift.ok_or("drift missing")?;
            ensure(drift <= drift_tol, || format!("{method} t={}: drift {drift:e}", r.t))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = HessianApproxState::scaled_identity(d, p.constants().lip);
    let mut worst_res: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    for t in 0..500 {
        let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let hess = objectives::hessian(&p, &x).map_err(|e| e.to_string())?;
        let s = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 1e-2);
        let y = hess.mul_vec(&s);
        state.bfgs_update_secant(&s, &y).map_err(|e| e.to_string())?;
        let res = (state.g() * &s - &y).norm() / y.norm();
        worst_res = worst_res.max(res);
        ensure(res <= 1e-8, || format!("stress t={t}: secant residual {res:e}"))?;
        sharpqn::kernel::greedy_update(&mut state, &DirectionQuery::from_spd(&hess))
            .map_err(|e| e.to_string())?;
        let drift = state.inverse_drift();
        worst_drift = worst_drift.max(drift);
        ensure(drift <= drift_tol, || format!("stress t={t}: drift {drift:e}"))?;
        if (t + 1) % 10 == 0 {
            state.monitor_drift().map_err(|e| e.to_string())?;
        }
    }
    Ok(format!(
        "{solver_checks} solver secant checks; stress worst residual {worst_res:.1e}, worst drift {worst_drift:.1e}, {} refactorizations",
        state.refactorizations()
    ))
}

fn criterion_8() -> Outcome {
    let ds = io::synth_logistic(1000, 30, 7).map_err(|e| e.to_string())?;
    let p = ds.logistic(1e-3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut gauss = |scale: f64| DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    let mut worst = [0.0f64; 3];
    for _ in 0..10 {
        let x = gauss(1.0);
        let v = gauss(1.0);
        let s = gauss(0.3);
        worst[0] = worst[0].max(analysis::gradient_fd_error(&p, &x, 1e-6));
        worst[1] = worst[1].max(analysis::hess_vec_fd_error(&p, &x, &v, 1e-5));
        let j = objectives::averaged_hessian(&p, &x, &s, 21).map_err(|e| e.to_string())?;
        let y = p.gradient(&(&x + &s)) - p.gradient(&x);
        worst[2] = worst[2].max((j.mul_vec(&s) - &y).norm() / y.norm());
    }
    ensure(worst[0] <= 1e-5, || format!("gradient error {:e}", worst[0]))?;
    ensure(worst[1] <= 1e-4, || format!("Hessian-vector error {:e}", worst[1]))?;
    ensure(worst[2] <= 1e-6, || format!("secant identity error {:e}", worst[2]))?;

    let mut worst_sandwich = f64::INFINITY;
    for k in 0..100 {
        let x = gauss(2.0);
        let scale = 10f64.powf(-3.0 + 4.0 * (k as f64) / 99.0);
        let y = &x + gauss(scale);
        let sl = analysis::hessian_sandwich(&p, &x, &y, 21).map_err(|e| e.to_string())?;
        worst_sandwich = worst_sandwich.min(sl.min());
        ensure(sl.min() >= -1e-10, || format!("pair {k}: sandwich slack {:e}", sl.min()))?;
    }
    Ok(format!(
        "gradient {:.1e}, Hessian-vector {:.1e}, secant {:.1e}, sandwich min slack {worst_sandwich:.2e} (M = {:.1})",
        worst[0],
        worst[1],
        worst[2],
        p.constants().sc
    ))
}

fn criterion_9() -> Outcome {
    let ds = io::synth_logistic(1000, 30, 7).map_err(|e| e.to_string())?;
    let p = ds.logistic(1e-3).map_err(|e| e.to_string())?;
    let x0 = solvers::default_start(30);
    let budget = 1000;
    let reach = |method: Method| -> Result<Option<usize>, String> {
        let cfg = SolverConfig {
            max_iters: budget,
            correction_enabled: false,
            diagnostics: false,
            ..SolverConfig::new(method)
        };
        let run = solvers::run(&p, &x0, &cfg).map_err(|e| e.to_string())?;
        Ok(run.first_reaching(1e-10))
    };
    let sharp = reach(Method::SharpenedGeneral)?.ok_or("Sharpened never reached 1e-10")?;
    let bfgs = reach(Method::Bfgs)?.ok_or("BFGS never reached 1e-10")?;
    let greedy = reach(Method::GreedyBfgs)?.ok_or("Greedy never reached 1e-10")?;
    let gd = reach(Method::Gd)?;
    ensure(sharp <= bfgs && sharp <= greedy, || {
        format!("Sharpened {sharp}, BFGS {bfgs}, Greedy {greedy}")
    })?;
    ensure(gd.is_none(), || format!("GD reached 1e-10 at t = {}", gd.unwrap()))?;
    Ok(format!(
        "iterations to 1e-10: Sharpened {sharp}, BFGS {bfgs}, Greedy {greedy}, GD none within {budget}"
    ))
}

fn criterion_10(scratch: &Path) -> Outcome {
    let mut stalled = Vec::new();
    let mut runs_checked = 0;
    for seed in 0..3u64 {
        let spec = ExperimentSpec {
            source: ProblemSource::SyntheticQuadratic {
                d: 100,
                kappa: 100.0,
                seed,
            },
            methods: vec![Method::Bfgs, Method::GreedyBfgs, Method::SharpenedQuadratic],
            solver: SolverConfig {
                max_iters: 2000,
                ..SolverConfig::new(Method::Bfgs)
            },
            out_dir: scratch.join(format!("c10-{seed}")),
            ..ExperimentSpec::default()
        };
        let outcome = io::run_experiment(&spec).map_err(|e| e.to_string())?;
        let svg = std::fs::read_to_string(&outcome.plot).map_err(|e| e.to_string())?;
        ensure(svg.contains("<svg") && svg.matches("<polyline").count() >= 6, || {
            "plot lacks two panels of three series".into()
        })?;
        for run in &outcome.runs {
            let c = run.constants;
            let q = 1.0 - c.mu / (c.dim as f64 * c.lip);
            let sig: Vec<f64> = run.records.iter().map(|r| r.sigma.unwrap()).collect();
            match run.config.method {
                Method::SharpenedQuadratic => {
                    for (t, w) in sig.windows(2).enumerate() {
                        ensure(w[1] <= q * w[0] + 1e-8, || {
                            format!("seed {seed} t={t}: σ {} → {}", w[0], w[1])
                        })?;
                    }
                    runs_checked += 1;
                }
                Method::Bfgs => {
                    let ratio = sig.last().unwrap() / sig[0];
                    if run.terminal_reason == TerminalReason::GradTol && ratio > 0.1 {
                        stalled.push(format!("seed {seed}: σ_final/σ₀ = {ratio:.3}"));
                    }
                }
                _ => {}
            }
        }
    }
    ensure(!stalled.is_empty(), || {
        "classic BFGS drove σ towards 0 on every instance".into()
    })?;
    Ok(format!(
        "Sharpened contraction on {runs_checked} runs; BFGS stalled after convergence ({})",
        stalled.join("; ")
    ))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn criterion_11() -> Outcome {
    let info = io::known_dataset("svmguide3").ok_or("svmguide3 not registered")?;
    let ds = io::parse_libsvm(&fixture("svmguide3.txt"), None).map_err(|e| e.to_string())?;
    ensure((ds.n_samples(), ds.dim()) == (info.n_samples, info.dim), || {
        format!("fixture parsed to ({}, {})", ds.n_samples(), ds.dim())
    })?;
    let mut real = Vec::new();
    if let Ok(dir) = std::env::var(io::DATA_DIR_VAR) {
        for entry in io::KNOWN_DATASETS {
            let path = Path::new(&dir).join(entry.name);
            if path.is_file() {
                let ds = io::parse_libsvm(&path, None).map_err(|e| e.to_string())?;
                ensure((ds.n_samples(), ds.dim()) == (entry.n_samples, entry.dim), || {
                    format!("{}: parsed to ({}, {})", entry.name, ds.n_samples(), ds.dim())
                })?;
                real.push(entry.name);
            }
        }
    }
    let malformed = [
        ("malformed_order.txt", 3),
        ("malformed_token.txt", 5),
        ("malformed_zero_index.txt", 2),
        ("malformed_value.txt", 4),
        ("malformed_label.txt", 1),
    ];
    for (name, line) in malformed {
        match io::parse_libsvm(&fixture(name), None) {
            Err(Error::Parse { line: l, .. }) if l == line => {}
            other => return Err(format!("{name}: expected a parse error on line {line}, got {other:?}")),
        }
    }
    Ok(format!(
        "fixture (1243, 21); real datasets checked: {}; {} malformed fixtures rejected",
        if real.is_empty() { "none".to_string() } else { real.join(", ") },
        malformed.len()
    ))
}

fn criterion_12(scratch: &Path) -> Outcome {
    let spec_for = |dir: &str| ExperimentSpec {
        source: ProblemSource::SyntheticLogistic {
            n: 300,
            d: 12,
            seed: 3,
        },
        mu_reg: Some(1e-2),
        methods: Method::ALL.into_iter().filter(|m| *m != Method::SharpenedQuadratic).collect(),
        solver: SolverConfig {
            max_iters: 150,
            rng_seed: 11,
            ..SolverConfig::new(Method::Bfgs)
        },
        out_dir: scratch.join(dir),
        threads: 1,
        ..ExperimentSpec::default()
    };
    let a = io::run_experiment(&spec_for("c12-a")).map_err(|e| e.to_string())?;
    let b = io::run_experiment(&spec_for("c12-b")).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (da, db) in a.run_dirs.iter().zip(&b.run_dirs) {
        let ta = std::fs::read(da.join(io::TRACE_FILE)).map_err(|e| e.to_string())?;
        let tb = std::fs::read(db.join(io::TRACE_FILE)).map_err(|e| e.to_string())?;
        ensure(ta == tb, || format!("{} differs", da.display()))?;
        compared += 1;
    }
    ensure(compared == 5, || format!("only {compared} traces compared"))?;
    Ok(format!("{compared} traces byte-identical"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let criteria: Vec<Criterion> = vec![
        ("1 quadratic exactness", Duration::from_secs(5), Box::new(criterion_1)),
        ("2 linear envelope", Duration::from_secs(5), Box::new(criterion_2)),
        ("3 superlinear envelope", Duration::from_secs(5), Box::new(criterion_3)),
        ("4 potential recursion", Duration::MAX, Box::new(criterion_4)),
        ("5 operator properties", Duration::from_secs(30), Box::new(criterion_5)),
        ("6 randomized decrease", Duration::from_secs(30), Box::new(criterion_6)),
        ("7 secant and inverse maintenance", Duration::MAX, Box::new(criterion_7)),
        ("8 oracle correctness", Duration::MAX, Box::new(criterion_8)),
        ("9 method ordering", Duration::from_secs(60), Box::new(criterion_9)),
        ("10 approximation error structure", Duration::MAX, {
            let dir = scratch.path().to_path_buf();
            Box::new(move || criterion_10(&dir))
        }),
        ("11 dataset ingestion", Duration::MAX, Box::new(criterion_11)),
        ("12 determinism", Duration::MAX, {
            let dir = scratch.path().to_path_buf();
            Box::new(move || criterion_12(&dir))
        }),
    ];
    let mut failures = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *budget => Err(format!(
                "{detail}; took {:.2}s over the {:.0}s budget",
                elapsed.as_secs_f64(),
                budget.as_secs_f64()
            )),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
