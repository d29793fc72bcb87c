//! Iterate generators. Every quasi-Newton method takes unit steps
//! `x₊ = x − H∇f(x)` from `G₀ = L·I`; they differ only in how `G` is
//! corrected after each step. Gradient descent uses the step `1/L`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::debug;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, DirectionQuery, HessianApproxState};
use crate::linalg::{self, SpdMatrix};
use crate::objectives::{self, Objective, ProblemConstants};

/// `H` is checked against `G` (and refactored on drift) this often.
const DRIFT_CHECK_STRIDE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gd,
    Bfgs,
    GreedyBfgs,
    SharpenedQuadratic,
    SharpenedGeneral,
    SharpenedRandomized,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Gd,
        Method::Bfgs,
        Method::GreedyBfgs,
        Method::SharpenedQuadratic,
        Method::SharpenedGeneral,
        Method::SharpenedRandomized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Bfgs => "bfgs",
            Method::GreedyBfgs => "greedy-bfgs",
            Method::SharpenedQuadratic => "sharpened-quadratic",
            Method::SharpenedGeneral => "sharpened-general",
            Method::SharpenedRandomized => "sharpened-randomized",
        }
    }

    pub fn is_quasi_newton(self) -> bool {
        self != Method::Gd
    }

    pub fn is_sharpened(self) -> bool {
        matches!(
            self,
            Method::SharpenedQuadratic | Method::SharpenedGeneral | Method::SharpenedRandomized
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.trim().to_ascii_lowercase().as_str() {
            "gd" => Method::Gd,
            "bfgs" => Method::Bfgs,
            "greedy" | "greedy-bfgs" => Method::GreedyBfgs,
            "sharpened-quadratic" => Method::SharpenedQuadratic,
            "sharpened" | "sharpened-general" => Method::SharpenedGeneral,
            "randomized" | "sharpened-randomized" => Method::SharpenedRandomized,
            other => return Err(Error::InvalidSpec(format!("unknown method '{other}'"))),
        };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop once `‖∇f‖` falls to this level; `None` means
    /// `1e-12 · max(1, ‖∇f(x₀)‖)`.
    pub tol_grad: Option<f64>,
    /// Stop once `λ_t` falls to this level; 0 disables the test.
    pub tol_lambda: f64,
    /// Inflate `Ḡ_t` by `(1 + M r_t / 2)²` before the second update.
    pub correction_enabled: bool,
    pub rng_seed: u64,
    /// Record `σ_t`, `θ_t`, the generalized spectrum of `(G_t, ∇²f(x_t))`,
    /// the secant residual and `‖G_t H_t − I‖_F`.
    pub diagnostics: bool,
    /// `λ_t` (and the diagnostics) are evaluated every this many iterations.
    pub diagnostics_stride: usize,
    pub quadrature_nodes: usize,
    /// On non-quadratic problems, evaluate `θ(J_t, G_t, s_t)` with a
    /// quadrature of the averaged Hessian.
    pub theta_general: bool,
    pub record_x: bool,
    pub record_timing: bool,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            max_iters: 1000,
            tol_grad: None,
            tol_lambda: 0.0,
            correction_enabled: false,
            rng_seed: 0,
            diagnostics: true,
            diagnostics_stride: 1,
            quadrature_nodes: 21,
            theta_general: false,
            record_x: false,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidSpec("max_iters must be at least 1".into()));
        }
        if self.tol_grad.is_some_and(|t| !(t >= 0.0)) || !(self.tol_lambda >= 0.0) {
            return Err(Error::InvalidSpec("tolerances must be non-negative".into()));
        }
        if self.diagnostics_stride == 0 {
            return Err(Error::InvalidSpec("diagnostics_stride must be at least 1".into()));
        }
        if self.quadrature_nodes < 3 || self.quadrature_nodes.is_multiple_of(2) {
            return Err(Error::InvalidSpec(
                "quadrature_nodes must be odd and at least 3".into(),
            ));
        }
        Ok(())
    }
}

/// State at `x_t` plus quantities of the step taken from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub x: Option<Vec<f64>>,
    pub f: f64,
    pub grad_norm: f64,
    /// Newton decrement `λ_t`.
    pub lambda: Option<f64>,
    /// `σ(∇²f(x_t), G_t)`.
    pub sigma: Option<f64>,
    /// `θ(J_t, G_t, s_t)`; equals `theta_local` on quadratics.
    pub theta: Option<f64>,
    /// `r_t = ‖s_t‖_{x_t}`.
    pub r: Option<f64>,
    pub wall_nanos: Option<u64>,
    /// `θ(∇²f(x_t), G_t, s_t)`.
    pub theta_local: Option<f64>,
    /// Extreme generalized eigenvalues of `G_t` relative to `∇²f(x_t)`.
    pub gen_eig_min: Option<f64>,
    pub gen_eig_max: Option<f64>,
    /// `‖Ḡ_t s_t − y_t‖ / ‖y_t‖` after the secant update.
    pub secant_residual: Option<f64>,
    /// `‖G_t H_t − I‖_F`.
    pub inverse_drift: Option<f64>,
    pub skipped_update: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalReason {
    GradTol,
    LambdaTol,
    MaxIters,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub terminal_reason: TerminalReason,
    pub config: SolverConfig,
    pub fingerprint: String,
    pub constants: ProblemConstants,
    pub quadratic: bool,
    pub failure: Option<String>,
}

impl RunResult {
    pub fn lambda0(&self) -> Option<f64> {
        self.records.first().and_then(|r| r.lambda)
    }

    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.t)
    }

    /// First `t` with `λ_t / λ₀ ≤ ratio`.
    pub fn first_reaching(&self, ratio: f64) -> Option<usize> {
        let l0 = self.lambda0()?;
        self.records
            .iter()
            .find(|r| r.lambda.is_some_and(|l| l <= ratio * l0))
            .map(|r| r.t)
    }
}

/// `x₀ = d^{-3/2} · 1`.
pub fn default_start(dim: usize) -> DVector<f64> {
    DVector::from_element(dim, (dim as f64).powf(-1.5))
}

/// Default gradient stopping level for a run starting with gradient `g0`.
pub fn default_tol_grad(g0_norm: f64) -> f64 {
    1e-12 * g0_norm.max(1.0)
}

pub fn run_gd(oracle: &dyn Objective, x0: &DVector<f64>, config: &SolverConfig) -> Result<RunResult> {
    run_as(Method::Gd, oracle, x0, config)
}

pub fn run_bfgs(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    run_as(Method::Bfgs, oracle, x0, config)
}

pub fn run_greedy_bfgs(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    run_as(Method::GreedyBfgs, oracle, x0, config)
}

pub fn run_sharpened_quadratic(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    run_as(Method::SharpenedQuadratic, oracle, x0, config)
}

pub fn run_sharpened_general(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    run_as(Method::SharpenedGeneral, oracle, x0, config)
}

pub fn run_sharpened_randomized(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    run_as(Method::SharpenedRandomized, oracle, x0, config)
}

fn run_as(
    method: Method,
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<RunResult> {
    let mut config = config.clone();
    config.method = method;
    run(oracle, x0, &config)
}

/// Runs several configurations on a shared problem using at most `threads`
/// workers. Results come back in input order.
pub fn run_many(
    oracle: &dyn Objective,
    x0: &DVector<f64>,
    configs: &[SolverConfig],
    threads: usize,
) -> Vec<Result<RunResult>> {
    if threads <= 1 || configs.len() <= 1 {
        return configs.iter().map(|c| run(oracle, x0, c)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| configs.par_iter().map(|c| run(oracle, x0, c)).collect())
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn unit(dim: usize, i: usize) -> DVector<f64> {
    let mut e = DVector::zeros(dim);
    e[i] = 1.0;
    e
}

/// Outcome of the Hessian-approximation update of one iteration.
struct UpdateOutcome {
    skipped: bool,
    secant_residual: Option<f64>,
}

struct Engine<'a> {
    oracle: &'a dyn Objective,
    config: &'a SolverConfig,
    constants: ProblemConstants,
    state: HessianApproxState,
    rng: ChaCha8Rng,
}

impl Engine<'_> {
    /// Corrects `G_t` into `G_{t+1}` after the step `s` from `x` to `x_new`.
    fn update(
        &mut self,
        x: &DVector<f64>,
        x_new: &DVector<f64>,
        s: &DVector<f64>,
        y: &DVector<f64>,
        r: f64,
    ) -> Result<UpdateOutcome> {
        let mut out = UpdateOutcome {
            skipped: false,
            secant_residual: None,
        };
        let method = self.config.method;
        let oracle = self.oracle;

        // First correction: along the step.
        match method {
            Method::Gd => return Ok(out),
            Method::GreedyBfgs => {}
            Method::SharpenedQuadratic => {
                let a = oracle.fixed_hessian().expect("checked before the run");
                let au = a.mul_vec(s);
                out.skipped |= skip_on_degenerate(self.state.bfgs_update(&au, s))?;
                if !out.skipped && self.config.diagnostics {
                    out.secant_residual = Some((self.state.g() * s - &au).norm() / au.norm());
                }
            }
            Method::Bfgs | Method::SharpenedGeneral | Method::SharpenedRandomized => {
                out.skipped |= skip_on_degenerate(self.state.bfgs_update_secant(s, y))?;
                if !out.skipped && self.config.diagnostics {
                    out.secant_residual = Some((self.state.g() * s - y).norm() / y.norm());
                }
            }
        }
        if method == Method::Bfgs {
            return Ok(out);
        }

        // Correction `Ĝ = (1 + M r / 2)² Ḡ`.
        if self.config.correction_enabled && method != Method::SharpenedQuadratic {
            let factor = (1.0 + self.constants.sc * r / 2.0).powi(2);
            self.state.scale(factor)?;
        }

        // Second correction: towards ∇²f(x_{t+1}).
        let d = self.state.dim();
        match method {
            Method::GreedyBfgs | Method::SharpenedQuadratic | Method::SharpenedGeneral => {
                let query = match oracle.fixed_hessian() {
                    Some(a) => DirectionQuery::from_spd(a),
                    None => DirectionQuery::new(oracle.hess_diag(x_new), |i| {
                        oracle.hess_vec(x_new, &unit(d, i))
                    })?,
                };
                out.skipped |= skip_on_degenerate(kernel::greedy_update(&mut self.state, &query).map(|_| ()))?;
            }
            Method::SharpenedRandomized => {
                let r_factor = linalg::cholesky(&self.state.g_spd()?)?;
                let u = kernel::random_direction(&r_factor, &mut self.rng);
                let au = oracle.hess_vec(x_new, &u);
                out.skipped |= skip_on_degenerate(self.state.bfgs_update(&au, &u))?;
            }
            Method::Gd | Method::Bfgs => unreachable!(),
        }
        let _ = x;
        Ok(out)
    }
}

/// Maps a skipped update to `true`, passes other errors through.
fn skip_on_degenerate(res: Result<()>) -> Result<bool> {
    match res {
        Ok(()) => Ok(false),
        Err(Error::DegenerateDirection { .. } | Error::CurvatureSkip { .. }) => Ok(true),
        Err(e) => Err(e),
    }
}

/// Runs `config.method` from `x0`.
pub fn run(oracle: &dyn Objective, x0: &DVector<f64>, config: &SolverConfig) -> Result<RunResult> {
    config.validate()?;
    let d = oracle.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x0.len(),
        });
    }
    let quadratic = oracle.fixed_hessian().is_some();
    if config.method == Method::SharpenedQuadratic && !quadratic {
        return Err(Error::InvalidSpec(
            "sharpened-quadratic needs a quadratic objective".into(),
        ));
    }
    let constants = oracle.constants();
    let mut engine = Engine {
        oracle,
        config,
        constants,
        state: HessianApproxState::scaled_identity(d, constants.lip),
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
    };

    let start = Instant::now();
    let mut x = x0.clone();
    let mut g = oracle.gradient(&x);
    let tol_grad = config.tol_grad.unwrap_or_else(|| default_tol_grad(g.norm()));
    let mut records = Vec::new();
    let mut failure = None;
    let qn = config.method.is_quasi_newton();

    let terminal_reason = 'outer: {
        for t in 0.. {
            let grad_norm = g.norm();
            let mut rec = IterationRecord {
                t,
                x: config.record_x.then(|| x.iter().copied().collect()),
                f: oracle.value(&x),
                grad_norm,
                ..Default::default()
            };
            if !rec.f.is_finite() || !grad_norm.is_finite() || !finite(&x) {
                failure = Some(format!("non-finite iterate at t = {t}"));
                break 'outer TerminalReason::NumericalFailure;
            }

            let observe = t % config.diagnostics_stride == 0;
            let hess = if observe || config.tol_lambda > 0.0 {
                match objectives::hessian(oracle, &x) {
                    Ok(h) => Some(h),
                    Err(e) => {
                        failure = Some(format!("Hessian at t = {t}: {e}"));
                        break 'outer TerminalReason::NumericalFailure;
                    }
                }
            } else {
                None
            };
            if let Some(h) = &hess {
                rec.lambda = Some(objectives::newton_decrement_at(h, &g)?);
                if config.diagnostics && qn && observe {
                    observe_state(&mut rec, h, &engine.state);
                }
            }

            if grad_norm <= tol_grad {
                records.push(rec);
                break 'outer TerminalReason::GradTol;
            }
            if config.tol_lambda > 0.0 && rec.lambda.is_some_and(|l| l <= config.tol_lambda) {
                records.push(rec);
                break 'outer TerminalReason::LambdaTol;
            }
            if t >= config.max_iters {
                records.push(rec);
                break 'outer TerminalReason::MaxIters;
            }

            let s = if qn {
                -engine.state.apply_inverse(&g)
            } else {
                &g * (-1.0 / constants.lip)
            };
            let x_new = &x + &s;
            let g_new = oracle.gradient_after_step(&x_new, &g, &s);
            if !finite(&x_new) || !finite(&g_new) {
                records.push(rec);
                failure = Some(format!("non-finite step at t = {t}"));
                break 'outer TerminalReason::NumericalFailure;
            }

            let r = objectives::local_norm(oracle, &x, &s);
            rec.r = Some(r);
            if let (Some(h), true) = (&hess, config.diagnostics && qn && observe) {
                rec.theta_local = kernel::theta(h, engine.state.g(), &s).ok();
                rec.theta = if quadratic {
                    rec.theta_local
                } else if config.theta_general {
                    objectives::averaged_hessian(oracle, &x, &s, config.quadrature_nodes)
                        .and_then(|j| kernel::theta(&j, engine.state.g(), &s))
                        .ok()
                } else {
                    None
                };
            }

            let y = &g_new - &g;
            match engine.update(&x, &x_new, &s, &y, r) {
                Ok(out) => {
                    rec.skipped_update = out.skipped;
                    rec.secant_residual = out.secant_residual;
                }
                Err(e) => {
                    records.push(rec);
                    failure = Some(format!("update at t = {t}: {e}"));
                    break 'outer TerminalReason::NumericalFailure;
                }
            }
            if qn && (t + 1) % DRIFT_CHECK_STRIDE == 0 {
                if let Err(e) = engine.state.monitor_drift() {
                    records.push(rec);
                    failure = Some(format!("refactorization at t = {t}: {e}"));
                    break 'outer TerminalReason::NumericalFailure;
                }
            }
            if config.record_timing {
                rec.wall_nanos = Some(start.elapsed().as_nanos() as u64);
            }
            records.push(rec);
            x = x_new;
            g = g_new;
        }
        unreachable!("loop exits through break")
    };

    if let Some(msg) = &failure {
        debug!("{} stopped: {msg}", config.method);
    }
    if records.is_empty() {
        return Err(Error::NumericalFailure(
            failure.unwrap_or_else(|| "no iterations recorded".into()),
        ));
    }
    Ok(RunResult {
        records,
        terminal_reason,
        config: config.clone(),
        fingerprint: oracle.fingerprint(),
        constants,
        quadratic,
        failure,
    })
}

/// Fills the state-dependent diagnostics of `rec` against `hess = ∇²f(x_t)`.
fn observe_state(rec: &mut IterationRecord, hess: &SpdMatrix, state: &HessianApproxState) {
    rec.sigma = kernel::sigma(hess, state.g()).ok();
    if let Ok((lo, hi)) = linalg::generalized_eigen_range(hess, state.g()) {
        rec.gen_eig_min = Some(lo);
        rec.gen_eig_max = Some(hi);
    }
    rec.inverse_drift = Some(state.inverse_drift());
}
