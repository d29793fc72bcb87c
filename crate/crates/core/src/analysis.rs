//! Rate envelopes and post-hoc certification of recorded runs.
//!
//! Envelopes are evaluated in log-space. Certification walks the records of
//! a [`RunResult`] and evaluates every inequality whose inputs were recorded;
//! an inequality without its inputs is `NotEvaluated`, never `Pass`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, DirectionQuery, HessianApproxState};
use crate::linalg::{self, SpdMatrix};
use crate::objectives::{self, Objective, ProblemConstants};
use crate::solvers::{IterationRecord, Method, RunResult};

/// `¼ ln(3/2)`.
pub const C0: f64 = 0.101_366_277_027_041_1;
/// `ln 2 / 20`.
pub const C1: f64 = 0.034_657_359_027_997_26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeKind {
    /// `(1 − μ/L)^t`
    LinearQuadCase,
    /// `(1 − μ/(dL))^{t(t−1)/4} (dL/(tμ))^{t/2}`
    SuperlinearQuadCase,
    /// `(1 − μ/(2L))^t`
    LinearGeneral,
    /// `2 (1 − μ/(2dL))^{t(t−1)/4} (8dL/(tμ))^{t/2}`
    SuperlinearGeneral,
    /// `2 (1 − 1/(2d))^{t(t−1)/4} (8dL/(tμ))^{t/2}`
    SuperlinearRandomized,
    /// `(d ln κ / t)^{t/2}`
    BfgsBaseline,
    /// `(dκ (1 − 1/(dκ))^{t/2})^t`
    GreedyBaseline,
}

impl EnvelopeKind {
    pub const ALL: [EnvelopeKind; 7] = [
        EnvelopeKind::LinearQuadCase,
        EnvelopeKind::SuperlinearQuadCase,
        EnvelopeKind::LinearGeneral,
        EnvelopeKind::SuperlinearGeneral,
        EnvelopeKind::SuperlinearRandomized,
        EnvelopeKind::BfgsBaseline,
        EnvelopeKind::GreedyBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvelopeKind::LinearQuadCase => "linear-quad",
            EnvelopeKind::SuperlinearQuadCase => "superlinear-quad",
            EnvelopeKind::LinearGeneral => "linear-general",
            EnvelopeKind::SuperlinearGeneral => "superlinear-general",
            EnvelopeKind::SuperlinearRandomized => "superlinear-randomized",
            EnvelopeKind::BfgsBaseline => "bfgs-baseline",
            EnvelopeKind::GreedyBaseline => "greedy-baseline",
        }
    }
}

impl fmt::Display for EnvelopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvelopeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        EnvelopeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown envelope '{s}'")))
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEnvelope {
    pub kind: EnvelopeKind,
    pub constants: ProblemConstants,
    pub lambda0: f64,
}

impl RateEnvelope {
    pub fn new(kind: EnvelopeKind, constants: ProblemConstants, lambda0: f64) -> Self {
        Self {
            kind,
            constants,
            lambda0,
        }
    }

    /// Natural log of the envelope divided by `λ₀`.
    pub fn log_factor(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let ProblemConstants { mu, lip, dim, .. } = self.constants;
        let d = dim as f64;
        let tf = t as f64;
        let kappa = lip / mu;
        let pairs = tf * (tf - 1.0) / 4.0;
        let terms: Vec<f64> = match self.kind {
            EnvelopeKind::LinearQuadCase => vec![tf * (-mu / lip).ln_1p()],
            EnvelopeKind::SuperlinearQuadCase => vec![
                pairs * (-mu / (d * lip)).ln_1p(),
                tf / 2.0 * (d * lip / (tf * mu)).ln(),
            ],
            EnvelopeKind::LinearGeneral => vec![tf * (-mu / (2.0 * lip)).ln_1p()],
            EnvelopeKind::SuperlinearGeneral => vec![
                std::f64::consts::LN_2,
                pairs * (-mu / (2.0 * d * lip)).ln_1p(),
                tf / 2.0 * (8.0 * d * lip / (tf * mu)).ln(),
            ],
            EnvelopeKind::SuperlinearRandomized => vec![
                std::f64::consts::LN_2,
                pairs * (-1.0 / (2.0 * d)).ln_1p(),
                tf / 2.0 * (8.0 * d * lip / (tf * mu)).ln(),
            ],
            EnvelopeKind::BfgsBaseline => vec![tf / 2.0 * (d * kappa.ln() / tf).ln()],
            EnvelopeKind::GreedyBaseline => vec![
                tf * (d * kappa).ln(),
                tf * tf / 2.0 * (-1.0 / (d * kappa)).ln_1p(),
            ],
        };
        compensated_sum(&terms)
    }

    pub fn log_value(&self, t: usize) -> f64 {
        self.log_factor(t) + self.lambda0.ln()
    }

    /// Linear value; underflows to 0 and overflows to `inf` when the log
    /// value is outside the representable range.
    pub fn value(&self, t: usize) -> f64 {
        self.log_value(t).exp()
    }
}

/// First index `t ≤ t_max` at which `lower` drops strictly below `upper`,
/// together with the last index of the window that starts there.
pub fn crossover_window(
    lower: EnvelopeKind,
    upper: EnvelopeKind,
    constants: ProblemConstants,
    t_max: usize,
) -> Option<(usize, usize)> {
    let a = RateEnvelope::new(lower, constants, 1.0);
    let b = RateEnvelope::new(upper, constants, 1.0);
    let below = |t: usize| a.log_factor(t) < b.log_factor(t);
    let first = (1..=t_max).find(|&t| below(t))?;
    let last = (first..=t_max)
        .take_while(|&t| below(t))
        .last()
        .unwrap_or(first);
    Some((first, last))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Locality {
    InsideSuperlinearBall,
    InsideLinearBall,
    Outside,
}

/// Linear-phase radius `C₀ μ / (M L)`.
pub fn linear_radius(c: &ProblemConstants) -> f64 {
    C0 * c.mu / (c.sc * c.lip)
}

/// Superlinear-phase radius `C₁ μ / (d M L)`.
pub fn superlinear_radius(c: &ProblemConstants) -> f64 {
    C1 * c.mu / (c.dim as f64 * c.sc * c.lip)
}

/// Classifies `λ₀` against both radii; both comparisons are inclusive.
pub fn locality_check(constants: &ProblemConstants, lambda0: f64) -> Result<Locality> {
    if !(constants.sc > 0.0) {
        return Err(Error::Domain(format!(
            "locality radii need M > 0, got {}",
            constants.sc
        )));
    }
    Ok(if lambda0 <= superlinear_radius(constants) {
        Locality::InsideSuperlinearBall
    } else if lambda0 <= linear_radius(constants) {
        Locality::InsideLinearBall
    } else {
        Locality::Outside
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    HypothesisFailed,
    NotEvaluated,
    NotApplicable,
}

/// One inequality at one iteration: `lhs ≤ rhs` up to `tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub status: CheckStatus,
    /// Failures of advisory checks are reported but do not fail the run.
    pub advisory: bool,
    pub evaluated: usize,
    pub hypothesis_failed: usize,
    pub worst_slack: Option<f64>,
    pub violations: Vec<Evaluation>,
    pub evaluations: Vec<Evaluation>,
}

impl CheckResult {
    fn fixed(status: CheckStatus) -> Self {
        Self {
            status,
            advisory: false,
            evaluated: 0,
            hypothesis_failed: 0,
            worst_slack: None,
            violations: Vec::new(),
            evaluations: Vec::new(),
        }
    }

    fn from_evaluations(evaluations: Vec<Evaluation>, advisory: bool) -> Self {
        let fails: Vec<Evaluation> = evaluations
            .iter()
            .filter(|e| e.status == CheckStatus::Fail)
            .cloned()
            .collect();
        let passes = evaluations
            .iter()
            .filter(|e| e.status == CheckStatus::Pass)
            .count();
        let hypothesis_failed = evaluations
            .iter()
            .filter(|e| e.status == CheckStatus::HypothesisFailed)
            .count();
        let worst_slack = evaluations
            .iter()
            .filter(|e| e.status != CheckStatus::HypothesisFailed)
            .map(|e| e.slack)
            .reduce(f64::min);
        let status = if !fails.is_empty() {
            CheckStatus::Fail
        } else if passes > 0 {
            CheckStatus::Pass
        } else if hypothesis_failed > 0 {
            CheckStatus::HypothesisFailed
        } else {
            CheckStatus::NotEvaluated
        };
        Self {
            status,
            advisory,
            evaluated: evaluations.len(),
            hypothesis_failed,
            worst_slack,
            violations: fails,
            evaluations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Absolute slack for scalar inequalities.
    pub abs: f64,
    /// Relative slack for envelope comparisons.
    pub envelope_rel: f64,
    /// Measured values at or below this always satisfy an envelope.
    pub floor: f64,
    /// Allowed violation of `A ⪯ G` before a hypothesis counts as failed.
    pub hypothesis: f64,
    /// Relative tolerance of the quadratic decrement identity.
    pub identity_rel: f64,
    /// The identity is not checked once `λ_t` falls below this.
    pub identity_floor: f64,
    pub theta_abs: f64,
    pub weighted_sum_abs: f64,
    /// Allowed excess of the largest generalized eigenvalue over `L/μ`.
    pub upper_ratio_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            abs: 1e-8,
            envelope_rel: 1e-6,
            floor: 1e-300,
            hypothesis: 1e-8,
            identity_rel: 1e-10,
            identity_floor: 1e-13,
            theta_abs: 1e-9,
            weighted_sum_abs: 1e-6,
            upper_ratio_abs: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub method: Method,
    pub fingerprint: String,
    pub quadratic: bool,
    pub locality: Option<Locality>,
    /// No non-advisory check failed.
    pub passed: bool,
    /// Every applicable check was evaluated at least once.
    pub complete: bool,
    pub tolerances: Tolerances,
    pub checks: BTreeMap<String, CheckResult>,
}

impl CertificationReport {
    pub fn status(&self, name: &str) -> Option<CheckStatus> {
        self.checks.get(name).map(|c| c.status)
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|(_, c)| c.status == CheckStatus::Fail && !c.advisory)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

pub const CHECK_NAMES: [&str; 20] = [
    "records_well_formed",
    "value_monotone",
    "approximation_bounds",
    "decrement_identity",
    "linear_theta_bound",
    "linear_envelope",
    "potential_monotone",
    "potential_contraction",
    "potential_recursion",
    "weighted_theta_sum",
    "superlinear_envelope",
    "step_within_decrement",
    "decrement_bound",
    "general_theta_bound",
    "general_linear_envelope",
    "general_potential_recursion",
    "general_weighted_theta_sum",
    "general_superlinear_envelope",
    "randomized_envelope",
    "terminal_reason_consistent",
];

struct Ctx<'a> {
    recs: &'a [IterationRecord],
    c: ProblemConstants,
    tol: Tolerances,
}

impl Ctx<'_> {
    fn eval(&self, t: usize, lhs: f64, rhs: f64, tolerance: f64) -> Evaluation {
        let slack = rhs - lhs;
        let status = if slack >= -tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Evaluation {
            t,
            lhs,
            rhs,
            slack,
            tolerance,
            status,
        }
    }

    fn hypothesis_failed(&self, t: usize, lhs: f64, rhs: f64) -> Evaluation {
        Evaluation {
            t,
            lhs,
            rhs,
            slack: rhs - lhs,
            tolerance: 0.0,
            status: CheckStatus::HypothesisFailed,
        }
    }

    /// `∇²f(x_t) ⪯ G_t` up to the hypothesis tolerance; `None` when the
    /// spectrum was not recorded.
    fn dominated(&self, r: &IterationRecord) -> Option<bool> {
        r.gen_eig_min.map(|lo| lo >= 1.0 - self.tol.hypothesis)
    }

    /// `λ_t ≤ e^{log_env}` in log-space with relative tolerance.
    fn envelope_eval(&self, t: usize, lambda: f64, log_env: f64) -> Evaluation {
        let lhs = lambda.max(self.tol.floor).ln();
        let mut e = self.eval(t, lhs, log_env, self.tol.envelope_rel.ln_1p());
        if lambda <= self.tol.floor {
            e.status = CheckStatus::Pass;
        }
        e
    }

    fn pairs(&self) -> impl Iterator<Item = (&IterationRecord, &IterationRecord)> {
        self.recs.iter().zip(self.recs.iter().skip(1))
    }
}

/// Evaluates every inequality applicable to `result`.
pub fn certify_run(result: &RunResult, tol: &Tolerances) -> CertificationReport {
    let method = result.config.method;
    let quadratic = result.quadratic;
    let ctx = Ctx {
        recs: &result.records,
        c: result.constants,
        tol: *tol,
    };
    let lambda0 = result.lambda0();
    let locality = if quadratic {
        None
    } else {
        lambda0.and_then(|l| locality_check(&result.constants, l).ok())
    };

    let mut checks = BTreeMap::new();
    for name in CHECK_NAMES {
        checks.insert(name.to_string(), CheckResult::fixed(CheckStatus::NotApplicable));
    }
    let mut set = |name: &str, r: CheckResult| {
        checks.insert(name.to_string(), r);
    };
    let from = CheckResult::from_evaluations;

    set("records_well_formed", from(well_formed(&ctx), false));
    set(
        "terminal_reason_consistent",
        from(terminal_consistent(&ctx, result), false),
    );

    if method == Method::Gd {
        set("value_monotone", from(value_monotone(&ctx), false));
    } else if quadratic {
        let sharp_det = matches!(method, Method::SharpenedQuadratic | Method::SharpenedGeneral);
        set("approximation_bounds", from(approximation_bounds(&ctx), false));
        set("decrement_identity", from(decrement_identity(&ctx), false));
        set("linear_theta_bound", from(linear_theta_bound(&ctx), false));
        set(
            "linear_envelope",
            from(
                envelope_check(&ctx, EnvelopeKind::LinearQuadCase, 1, None),
                false,
            ),
        );
        match method {
            Method::Bfgs => set("potential_monotone", from(potential_monotone(&ctx), false)),
            Method::GreedyBfgs | Method::SharpenedQuadratic | Method::SharpenedGeneral => {
                set("potential_contraction", from(potential_contraction(&ctx), false))
            }
            _ => {}
        }
        if sharp_det {
            set("potential_recursion", from(potential_recursion(&ctx), false));
            set("weighted_theta_sum", from(weighted_theta_sum(&ctx), false));
            set(
                "superlinear_envelope",
                from(
                    envelope_check(&ctx, EnvelopeKind::SuperlinearQuadCase, 1, None),
                    false,
                ),
            );
        }
        if method == Method::SharpenedRandomized {
            set(
                "randomized_envelope",
                from(
                    envelope_check(&ctx, EnvelopeKind::SuperlinearRandomized, 1, None),
                    true,
                ),
            );
        }
    } else {
        set("step_within_decrement", from(step_within_decrement(&ctx), false));
        set("decrement_bound", from(decrement_bound(&ctx), false));
        let corrected = result.config.correction_enabled;
        let sharp = matches!(method, Method::SharpenedGeneral | Method::SharpenedRandomized);
        if sharp && corrected {
            let in3 = locality.map(|l| l != Locality::Outside);
            let in4 = locality.map(|l| l == Locality::InsideSuperlinearBall);
            set("general_theta_bound", from(general_theta_bound(&ctx, in3), false));
            set(
                "general_linear_envelope",
                from(
                    envelope_check(&ctx, EnvelopeKind::LinearGeneral, 1, Some(in3)),
                    false,
                ),
            );
            if method == Method::SharpenedGeneral {
                set(
                    "general_potential_recursion",
                    from(general_potential_recursion(&ctx, in3), false),
                );
                set(
                    "general_weighted_theta_sum",
                    from(general_weighted_theta_sum(&ctx, in3), false),
                );
                set(
                    "general_superlinear_envelope",
                    from(
                        envelope_check(&ctx, EnvelopeKind::SuperlinearGeneral, 1, Some(in4)),
                        false,
                    ),
                );
            } else {
                set(
                    "randomized_envelope",
                    from(
                        envelope_check(&ctx, EnvelopeKind::SuperlinearRandomized, 1, Some(in4)),
                        true,
                    ),
                );
            }
        }
    }

    let passed = checks
        .values()
        .all(|c| c.advisory || c.status != CheckStatus::Fail);
    let complete = checks.values().all(|c| c.status != CheckStatus::NotEvaluated);
    CertificationReport {
        method,
        fingerprint: result.fingerprint.clone(),
        quadratic,
        locality,
        passed,
        complete,
        tolerances: *tol,
        checks,
    }
}

fn well_formed(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let mut out = Vec::new();
    for (i, r) in ctx.recs.iter().enumerate() {
        // t strictly increasing: lhs = previous t + 1, rhs = t.
        if i > 0 {
            let prev = ctx.recs[i - 1].t as f64;
            out.push(ctx.eval(r.t, prev + 1.0, r.t as f64, 0.0));
        }
        if let Some(l) = r.lambda {
            out.push(ctx.eval(r.t, -l, 0.0, 0.0));
        }
    }
    if out.is_empty() && !ctx.recs.is_empty() {
        out.push(ctx.eval(ctx.recs[0].t, 0.0, 0.0, 0.0));
    }
    out
}

fn terminal_consistent(ctx: &Ctx<'_>, result: &RunResult) -> Vec<Evaluation> {
    use crate::solvers::TerminalReason::*;
    let Some(last) = ctx.recs.last() else {
        return vec![ctx.eval(0, 1.0, 0.0, 0.0)];
    };
    let ok = match result.terminal_reason {
        GradTol => {
            let g0 = ctx.recs[0].grad_norm;
            let tol = result
                .config
                .tol_grad
                .unwrap_or_else(|| crate::solvers::default_tol_grad(g0));
            last.grad_norm <= tol
        }
        LambdaTol => last.lambda.is_some_and(|l| l <= result.config.tol_lambda),
        MaxIters => last.t >= result.config.max_iters,
        NumericalFailure => true,
    };
    vec![ctx.eval(last.t, if ok { 0.0 } else { 1.0 }, 0.0, 0.0)]
}

fn value_monotone(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    ctx.pairs()
        .map(|(a, b)| ctx.eval(a.t, b.f, a.f, ctx.tol.abs * a.f.abs().max(1.0)))
        .collect()
}

fn approximation_bounds(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let kappa = ctx.c.kappa();
    let mut out = Vec::new();
    for r in ctx.recs {
        if let (Some(lo), Some(hi)) = (r.gen_eig_min, r.gen_eig_max) {
            // Both sides as one inequality: max(1 − lo, hi − κ) ≤ 0.
            let lower = ctx.eval(r.t, 1.0, lo, ctx.tol.hypothesis);
            let upper = ctx.eval(r.t, hi, kappa, ctx.tol.upper_ratio_abs);
            out.push(if lower.slack / ctx.tol.hypothesis < upper.slack / ctx.tol.upper_ratio_abs {
                lower
            } else {
                upper
            });
        }
    }
    out
}

fn decrement_identity(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let mut out = Vec::new();
    for (a, b) in ctx.pairs() {
        let (Some(l0), Some(l1), Some(th)) = (a.lambda, b.lambda, a.theta) else {
            continue;
        };
        if l0 < ctx.tol.identity_floor {
            break;
        }
        out.push(ctx.eval(a.t, (l1 - th * l0).abs(), 0.0, ctx.tol.identity_rel * l0));
    }
    out
}

fn linear_theta_bound(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let bound = 1.0 - ctx.c.mu / ctx.c.lip;
    ctx.recs
        .iter()
        .filter_map(|r| {
            let th = r.theta?;
            Some(match ctx.dominated(r) {
                Some(false) => ctx.hypothesis_failed(r.t, th, bound),
                _ => ctx.eval(r.t, th, bound, ctx.tol.theta_abs),
            })
        })
        .collect()
}

/// `λ_t` against an envelope for `t ≥ t_min`. `gate` carries the locality
/// hypothesis: `Some(Some(false))` marks every evaluation as failed
/// hypothesis, `Some(None)` means locality is unknown.
fn envelope_check(
    ctx: &Ctx<'_>,
    kind: EnvelopeKind,
    t_min: usize,
    gate: Option<Option<bool>>,
) -> Vec<Evaluation> {
    let Some(l0) = ctx.recs.first().and_then(|r| r.lambda) else {
        return Vec::new();
    };
    if matches!(gate, Some(None)) {
        return Vec::new();
    }
    let env = RateEnvelope::new(kind, ctx.c, l0);
    ctx.recs
        .iter()
        .filter(|r| r.t >= t_min)
        .filter_map(|r| {
            let l = r.lambda?;
            let log_env = env.log_value(r.t);
            Some(if gate == Some(Some(false)) {
                ctx.hypothesis_failed(r.t, l.max(ctx.tol.floor).ln(), log_env)
            } else {
                ctx.envelope_eval(r.t, l, log_env)
            })
        })
        .collect()
}

fn potential_monotone(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    ctx.pairs()
        .filter_map(|(a, b)| {
            let (s0, s1) = (a.sigma?, b.sigma?);
            Some(match ctx.dominated(a) {
                Some(false) => ctx.hypothesis_failed(a.t, s1, s0),
                _ => ctx.eval(a.t, s1, s0, ctx.tol.abs),
            })
        })
        .collect()
}

fn potential_contraction(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let q = 1.0 - ctx.c.mu / (ctx.c.dim as f64 * ctx.c.lip);
    ctx.pairs()
        .filter_map(|(a, b)| {
            let (s0, s1) = (a.sigma?, b.sigma?);
            Some(match ctx.dominated(a) {
                Some(false) => ctx.hypothesis_failed(a.t, s1, q * s0),
                _ => ctx.eval(a.t, s1, q * s0, ctx.tol.abs),
            })
        })
        .collect()
}

fn potential_recursion(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let q = 1.0 - ctx.c.mu / (ctx.c.dim as f64 * ctx.c.lip);
    ctx.pairs()
        .filter_map(|(a, b)| {
            let (s0, s1, th) = (a.sigma?, b.sigma?, a.theta?);
            let rhs = q * (s0 - th * th);
            Some(match ctx.dominated(a) {
                Some(false) => ctx.hypothesis_failed(a.t, s1, rhs),
                _ => ctx.eval(a.t, s1, rhs, ctx.tol.abs),
            })
        })
        .collect()
}

/// Running `Σ_{i<t} θᵢ² / q^i ≤ bound` for every `t ≥ 1`, stopping at the
/// first missing `θ`.
fn weighted_sum_evals(
    ctx: &Ctx<'_>,
    q: f64,
    bound: f64,
    theta: impl Fn(&IterationRecord) -> Option<f64>,
    gate: Option<bool>,
) -> Vec<Evaluation> {
    let mut out = Vec::new();
    let mut terms = Vec::new();
    let mut hypothesis_ok = gate.unwrap_or(true);
    for (i, r) in ctx.recs.iter().enumerate() {
        if i + 1 >= ctx.recs.len() {
            break;
        }
        let Some(th) = theta(r) else { break };
        if ctx.dominated(r) == Some(false) {
            hypothesis_ok = false;
        }
        terms.push((2.0 * th.ln() - r.t as f64 * q.ln()).exp());
        let sum = compensated_sum(&terms);
        let t = r.t + 1;
        out.push(if hypothesis_ok {
            ctx.eval(t, sum, bound, ctx.tol.weighted_sum_abs)
        } else {
            ctx.hypothesis_failed(t, sum, bound)
        });
    }
    out
}

fn weighted_theta_sum(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let Some(s0) = ctx.recs.first().and_then(|r| r.sigma) else {
        return Vec::new();
    };
    let q = 1.0 - ctx.c.mu / (ctx.c.dim as f64 * ctx.c.lip);
    weighted_sum_evals(ctx, q, s0, |r| r.theta, None)
}

fn step_within_decrement(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    ctx.recs
        .iter()
        .filter_map(|r| {
            let (step, l) = (r.r?, r.lambda?);
            let dominated = ctx.dominated(r)?;
            Some(if dominated {
                ctx.eval(r.t, step, l, ctx.tol.abs)
            } else {
                ctx.hypothesis_failed(r.t, step, l)
            })
        })
        .collect()
}

fn decrement_bound(ctx: &Ctx<'_>) -> Vec<Evaluation> {
    let m = ctx.c.sc;
    ctx.pairs()
        .filter_map(|(a, b)| {
            let (l0, l1, th, r) = (a.lambda?, b.lambda?, a.theta?, a.r?);
            Some(ctx.eval(a.t, l1, (1.0 + m * r / 2.0) * th * l0, ctx.tol.abs))
        })
        .collect()
}

fn general_theta_bound(ctx: &Ctx<'_>, local: Option<bool>) -> Vec<Evaluation> {
    let Some(inside) = local else {
        return Vec::new();
    };
    let bound = 1.0 - 2.0 * ctx.c.mu / (3.0 * ctx.c.lip);
    ctx.recs
        .iter()
        .filter_map(|r| {
            let th = r.theta?;
            Some(if inside {
                ctx.eval(r.t, th, bound, ctx.tol.theta_abs)
            } else {
                ctx.hypothesis_failed(r.t, th, bound)
            })
        })
        .collect()
}

fn general_potential_recursion(ctx: &Ctx<'_>, local: Option<bool>) -> Vec<Evaluation> {
    let Some(inside) = local else {
        return Vec::new();
    };
    let ProblemConstants { mu, lip, sc, dim } = ctx.c;
    let d = dim as f64;
    let q = 1.0 - mu / (2.0 * d * lip);
    ctx.pairs()
        .filter_map(|(a, b)| {
            let (s0, s1, th, l) = (a.sigma?, b.sigma?, a.theta_local?, a.lambda?);
            let rhs = q * ((1.0 + sc * l / 2.0).powi(4) * (s0 + 4.0 * sc * d * l) - th * th / 4.0);
            Some(if inside {
                ctx.eval(a.t, s1, rhs, ctx.tol.abs)
            } else {
                ctx.hypothesis_failed(a.t, s1, rhs)
            })
        })
        .collect()
}

fn general_weighted_theta_sum(ctx: &Ctx<'_>, local: Option<bool>) -> Vec<Evaluation> {
    let Some(inside) = local else {
        return Vec::new();
    };
    let first = &ctx.recs[0];
    let (Some(s0), Some(l0)) = (first.sigma, first.lambda) else {
        return Vec::new();
    };
    let ProblemConstants { mu, lip, sc, dim } = ctx.c;
    let d = dim as f64;
    let q = 1.0 - mu / (2.0 * d * lip);
    let bound = 8.0 * (s0 + 4.0 * sc * d * l0);
    weighted_sum_evals(ctx, q, bound, |r| r.theta_local, Some(inside))
}

/// Slack of each operator-level property over a batch of random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertySummary {
    pub name: String,
    pub checked: usize,
    /// Instances whose hypothesis did not hold and were not checked.
    pub skipped: usize,
    pub min_slack: f64,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, d, d).qr().q()
}

/// `Q diag(spectrum) Qᵀ` for a random orthogonal `Q`.
fn with_spectrum(rng: &mut ChaCha8Rng, spectrum: &[f64]) -> DMatrix<f64> {
    let q = random_orthogonal(rng, spectrum.len());
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum));
    linalg::symmetrize(&q * d * q.transpose())
}

/// Random `A` with spectrum in `[1, 100]` and its extreme eigenvalues.
fn random_hessian(rng: &mut ChaCha8Rng, d: usize) -> (SpdMatrix, f64, f64) {
    let spectrum: Vec<f64> = (0..d).map(|_| 100f64.powf(rng.random::<f64>())).collect();
    let lo = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spectrum.iter().copied().fold(0.0, f64::max);
    let a = SpdMatrix::new(with_spectrum(rng, &spectrum)).expect("spectrum is positive");
    (a, lo, hi)
}

/// `G` with `A ⪯ G`: `A` plus a random positive semidefinite term of random
/// rank.
fn dominating(rng: &mut ChaCha8Rng, a: &SpdMatrix) -> DMatrix<f64> {
    let d = a.dim();
    let rank = rng.random_range(0..=d);
    let b = gaussian_matrix(rng, d, rank);
    let scale = 10f64.powf(rng.random_range(-2.0..1.0));
    linalg::symmetrize(a.entries() + &b * b.transpose() * scale)
}

/// `G = L W diag(ev) Wᵀ Lᵀ` with `A = L Lᵀ` and `ev ∈ [1/ξ, η]`, so that
/// `A/ξ ⪯ G ⪯ ηA`.
fn sandwiched(rng: &mut ChaCha8Rng, a: &SpdMatrix, xi: f64, eta: f64) -> DMatrix<f64> {
    let d = a.dim();
    let lo = (1.0 / xi).ln();
    let hi = eta.ln();
    let mut ev: Vec<f64> = (0..d)
        .map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp())
        .collect();
    if d >= 2 {
        ev[0] = 1.0 / xi;
        ev[1] = eta;
    }
    let l = a.lower_factor();
    linalg::symmetrize(l * with_spectrum(rng, &ev) * l.transpose())
}

fn random_direction_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    if rng.random::<f64>() < 0.25 {
        let mut e = DVector::zeros(d);
        e[rng.random_range(0..d)] = 1.0;
        e
    } else {
        gaussian_vector(rng, d)
    }
}

fn bfgs(a: &SpdMatrix, g: &DMatrix<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut st = HessianApproxState::from_spd(&SpdMatrix::new(g.clone())?);
    st.bfgs_update(&a.mul_vec(u), u)?;
    Ok(st.g().clone())
}

struct Tally {
    checked: usize,
    skipped: usize,
    min_slack: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            checked: 0,
            skipped: 0,
            min_slack: f64::INFINITY,
        }
    }

    fn record(&mut self, slack: f64) {
        self.checked += 1;
        self.min_slack = self.min_slack.min(if slack.is_nan() { f64::NEG_INFINITY } else { slack });
    }
}

/// Operator-level properties of the BFGS update on `instances` random
/// `(A, G, u)` draws per dimension:
///
/// * `trace_progress`: `σ(A,G) − σ(A,G₊) ≥ uᵀGu/uᵀAu − 1` when `A ⪯ G`;
/// * `sandwich_preserved`: `A/ξ ⪯ G ⪯ ηA` carries over to `G₊`;
/// * `theta_progress`: `σ(A,G) − σ(A,G₊) ≥ θ²` when `A ⪯ G`;
/// * `theta_progress_relaxed`: `σ(A,G) − σ(A,G₊) ≥ θ²/(4ξ²) − ln ξ` when
///   `A/ξ ⪯ G` and `θ ≤ ξ`;
/// * `greedy_factor`: `σ(A,G₊) ≤ (1 − μ/(dL)) σ(A,G)` for the greedy `u`;
/// * `determinant_identity`: `Det(G⁻¹G₊) = uᵀAu/uᵀGu`, compared in logs.
pub fn operator_property_suite(
    dims: &[usize],
    instances: usize,
    seed: u64,
) -> Result<Vec<PropertySummary>> {
    let names = [
        "trace_progress",
        "sandwich_preserved",
        "theta_progress",
        "theta_progress_relaxed",
        "greedy_factor",
        "determinant_identity",
    ];
    let mut tallies: Vec<Tally> = names.iter().map(|_| Tally::new()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &d in dims {
        for _ in 0..instances {
            let (a, mu, lip) = random_hessian(&mut rng, d);
            let u = random_direction_vector(&mut rng, d);

            // A ⪯ G.
            let g = dominating(&mut rng, &a);
            let g_plus = bfgs(&a, &g, &u)?;
            let s0 = kernel::sigma(&a, &g)?;
            let s1 = kernel::sigma(&a, &g_plus)?;
            let ugu = u.dot(&(&g * &u));
            let uau = linalg::quad_form(&a, &u)?;
            tallies[0].record((s0 - s1) - (ugu / uau - 1.0));
            let th = kernel::theta(&a, &g, &u)?;
            tallies[2].record((s0 - s1) - th * th);

            let g_spd = SpdMatrix::new(g.clone())?;
            let gp_spd = SpdMatrix::new(g_plus.clone())?;
            let log_det_ratio = gp_spd.log_det() - g_spd.log_det();
            tallies[5].record(-(log_det_ratio - (uau / ugu).ln()).abs());

            let mut st = HessianApproxState::from_spd(&g_spd);
            kernel::greedy_update(&mut st, &DirectionQuery::from_spd(&a))?;
            let s_greedy = kernel::sigma(&a, st.g())?;
            tallies[4].record((1.0 - mu / (d as f64 * lip)) * s0 - s_greedy);

            // A/ξ ⪯ G ⪯ ηA.
            let xi = 10f64.powf(rng.random::<f64>());
            let eta = 10f64.powf(rng.random::<f64>());
            let g = sandwiched(&mut rng, &a, xi, eta);
            let g_plus = bfgs(&a, &g, &u)?;
            let (lo, hi) = linalg::generalized_eigen_range(&a, &g_plus)?;
            tallies[1].record((lo - 1.0 / xi).min(eta - hi));

            let th = kernel::theta(&a, &g, &u)?;
            if th <= xi {
                let s0 = kernel::sigma(&a, &g)?;
                let s1 = kernel::sigma(&a, &g_plus)?;
                tallies[3].record((s0 - s1) - (th * th / (4.0 * xi * xi) - xi.ln()));
            } else {
                tallies[3].skipped += 1;
            }
        }
    }
    Ok(names
        .iter()
        .zip(tallies)
        .map(|(n, t)| PropertySummary {
            name: n.to_string(),
            checked: t.checked,
            skipped: t.skipped,
            min_slack: t.min_slack,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizedDecrease {
    pub sigma0: f64,
    pub mean: f64,
    pub std_error: f64,
    /// `(1 − 1/d) σ(A, G)`.
    pub bound: f64,
    pub draws: usize,
}

/// Monte Carlo estimate of `E σ(A, BFGS(A, G, Rᵀũ))` with `G⁻¹ = RᵀR` and
/// `ũ ~ N(0, I)`.
pub fn randomized_decrease(
    a: &SpdMatrix,
    g: &SpdMatrix,
    draws: usize,
    seed: u64,
) -> Result<RandomizedDecrease> {
    if draws < 2 {
        return Err(Error::Domain("need at least two draws".into()));
    }
    let d = a.dim();
    let r = linalg::cholesky(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let u = kernel::random_direction(&r, &mut rng);
        let mut st = HessianApproxState::from_spd(g);
        st.bfgs_update(&a.mul_vec(&u), &u)?;
        values.push(kernel::sigma(a, st.g())?);
    }
    let n = draws as f64;
    let mean = compensated_sum(&values) / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma0 = kernel::sigma(a, g.entries())?;
    Ok(RandomizedDecrease {
        sigma0,
        mean,
        std_error: (var / n).sqrt(),
        bound: (1.0 - 1.0 / d as f64) * sigma0,
        draws,
    })
}

/// Slacks of the Hessian sandwich inequalities between `x` and `y` under
/// strong self-concordance with constant `M`; each is non-negative when the
/// inequality holds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSlacks {
    pub r: f64,
    /// `∇²f(x)/(1+Mr) ⪯ ∇²f(y) ⪯ (1+Mr)∇²f(x)`.
    pub endpoints: f64,
    /// `∇²f(x)/(1+Mr/2) ⪯ J ⪯ (1+Mr/2)∇²f(x)`.
    pub average_vs_start: f64,
    /// `∇²f(y)/(1+Mr/2) ⪯ J ⪯ (1+Mr/2)∇²f(y)`.
    pub average_vs_end: f64,
}

impl SandwichSlacks {
    pub fn min(&self) -> f64 {
        self.endpoints
            .min(self.average_vs_start)
            .min(self.average_vs_end)
    }
}

fn bracket_slack(base: &SpdMatrix, other: &SpdMatrix, factor: f64) -> Result<f64> {
    let (lo, hi) = linalg::generalized_eigen_range(base, other.entries())?;
    Ok((lo - 1.0 / factor).min(factor - hi))
}

pub fn hessian_sandwich(
    oracle: &dyn Objective,
    x: &DVector<f64>,
    y: &DVector<f64>,
    nodes: usize,
) -> Result<SandwichSlacks> {
    let m = oracle.constants().sc;
    let s = y - x;
    let r = objectives::local_norm(oracle, x, &s);
    let hx = objectives::hessian(oracle, x)?;
    let hy = objectives::hessian(oracle, y)?;
    let j = objectives::averaged_hessian(oracle, x, &s, nodes)?;
    Ok(SandwichSlacks {
        r,
        endpoints: bracket_slack(&hx, &hy, 1.0 + m * r)?,
        average_vs_start: bracket_slack(&hx, &j, 1.0 + m * r / 2.0)?,
        average_vs_end: bracket_slack(&hy, &j, 1.0 + m * r / 2.0)?,
    })
}

/// Largest relative error of the gradient against central differences with
/// step `h`, normalized by `max(‖∇f(x)‖, 1e-12)`.
pub fn gradient_fd_error(oracle: &dyn Objective, x: &DVector<f64>, h: f64) -> f64 {
    let g = oracle.gradient(x);
    let mut fd = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = oracle.value(&xp);
        xp[i] = x[i] - h;
        let fm = oracle.value(&xp);
        xp[i] = x[i];
        fd[i] = (fp - fm) / (2.0 * h);
    }
    (fd - &g).norm() / g.norm().max(1e-12)
}

/// Relative error of `∇²f(x)v` against the central gradient difference
/// `(∇f(x+hv) − ∇f(x−hv))/(2h)`.
pub fn hess_vec_fd_error(oracle: &dyn Objective, x: &DVector<f64>, v: &DVector<f64>, h: f64) -> f64 {
    let hv = oracle.hess_vec(x, v);
    let fd = (oracle.gradient(&(x + v * h)) - oracle.gradient(&(x - v * h))) / (2.0 * h);
    (fd - &hv).norm() / hv.norm().max(1e-12)
}
