//! Datasets, synthetic problems, experiment specs and run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, CertificationReport, EnvelopeKind, Locality, RateEnvelope, Tolerances};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix};
use crate::objectives::{LogisticProblem, Objective, ProblemConstants, QuadraticProblem};
use crate::solvers::{self, IterationRecord, Method, RunResult, SolverConfig, TerminalReason};

/// Labelled samples with rows materialized densely.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub z: DMatrix<f64>,
    /// Always ±1.
    pub labels: DVector<f64>,
    /// Zero rows removed by [`normalize_rows`].
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Logistic objective over these rows; they must already be normalized.
    pub fn logistic(&self, mu_reg: f64) -> Result<LogisticProblem> {
        LogisticProblem::new(self.z.clone(), self.labels.clone(), mu_reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub n_samples: usize,
    pub dim: usize,
    pub mu: f64,
}

pub const KNOWN_DATASETS: [DatasetInfo; 8] = [
    DatasetInfo { name: "svmguide3", n_samples: 1243, dim: 21, mu: 0.01 },
    DatasetInfo { name: "ijcnn1", n_samples: 49990, dim: 22, mu: 0.01 },
    DatasetInfo { name: "phishing", n_samples: 11055, dim: 68, mu: 0.001 },
    DatasetInfo { name: "mushrooms", n_samples: 8124, dim: 112, mu: 0.001 },
    DatasetInfo { name: "a9a", n_samples: 32561, dim: 123, mu: 0.001 },
    DatasetInfo { name: "connect-4", n_samples: 67557, dim: 126, mu: 0.0001 },
    DatasetInfo { name: "w8a", n_samples: 49749, dim: 300, mu: 0.0001 },
    DatasetInfo { name: "protein", n_samples: 17766, dim: 357, mu: 0.0001 },
];

pub fn known_dataset(name: &str) -> Option<&'static DatasetInfo> {
    KNOWN_DATASETS.iter().find(|e| e.name == name)
}

/// Environment variable naming a directory that holds the real datasets.
pub const DATA_DIR_VAR: &str = "QN_DATA_DIR";

pub fn parse_libsvm(path: &Path, dim_override: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_libsvm_str(&text, path, dim_override)
}

/// Parses LIBSVM text; `source` only labels errors and names the dataset.
pub fn parse_libsvm_str(text: &str, source: &Path, dim_override: Option<usize>) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(lineno, format!("invalid label '{label_tok}'")))?;
        if !label.is_finite() {
            return Err(err(lineno, format!("non-finite label '{label_tok}'")));
        }
        let mut entries = Vec::new();
        let mut prev = 0;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("expected index:value, got '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(lineno, format!("invalid index '{idx}'")))?;
            if idx == 0 {
                return Err(err(lineno, "indices are 1-based".into()));
            }
            if idx <= prev {
                return Err(err(lineno, format!("index {idx} not ascending after {prev}")));
            }
            if dim_override.is_some_and(|d| idx > d) {
                return Err(err(
                    lineno,
                    format!("index {idx} exceeds dimension {}", dim_override.unwrap()),
                ));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(lineno, format!("invalid value '{val}'")))?;
            if !val.is_finite() {
                return Err(err(lineno, format!("non-finite value at index {idx}")));
            }
            prev = idx;
            entries.push((idx, val));
        }
        max_index = max_index.max(prev);
        raw_labels.push(label);
        rows.push(entries);
    }
    let name = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if rows.is_empty() {
        return Err(Error::EmptyDataset(name));
    }
    let d = dim_override.unwrap_or(max_index);
    let mut z = DMatrix::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        for &(idx, val) in row {
            z[(i, idx - 1)] = val;
        }
    }
    Ok(Dataset {
        name,
        z,
        labels: map_labels(&raw_labels),
        dropped_rows: 0,
    })
}

/// `{−1,+1}`, `{0,1}` and `{1,2}` map onto `{−1,+1}` in order; any other
/// label set maps by sign.
fn map_labels(raw: &[f64]) -> DVector<f64> {
    let within = |set: [f64; 2]| raw.iter().all(|v| set.contains(v));
    let low = if within([-1.0, 1.0]) {
        -1.0
    } else if within([0.0, 1.0]) {
        0.0
    } else if within([1.0, 2.0]) {
        1.0
    } else {
        return DVector::from_iterator(raw.len(), raw.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }));
    };
    DVector::from_iterator(raw.len(), raw.iter().map(|&v| if v == low { -1.0 } else { 1.0 }))
}

/// Writes nonzero entries only, with round-trip float formatting.
pub fn write_libsvm(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, row) in ds.z.row_iter().enumerate() {
        out.push_str(if ds.labels[i] > 0.0 { "+1" } else { "-1" });
        for (j, v) in row.iter().enumerate() {
            if *v != 0.0 {
                write!(out, " {}:{}", j + 1, fmt_float(*v)).expect("write to string");
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Scales every nonzero row to unit norm and drops zero rows.
pub fn normalize_rows(ds: &Dataset) -> Dataset {
    let keep: Vec<usize> = (0..ds.n_samples())
        .filter(|&i| ds.z.row(i).norm() > 0.0)
        .collect();
    let dropped = ds.n_samples() - keep.len();
    if dropped > 0 {
        warn!("{}: dropped {dropped} zero rows", ds.name);
    }
    let mut z = DMatrix::zeros(keep.len(), ds.dim());
    for (k, &i) in keep.iter().enumerate() {
        let row = ds.z.row(i);
        z.set_row(k, &(row / row.norm()));
    }
    Dataset {
        name: ds.name.clone(),
        z,
        labels: DVector::from_iterator(keep.len(), keep.iter().map(|&i| ds.labels[i])),
        dropped_rows: ds.dropped_rows + dropped,
    }
}

/// `f(x) = ½xᵀAx + bᵀx` with `A = Q D Qᵀ`, `Q` the orthogonal factor of a
/// seeded Gaussian matrix and `D` log-uniform on `[1, κ]` with both ends
/// attained.
pub fn synth_quadratic(d: usize, kappa: f64, seed: u64) -> Result<QuadraticProblem> {
    if d < 2 || !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!(
            "synthetic quadratic needs d ≥ 2 and κ ≥ 1, got d={d} κ={kappa}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    if kappa == 1.0 {
        return QuadraticProblem::with_bounds(SpdMatrix::identity(d), b, 1.0, 1.0);
    }
    let mut spectrum: Vec<f64> = (0..d)
        .map(|i| match i {
            0 => 1.0,
            i if i == d - 1 => kappa,
            _ => kappa.powf(rng.random::<f64>()),
        })
        .collect();
    spectrum.sort_by(f64::total_cmp);
    let q = gauss.qr().q();
    let diag = DMatrix::from_diagonal(&DVector::from_vec(spectrum));
    let a = SpdMatrix::new(linalg::symmetrize(&q * diag * q.transpose()))?;
    QuadraticProblem::with_bounds(a, b, 1.0, kappa)
}

/// Seeded Gaussian features labelled by a planted linear model with label
/// noise, rows normalized.
pub fn synth_logistic(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::Domain(format!("synthetic logistic needs N, d ≥ 1, got {n}, {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels = DVector::from_fn(n, |i, _| {
        let margin = z.row(i).dot(&w.transpose()) / (d as f64).sqrt();
        let noise: f64 = rng.sample(StandardNormal);
        if margin + 0.5 * noise > 0.0 { 1.0 } else { -1.0 }
    });
    let ds = Dataset {
        name: format!("synthetic-logistic-n{n}-d{d}-s{seed}"),
        z,
        labels,
        dropped_rows: 0,
    };
    Ok(normalize_rows(&ds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSource {
    Libsvm { path: PathBuf, dim: Option<usize> },
    SyntheticQuadratic { d: usize, kappa: f64, seed: u64 },
    SyntheticLogistic { n: usize, d: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: ProblemSource,
    /// Regularization for logistic problems.
    pub mu_reg: Option<f64>,
    /// Overrides the default self-concordance constant of logistic problems.
    pub sc: Option<f64>,
    pub methods: Vec<Method>,
    /// Settings shared by every method; its `method` field is ignored.
    pub solver: SolverConfig,
    pub envelopes: Vec<EnvelopeKind>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            source: ProblemSource::SyntheticQuadratic {
                d: 100,
                kappa: 100.0,
                seed: 0,
            },
            mu_reg: None,
            sc: None,
            methods: vec![Method::Bfgs, Method::GreedyBfgs, Method::SharpenedQuadratic],
            solver: SolverConfig::new(Method::Bfgs),
            envelopes: Vec::new(),
            out_dir: PathBuf::from("results"),
            threads: 1,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidSpec(format!("{key}: expected on/off, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidSpec(format!("{key}: cannot parse '{v}'")))
}

/// Resolves a `dataset` value: an existing file, a known dataset name under
/// `$QN_DATA_DIR`, or one of the synthetic problem names.
fn resolve_dataset(value: &str) -> Result<(PathBuf, Option<&'static DatasetInfo>)> {
    let path = PathBuf::from(value);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let entry = known_dataset(value).or_else(|| known_dataset(&stem));
    if path.is_file() {
        return Ok((path, entry));
    }
    if let Some(e) = entry {
        if let Ok(dir) = std::env::var(DATA_DIR_VAR) {
            let candidate = Path::new(&dir).join(e.name);
            if candidate.is_file() {
                return Ok((candidate, entry));
            }
        }
        return Err(Error::InvalidSpec(format!(
            "dataset '{value}' not found; place it at ${DATA_DIR_VAR}/{}",
            e.name
        )));
    }
    Err(Error::InvalidSpec(format!("dataset file '{value}' not found")))
}

impl ExperimentSpec {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.solver;
        match key.trim() {
            "problem" | "dataset" => match v {
                "synthetic-quadratic" => {
                    if !matches!(self.source, ProblemSource::SyntheticQuadratic { .. }) {
                        self.source = ProblemSource::SyntheticQuadratic {
                            d: 100,
                            kappa: 100.0,
                            seed: 0,
                        };
                    }
                }
                "synthetic-logistic" => {
                    if !matches!(self.source, ProblemSource::SyntheticLogistic { .. }) {
                        self.source = ProblemSource::SyntheticLogistic {
                            n: 1000,
                            d: 30,
                            seed: 7,
                        };
                    }
                }
                other => {
                    let (path, entry) = resolve_dataset(other)?;
                    if self.mu_reg.is_none() {
                        self.mu_reg = entry.map(|e| e.mu);
                    }
                    self.source = ProblemSource::Libsvm { path, dim: None };
                }
            },
            "d" => match &mut self.source {
                ProblemSource::SyntheticQuadratic { d, .. }
                | ProblemSource::SyntheticLogistic { d, .. } => *d = parse_num(key, v)?,
                ProblemSource::Libsvm { dim, .. } => *dim = Some(parse_num(key, v)?),
            },
            "kappa" => match &mut self.source {
                ProblemSource::SyntheticQuadratic { kappa, .. } => *kappa = parse_num(key, v)?,
                _ => return Err(Error::InvalidSpec("kappa needs a synthetic quadratic".into())),
            },
            "n" => match &mut self.source {
                ProblemSource::SyntheticLogistic { n, .. } => *n = parse_num(key, v)?,
                _ => return Err(Error::InvalidSpec("n needs a synthetic logistic problem".into())),
            },
            "seed" => {
                let value: u64 = parse_num(key, v)?;
                match &mut self.source {
                    ProblemSource::SyntheticQuadratic { seed, .. }
                    | ProblemSource::SyntheticLogistic { seed, .. } => *seed = value,
                    ProblemSource::Libsvm { .. } => {}
                }
                s.rng_seed = value;
            }
            "mu" => self.mu_reg = Some(parse_num(key, v)?),
            "m" | "sc" => self.sc = Some(parse_num(key, v)?),
            "method" | "methods" => {
                self.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(|m| if m == "all" { Ok(None) } else { m.parse().map(Some) })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flat_map(|m| match m {
                        Some(m) => vec![m],
                        None => Method::ALL.to_vec(),
                    })
                    .collect();
            }
            "max_iters" => s.max_iters = parse_num(key, v)?,
            "tol_grad" => s.tol_grad = Some(parse_num(key, v)?),
            "tol_lambda" => s.tol_lambda = parse_num(key, v)?,
            "correction" => s.correction_enabled = parse_bool(key, v)?,
            "rng_seed" => s.rng_seed = parse_num(key, v)?,
            "diagnostics" => s.diagnostics = parse_bool(key, v)?,
            "diagnostics_stride" => s.diagnostics_stride = parse_num(key, v)?,
            "quadrature_nodes" => s.quadrature_nodes = parse_num(key, v)?,
            "theta_general" => s.theta_general = parse_bool(key, v)?,
            "timing" => s.record_timing = parse_bool(key, v)?,
            "envelopes" => {
                self.envelopes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|e| !e.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?;
            }
            "out" => self.out_dir = PathBuf::from(v),
            "threads" => self.threads = parse_num(key, v)?,
            other => return Err(Error::InvalidSpec(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment. Keys apply in file
    /// order, so `problem` must precede its parameters.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| {
                Error::InvalidSpec(format!("line {}: expected key = value", i + 1))
            })?;
            spec.set(k, v)
                .map_err(|e| Error::InvalidSpec(format!("line {}: {e}", i + 1)))?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidSpec("at least one method is required".into()));
        }
        self.solver.validate()?;
        if self.threads == 0 {
            return Err(Error::InvalidSpec("threads must be at least 1".into()));
        }
        let logistic = !matches!(self.source, ProblemSource::SyntheticQuadratic { .. });
        if logistic && self.methods.contains(&Method::SharpenedQuadratic) {
            return Err(Error::InvalidSpec(
                "sharpened-quadratic needs a quadratic problem".into(),
            ));
        }
        if let ProblemSource::Libsvm { .. } = self.source {
            if self.mu_reg.is_none() {
                return Err(Error::InvalidSpec(
                    "mu is required for datasets outside the known table".into(),
                ));
            }
        }
        if self.mu_reg.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::InvalidSpec("mu must be positive".into()));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Box<dyn Objective>> {
        let logistic = |ds: Dataset| -> Result<Box<dyn Objective>> {
            let mut p = ds.logistic(self.mu_reg.unwrap_or(1e-3))?;
            if let Some(m) = self.sc {
                p = p.with_sc(m)?;
            }
            Ok(Box::new(p))
        };
        match &self.source {
            ProblemSource::SyntheticQuadratic { d, kappa, seed } => {
                Ok(Box::new(synth_quadratic(*d, *kappa, *seed)?))
            }
            ProblemSource::SyntheticLogistic { n, d, seed } => logistic(synth_logistic(*n, *d, *seed)?),
            ProblemSource::Libsvm { path, dim } => {
                logistic(normalize_rows(&parse_libsvm(path, *dim)?))
            }
        }
    }
}

/// Round-trip float formatting.
fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

pub const TRACE_COLUMNS: [&str; 14] = [
    "t",
    "f",
    "grad_norm",
    "lambda",
    "sigma",
    "theta",
    "r",
    "wall_nanos",
    "theta_local",
    "gen_eig_min",
    "gen_eig_max",
    "secant_residual",
    "inverse_drift",
    "skipped_update",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn write_trace_csv(records: &[IterationRecord]) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let fields = [
            r.t.to_string(),
            fmt_float(r.f),
            fmt_float(r.grad_norm),
            opt(r.lambda),
            opt(r.sigma),
            opt(r.theta),
            opt(r.r),
            r.wall_nanos.map(|w| w.to_string()).unwrap_or_default(),
            opt(r.theta_local),
            opt(r.gen_eig_min),
            opt(r.gen_eig_max),
            opt(r.secant_residual),
            opt(r.inverse_drift),
            (r.skipped_update as u8).to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn read_trace_csv(text: &str, source: &Path) -> Result<Vec<IterationRecord>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty trace".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for required in &TRACE_COLUMNS[..8] {
        if !cols.contains(required) {
            return Err(err(1, format!("missing column '{required}'")));
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(err(lineno, format!("expected {} fields, got {}", cols.len(), fields.len())));
        }
        let get = |name: &str| cols.iter().position(|c| *c == name).map(|k| fields[k]);
        let float = |name: &str| -> Result<Option<f64>> {
            match get(name) {
                None | Some("") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| err(lineno, format!("{name}: invalid number '{v}'"))),
            }
        };
        let required = |name: &str| -> Result<f64> {
            float(name)?.ok_or_else(|| err(lineno, format!("{name} is empty")))
        };
        let t = get("t")
            .unwrap_or("")
            .parse()
            .map_err(|_| err(lineno, "t: invalid iteration index".into()))?;
        let wall_nanos = match get("wall_nanos") {
            None | Some("") => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|_| err(lineno, format!("wall_nanos: invalid '{v}'")))?,
            ),
        };
        out.push(IterationRecord {
            t,
            x: None,
            f: required("f")?,
            grad_norm: required("grad_norm")?,
            lambda: float("lambda")?,
            sigma: float("sigma")?,
            theta: float("theta")?,
            r: float("r")?,
            wall_nanos,
            theta_local: float("theta_local")?,
            gen_eig_min: float("gen_eig_min")?,
            gen_eig_max: float("gen_eig_max")?,
            secant_residual: float("secant_residual")?,
            inverse_drift: float("inverse_drift")?,
            skipped_update: matches!(get("skipped_update"), Some("1")),
        });
    }
    Ok(out)
}

/// Everything about a run except its records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub problem: String,
    pub fingerprint: String,
    pub quadratic: bool,
    pub constants: ProblemConstants,
    pub config: SolverConfig,
    pub terminal_reason: TerminalReason,
    pub failure: Option<String>,
    pub iterations: usize,
    pub lambda0: Option<f64>,
    pub final_lambda: Option<f64>,
    pub final_grad_norm: f64,
    pub locality: Option<Locality>,
    /// First `t` with `λ_t/λ₀` at or below each threshold.
    pub iterations_to: BTreeMap<String, Option<usize>>,
}

pub const RATIO_THRESHOLDS: [f64; 3] = [1e-4, 1e-8, 1e-10];

impl RunSummary {
    pub fn new(result: &RunResult, problem: &str) -> Self {
        let last = result.records.last().expect("runs have records");
        let locality = if result.quadratic {
            None
        } else {
            result
                .lambda0()
                .and_then(|l| analysis::locality_check(&result.constants, l).ok())
        };
        Self {
            method: result.config.method,
            problem: problem.to_string(),
            fingerprint: result.fingerprint.clone(),
            quadratic: result.quadratic,
            constants: result.constants,
            config: result.config.clone(),
            terminal_reason: result.terminal_reason,
            failure: result.failure.clone(),
            iterations: result.iterations(),
            lambda0: result.lambda0(),
            final_lambda: result.records.iter().rev().find_map(|r| r.lambda),
            final_grad_norm: last.grad_norm,
            locality,
            iterations_to: RATIO_THRESHOLDS
                .iter()
                .map(|&r| (format!("{r:e}"), result.first_reaching(r)))
                .collect(),
        }
    }

    /// Reassembles a run from its summary and records.
    pub fn into_result(self, records: Vec<IterationRecord>) -> RunResult {
        RunResult {
            records,
            terminal_reason: self.terminal_reason,
            config: self.config,
            fingerprint: self.fingerprint,
            constants: self.constants,
            quadratic: self.quadratic,
            failure: self.failure,
        }
    }
}

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CERTIFICATION_FILE: &str = "certification.json";
pub const PLOT_FILE: &str = "lambda.svg";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the trace, summary and certification of one run under
/// `dir/<method>/`.
pub fn write_run_artifacts(
    dir: &Path,
    result: &RunResult,
    report: &CertificationReport,
    problem: &str,
) -> Result<PathBuf> {
    let run_dir = dir.join(result.config.method.name());
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join(TRACE_FILE), write_trace_csv(&result.records))?;
    write_json(&run_dir.join(SUMMARY_FILE), &RunSummary::new(result, problem))?;
    write_json(&run_dir.join(CERTIFICATION_FILE), report)?;
    Ok(run_dir)
}

/// Loads `<run_dir>/summary.json` and `<run_dir>/trace.csv`.
pub fn load_run(run_dir: &Path) -> Result<RunResult> {
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(run_dir.join(SUMMARY_FILE))?)?;
    let trace_path = run_dir.join(TRACE_FILE);
    let records = read_trace_csv(&fs::read_to_string(&trace_path)?, &trace_path)?;
    if records.is_empty() {
        return Err(Error::Parse {
            path: trace_path,
            line: 1,
            reason: "trace has no records".into(),
        });
    }
    Ok(summary.into_result(records))
}

/// Run directories (those holding a summary) directly under `dir`, or `dir`
/// itself when it is one.
pub fn find_run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(SUMMARY_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub struct ExperimentOutcome {
    pub problem: String,
    pub runs: Vec<RunResult>,
    pub reports: Vec<CertificationReport>,
    pub run_dirs: Vec<PathBuf>,
    pub plot: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_certified(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }
}

fn problem_label(spec: &ExperimentSpec) -> String {
    match &spec.source {
        ProblemSource::SyntheticQuadratic { d, kappa, seed } => {
            format!("synthetic-quadratic d={d} kappa={kappa} seed={seed}")
        }
        ProblemSource::SyntheticLogistic { n, d, seed } => {
            format!("synthetic-logistic n={n} d={d} seed={seed}")
        }
        ProblemSource::Libsvm { path, .. } => path.display().to_string(),
    }
}

/// Runs every method of `spec` from `x₀ = d^{-3/2}·1`, certifies each run and
/// writes its artifacts plus one plot for the whole experiment. Successful
/// runs are written even when another method fails.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let problem = spec.build_problem()?;
    let label = problem_label(spec);
    let x0 = solvers::default_start(problem.dim());
    let configs: Vec<SolverConfig> = spec
        .methods
        .iter()
        .map(|&m| SolverConfig {
            method: m,
            ..spec.solver.clone()
        })
        .collect();
    fs::create_dir_all(&spec.out_dir)?;
    let results = solvers::run_many(problem.as_ref(), &x0, &configs, spec.threads);

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    let mut run_dirs = Vec::new();
    let mut first_error = None;
    for res in results {
        match res {
            Ok(run) => {
                let report = analysis::certify_run(&run, &Tolerances::default());
                run_dirs.push(write_run_artifacts(&spec.out_dir, &run, &report, &label)?);
                info!(
                    "{}: {} iterations, {:?}, certified {}",
                    run.config.method,
                    run.iterations(),
                    run.terminal_reason,
                    report.passed
                );
                runs.push(run);
                reports.push(report);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let plot = spec.out_dir.join(PLOT_FILE);
    fs::write(&plot, render_plot(&runs, &spec.envelopes, &label))?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(ExperimentOutcome {
        problem: label,
        runs,
        reports,
        run_dirs,
        plot,
    })
}

pub const PLOT_FLOOR: f64 = 1e-16;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f",
];

struct Series {
    label: String,
    color: &'static str,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

/// One log-scale panel with a decade grid.
fn render_panel(out: &mut String, top: f64, title: &str, series: &[Series]) {
    const LEFT: f64 = 80.0;
    const WIDTH: f64 = 600.0;
    const HEIGHT: f64 = 280.0;
    let t_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    // Envelopes may start far above the data; only measured series set the range.
    let logs = series
        .iter()
        .filter(|s| !s.dashed)
        .flat_map(|s| s.points.iter().map(|p| p.1.max(PLOT_FLOOR).log10()));
    let (mut lo, mut hi) = logs.fold((0.0_f64, 0.0_f64), |(a, b), v| (a.min(v), b.max(v)));
    lo = lo.floor().max(PLOT_FLOOR.log10());
    hi = hi.ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let px = |t: f64| LEFT + WIDTH * t / t_max;
    let py = |v: f64| top + HEIGHT * (hi - v.max(PLOT_FLOOR).log10().clamp(lo, hi)) / (hi - lo);

    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{top}" width="{WIDTH}" height="{HEIGHT}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + WIDTH / 2.0,
        top - 8.0,
        escape(title)
    );
    let step = ((hi - lo) / 8.0).ceil().max(1.0) as i64;
    let mut e = lo as i64;
    while e <= hi as i64 {
        let y = top + HEIGHT * (hi - e as f64) / (hi - lo);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">1e{e}</text>"##,
            LEFT + WIDTH,
            LEFT - 6.0,
            y + 4.0
        );
        e += step;
    }
    let t_step = nice_step(t_max / 5.0);
    let mut t = 0.0;
    while t <= t_max + 1e-9 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{t}</text>"#,
            px(t),
            top + HEIGHT + 16.0
        );
        t += t_step;
    }
    for (k, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(t, v)| format!("{:.2},{:.2}", px(t), py(v)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5"{dash} points="{}"/>"#,
            s.color,
            pts.join(" ")
        );
        let ly = top + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}"{dash}/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            LEFT + WIDTH + 10.0,
            LEFT + WIDTH + 30.0,
            s.color,
            LEFT + WIDTH + 34.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.max(1.0).log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `λ_t/λ₀` against `t` for every run plus the requested envelopes; for
/// quadratic problems a second panel shows `σ_t`.
pub fn render_plot(runs: &[RunResult], envelopes: &[EnvelopeKind], title: &str) -> String {
    let mut lambda_series = Vec::new();
    let mut sigma_series = Vec::new();
    let mut t_max = 1;
    for (k, run) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        t_max = t_max.max(run.iterations());
        if let Some(l0) = run.lambda0().filter(|l| *l > 0.0) {
            lambda_series.push(Series {
                label: run.config.method.name().into(),
                color,
                dashed: false,
                points: run
                    .records
                    .iter()
                    .filter_map(|r| Some((r.t as f64, r.lambda? / l0)))
                    .collect(),
            });
        }
        let sigma: Vec<(f64, f64)> = run
            .records
            .iter()
            .filter_map(|r| Some((r.t as f64, r.sigma?)))
            .collect();
        if !sigma.is_empty() {
            sigma_series.push(Series {
                label: run.config.method.name().into(),
                color,
                dashed: false,
                points: sigma,
            });
        }
    }
    if let Some(run) = runs.first() {
        for (k, &kind) in envelopes.iter().enumerate() {
            let env = RateEnvelope::new(kind, run.constants, 1.0);
            lambda_series.push(Series {
                label: kind.name().into(),
                color: PALETTE[(runs.len() + k) % PALETTE.len()],
                dashed: true,
                points: (1..=t_max)
                    .map(|t| (t as f64, env.log_factor(t).exp()))
                    .collect(),
            });
        }
    }
    let two_panels = runs.iter().any(|r| r.quadratic) && !sigma_series.is_empty();
    let height = if two_panels { 720 } else { 380 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="860" height="{height}" viewBox="0 0 860 {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="860" height="{height}" fill="white"/>"#);
    render_panel(
        &mut out,
        40.0,
        &format!("Newton decrement ratio, {title}"),
        &lambda_series,
    );
    if two_panels {
        render_panel(&mut out, 400.0, "Hessian approximation error σ", &sigma_series);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Objective;
    use approx::assert_relative_eq;

    fn parse(text: &str) -> Result<Dataset> {
        parse_libsvm_str(text, Path::new("inline.txt"), None)
    }

    #[test]
    fn parses_single_line() {
        let ds = parse("+1 1:0.5 3:0.5\n").unwrap();
        assert_eq!(ds.labels.as_slice(), &[1.0]);
        assert_eq!(ds.z.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn maps_label_conventions() {
        let ds = parse("0 1:1\n1 1:1\n").unwrap();
        assert_eq!(ds.labels.as_slice(), &[-1.0, 1.0]);
        let ds = parse("1 1:1\n2 1:1\n").unwrap();
        assert_eq!(ds.labels.as_slice(), &[-1.0, 1.0]);
        let ds = parse("-1 1:1\n+1 1:1\n").unwrap();
        assert_eq!(ds.labels.as_slice(), &[-1.0, 1.0]);
        let ds = parse("3 1:1\n-2 1:1\n").unwrap();
        assert_eq!(ds.labels.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let cases = [
            ("+1 1:1\n+1 2:1 1:1\n", 2),
            ("+1 1:1\n\n-1 0:3\n", 3),
            ("x 1:1\n", 1),
            ("+1 1:1\n+1 1:1\n+1 2-1\n", 3),
            ("+1 1:abc\n", 1),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(parse("\n\n"), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn dimension_override() {
        let ds = parse_libsvm_str("+1 2:1\n", Path::new("x"), Some(5)).unwrap();
        assert_eq!(ds.dim(), 5);
        assert!(parse_libsvm_str("+1 6:1\n", Path::new("x"), Some(5)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let ds = parse("+1 1:3 2:4\n-1 1:0.6 2:0.8\n+1 1:0\n").unwrap();
        let n = normalize_rows(&ds);
        assert_eq!(n.n_samples(), 2);
        assert_eq!(n.dropped_rows, 1);
        assert_relative_eq!(n.z[(0, 0)], 0.6, epsilon = 1e-15);
        assert_relative_eq!(n.z[(0, 1)], 0.8, epsilon = 1e-15);
        assert!((n.z[(1, 0)] - 0.6).abs() <= 1e-15 && (n.z[(1, 1)] - 0.8).abs() <= 1e-15);
    }

    #[test]
    fn libsvm_round_trip() {
        let ds = synth_logistic(40, 7, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        write_libsvm(&ds, &path).unwrap();
        let back = parse_libsvm(&path, Some(ds.dim())).unwrap();
        assert_eq!(back.z, ds.z);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn synthetic_quadratic_spectrum() {
        let p = synth_quadratic(30, 100.0, 1).unwrap();
        let eig = nalgebra::SymmetricEigen::new(p.a().entries().clone()).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(0.0, f64::max);
        assert!((lo - 1.0).abs() <= 1e-8 && (hi - 100.0).abs() <= 1e-8 * 100.0);
        let c = p.constants();
        assert_eq!((c.mu, c.lip), (1.0, 100.0));
    }

    #[test]
    fn synthetic_quadratic_unit_kappa_is_identity() {
        let p = synth_quadratic(6, 1.0, 2).unwrap();
        assert_eq!(p.a().entries(), &DMatrix::<f64>::identity(6, 6));
    }

    #[test]
    fn synthetic_problems_are_deterministic() {
        let a = synth_quadratic(12, 10.0, 5).unwrap();
        let b = synth_quadratic(12, 10.0, 5).unwrap();
        assert_eq!(a.a().entries(), b.a().entries());
        assert_eq!(a.b(), b.b());
        assert_eq!(synth_logistic(20, 4, 1).unwrap(), synth_logistic(20, 4, 1).unwrap());
    }

    #[test]
    fn synthetic_logistic_rows_are_unit() {
        let ds = synth_logistic(200, 9, 4).unwrap();
        for row in ds.z.row_iter() {
            assert!((row.norm() - 1.0).abs() <= 1e-10);
        }
        assert!(ds.labels.iter().any(|&l| l > 0.0) && ds.labels.iter().any(|&l| l < 0.0));
    }

    #[test]
    fn config_parsing() {
        let spec = ExperimentSpec::parse_config(
            "problem = synthetic-logistic\nn = 300 # samples\nd = 8\nseed = 3\nmu = 0.01\n\
             methods = bfgs, sharpened\ncorrection = on\nmax_iters = 50\nout = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(
            spec.source,
            ProblemSource::SyntheticLogistic { n: 300, d: 8, seed: 3 }
        );
        assert_eq!(spec.methods, vec![Method::Bfgs, Method::SharpenedGeneral]);
        assert!(spec.solver.correction_enabled);
        assert_eq!(spec.solver.max_iters, 50);
        assert_eq!(spec.mu_reg, Some(0.01));
        assert!(ExperimentSpec::parse_config("bogus = 1\n").is_err());
        assert!(ExperimentSpec::parse_config("methods = \n").unwrap().validate().is_err());
    }

    #[test]
    fn sharpened_quadratic_rejected_on_logistic() {
        let mut spec = ExperimentSpec::default();
        spec.set("problem", "synthetic-logistic").unwrap();
        spec.set("methods", "sharpened-quadratic").unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn trace_round_trip_is_lossless() {
        let p = synth_quadratic(8, 30.0, 1).unwrap();
        let mut cfg = SolverConfig::new(Method::SharpenedQuadratic);
        cfg.record_timing = true;
        let run = solvers::run(&p, &solvers::default_start(8), &cfg).unwrap();
        let text = write_trace_csv(&run.records);
        let back = read_trace_csv(&text, Path::new("t.csv")).unwrap();
        assert_eq!(back, run.records);
    }

    #[test]
    fn plot_has_two_panels_for_quadratics() {
        let p = synth_quadratic(8, 30.0, 1).unwrap();
        let run = solvers::run(
            &p,
            &solvers::default_start(8),
            &SolverConfig::new(Method::GreedyBfgs),
        )
        .unwrap();
        let svg = render_plot(&[run], &[EnvelopeKind::LinearQuadCase], "q");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn table_lookup() {
        let e = known_dataset("w8a").unwrap();
        assert_eq!((e.n_samples, e.dim, e.mu), (49749, 300, 1e-4));
        assert!(known_dataset("iris").is_none());
    }
}
