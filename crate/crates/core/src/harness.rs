//! Declarative experiment runner.
//!
//! An experiment file is TOML with one `[[experiment]]` table per study:
//!
//! ```toml
//! [[experiment]]
//! name = "toy2-convergence"
//! kind = "convergence"
//! schemes = ["dlr_em", "dlr_ps_em", "dlr_ps_sde"]
//! rank = 2
//! paths = 2000
//! seed = 7
//! dt = [0.1, 0.05, 0.02, 0.01]
//! reference = ["em_fine", "dlr_ps_sde_fine"]
//! refinement = 10
//!
//! [experiment.model]
//! name = "toy_example_2"
//! ```
//!
//! Unknown keys are rejected. Every study writes CSV files and a
//! `manifest.toml` with SHA-256 digests of its outputs into its own
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{
    self, ams_margin, estimate_c_lgb, k1_bound, k4_bound, BoundParams, BoundTrace, DiagnosticsError,
    ErrorReport, SupErrorAccumulator,
};
use crate::ensemble::{self, fmt_f64, EnsembleError};
use crate::integrators::{
    integrate, integrate_recording, InitialState, IntegrateOptions, IntegratorError, RunOutput, Scheme,
    StepOptions, Trajectory,
};
use crate::linalg::Matrix;
use crate::models::{GbmModel, ModelConfig, ModelError, Problem, StabilityModel};
use crate::noise::{BrownianGrid, GridKey, NoiseError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Validation(String),
    #[error("cannot parse experiment file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot serialize manifest: {0}")]
    Manifest(#[from] toml::ser::Error),
}

impl HarnessError {
    /// Problems in the experiment file are detected before any computation starts.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Validation(_) | HarnessError::Parse(_) | HarnessError::Model(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Convergence,
    SingularValues,
    Stability,
    SingleRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Closed-form solution (gbm only).
    Exact,
    /// Full-order Euler–Maruyama on the fine grid.
    EmFine,
    /// DLR projector splitting for SDEs on the fine grid.
    DlrPsSdeFine,
}

impl ReferenceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceKind::Exact => "exact",
            ReferenceKind::EmFine => "em_fine",
            ReferenceKind::DlrPsSdeFine => "dlr_ps_sde_fine",
        }
    }
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::LOW_RANK.to_vec()
}
fn default_paths() -> usize {
    2000
}
fn default_seed() -> u64 {
    1
}
fn default_dt() -> Vec<f64> {
    vec![0.1, 0.05, 0.02, 0.01]
}
fn default_refinement() -> u64 {
    10
}
fn default_references() -> Vec<ReferenceKind> {
    vec![ReferenceKind::EmFine, ReferenceKind::DlrPsSdeFine]
}
fn default_slack() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub model: ModelConfig,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// Defaults to the model's suggested rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults to the model's suggested horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    /// Time steps, strictly decreasing except for stability sweeps.
    #[serde(default = "default_dt")]
    pub dt: Vec<f64>,
    #[serde(default = "default_references")]
    pub reference: Vec<ReferenceKind>,
    /// Fine step is the smallest `dt` divided by this factor.
    #[serde(default = "default_refinement")]
    pub refinement: u64,
    /// Output directory relative to the output root; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub debug_identities: bool,
    #[serde(default)]
    pub linear_fast_path: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinv_threshold: Option<f64>,
    /// Monte-Carlo slack on the simple Gramian bound.
    #[serde(default = "default_slack")]
    pub bound_slack: f64,
    /// Snapshot stride (in steps) of single runs; 0 keeps only the ends.
    #[serde(default)]
    pub snapshot_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub experiment: Vec<ExperimentSpec>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let f: ExperimentFile = toml::from_str(text)?;
        if f.experiment.is_empty() {
            return Err(HarnessError::Validation("no [[experiment]] tables".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &f.experiment {
            if !names.insert(e.name.clone()) {
                return Err(HarnessError::Validation(format!("duplicate experiment name '{}'", e.name)));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Validates every experiment, including model construction.
    pub fn validate(&self) -> Result<(), HarnessError> {
        for e in &self.experiment {
            e.validate()?;
        }
        Ok(())
    }
}

/// Number of steps of size `dt` in `t`, if `t/dt` is an integer.
fn whole_steps(t: f64, dt: f64) -> Option<u64> {
    let r = t / dt;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as u64)
    } else {
        None
    }
}

impl ExperimentSpec {
    fn invalid(&self, msg: impl std::fmt::Display) -> HarnessError {
        HarnessError::Validation(format!("experiment '{}': {msg}", self.name))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let problem = self.model.build()?;
        self.validate_with(&problem)
    }

    fn validate_with(&self, problem: &Problem) -> Result<(), HarnessError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(self.invalid("name must be non-empty and contain no path separators"));
        }
        if self.schemes.is_empty() {
            return Err(self.invalid("no schemes"));
        }
        if self.paths == 0 {
            return Err(self.invalid("paths must be positive"));
        }
        if self.dt.is_empty() || self.dt.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(self.invalid("dt values must be positive and finite"));
        }
        if self.kind == ExperimentKind::Stability {
            let mut sorted = self.dt.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(self.invalid("dt values must be distinct"));
            }
        } else if self.dt.windows(2).any(|w| w[1] >= w[0]) {
            return Err(self.invalid("dt list must be strictly decreasing"));
        }
        let t_final = self.t_final(problem);
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(self.invalid("t_final must be positive"));
        }
        let k = self.rank(problem);
        let d = problem.model.dim();
        if k == 0 || k > d || k > self.paths {
            return Err(self.invalid(format!("rank {k} must lie in 1..=min(d = {d}, M = {})", self.paths)));
        }
        if let Some(thr) = self.pinv_threshold {
            if !(thr > 0.0 && thr < 1.0) {
                return Err(self.invalid("pinv_threshold must lie in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.bound_slack) {
            return Err(self.invalid("bound_slack must lie in [0, 1)"));
        }
        if self.refinement == 0 {
            return Err(self.invalid("refinement must be at least 1"));
        }
        match self.kind {
            ExperimentKind::Convergence => {
                if self.reference.is_empty() {
                    return Err(self.invalid("convergence needs at least one reference"));
                }
                if self.reference.contains(&ReferenceKind::Exact) && self.model.name != "gbm" {
                    return Err(self.invalid("the exact reference is only available for gbm"));
                }
                let fine = self.fine_dt();
                let n_fine = whole_steps(t_final, fine)
                    .ok_or_else(|| self.invalid(format!("t_final {t_final} is not a multiple of the fine step {fine}")))?;
                for &dt in &self.dt {
                    let f = whole_steps(dt, fine)
                        .ok_or_else(|| self.invalid(format!("dt {dt} is not a multiple of the fine step {fine}")))?;
                    if n_fine % f != 0 {
                        return Err(self.invalid(format!("dt {dt} does not divide t_final")));
                    }
                }
                let dt_min = *self.dt.last().expect("non-empty");
                for &dt in &self.dt {
                    if whole_steps(dt, dt_min).is_none() {
                        return Err(self.invalid(format!("dt {dt} is not a multiple of the smallest dt {dt_min}")));
                    }
                }
            }
            ExperimentKind::SingularValues => {
                for &dt in &self.dt {
                    whole_steps(t_final, dt)
                        .ok_or_else(|| self.invalid(format!("t_final is not a multiple of dt {dt}")))?;
                }
                if self.schemes.contains(&Scheme::Em) {
                    return Err(self.invalid("singular_values needs low-rank schemes"));
                }
            }
            ExperimentKind::Stability => {
                if self.model.name != "stability_model" {
                    return Err(self.invalid("stability studies use stability_model"));
                }
                if self.schemes.contains(&Scheme::Em) {
                    return Err(self.invalid("stability studies compare low-rank schemes"));
                }
            }
            ExperimentKind::SingleRun => {
                if self.dt.len() != 1 || self.schemes.len() != 1 {
                    return Err(self.invalid("single_run takes exactly one dt and one scheme"));
                }
                whole_steps(t_final, self.dt[0])
                    .ok_or_else(|| self.invalid("t_final is not a multiple of dt"))?;
            }
        }
        Ok(())
    }

    pub fn t_final(&self, problem: &Problem) -> f64 {
        self.t_final.unwrap_or(problem.t_final)
    }

    pub fn rank(&self, problem: &Problem) -> usize {
        self.rank.unwrap_or(problem.default_rank)
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt.last().copied().unwrap_or(1.0) / self.refinement as f64
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            pinv_threshold: self.pinv_threshold.unwrap_or(crate::linalg::DEFAULT_PINV_THRESHOLD),
            linear_fast_path: self.linear_fast_path,
            debug_identities: self.debug_identities,
            ..StepOptions::default()
        }
    }

    pub fn output_dir(&self, root: &Path) -> PathBuf {
        root.join(self.output.as_deref().unwrap_or(&self.name))
    }
}

/// Settings shared by the library-level studies below.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub rank: usize,
    pub paths: usize,
    pub seed: u64,
    pub t_final: f64,
    pub step: StepOptions,
}

fn initial_state(scheme: Scheme, samples: &Matrix, rank: usize) -> Result<InitialState, HarnessError> {
    Ok(if scheme == Scheme::Em {
        InitialState::Full(samples.clone())
    } else {
        InitialState::LowRank(ensemble::init_rank_k(samples, rank)?)
    })
}

/// Exact gbm trajectory at every `stride`-th node of `grid`.
pub fn gbm_exact_trajectory(gbm: &GbmModel, x0: &Matrix, grid: &BrownianGrid, stride: u64) -> Result<Trajectory, HarnessError> {
    let coarse = grid.coarsen(stride)?;
    let mp = x0.cols();
    let mut w = Matrix::zeros(1, mp);
    let mut traj = Trajectory {
        grid: grid.key(),
        times: Vec::new(),
        states: Vec::new(),
    };
    let exact_at = |t: f64, w: &Matrix| Matrix::from_fn(1, mp, |_, j| gbm.exact(x0[(0, j)], t, w[(0, j)]));
    traj.times.push(coarse.time(0));
    traj.states.push(exact_at(coarse.time(0), &w));
    for s in 0..coarse.n_steps() {
        w.axpy(1.0, &coarse.increment(s)).expect("1 x M");
        let t = coarse.time(s + 1);
        traj.times.push(t);
        traj.states.push(exact_at(t, &w));
    }
    Ok(traj)
}

/// Scheme, step, `(l2_sup, relative)` per reference and run status.
type CellErrors = (Scheme, f64, Vec<(f64, f64)>, String);

/// Strong-error study: every scheme at every `dt` against each reference,
/// all driven by one fine Brownian grid and one set of initial samples.
pub fn convergence_study(
    problem: &Problem,
    cfg: &StudyConfig,
    schemes: &[Scheme],
    dts: &[f64],
    refinement: u64,
    references: &[ReferenceKind],
) -> Result<Vec<ErrorReport>, HarnessError> {
    let model = problem.model.as_ref();
    let dt_min = *dts.last().ok_or_else(|| HarnessError::Validation("empty dt list".into()))?;
    let fine_dt = dt_min / refinement as f64;
    let n_fine = whole_steps(cfg.t_final, fine_dt)
        .ok_or_else(|| HarnessError::Validation("t_final is not a multiple of the fine step".into()))?;
    let fine = BrownianGrid::generate(cfg.seed, 0.0, cfg.t_final, n_fine, model.noise_dim(), cfg.paths)?;
    let samples = problem.initial.sample(cfg.seed, cfg.paths);
    let opts = IntegrateOptions { step: cfg.step.clone() };

    let mut refs: Vec<(ReferenceKind, Trajectory)> = Vec::new();
    for &r in references {
        let traj = match r {
            ReferenceKind::Exact => {
                let gbm = GbmModel {
                    mu: problem.model.linear_drift(0.0).map(|a| a[(0, 0)]).unwrap_or(0.0),
                    sigma: problem.model.diffusion(0.0, &[1.0])[(0, 0)],
                };
                if model.name() != "gbm" {
                    return Err(HarnessError::Validation("exact reference needs gbm".into()));
                }
                gbm_exact_trajectory(&gbm, &samples, &fine, refinement)?
            }
            ReferenceKind::EmFine | ReferenceKind::DlrPsSdeFine => {
                let scheme = if r == ReferenceKind::EmFine { Scheme::Em } else { Scheme::DlrPsSde };
                info!("reference {} on {n_fine} fine steps", r.as_str());
                let init = initial_state(scheme, &samples, cfg.rank)?;
                let (out, traj) = integrate_recording(model, scheme, &init, &fine, &opts, refinement)?;
                if let Some(f) = out.failure {
                    return Err(f.error.into());
                }
                traj
            }
        };
        refs.push((r, traj));
    }

    let cells: Vec<(Scheme, f64)> = schemes
        .iter()
        .flat_map(|&s| dts.iter().map(move |&d| (s, d)))
        .collect();
    let results: Vec<Result<CellErrors, HarnessError>> = cells
        .par_iter()
        .map(|&(scheme, dt)| {
            let factor = whole_steps(dt, fine_dt)
                .ok_or_else(|| HarnessError::Validation(format!("dt {dt} is not a multiple of the fine step")))?;
            let ratio = whole_steps(dt, dt_min)
                .ok_or_else(|| HarnessError::Validation(format!("dt {dt} is not a multiple of {dt_min}")))?
                as usize;
            let grid = fine.coarsen(factor)?;
            let init = initial_state(scheme, &samples, cfg.rank)?;
            let mut accs: Vec<SupErrorAccumulator> = refs.iter().map(|_| SupErrorAccumulator::new(cfg.paths)).collect();
            let out = integrate(model, scheme, &init, &grid, &opts, &mut |n, t, x| {
                for ((_, tr), acc) in refs.iter().zip(accs.iter_mut()) {
                    let idx = n as usize * ratio;
                    debug_assert!((tr.times[idx] - t).abs() <= 1e-9 * cfg.t_final);
                    acc.observe(x, &tr.states[idx]);
                }
            })?;
            let status = match &out.failure {
                None => "ok".to_string(),
                Some(f) => format!("failed at step {}: {}", f.step, f.error).replace(',', ";"),
            };
            let errs = accs.iter().map(|a| (a.l2_sup(), a.relative())).collect();
            Ok((scheme, dt, errs, status))
        })
        .collect();

    let mut reports: BTreeMap<(Scheme, ReferenceKind), ErrorReport> = BTreeMap::new();
    for res in results {
        let (scheme, dt, errs, status) = res?;
        for ((r, _), (l2, rel)) in refs.iter().zip(errs) {
            let rep = reports
                .entry((scheme, *r))
                .or_insert_with(|| ErrorReport::new(scheme, r.as_str()));
            if status == "ok" {
                rep.push(dt, l2, rel, "ok");
            } else {
                rep.push(dt, f64::NAN, f64::NAN, status.clone());
            }
        }
    }
    let mut out: Vec<ErrorReport> = reports.into_values().collect();
    for r in &mut out {
        r.fit();
    }
    Ok(out)
}

/// Smallest Gramian eigenvalue and mean-square norm at every node of a
/// low-rank run.
#[derive(Debug, Clone)]
pub struct SingularValueRun {
    pub scheme: Scheme,
    pub dt: f64,
    pub trace: BoundTrace,
    pub mean_square: Vec<f64>,
    pub c_lgb: f64,
    pub c_lgb_certified: bool,
    pub failure: Option<String>,
}

pub fn singular_value_study(
    problem: &Problem,
    cfg: &StudyConfig,
    schemes: &[Scheme],
    dts: &[f64],
    slack: f64,
) -> Result<Vec<SingularValueRun>, HarnessError> {
    let model = problem.model.as_ref();
    let samples = problem.initial.sample(cfg.seed, cfg.paths);
    let s0 = ensemble::init_rank_k(&samples, cfg.rank)?;
    let sigma_0 = s0.gramian().min_eigenvalue().max(0.0);
    let e_x0_sq = ensemble::mean_square_norm(&samples);
    let opts = IntegrateOptions { step: cfg.step.clone() };
    let cells: Vec<(Scheme, f64)> = schemes
        .iter()
        .flat_map(|&s| dts.iter().map(move |&d| (s, d)))
        .collect();
    cells
        .par_iter()
        .map(|&(scheme, dt)| {
            let n = whole_steps(cfg.t_final, dt)
                .ok_or_else(|| HarnessError::Validation(format!("t_final is not a multiple of dt {dt}")))?;
            let grid = BrownianGrid::generate(cfg.seed, 0.0, cfg.t_final, n, model.noise_dim(), cfg.paths)?;
            let mut times = Vec::new();
            let mut mean_square = Vec::new();
            let mut c_est: f64 = 0.0;
            let certified = model.c_lgb();
            let out = integrate(model, scheme, &InitialState::LowRank(s0.clone()), &grid, &opts, &mut |_, t, x| {
                times.push(t);
                mean_square.push(ensemble::mean_square_norm(x));
                if certified.is_none() {
                    c_est = c_est.max(estimate_c_lgb(model, &[t], x));
                }
            })?;
            let c_lgb = certified.unwrap_or(c_est);
            let mut sigma_k = vec![sigma_0];
            sigma_k.extend(out.records.iter().map(|r| r.sigma_min_next));
            times.truncate(sigma_k.len());
            let sup_ex_sq = mean_square.iter().cloned().fold(0.0, f64::max);
            let k_bound = match scheme {
                Scheme::DlrEm => k1_bound(cfg.t_final, e_x0_sq, c_lgb),
                _ => k4_bound(cfg.t_final, e_x0_sq, c_lgb, cfg.t_final),
            };
            let params = BoundParams {
                sigma_b: model.sigma_b_lower().unwrap_or(0.0),
                c_lgb,
                k_bound,
                dt,
                sup_ex_sq,
                slack,
            };
            Ok(SingularValueRun {
                scheme,
                dt,
                trace: BoundTrace::build(&times, &sigma_k, params),
                mean_square,
                c_lgb,
                c_lgb_certified: certified.is_some(),
                failure: out.failure.map(|f| f.error.to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityClass {
    Stable,
    Unstable,
    Inconclusive,
}

impl StabilityClass {
    pub fn as_str(self) -> &'static str {
        match self {
            StabilityClass::Stable => "stable",
            StabilityClass::Unstable => "unstable",
            StabilityClass::Inconclusive => "inconclusive",
        }
    }
}

/// Stable below `1e-3` of the initial mean-square norm, unstable above
/// `10` times it or on overflow.
pub fn classify_stability(initial: f64, last: f64, overflowed: bool) -> StabilityClass {
    if overflowed || !last.is_finite() || last > 10.0 * initial {
        StabilityClass::Unstable
    } else if last < 1e-3 * initial {
        StabilityClass::Stable
    } else {
        StabilityClass::Inconclusive
    }
}

#[derive(Debug, Clone)]
pub struct StabilityRun {
    pub scheme: Scheme,
    pub dt: f64,
    pub times: Vec<f64>,
    pub mean_square: Vec<f64>,
    pub class: StabilityClass,
    /// Margin at `t = 0`.
    pub ams_margin: f64,
    pub failure: Option<String>,
}

/// Mean-square stability sweep. The horizon is rounded up to a whole
/// number of steps.
pub fn stability_study(
    problem: &Problem,
    cfg: &StudyConfig,
    schemes: &[Scheme],
    dts: &[f64],
) -> Result<Vec<StabilityRun>, HarnessError> {
    let model = problem.model.as_ref();
    let samples = problem.initial.sample(cfg.seed, cfg.paths);
    let s0 = ensemble::init_rank_k(&samples, cfg.rank)?;
    let a0 = model
        .linear_drift(0.0)
        .ok_or_else(|| HarnessError::Validation("stability study needs a linear drift".into()))?;
    let b_mats = StabilityModel { d: model.dim() }.b_matrices();
    let opts = IntegrateOptions { step: cfg.step.clone() };
    let cells: Vec<(Scheme, f64)> = schemes
        .iter()
        .flat_map(|&s| dts.iter().map(move |&d| (s, d)))
        .collect();
    cells
        .par_iter()
        .map(|&(scheme, dt)| {
            let n = (cfg.t_final / dt - 1e-9).ceil().max(1.0) as u64;
            let grid = BrownianGrid::generate(cfg.seed, 0.0, n as f64 * dt, n, model.noise_dim(), cfg.paths)?;
            let mut times = Vec::with_capacity(n as usize + 1);
            let mut ms = Vec::with_capacity(n as usize + 1);
            let out = integrate(model, scheme, &InitialState::LowRank(s0.clone()), &grid, &opts, &mut |_, t, x| {
                times.push(t);
                ms.push(ensemble::mean_square_norm(x));
            })?;
            let initial = ms[0];
            let last = *ms.last().expect("node 0 observed");
            let class = classify_stability(initial, last, out.failure.is_some());
            Ok(StabilityRun {
                scheme,
                dt,
                times,
                mean_square: ms,
                class,
                ams_margin: ams_margin(&a0, &b_mats, dt)?,
                failure: out.failure.map(|f| f.error.to_string()),
            })
        })
        .collect()
}

/// One output file and its digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    pub wall_time_seconds: f64,
    pub threads: usize,
    /// Every Brownian grid used, by its generating tuple.
    pub grids: Vec<GridKey>,
    pub initial_law_seed: u64,
    pub outputs: Vec<OutputDigest>,
    pub spec: ExperimentSpec,
}

/// Writes files atomically into one experiment directory and records their
/// digests.
struct OutputSink {
    dir: PathBuf,
    digests: Vec<OutputDigest>,
}

impl OutputSink {
    fn new(dir: PathBuf) -> Result<Self, HarnessError> {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir, digests: Vec::new() })
    }

    fn write(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let mut buf = Vec::new();
        fill(&mut buf).map_err(io_err(&path))?;
        {
            let mut f = BufWriter::new(fs::File::create(&tmp).map_err(io_err(&tmp))?);
            f.write_all(&buf).map_err(io_err(&tmp))?;
            f.flush().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.digests.push(OutputDigest {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&buf)),
        });
        Ok(())
    }
}

fn dt_tag(dt: f64) -> String {
    format!("{dt}").replace('.', "p")
}

/// Summary of one executed experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub reports: Vec<ErrorReport>,
    pub singular_values: Vec<SingularValueRun>,
    pub stability: Vec<StabilityRun>,
    pub single: Option<RunOutput>,
}

/// Runs one experiment and writes its outputs under `root`.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path) -> Result<ExperimentOutcome, HarnessError> {
    let problem = spec.model.build()?;
    spec.validate_with(&problem)?;
    let started = Instant::now();
    let cfg = StudyConfig {
        rank: spec.rank(&problem),
        paths: spec.paths,
        seed: spec.seed,
        t_final: spec.t_final(&problem),
        step: spec.step_options(),
    };
    let dir = spec.output_dir(root);
    let mut sink = OutputSink::new(dir.clone())?;
    let mut outcome = ExperimentOutcome {
        name: spec.name.clone(),
        dir: dir.clone(),
        manifest: RunManifest {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_seconds: 0.0,
            threads: rayon::current_num_threads(),
            grids: Vec::new(),
            initial_law_seed: spec.seed,
            outputs: Vec::new(),
            spec: spec.clone(),
        },
        reports: Vec::new(),
        singular_values: Vec::new(),
        stability: Vec::new(),
        single: None,
    };
    let m = problem.model.noise_dim();
    let key = |n: u64, t1: f64| GridKey {
        seed: spec.seed,
        t0: 0.0,
        t1,
        fine_steps: n,
        m,
        m_paths: spec.paths,
    };
    match spec.kind {
        ExperimentKind::Convergence => {
            let reports = convergence_study(&problem, &cfg, &spec.schemes, &spec.dt, spec.refinement, &spec.reference)?;
            let n_fine = whole_steps(cfg.t_final, spec.fine_dt()).expect("validated");
            outcome.manifest.grids.push(key(n_fine, cfg.t_final));
            for r in &reports {
                sink.write(&format!("convergence_{}_vs_{}.csv", r.scheme, r.reference), |w| r.write_csv(w))?;
            }
            sink.write("slopes.csv", |w| {
                writeln!(w, "scheme,reference,fitted_order")?;
                for r in &reports {
                    let o = r.fitted_order.map(fmt_f64).unwrap_or_else(|| "nan".into());
                    writeln!(w, "{},{},{}", r.scheme, r.reference, o)?;
                }
                Ok(())
            })?;
            outcome.reports = reports;
        }
        ExperimentKind::SingularValues => {
            let runs = singular_value_study(&problem, &cfg, &spec.schemes, &spec.dt, spec.bound_slack)?;
            for r in &runs {
                let n = whole_steps(cfg.t_final, r.dt).expect("validated");
                outcome.manifest.grids.push(key(n, cfg.t_final));
                let flagged = r.trace.flags.iter().filter(|f| f.contains("below_simple_bound")).count();
                if flagged > 0 {
                    warn!("{} dt={}: {flagged} rows below the simple bound", r.scheme, r.dt);
                }
                sink.write(&format!("bounds_{}_dt{}.csv", r.scheme, dt_tag(r.dt)), |w| r.trace.write_csv(w))?;
            }
            sink.write("singular_values_summary.csv", |w| {
                writeln!(w, "scheme,dt,c_lgb,c_lgb_certified,min_sigma_k,rows_below_simple,rows_dt_above_dt_hat,status")?;
                for r in &runs {
                    let min_s = r.trace.sigma_k_observed.iter().cloned().fold(f64::INFINITY, f64::min);
                    let below = r.trace.flags.iter().filter(|f| f.contains("below_simple_bound")).count();
                    let above = r.trace.flags.iter().filter(|f| f.contains("dt_above_dt_hat")).count();
                    let status = r.failure.clone().unwrap_or_else(|| "ok".into()).replace(',', ";");
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        r.scheme,
                        fmt_f64(r.dt),
                        fmt_f64(r.c_lgb),
                        r.c_lgb_certified,
                        fmt_f64(min_s),
                        below,
                        above,
                        status
                    )?;
                }
                Ok(())
            })?;
            outcome.singular_values = runs;
        }
        ExperimentKind::Stability => {
            let runs = stability_study(&problem, &cfg, &spec.schemes, &spec.dt)?;
            for r in &runs {
                let n = r.times.len() as u64 - 1;
                outcome.manifest.grids.push(key(n.max(1), r.dt * n.max(1) as f64));
                sink.write(&format!("stability_{}_dt{}.csv", r.scheme, dt_tag(r.dt)), |w| {
                    writeln!(w, "t,mean_square")?;
                    for (t, v) in r.times.iter().zip(&r.mean_square) {
                        writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(*v))?;
                    }
                    Ok(())
                })?;
            }
            sink.write("stability_summary.csv", |w| {
                writeln!(w, "scheme,dt,initial,final,class,ams_margin")?;
                for r in &runs {
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        r.scheme,
                        fmt_f64(r.dt),
                        fmt_f64(r.mean_square[0]),
                        fmt_f64(*r.mean_square.last().expect("non-empty")),
                        r.class.as_str(),
                        fmt_f64(r.ams_margin)
                    )?;
                }
                Ok(())
            })?;
            outcome.stability = runs;
        }
        ExperimentKind::SingleRun => {
            let scheme = spec.schemes[0];
            let dt = spec.dt[0];
            let n = whole_steps(cfg.t_final, dt).expect("validated");
            let grid = BrownianGrid::generate(spec.seed, 0.0, cfg.t_final, n, m, spec.paths)?;
            outcome.manifest.grids.push(grid.key());
            let samples = problem.initial.sample(spec.seed, spec.paths);
            let init = initial_state(scheme, &samples, cfg.rank)?;
            let every = spec.snapshot_every;
            let mut snaps: Vec<(u64, f64, Matrix)> = Vec::new();
            let mut ms = Vec::new();
            let out = integrate(
                problem.model.as_ref(),
                scheme,
                &init,
                &grid,
                &IntegrateOptions { step: cfg.step.clone() },
                &mut |k, t, x| {
                    ms.push((t, ensemble::mean_square_norm(x)));
                    if k == 0 || (every > 0 && k % every == 0) {
                        snaps.push((k, t, x.clone()));
                    }
                },
            )?;
            if snaps.last().map(|s| s.0) != Some(out.steps_completed) {
                snaps.push((out.steps_completed, grid.time(out.steps_completed), out.final_x.clone()));
            }
            for (k, t, x) in &snaps {
                sink.write(&format!("snapshot_{k:08}.csv"), |w| write_ambient_csv(*t, x, w))?;
            }
            if let Some(state) = &out.final_state {
                sink.write("final_state.csv", |w| {
                    ensemble::write_snapshot_csv(state, w).map_err(|e| io::Error::other(e.to_string()))
                })?;
            }
            sink.write("mean_square.csv", |w| {
                writeln!(w, "t,mean_square")?;
                for (t, v) in &ms {
                    writeln!(w, "{},{}", fmt_f64(*t), fmt_f64(*v))?;
                }
                Ok(())
            })?;
            sink.write("step_records.csv", |w| write_records_csv(&out, w))?;
            if let Some(f) = &out.failure {
                warn!("{}: run stopped at step {}: {}", spec.name, f.step, f.error);
            }
            outcome.single = Some(out);
        }
    }
    outcome.manifest.wall_time_seconds = started.elapsed().as_secs_f64();
    outcome.manifest.outputs = sink.digests.clone();
    let text = toml::to_string(&outcome.manifest)?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(outcome)
}

/// Ambient ensemble `x` (d x M) at time `t`: header `t,d,M`, then rows.
pub fn write_ambient_csv(t: f64, x: &Matrix, w: &mut dyn Write) -> io::Result<()> {
    writeln!(w, "t,d,M")?;
    writeln!(w, "{},{},{}", fmt_f64(t), x.rows(), x.cols())?;
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn write_records_csv(out: &RunOutput, w: &mut dyn Write) -> io::Result<()> {
    writeln!(
        w,
        "t_next,sigma_min_gramian,sigma_min_next,qr_r_condition,solver_residual,orthonormality_defect,solver_warning,reorthonormalized"
    )?;
    for r in &out.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.t_next),
            fmt_f64(r.sigma_min_gramian),
            fmt_f64(r.sigma_min_next),
            fmt_f64(r.qr_r_condition),
            fmt_f64(r.solver_residual),
            fmt_f64(r.orthonormality_defect),
            r.solver_warning,
            r.reorthonormalized
        )?;
    }
    Ok(())
}

/// Runs every experiment of a file in order.
pub fn run_file(file: &ExperimentFile, root: &Path) -> Result<Vec<ExperimentOutcome>, HarnessError> {
    file.validate()?;
    file.experiment.iter().map(|e| run_experiment(e, root)).collect()
}

/// Relative strong errors indexed by `(scheme, reference)`.
pub fn report_index(reports: &[ErrorReport]) -> BTreeMap<(Scheme, String), &ErrorReport> {
    reports.iter().map(|r| ((r.scheme, r.reference.clone()), r)).collect()
}

pub use diagnostics::fit_order;
