//! Time steppers: full-order Euler–Maruyama and the three low-rank schemes.
//!
//! All low-rank steps share one skeleton:
//!
//! 1. evaluate `a(t, x_j)` and `b(t, x_j) dw_j` on every path of `x = uᵀy`;
//! 2. update the stochastic modes `ỹ = y + u (a dt + b dw)`;
//! 3. correct the deterministic modes `ũ = u + C⁺ G (I − uᵀu)`, where the
//!    Gramian `C` and right-hand side `G` are scheme specific;
//! 4. re-orthonormalize `(q, r) = qr(ũᵀ)`, `u⁺ = qᵀ`, `y⁺ = r ỹ`.
//!
//! | scheme       | `C`      | `G`                    |
//! |--------------|----------|------------------------|
//! | `dlr_em`     | `E[yyᵀ]` | `E[y aᵀ] dt`           |
//! | `dlr_ps_em`  | `E[ỹỹᵀ]` | `E[ỹ (a dt + b dw)ᵀ]`  |
//! | `dlr_ps_sde` | `E[ỹỹᵀ]` | `E[ỹ aᵀ] dt`           |
//!
//! Per-path evaluations run on the rayon pool; every expectation is reduced
//! sequentially over the path index, so results do not depend on the number
//! of threads.

use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{self, expectation_outer, orthonormality_defect, EnsembleError, EnsembleState};
use crate::linalg::{self, pinv_apply, reduced_qr, LinalgError, Matrix, SymEig};
use crate::models::SdeModel;
use crate::noise::{BrownianGrid, GridKey};

/// Relative residual of the mode solve above which a step is flagged.
pub const SOLVER_WARNING_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IntegratorError {
    #[error("model returned non-finite values at t = {t}, path {path}")]
    ModelBlowUp { t: f64, path: usize },
    #[error("step at t = {t} failed: {source}")]
    StepFailed { t: f64, source: LinalgError },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Em,
    DlrEm,
    DlrPsEm,
    DlrPsSde,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Em, Scheme::DlrEm, Scheme::DlrPsEm, Scheme::DlrPsSde];
    pub const LOW_RANK: [Scheme; 3] = [Scheme::DlrEm, Scheme::DlrPsEm, Scheme::DlrPsSde];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Em => "em",
            Scheme::DlrEm => "dlr_em",
            Scheme::DlrPsEm => "dlr_ps_em",
            Scheme::DlrPsSde => "dlr_ps_sde",
        }
    }

    pub fn is_low_rank(self) -> bool {
        self != Scheme::Em
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scheme '{s}'"))
    }
}

/// What to do when the QR of `ũᵀ` detects rank deficiency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDeficiencyPolicy {
    /// Abort the run with a `StepFailed` error.
    #[default]
    Abort,
    /// Keep the previous modes (`ũ = u`) for this step and flag it.
    KeepModes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOptions {
    /// Relative eigenvalue cut-off of the Gramian pseudo-inverse.
    pub pinv_threshold: f64,
    /// Use `ũ = u + u Aᵀ (I − uᵀu) dt` in `dlr_em` when the drift is linear.
    pub linear_fast_path: bool,
    /// Compute factorization and projected-update defects every step.
    pub debug_identities: bool,
    /// Adds `v zᵀ` to `ũ` for every null eigenvector `v` of the Gramian used
    /// in the mode solve. Such a term leaves the solved system unchanged.
    pub null_space_injection: Option<Vec<f64>>,
    pub rank_deficiency: RankDeficiencyPolicy,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            pinv_threshold: linalg::DEFAULT_PINV_THRESHOLD,
            linear_fast_path: false,
            debug_identities: false,
            null_space_injection: None,
            rank_deficiency: RankDeficiencyPolicy::Abort,
        }
    }
}

/// Per-step diagnostics of a low-rank step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_next: f64,
    /// Smallest eigenvalue of the Gramian used in the mode solve (clamped at 0).
    pub sigma_min_gramian: f64,
    /// Smallest eigenvalue of `E[y⁺ y⁺ᵀ]` after the step (clamped at 0).
    pub sigma_min_next: f64,
    /// `λ_max / λ_min` of `rᵀr`.
    pub qr_r_condition: f64,
    /// `λ_min(rᵀr)`.
    pub r_min_eigenvalue: f64,
    /// `‖C ũ − (C u + G_proj)‖ / ‖C u + G_proj‖`.
    pub solver_residual: f64,
    pub solver_warning: bool,
    /// `‖u⁺u⁺ᵀ − I‖_F` before any re-orthonormalization.
    pub orthonormality_defect: f64,
    pub reorthonormalized: bool,
    pub kept_modes: bool,
    /// `‖u⁺ᵀy⁺ − ũᵀỹ‖ / ‖ũᵀỹ‖` (debug only).
    pub factorization_defect: Option<f64>,
    /// Relative defect of the projected-update identity (debug only, PS schemes).
    pub identity_defect: Option<f64>,
}

/// Path-major model evaluations: row `j` holds path `j`.
struct PathEval {
    drift: Matrix,
    noise: Matrix,
}

fn evaluate_paths(
    model: &dyn SdeModel,
    t: f64,
    x_pm: &Matrix,
    dw_pm: &Matrix,
) -> Result<PathEval, IntegratorError> {
    let (mp, d) = x_pm.shape();
    let mut drift = Matrix::zeros(mp, d);
    let mut noise = Matrix::zeros(mp, d);
    drift
        .as_mut_slice()
        .par_chunks_mut(d)
        .zip(noise.as_mut_slice().par_chunks_mut(d))
        .enumerate()
        .with_min_len(64)
        .for_each(|(j, (a, bw))| {
            let x = x_pm.row(j);
            model.drift_into(t, x, a);
            model.diffusion_apply_into(t, x, dw_pm.row(j), bw);
        });
    for j in 0..mp {
        if drift.row(j).iter().chain(noise.row(j)).any(|v| !v.is_finite()) {
            return Err(IntegratorError::ModelBlowUp { t, path: j });
        }
    }
    Ok(PathEval { drift, noise })
}

fn check_dims(model: &dyn SdeModel, d: usize, mp: usize, dw: &Matrix) -> Result<(), IntegratorError> {
    if d != model.dim() {
        return Err(IntegratorError::Dimension(format!(
            "state dimension {d} but model {} has d = {}",
            model.name(),
            model.dim()
        )));
    }
    if dw.shape() != (model.noise_dim(), mp) {
        return Err(IntegratorError::Dimension(format!(
            "increments {:?}, expected {} x {mp}",
            dw.shape(),
            model.noise_dim()
        )));
    }
    Ok(())
}

/// One Euler–Maruyama step on the full ensemble `x` (d x M).
pub fn em_step(
    model: &dyn SdeModel,
    x: &Matrix,
    t: f64,
    dt: f64,
    dw: &Matrix,
) -> Result<Matrix, IntegratorError> {
    check_dims(model, x.rows(), x.cols(), dw)?;
    let x_pm = x.transpose();
    let ev = evaluate_paths(model, t, &x_pm, &dw.transpose())?;
    let mut next = x_pm;
    next.axpy(dt, &ev.drift)?;
    next.axpy(1.0, &ev.noise)?;
    Ok(next.transpose())
}

pub fn dlr_em_step(
    model: &dyn SdeModel,
    state: &EnsembleState,
    dt: f64,
    dw: &Matrix,
    opts: &StepOptions,
) -> Result<(EnsembleState, StepRecord), IntegratorError> {
    low_rank_step(Scheme::DlrEm, model, state, dt, dw, opts)
}

pub fn dlr_ps_em_step(
    model: &dyn SdeModel,
    state: &EnsembleState,
    dt: f64,
    dw: &Matrix,
    opts: &StepOptions,
) -> Result<(EnsembleState, StepRecord), IntegratorError> {
    low_rank_step(Scheme::DlrPsEm, model, state, dt, dw, opts)
}

pub fn dlr_ps_sde_step(
    model: &dyn SdeModel,
    state: &EnsembleState,
    dt: f64,
    dw: &Matrix,
    opts: &StepOptions,
) -> Result<(EnsembleState, StepRecord), IntegratorError> {
    low_rank_step(Scheme::DlrPsSde, model, state, dt, dw, opts)
}

/// `(I − uᵀu)` applied from the right: `g − (g uᵀ) u` for `g` (k x d).
fn project_out_rows(g: &Matrix, u: &Matrix) -> Matrix {
    let gu_t = g.matmul_tr(u).expect("k x d times d x k");
    g.sub(&gu_t.matmul(u).expect("k x k times k x d")).expect("same shape")
}

fn clamp0(v: f64) -> f64 {
    v.max(0.0)
}

fn eig_of(c: &Matrix, t: f64) -> Result<SymEig, IntegratorError> {
    linalg::sym_eig(c).map_err(|source| IntegratorError::StepFailed { t, source })
}

fn relative(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn low_rank_step(
    scheme: Scheme,
    model: &dyn SdeModel,
    state: &EnsembleState,
    dt: f64,
    dw: &Matrix,
    opts: &StepOptions,
) -> Result<(EnsembleState, StepRecord), IntegratorError> {
    assert!(scheme.is_low_rank(), "em is not a low-rank scheme");
    let (u, y) = (state.u(), state.y());
    let t = state.t;
    let mp = state.paths();
    check_dims(model, state.dim(), mp, dw)?;
    let fail = |source: LinalgError| IntegratorError::StepFailed { t, source };

    let x_pm = y.tr_matmul(u)?;
    let ev = evaluate_paths(model, t, &x_pm, &dw.transpose())?;
    let mut incr_pm = ev.drift.scale(dt);
    incr_pm.axpy(1.0, &ev.noise)?;
    let y_tilde = y.add(&u.matmul_tr(&incr_pm)?)?;

    let (gram_src, g) = match scheme {
        Scheme::DlrEm => (y, expectation_outer(y, &ev.drift.transpose())?.scale(dt)),
        Scheme::DlrPsEm => (&y_tilde, expectation_outer(&y_tilde, &incr_pm.transpose())?),
        Scheme::DlrPsSde => (&y_tilde, expectation_outer(&y_tilde, &ev.drift.transpose())?.scale(dt)),
        Scheme::Em => unreachable!(),
    };
    let c = ensemble::gramian(gram_src).matrix().clone();
    let eig = eig_of(&c, t)?;
    let g_proj = project_out_rows(&g, u);

    let fast = scheme == Scheme::DlrEm && opts.linear_fast_path;
    let correction = match (fast, model.linear_drift(t)) {
        (true, Some(a)) => project_out_rows(&u.matmul_tr(&a)?, u).scale(dt),
        _ => pinv_apply(&eig, &g_proj, opts.pinv_threshold).map_err(fail)?,
    };
    let mut u_tilde = u.add(&correction)?;
    if let Some(z) = &opts.null_space_injection {
        if z.len() != state.dim() {
            return Err(IntegratorError::Dimension("null-space injection length must be d".into()));
        }
        let cut = opts.pinv_threshold * eig.max();
        for (l, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam <= cut {
                for i in 0..state.rank() {
                    let vi = eig.eigenvectors[(i, l)];
                    for (o, zj) in u_tilde.row_mut(i).iter_mut().zip(z) {
                        *o += vi * zj;
                    }
                }
            }
        }
    }

    let rhs = c.matmul(u)?.add(&g_proj)?;
    let solver_residual = relative(c.matmul(&u_tilde)?.sub(&rhs)?.frobenius_norm(), rhs.frobenius_norm());

    let mut kept_modes = false;
    let (q, r) = match reduced_qr(&u_tilde.transpose()) {
        Ok(qr) => qr,
        Err(e @ LinalgError::RankDeficient { .. }) => match opts.rank_deficiency {
            RankDeficiencyPolicy::Abort => return Err(fail(e)),
            RankDeficiencyPolicy::KeepModes => {
                warn!("{scheme}: rank-deficient mode update at t = {t}; keeping previous modes");
                kept_modes = true;
                u_tilde = u.clone();
                (u.transpose(), Matrix::identity(state.rank()))
            }
        },
        Err(e) => return Err(fail(e)),
    };
    let mut u_next = q.transpose();
    let mut y_next = r.matmul(&y_tilde)?;

    let r_eig = eig_of(&r.tr_matmul(&r)?, t)?;
    let qr_r_condition = relative(r_eig.max(), r_eig.min());

    let orth = orthonormality_defect(&u_next);
    let mut reorthonormalized = false;
    if orth > ensemble::ORTHONORMALITY_TOL {
        warn!("{scheme}: orthonormality defect {orth:e} at t = {t}; re-orthonormalizing");
        let (q2, r2) = reduced_qr(&u_next.transpose()).map_err(fail)?;
        u_next = q2.transpose();
        y_next = r2.matmul(&y_next)?;
        reorthonormalized = true;
    }

    let (factorization_defect, identity_defect) = if opts.debug_identities {
        let target = u_tilde.tr_matmul(&y_tilde)?;
        let x_next = u_next.tr_matmul(&y_next)?;
        let fd = relative(x_next.distance(&target), target.frobenius_norm());
        let id = match scheme {
            Scheme::DlrPsEm | Scheme::DlrPsSde if !kept_modes => {
                let x = x_pm.transpose();
                let mut expected = x.clone();
                if scheme == Scheme::DlrPsEm {
                    let p = tangent_projector_apply(u, &y_tilde, &incr_pm.transpose(), opts.pinv_threshold)
                        .map_err(fail)?;
                    expected.axpy(1.0, &p)?;
                } else {
                    let pa = tangent_projector_apply(u, &y_tilde, &ev.drift.transpose(), opts.pinv_threshold)
                        .map_err(fail)?;
                    expected.axpy(dt, &pa)?;
                    expected.axpy(1.0, &row_projector_apply(u, &ev.noise.transpose()))?;
                }
                Some(relative(x_next.distance(&expected), expected.frobenius_norm()))
            }
            _ => None,
        };
        (Some(fd), id)
    } else {
        (None, None)
    };

    let sigma_min_next = clamp0(ensemble::gramian(&y_next).min_eigenvalue());
    let next = EnsembleState::from_parts_unchecked(t + dt, u_next, y_next);
    if !next.y().is_finite() || !next.u().is_finite() {
        return Err(IntegratorError::ModelBlowUp { t, path: 0 });
    }
    let record = StepRecord {
        t_next: t + dt,
        sigma_min_gramian: clamp0(eig.min()),
        sigma_min_next,
        qr_r_condition,
        r_min_eigenvalue: r_eig.min(),
        solver_residual,
        solver_warning: solver_residual > SOLVER_WARNING_TOL,
        orthonormality_defect: orth,
        reorthonormalized,
        kept_modes,
        factorization_defect,
        identity_defect,
    };
    Ok((next, record))
}

/// Row-space projector `uᵀu z` for `z` (d x M).
pub fn row_projector_apply(u: &Matrix, z: &Matrix) -> Matrix {
    u.tr_matmul(&u.matmul(z).expect("k x d times d x M"))
        .expect("consistent")
}

/// Tangent-space projector at `uᵀỹ` applied to `z` (d x M):
/// `(I − uᵀu) E[z ỹᵀ] C⁺ ỹ + uᵀu z` with `C = E[ỹỹᵀ]`.
pub fn tangent_projector_apply(
    u: &Matrix,
    y_tilde: &Matrix,
    z: &Matrix,
    rel_threshold: f64,
) -> Result<Matrix, LinalgError> {
    let c = ensemble::gramian(y_tilde);
    let eig = linalg::sym_eig(c.matrix())?;
    let e = expectation_outer(z, y_tilde).map_err(|e| match e {
        EnsembleError::Linalg(l) => l,
        other => LinalgError::DimensionMismatch {
            op: "tangent_projector_apply",
            detail: other.to_string(),
        },
    })?; // d x k
    let ec_t = pinv_apply(&eig, &e.transpose(), rel_threshold)?; // k x d, = (E C⁺)ᵀ
    let ec_t = project_out_rows(&ec_t, u);
    let mut out = ec_t.tr_matmul(y_tilde)?;
    out.axpy(1.0, &row_projector_apply(u, z))?;
    Ok(out)
}

/// Initial condition of a run.
#[derive(Debug, Clone)]
pub enum InitialState {
    Full(Matrix),
    LowRank(EnsembleState),
}

impl InitialState {
    pub fn reconstruct(&self) -> Matrix {
        match self {
            InitialState::Full(x) => x.clone(),
            InitialState::LowRank(s) => ensemble::reconstruct(s),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IntegrateOptions {
    pub step: StepOptions,
}

/// Step at which a run stopped early.
#[derive(Debug)]
pub struct StepFailure {
    pub step: u64,
    pub t: f64,
    pub error: IntegratorError,
}

/// Outcome of [`integrate`]. On failure everything up to the failing step
/// is kept.
#[derive(Debug)]
pub struct RunOutput {
    pub scheme: Scheme,
    pub grid: GridKey,
    pub dt: f64,
    pub steps_completed: u64,
    pub records: Vec<StepRecord>,
    /// Ambient ensemble at the last completed node.
    pub final_x: Matrix,
    pub final_state: Option<EnsembleState>,
    pub failure: Option<StepFailure>,
}

impl RunOutput {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Sequentially applies `scheme` over every step of `grid`. The observer
/// sees the ambient ensemble at every node, starting with node 0.
pub fn integrate(
    model: &dyn SdeModel,
    scheme: Scheme,
    init: &InitialState,
    grid: &BrownianGrid,
    opts: &IntegrateOptions,
    observer: &mut dyn FnMut(u64, f64, &Matrix),
) -> Result<RunOutput, IntegratorError> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let (d, mp) = match init {
        InitialState::Full(x) => x.shape(),
        InitialState::LowRank(s) => (s.dim(), s.paths()),
    };
    if grid.m() != model.noise_dim() || grid.m_paths() != mp || d != model.dim() {
        return Err(IntegratorError::Dimension(format!(
            "grid (m = {}, M = {}) does not match model (d = {}, m = {}) and ensemble (d = {d}, M = {mp})",
            grid.m(),
            grid.m_paths(),
            model.dim(),
            model.noise_dim()
        )));
    }
    let mut dw = Matrix::zeros(grid.m(), mp);
    let mut records = Vec::new();
    let mut failure = None;
    let mut completed = 0;

    let (final_x, final_state) = match (scheme, init) {
        (Scheme::Em, init) => {
            let mut x = init.reconstruct();
            observer(0, grid.time(0), &x);
            for s in 0..n {
                grid.increment_into(s, &mut dw);
                match em_step(model, &x, grid.time(s), dt, &dw) {
                    Ok(next) => {
                        x = next;
                        completed = s + 1;
                        observer(s + 1, grid.time(s + 1), &x);
                    }
                    Err(error) => {
                        failure = Some(StepFailure { step: s, t: grid.time(s), error });
                        break;
                    }
                }
            }
            (x, None)
        }
        (_, InitialState::LowRank(s0)) => {
            let mut state = s0.clone();
            state.t = grid.time(0);
            observer(0, state.t, &ensemble::reconstruct(&state));
            for s in 0..n {
                grid.increment_into(s, &mut dw);
                match low_rank_step(scheme, model, &state, dt, &dw, &opts.step) {
                    Ok((mut next, rec)) => {
                        // pin the node time to the grid to avoid drift in t
                        next.t = grid.time(s + 1);
                        records.push(rec);
                        state = next;
                        completed = s + 1;
                        observer(s + 1, state.t, &ensemble::reconstruct(&state));
                    }
                    Err(error) => {
                        failure = Some(StepFailure { step: s, t: state.t, error });
                        break;
                    }
                }
            }
            (ensemble::reconstruct(&state), Some(state))
        }
        (_, InitialState::Full(_)) => {
            return Err(IntegratorError::Dimension(format!(
                "{scheme} needs a low-rank initial state"
            )))
        }
    };
    Ok(RunOutput {
        scheme,
        grid: grid.key(),
        dt,
        steps_completed: completed,
        records,
        final_x,
        final_state,
        failure,
    })
}

/// Ambient snapshots of a run at every `stride`-th node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: GridKey,
    pub times: Vec<f64>,
    pub states: Vec<Matrix>,
}

impl Trajectory {
    pub fn paths(&self) -> usize {
        self.states.first().map_or(0, |s| s.cols())
    }
}

/// [`integrate`] that also keeps snapshots at every `stride`-th node.
pub fn integrate_recording(
    model: &dyn SdeModel,
    scheme: Scheme,
    init: &InitialState,
    grid: &BrownianGrid,
    opts: &IntegrateOptions,
    stride: u64,
) -> Result<(RunOutput, Trajectory), IntegratorError> {
    assert!(stride >= 1);
    let mut traj = Trajectory {
        grid: grid.key(),
        times: Vec::new(),
        states: Vec::new(),
    };
    let out = integrate(model, scheme, init, grid, opts, &mut |n, t, x| {
        if n % stride == 0 {
            traj.times.push(t);
            traj.states.push(x.clone());
        }
    })?;
    Ok((out, traj))
}
