//! Bound evaluators, time-step and stability conditions, error metrics and
//! convergence-order fits.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::fmt_f64;
use crate::integrators::{Scheme, Trajectory};
use crate::linalg::{self, LinalgError, Matrix};
use crate::models::SdeModel;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("trajectories are not comparable: {0}")]
    IncomparableTrajectories(String),
    #[error("order fit needs at least 3 positive points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// `(1 + E|X₀|²) e^{(1 + 7C) t} − 1`.
pub fn k1_bound(t: f64, e_x0_sq: f64, c_lgb: f64) -> f64 {
    (1.0 + e_x0_sq) * ((1.0 + 7.0 * c_lgb) * t).exp() - 1.0
}

/// `(1 + E|X₀|²) e^{(1 + C(2 + T)) t} − 1`.
pub fn k4_bound(t: f64, e_x0_sq: f64, c_lgb: f64, t_final: f64) -> f64 {
    (1.0 + e_x0_sq) * ((1.0 + c_lgb * (2.0 + t_final)) * t).exp() - 1.0
}

/// Bounds on the stochastic modes from `K₁(T)`:
/// `K₂ = K₁ + 3C(1+K₁)T + 12C(1+K₁)T` and `K̃ = 3(K₁ + C(T² + 4T)(1+K₁))`.
pub fn k2_ktilde_bounds(k1_t: f64, c_lgb: f64, t_final: f64) -> (f64, f64) {
    let growth = c_lgb * (1.0 + k1_t);
    let k2 = k1_t + 3.0 * growth * t_final + 12.0 * growth * t_final;
    let ktilde = 3.0 * (k1_t + growth * (t_final * t_final + 4.0 * t_final));
    (k2, ktilde)
}

/// `σ_B Δt`.
pub fn gramian_bound_simple(sigma_b: f64, dt: f64) -> f64 {
    sigma_b * dt
}

/// Contraction factor `q = A/(Δt + A)` and `A = σ_B / (2C(1 + K))` of the
/// refined bound. Infinite `K` gives `A = 0`; `C = 0` gives `A = ∞`.
fn refined_parameters(sigma_b: f64, c_lgb: f64, k_bound: f64, dt: f64) -> (f64, f64) {
    if sigma_b == 0.0 {
        return (0.0, 0.0);
    }
    let denom = 2.0 * c_lgb * (1.0 + k_bound);
    let a = if denom == 0.0 { f64::INFINITY } else { sigma_b / denom };
    let q = if a.is_infinite() { 1.0 } else { a / (dt + a) };
    (a, q)
}

/// `min{σ₀, σ_B A / 2} + (σ_B/2) Δt [1 − q^{n+1}]`, the lower bound on the
/// smallest Gramian eigenvalue after step `n`.
pub fn gramian_bound_refined(sigma_0: f64, sigma_b: f64, c_lgb: f64, k_bound: f64, dt: f64, n: u64) -> f64 {
    let (_, q) = refined_parameters(sigma_b, c_lgb, k_bound, dt);
    refined_floor(sigma_0, sigma_b, c_lgb, k_bound, dt) + 0.5 * sigma_b * dt * (1.0 - pow_n1(q, n))
}

/// `min{σ₀, σ_B A / 2}`, the time-uniform part of the refined bound.
pub fn refined_floor(sigma_0: f64, sigma_b: f64, c_lgb: f64, k_bound: f64, dt: f64) -> f64 {
    let (a, _) = refined_parameters(sigma_b, c_lgb, k_bound, dt);
    if a.is_infinite() {
        sigma_0
    } else {
        sigma_0.min(sigma_b * a / 2.0)
    }
}

/// Closed-form solution of the one-step recurrence before the `min`
/// relaxation: `q^{n+1} σ₀ + (σ_B/2)(Δt + A)[1 − q^{n+1}]`.
pub fn gramian_bound_unrelaxed(sigma_0: f64, sigma_b: f64, c_lgb: f64, k_bound: f64, dt: f64, n: u64) -> f64 {
    let (a, q) = refined_parameters(sigma_b, c_lgb, k_bound, dt);
    let qn = pow_n1(q, n);
    if a.is_infinite() {
        // q = 1: no contraction, the bound grows linearly
        return sigma_0 + 0.5 * sigma_b * dt * (n + 1) as f64;
    }
    qn * sigma_0 + 0.5 * sigma_b * (dt + a) * (1.0 - qn)
}

/// One step of the recurrence `σ⁺ = (1 − Δt/(Δt + A)) σ + (σ_B/2) Δt`.
pub fn gramian_recurrence_step(sigma: f64, sigma_b: f64, c_lgb: f64, k_bound: f64, dt: f64) -> f64 {
    let (_, q) = refined_parameters(sigma_b, c_lgb, k_bound, dt);
    q * sigma + 0.5 * sigma_b * dt
}

fn pow_n1(q: f64, n: u64) -> f64 {
    let e = n.saturating_add(1);
    if e > i32::MAX as u64 {
        if q < 1.0 {
            0.0
        } else {
            q
        }
    } else {
        q.powi(e as i32)
    }
}

/// `Δt̂ = √σ / (√C √(1 + sup E|X|²))`.
pub fn dt_condition(sigma_k_n: f64, c_lgb: f64, sup_ex_sq: f64) -> f64 {
    sigma_k_n.max(0.0).sqrt() / (c_lgb.sqrt() * (1.0 + sup_ex_sq).sqrt())
}

fn spectral_terms(a: &Matrix, b_mats: &[Matrix]) -> Result<(f64, f64, f64), DiagnosticsError> {
    let d = a.rows();
    if a.cols() != d {
        return Err(LinalgError::DimensionMismatch {
            op: "ams_margin",
            detail: format!("A is {:?}", a.shape()),
        }
        .into());
    }
    if let Some(b) = b_mats.iter().find(|b| b.shape() != (d, d)) {
        return Err(LinalgError::DimensionMismatch {
            op: "ams_margin",
            detail: format!("B_k is {:?}, A is {d}x{d}", b.shape()),
        }
        .into());
    }
    let lam_max = linalg::sym_eig(&a.add(&a.transpose())?)?.max();
    let sig_max_sq = linalg::sym_eig(&a.tr_matmul(a)?)?.max().max(0.0);
    let b_sq: f64 = b_mats.iter().map(|b| b.frobenius_norm().powi(2)).sum();
    Ok((lam_max, sig_max_sq, b_sq))
}

/// `|1 + λ_max(A + Aᵀ)Δt + σ_max(A)²Δt² + Σ_k ‖B_k‖_F² Δt|`; values below 1
/// predict mean-square stability of the Euler–Maruyama type schemes.
pub fn ams_margin(a_mat: &Matrix, b_mats: &[Matrix], dt: f64) -> Result<f64, DiagnosticsError> {
    let (lam, sig2, b2) = spectral_terms(a_mat, b_mats)?;
    Ok((1.0 + lam * dt + sig2 * dt * dt + b2 * dt).abs())
}

/// Largest `Δt` with margin below 1:
/// `(−λ_max(A + Aᵀ) − Σ_k ‖B_k‖_F²) / σ_max(A)²`.
pub fn stability_dt_threshold(a_mat: &Matrix, b_mats: &[Matrix]) -> Result<f64, DiagnosticsError> {
    let (lam, sig2, b2) = spectral_terms(a_mat, b_mats)?;
    Ok((-lam - b2) / sig2)
}

/// Running per-path suprema of `|x − x_ref|²` and `|x_ref|²` over nodes.
#[derive(Debug, Clone)]
pub struct SupErrorAccumulator {
    sup_diff: Vec<f64>,
    sup_ref: Vec<f64>,
    nodes: usize,
}

impl SupErrorAccumulator {
    pub fn new(m_paths: usize) -> Self {
        Self {
            sup_diff: vec![0.0; m_paths],
            sup_ref: vec![0.0; m_paths],
            nodes: 0,
        }
    }

    /// Adds one node; both matrices are d x M.
    pub fn observe(&mut self, x: &Matrix, x_ref: &Matrix) {
        assert_eq!(x.shape(), x_ref.shape());
        assert_eq!(x.cols(), self.sup_diff.len());
        let m = x.cols();
        let mut diff = vec![0.0; m];
        let mut refs = vec![0.0; m];
        for i in 0..x.rows() {
            for j in 0..m {
                let r = x_ref.row(i)[j];
                let e = x.row(i)[j] - r;
                diff[j] += e * e;
                refs[j] += r * r;
            }
        }
        for j in 0..m {
            // NaN propagates so that a diverged run cannot look accurate
            if diff[j].is_nan() || diff[j] > self.sup_diff[j] {
                self.sup_diff[j] = diff[j];
            }
            if refs[j] > self.sup_ref[j] {
                self.sup_ref[j] = refs[j];
            }
        }
        self.nodes += 1;
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `√(E[sup_n |x_n − x_ref,n|²])`.
    pub fn l2_sup(&self) -> f64 {
        mean(&self.sup_diff).sqrt()
    }

    /// `√(E[sup_n |x_ref,n|²])`.
    pub fn reference_l2_sup(&self) -> f64 {
        mean(&self.sup_ref).sqrt()
    }

    pub fn relative(&self) -> f64 {
        (mean(&self.sup_diff) / mean(&self.sup_ref)).sqrt()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn check_comparable(a: &Trajectory, b: &Trajectory) -> Result<(), DiagnosticsError> {
    let fail = |s: String| Err(DiagnosticsError::IncomparableTrajectories(s));
    if a.grid.seed != b.grid.seed
        || a.grid.t0 != b.grid.t0
        || a.grid.t1 != b.grid.t1
        || a.grid.m != b.grid.m
        || a.grid.m_paths != b.grid.m_paths
    {
        return fail(format!("noise lineage differs: {:?} vs {:?}", a.grid, b.grid));
    }
    if a.times.len() != b.times.len() || a.states.len() != b.states.len() {
        return fail(format!("{} vs {} nodes", a.times.len(), b.times.len()));
    }
    let tol = 1e-12 * (a.grid.t1 - a.grid.t0).abs().max(1.0);
    if a.times.iter().zip(&b.times).any(|(s, t)| (s - t).abs() > tol) {
        return fail("time grids differ".into());
    }
    if a.states.iter().zip(&b.states).any(|(x, y)| x.shape() != y.shape()) {
        return fail("state shapes differ".into());
    }
    Ok(())
}

fn accumulate(a: &Trajectory, b: &Trajectory) -> Result<SupErrorAccumulator, DiagnosticsError> {
    check_comparable(a, b)?;
    let mut acc = SupErrorAccumulator::new(a.paths());
    for (x, y) in a.states.iter().zip(&b.states) {
        acc.observe(x, y);
    }
    Ok(acc)
}

/// `√(E[sup_n |a_n − b_n|²])` over the shared nodes of two trajectories
/// driven by the same noise.
pub fn l2_sup_error(traj_a: &Trajectory, traj_b: &Trajectory) -> Result<f64, DiagnosticsError> {
    Ok(accumulate(traj_a, traj_b)?.l2_sup())
}

/// [`l2_sup_error`] divided by `√(E[sup_n |ref_n|²])`.
pub fn relative_l2_sup_error(traj_a: &Trajectory, traj_ref: &Trajectory) -> Result<f64, DiagnosticsError> {
    Ok(accumulate(traj_a, traj_ref)?.relative())
}

/// Least-squares slope of `log(error)` against `log(Δt)`.
pub fn fit_order(dt_values: &[f64], errors: &[f64]) -> Result<f64, DiagnosticsError> {
    let pts: Vec<(f64, f64)> = dt_values
        .iter()
        .zip(errors)
        .filter(|(d, e)| **d > 0.0 && **e > 0.0 && d.is_finite() && e.is_finite())
        .map(|(d, e)| (d.ln(), e.ln()))
        .collect();
    if pts.len() < 3 || pts.len() != dt_values.len().min(errors.len()) {
        return Err(DiagnosticsError::TooFewPoints(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Empirical linear-growth constant: the largest
/// `(|a(t, x)|² + ‖b(t, x)‖_F²) / (1 + |x|²)` over the columns of `cloud`
/// and the given times.
pub fn estimate_c_lgb(model: &dyn SdeModel, times: &[f64], cloud: &Matrix) -> f64 {
    let x_pm = cloud.transpose();
    let mut best: f64 = 0.0;
    for &t in times {
        for j in 0..x_pm.rows() {
            let x = x_pm.row(j);
            let a = model.drift(t, x);
            let b = model.diffusion(t, x);
            let num = linalg::dot(&a, &a) + b.frobenius_norm().powi(2);
            best = best.max(num / (1.0 + linalg::dot(x, x)));
        }
    }
    best
}

/// Observed smallest Gramian eigenvalue and the lower bounds, per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrace {
    pub times: Vec<f64>,
    pub sigma_k_observed: Vec<f64>,
    pub bound_simple: Vec<f64>,
    pub bound_refined: Vec<f64>,
    pub dt_condition: Vec<f64>,
    /// Set where `σ_k < (1 − slack) · bound_simple` or `dt > Δt̂`.
    pub flags: Vec<String>,
}

/// Inputs of [`BoundTrace::build`] that are constant over a run.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub sigma_b: f64,
    pub c_lgb: f64,
    pub k_bound: f64,
    pub dt: f64,
    pub sup_ex_sq: f64,
    /// Monte-Carlo slack on the simple bound.
    pub slack: f64,
}

impl BoundTrace {
    /// `sigma_k[n]` is the smallest Gramian eigenvalue at node `n`
    /// (node 0 is the initial state).
    pub fn build(times: &[f64], sigma_k: &[f64], p: BoundParams) -> Self {
        assert_eq!(times.len(), sigma_k.len());
        let sigma_0 = sigma_k.first().copied().unwrap_or(0.0);
        let mut tr = BoundTrace {
            times: times.to_vec(),
            sigma_k_observed: sigma_k.to_vec(),
            bound_simple: Vec::with_capacity(times.len()),
            bound_refined: Vec::with_capacity(times.len()),
            dt_condition: Vec::with_capacity(times.len()),
            flags: Vec::with_capacity(times.len()),
        };
        for (n, &s) in sigma_k.iter().enumerate() {
            let (simple, refined) = if n == 0 {
                (0.0, refined_floor(sigma_0, p.sigma_b, p.c_lgb, p.k_bound, p.dt))
            } else {
                (
                    gramian_bound_simple(p.sigma_b, p.dt),
                    gramian_bound_refined(sigma_0, p.sigma_b, p.c_lgb, p.k_bound, p.dt, n as u64 - 1),
                )
            };
            let dt_hat = dt_condition(s, p.c_lgb, p.sup_ex_sq);
            let mut flag = Vec::new();
            if s < (1.0 - p.slack) * simple {
                flag.push("below_simple_bound");
            }
            if p.dt > dt_hat {
                flag.push("dt_above_dt_hat");
            }
            tr.bound_simple.push(simple);
            tr.bound_refined.push(refined.max(0.0));
            tr.dt_condition.push(dt_hat);
            tr.flags.push(flag.join("|"));
        }
        tr
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,sigma_k,bound_simple,bound_refined,dt_hat,flags")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f64(self.times[i]),
                fmt_f64(self.sigma_k_observed[i]),
                fmt_f64(self.bound_simple[i]),
                fmt_f64(self.bound_refined[i]),
                fmt_f64(self.dt_condition[i]),
                self.flags[i]
            )?;
        }
        Ok(())
    }
}

/// Strong errors of one scheme against one reference over a `Δt` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub scheme: Scheme,
    pub reference: String,
    pub dt_values: Vec<f64>,
    pub l2_sup_errors: Vec<f64>,
    pub relative_errors: Vec<f64>,
    /// `"ok"` or a failure note; failed rows are excluded from the fit.
    pub status: Vec<String>,
    pub fitted_order: Option<f64>,
}

impl ErrorReport {
    pub fn new(scheme: Scheme, reference: impl Into<String>) -> Self {
        Self {
            scheme,
            reference: reference.into(),
            dt_values: Vec::new(),
            l2_sup_errors: Vec::new(),
            relative_errors: Vec::new(),
            status: Vec::new(),
            fitted_order: None,
        }
    }

    pub fn push(&mut self, dt: f64, l2: f64, rel: f64, status: impl Into<String>) {
        self.dt_values.push(dt);
        self.l2_sup_errors.push(l2);
        self.relative_errors.push(rel);
        self.status.push(status.into());
    }

    /// Fits the order on the relative errors of successful rows.
    pub fn fit(&mut self) {
        let (d, e): (Vec<f64>, Vec<f64>) = self
            .dt_values
            .iter()
            .zip(&self.relative_errors)
            .zip(&self.status)
            .filter(|(_, s)| s.as_str() == "ok")
            .map(|((d, e), _)| (*d, *e))
            .unzip();
        self.fitted_order = fit_order(&d, &e).ok();
    }

    pub fn error_at(&self, dt: f64) -> Option<f64> {
        self.dt_values
            .iter()
            .position(|d| (d - dt).abs() <= 1e-12 * dt)
            .map(|i| self.relative_errors[i])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "dt,l2_sup,rel_l2_sup,status")?;
        for i in 0..self.dt_values.len() {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(self.dt_values[i]),
                fmt_f64(self.l2_sup_errors[i]),
                fmt_f64(self.relative_errors[i]),
                self.status[i]
            )?;
        }
        Ok(())
    }
}
