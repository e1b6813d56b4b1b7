//! SDE models `dX = a(t, X) dt + b(t, X) dW` and their initial laws.
//!
//! Models are evaluated one path at a time on plain slices. Each concrete
//! model overrides [`SdeModel::diffusion_apply_into`] so the integrators never
//! have to materialize `b(t, x)` per path.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::noise::SampleStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown model '{0}'")]
    Unknown(String),
    #[error("invalid parameter for {model}: {detail}")]
    InvalidParameter { model: String, detail: String },
}

fn invalid(model: &str, detail: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        model: model.to_string(),
        detail: detail.into(),
    }
}

/// Drift/diffusion contract. Implementations must be pure: identical
/// arguments give bitwise identical results.
pub trait SdeModel: Send + Sync {
    fn name(&self) -> &str;
    /// Ambient dimension `d`.
    fn dim(&self) -> usize;
    /// Noise dimension `m`.
    fn noise_dim(&self) -> usize;

    /// `out = a(t, x)`.
    fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `out = b(t, x)` as a `d x m` matrix.
    fn diffusion_into(&self, t: f64, x: &[f64], out: &mut Matrix);

    /// `out = b(t, x) · dw`.
    fn diffusion_apply_into(&self, t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let mut b = Matrix::zeros(self.dim(), self.noise_dim());
        self.diffusion_into(t, x, &mut b);
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::linalg::dot(b.row(i), dw);
        }
    }

    /// `A(t)` when the drift is `a(t, x) = A(t) x`.
    fn linear_drift(&self, _t: f64) -> Option<Matrix> {
        None
    }

    /// Certified `σ_B` with `b bᵀ ⪰ σ_B I` everywhere.
    fn sigma_b_lower(&self) -> Option<f64> {
        None
    }

    /// Certified `C` with `|a|² + ‖b‖_F² ≤ C (1 + |x|²)`.
    fn c_lgb(&self) -> Option<f64> {
        None
    }

    fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.drift_into(t, x, &mut out);
        out
    }

    fn diffusion(&self, t: f64, x: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(self.dim(), self.noise_dim());
        self.diffusion_into(t, x, &mut out);
        out
    }
}

/// Distribution of the initial datum, sampled deterministically from a seed.
pub trait InitialLaw: Send + Sync {
    fn dim(&self) -> usize;
    fn description(&self) -> &str;
    /// `d x M` matrix whose columns are independent samples.
    fn sample(&self, seed: u64, m_paths: usize) -> Matrix;
}

type PathSampler = Box<dyn Fn(&mut SampleStream, &mut [f64]) + Send + Sync>;

/// Initial law defined by a per-path sampler drawing from one stream,
/// path after path.
pub struct SampledLaw {
    d: usize,
    description: String,
    sampler: PathSampler,
}

impl SampledLaw {
    pub fn new(
        d: usize,
        description: impl Into<String>,
        sampler: impl Fn(&mut SampleStream, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            description: description.into(),
            sampler: Box::new(sampler),
        }
    }
}

impl InitialLaw for SampledLaw {
    fn dim(&self) -> usize {
        self.d
    }

    fn description(&self) -> &str {
        &self.description
    }

    fn sample(&self, seed: u64, m_paths: usize) -> Matrix {
        let mut rng = SampleStream::new(seed);
        let mut out = Matrix::zeros(self.d, m_paths);
        let mut col = vec![0.0; self.d];
        for j in 0..m_paths {
            (self.sampler)(&mut rng, &mut col);
            for (i, v) in col.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }
}

/// A model together with its initial law and suggested run parameters.
pub struct Problem {
    pub model: Box<dyn SdeModel>,
    pub initial: Box<dyn InitialLaw>,
    pub t_final: f64,
    pub default_rank: usize,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("model", &self.model.name())
            .field("d", &self.model.dim())
            .field("m", &self.model.noise_dim())
            .field("initial", &self.initial.description())
            .field("t_final", &self.t_final)
            .field("default_rank", &self.default_rank)
            .finish()
    }
}

/// Linear SDE `dX = A X dt + Σ_k B_k X dW^k`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    name: String,
    a: Matrix,
    b: Vec<Matrix>,
}

impl LinearModel {
    pub fn new(name: impl Into<String>, a: Matrix, b: Vec<Matrix>) -> Result<Self, ModelError> {
        let name = name.into();
        let d = a.rows();
        if a.cols() != d || d == 0 {
            return Err(invalid(&name, "A must be square and non-empty"));
        }
        if b.is_empty() || b.iter().any(|bk| bk.shape() != (d, d)) {
            return Err(invalid(&name, "need at least one B_k, each d x d"));
        }
        Ok(Self { name, a, b })
    }

    /// `dX = 0`, with `m` (unused) noise channels.
    pub fn zero(d: usize, m: usize) -> Self {
        Self {
            name: "zero".into(),
            a: Matrix::zeros(d, d),
            b: vec![Matrix::zeros(d, d); m.max(1)],
        }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[Matrix] {
        &self.b
    }
}

impl SdeModel for LinearModel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.a.rows()
    }
    fn noise_dim(&self) -> usize {
        self.b.len()
    }
    fn drift_into(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a.apply(x));
    }
    fn diffusion_into(&self, _t: f64, x: &[f64], out: &mut Matrix) {
        for (k, bk) in self.b.iter().enumerate() {
            let col = bk.apply(x);
            out.set_column(k, &col);
        }
    }
    fn diffusion_apply_into(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (bk, w) in self.b.iter().zip(dw) {
            for (o, v) in out.iter_mut().zip(bk.apply(x)) {
                *o += v * w;
            }
        }
    }
    fn linear_drift(&self, _t: f64) -> Option<Matrix> {
        Some(self.a.clone())
    }
    fn c_lgb(&self) -> Option<f64> {
        let a2 = self.a.frobenius_norm().powi(2);
        let b2: f64 = self.b.iter().map(|bk| bk.frobenius_norm().powi(2)).sum();
        Some(a2 + b2)
    }
}

/// Drift matrix shared by the three toy examples.
fn toy_drift_matrix() -> Matrix {
    Matrix::from_rows(&[
        &[-0.1, 0.1, 0.001],
        &[-0.1, 0.1, 0.001],
        &[-4.0, -4.0, -4.0],
    ])
}

/// `‖A‖_F²` of [`toy_drift_matrix`].
const TOY_A_FROB_SQ: f64 = 48.040002;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ToyVariant {
    Multiplicative,
    Additive,
    Nonlinear,
}

/// The three-dimensional toy systems.
#[derive(Debug, Clone)]
pub struct ToyModel {
    variant: ToyVariant,
    sigma_b: f64,
    sqrt_sigma_b: f64,
    a: Matrix,
}

impl ToyModel {
    fn new(variant: ToyVariant, sigma_b: f64) -> Self {
        Self {
            variant,
            sigma_b,
            sqrt_sigma_b: sigma_b.sqrt(),
            a: toy_drift_matrix(),
        }
    }

    fn diag(&self, x: &[f64]) -> [f64; 3] {
        let s = self.sqrt_sigma_b;
        match self.variant {
            ToyVariant::Multiplicative => {
                let g = 1.0 + 6.0 * (x[0].abs() + x[1].abs());
                [s * g, s * g, s]
            }
            _ => [s, s, 0.0],
        }
    }
}

impl SdeModel for ToyModel {
    fn name(&self) -> &str {
        match self.variant {
            ToyVariant::Multiplicative => "toy_example_1",
            ToyVariant::Additive => "toy_example_2",
            ToyVariant::Nonlinear => "toy_example_3",
        }
    }
    fn dim(&self) -> usize {
        3
    }
    fn noise_dim(&self) -> usize {
        3
    }
    fn drift_into(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self.variant {
            ToyVariant::Nonlinear => {
                let s = x[0].sin();
                let top = -3.0 * s + 0.1 * x[1] + 0.001 * x[2];
                out[0] = top;
                out[1] = top;
                out[2] = -4.0 * s - 4.0 * x[1] - 4.0 * x[2];
            }
            _ => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = crate::linalg::dot(self.a.row(i), x);
                }
            }
        }
    }
    fn diffusion_into(&self, _t: f64, x: &[f64], out: &mut Matrix) {
        let g = self.diag(x);
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for (i, gi) in g.iter().enumerate() {
            out[(i, i)] = *gi;
        }
    }
    fn diffusion_apply_into(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let g = self.diag(x);
        for i in 0..3 {
            out[i] = g[i] * dw[i];
        }
    }
    fn linear_drift(&self, _t: f64) -> Option<Matrix> {
        match self.variant {
            ToyVariant::Nonlinear => None,
            _ => Some(self.a.clone()),
        }
    }
    fn sigma_b_lower(&self) -> Option<f64> {
        match self.variant {
            ToyVariant::Multiplicative => Some(self.sigma_b),
            _ => None,
        }
    }
    fn c_lgb(&self) -> Option<f64> {
        // |a|² ≤ ‖A‖_F²|x|² (|sin s| ≤ |s| for the nonlinear variant) and
        // (1 + 6(|x₁|+|x₂|))² ≤ 2 + 144|x|².
        Some(match self.variant {
            ToyVariant::Multiplicative => TOY_A_FROB_SQ + 288.0 * self.sigma_b,
            ToyVariant::Additive => TOY_A_FROB_SQ + 2.0 * self.sigma_b,
            ToyVariant::Nonlinear => 66.020002 + 2.0 * self.sigma_b,
        })
    }
}

fn toy_problem(variant: ToyVariant, sigma_b: f64) -> Problem {
    let second_half_width = match variant {
        ToyVariant::Multiplicative => 1e-4,
        _ => 1e-9,
    };
    let initial = SampledLaw::new(
        3,
        format!("x_1 = 0.1 - U(±1e-4), x_2 = 0.1 - U(±{second_half_width:e}), x_3 = 0"),
        move |rng, out| {
            out[0] = 0.1 - rng.uniform_in(-1e-4, 1e-4);
            out[1] = 0.1 - rng.uniform_in(-second_half_width, second_half_width);
            out[2] = 0.0;
        },
    );
    Problem {
        model: Box::new(ToyModel::new(variant, sigma_b)),
        initial: Box::new(initial),
        t_final: 10.0,
        default_rank: 2,
    }
}

/// Multiplicative-noise toy system with certified `σ_B`.
pub fn toy_example_1(sigma_b: f64) -> Result<Problem, ModelError> {
    if !(sigma_b > 0.0 && sigma_b.is_finite()) {
        return Err(invalid("toy_example_1", "sigma_b must be positive"));
    }
    Ok(toy_problem(ToyVariant::Multiplicative, sigma_b))
}

/// Additive, degenerate-noise toy system.
pub fn toy_example_2(sigma_b: f64) -> Result<Problem, ModelError> {
    if !(sigma_b >= 0.0 && sigma_b.is_finite()) {
        return Err(invalid("toy_example_2", "sigma_b must be non-negative"));
    }
    Ok(toy_problem(ToyVariant::Additive, sigma_b))
}

/// Toy system with a `sin(x₁)` nonlinearity in the drift.
pub fn toy_example_3(sigma_b: f64) -> Result<Problem, ModelError> {
    if !(sigma_b >= 0.0 && sigma_b.is_finite()) {
        return Err(invalid("toy_example_3", "sigma_b must be non-negative"));
    }
    Ok(toy_problem(ToyVariant::Nonlinear, sigma_b))
}

/// Diagonal linear test system `dX_i = a_ii(t) X_i dt + 0.1 X_i dW^i`.
#[derive(Debug, Clone)]
pub struct StabilityModel {
    pub d: usize,
}

impl StabilityModel {
    pub const NOISE: f64 = 0.1;

    pub fn a_ii(&self, t: f64, i: usize) -> f64 {
        if i < 3 {
            -22.0
        } else {
            -22.0 + (3.0 * PI * t).sin()
        }
    }
}

impl SdeModel for StabilityModel {
    fn name(&self) -> &str {
        "stability_model"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn noise_dim(&self) -> usize {
        self.d
    }
    fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let a = self.a_ii(t, 3);
        for (i, (o, xi)) in out.iter_mut().zip(x).enumerate() {
            *o = if i < 3 { -22.0 * xi } else { a * xi };
        }
    }
    fn diffusion_into(&self, _t: f64, x: &[f64], out: &mut Matrix) {
        out.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        for (i, xi) in x.iter().enumerate() {
            out[(i, i)] = Self::NOISE * xi;
        }
    }
    fn diffusion_apply_into(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        for ((o, xi), w) in out.iter_mut().zip(x).zip(dw) {
            *o = Self::NOISE * xi * w;
        }
    }
    fn linear_drift(&self, t: f64) -> Option<Matrix> {
        let diag: Vec<f64> = (0..self.d).map(|i| self.a_ii(t, i)).collect();
        Some(Matrix::diag(&diag))
    }
    fn c_lgb(&self) -> Option<f64> {
        Some(23.0 * 23.0 + Self::NOISE * Self::NOISE)
    }
}

impl StabilityModel {
    /// The noise matrices `B_k = 0.1 e_k e_kᵀ`.
    pub fn b_matrices(&self) -> Vec<Matrix> {
        (0..self.d)
            .map(|k| {
                let mut b = Matrix::zeros(self.d, self.d);
                b[(k, k)] = Self::NOISE;
                b
            })
            .collect()
    }
}

pub fn stability_model(d: usize) -> Result<Problem, ModelError> {
    if d < 3 {
        return Err(invalid("stability_model", "d must be at least 3"));
    }
    let initial = SampledLaw::new(
        d,
        "x_i = 1 + 0.005 Σ_{j=1..3} sin(jπi/10) N_j",
        move |rng, out| {
            let n = [rng.normal(), rng.normal(), rng.normal()];
            for (idx, o) in out.iter_mut().enumerate() {
                let i = (idx + 1) as f64;
                *o = 1.0
                    + (0..3)
                        .map(|j| 0.005 * ((j + 1) as f64 * PI * i / 10.0).sin() * n[j])
                        .sum::<f64>();
            }
        },
    );
    Ok(Problem {
        model: Box::new(StabilityModel { d }),
        initial: Box::new(initial),
        t_final: 60.0,
        default_rank: 4,
    })
}

/// Finite-difference stochastic advection-diffusion-reaction equation on
/// `[0, 1]` with Neumann boundaries and additive noise.
#[derive(Debug, Clone)]
pub struct SadrModel {
    n: usize,
    dx: f64,
    noise: Matrix,
}

impl SadrModel {
    pub const DIFFUSIVITY: f64 = 0.005;
    pub const VELOCITY: f64 = 0.3;
    pub const REACTION: f64 = 0.1;
    pub const NOISE_MODES: usize = 5;

    pub fn new(n: usize) -> Self {
        let dx = 1.0 / n as f64;
        let noise = Matrix::from_fn(n, Self::NOISE_MODES, |i, k| {
            0.5 * ((k + 1) as f64 * PI * cell_centre(i, n)).sin()
        });
        Self { n, dx, noise }
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n).map(|i| cell_centre(i, self.n)).collect()
    }
}

fn cell_centre(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

impl SdeModel for SadrModel {
    fn name(&self) -> &str {
        "sadr"
    }
    fn dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        Self::NOISE_MODES
    }
    fn drift_into(&self, _t: f64, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let diff = Self::DIFFUSIVITY / (self.dx * self.dx);
        let adv = Self::VELOCITY / self.dx;
        for i in 0..n {
            // ghost cells mirror the boundary cell
            let left = if i == 0 { u[0] } else { u[i - 1] };
            let right = if i + 1 == n { u[n - 1] } else { u[i + 1] };
            out[i] = diff * (left - 2.0 * u[i] + right) - adv * (u[i] - left)
                + Self::REACTION * u[i].sin();
        }
    }
    fn diffusion_into(&self, _t: f64, _x: &[f64], out: &mut Matrix) {
        out.as_mut_slice().copy_from_slice(self.noise.as_slice());
    }
    fn diffusion_apply_into(&self, _t: f64, _x: &[f64], dw: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::linalg::dot(self.noise.row(i), dw);
        }
    }
}

pub fn sadr_model(n: usize) -> Result<Problem, ModelError> {
    if n < 3 {
        return Err(invalid("sadr", "grid needs at least 3 cells"));
    }
    let model = SadrModel::new(n);
    let xs = model.grid();
    let m = SadrModel::NOISE_MODES;
    let initial = SampledLaw::new(
        n,
        "Σ_{i=1..5} sin(π(i+1)x)/(2πi)² (0.5 - U_i(±1e-4))",
        move |rng, out| {
            let w: Vec<f64> = (0..m).map(|_| 0.5 - rng.uniform_in(-1e-4, 1e-4)).collect();
            for (o, x) in out.iter_mut().zip(&xs) {
                *o = (1..=m)
                    .map(|i| {
                        let fi = i as f64;
                        (PI * (fi + 1.0) * x).sin() / (2.0 * PI * fi).powi(2) * w[i - 1]
                    })
                    .sum();
            }
        },
    );
    Ok(Problem {
        model: Box::new(model),
        initial: Box::new(initial),
        t_final: 10.0,
        default_rank: 18,
    })
}

/// Finite-difference heat equation on `[0, 1]` with Dirichlet boundaries,
/// a sliding-window forcing and multiplicative colored noise.
#[derive(Debug, Clone)]
pub struct LaplacianModel {
    /// Grid nodes `x_i = i/n`, `i = 0..=n`.
    xs: Vec<f64>,
    h: f64,
    /// Trapezoid weights times `γ_ℓ` for each profile, `N x (n+1)`.
    functionals: Matrix,
    /// Spatial loading of each channel, `N x (n+1)`.
    loadings: Matrix,
}

impl LaplacianModel {
    pub const DIFFUSIVITY: f64 = 0.001;
    pub const FORCE: f64 = 3.0;
    pub const WINDOW: f64 = 0.12;
    pub const SPEED: f64 = 0.4;
    pub const CHANNELS: usize = 26;

    /// `n` intervals (`n + 1` nodes including the boundary). With
    /// `reapply_profile` each channel loads onto its trig profile instead
    /// of the constant interior vector.
    pub fn new(n: usize, reapply_profile: bool) -> Self {
        let xs: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        let h = 1.0 / n as f64;
        let nch = Self::CHANNELS;
        let profile = |l: usize, x: f64| {
            let arg = 2.0 * PI * l as f64 * x;
            arg.cos() + arg.sin()
        };
        let functionals = Matrix::from_fn(nch, n + 1, |c, i| {
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            gamma(c + 1) * w * profile(c + 1, xs[i])
        });
        let loadings = Matrix::from_fn(nch, n + 1, |c, i| {
            if i == 0 || i == n {
                0.0
            } else if reapply_profile {
                profile(c + 1, xs[i])
            } else {
                1.0
            }
        });
        Self {
            xs,
            h,
            functionals,
            loadings,
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.xs
    }

    /// Sliding-window forcing `F(x, t)`.
    pub fn forcing(x: f64, t: f64) -> f64 {
        let half = (1.0 - Self::WINDOW) / Self::SPEED;
        let period = 2.0 * half;
        let mut tp = t.rem_euclid(period);
        if tp > half {
            tp = period - tp;
        }
        let lo = Self::SPEED * tp;
        if x > lo && x < lo + Self::WINDOW {
            Self::FORCE
        } else {
            0.0
        }
    }

    /// Period of the forcing in time.
    pub fn forcing_period() -> f64 {
        2.0 * (1.0 - Self::WINDOW) / Self::SPEED
    }

    fn coefficients(&self, u: &[f64]) -> Vec<f64> {
        (0..Self::CHANNELS)
            .map(|c| crate::linalg::dot(self.functionals.row(c), u))
            .collect()
    }
}

/// Noise amplitude `γ_ℓ = e^{−2πℓ}/(2πℓ)`.
pub fn gamma(l: usize) -> f64 {
    let z = 2.0 * PI * l as f64;
    (-z).exp() / z
}

impl SdeModel for LaplacianModel {
    fn name(&self) -> &str {
        "laplacian"
    }
    fn dim(&self) -> usize {
        self.xs.len()
    }
    fn noise_dim(&self) -> usize {
        Self::CHANNELS
    }
    fn drift_into(&self, t: f64, u: &[f64], out: &mut [f64]) {
        let n = self.xs.len() - 1;
        let c = Self::DIFFUSIVITY / (self.h * self.h);
        out[0] = 0.0;
        out[n] = 0.0;
        for i in 1..n {
            out[i] = c * (u[i - 1] - 2.0 * u[i] + u[i + 1]) + Self::forcing(self.xs[i], t);
        }
    }
    fn diffusion_into(&self, _t: f64, u: &[f64], out: &mut Matrix) {
        let coef = self.coefficients(u);
        for i in 0..self.xs.len() {
            for (c, k) in coef.iter().enumerate() {
                out[(i, c)] = k * self.loadings[(c, i)];
            }
        }
    }
    fn diffusion_apply_into(&self, _t: f64, u: &[f64], dw: &[f64], out: &mut [f64]) {
        let coef = self.coefficients(u);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, (k, w)) in coef.iter().zip(dw).enumerate() {
            let s = k * w;
            for (o, l) in out.iter_mut().zip(self.loadings.row(c)) {
                *o += s * l;
            }
        }
    }
}

pub fn laplacian_model(n: usize, reapply_profile: bool) -> Result<Problem, ModelError> {
    if n < 2 {
        return Err(invalid("laplacian", "grid needs at least 2 intervals"));
    }
    let model = LaplacianModel::new(n, reapply_profile);
    let xs = model.grid().to_vec();
    let initial = SampledLaw::new(
        n + 1,
        "Σ_{l=1..13} sin(πlx) N_l + 8e-7 sin(8πx) N_14",
        move |rng, out| {
            let z: Vec<f64> = (0..14).map(|_| rng.normal()).collect();
            let last = out.len() - 1;
            for (i, (o, x)) in out.iter_mut().zip(&xs).enumerate() {
                if i == 0 || i == last {
                    *o = 0.0;
                    continue;
                }
                *o = (1..=13).map(|l| (PI * l as f64 * x).sin() * z[l - 1]).sum::<f64>()
                    + 8e-7 * (8.0 * PI * x).sin() * z[13];
            }
        },
    );
    Ok(Problem {
        model: Box::new(model),
        initial: Box::new(initial),
        t_final: 10.0,
        default_rank: 14,
    })
}

/// Scalar geometric Brownian motion `dX = μX dt + σX dW`, `X(0) = 1`.
#[derive(Debug, Clone)]
pub struct GbmModel {
    pub mu: f64,
    pub sigma: f64,
}

impl GbmModel {
    /// Exact solution from `X(0) = x0` given `W(t)`.
    pub fn exact(&self, x0: f64, t: f64, w: f64) -> f64 {
        x0 * ((self.mu - 0.5 * self.sigma * self.sigma) * t + self.sigma * w).exp()
    }
}

impl SdeModel for GbmModel {
    fn name(&self) -> &str {
        "gbm"
    }
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift_into(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion_into(&self, _t: f64, x: &[f64], out: &mut Matrix) {
        out[(0, 0)] = self.sigma * x[0];
    }
    fn diffusion_apply_into(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * x[0] * dw[0];
    }
    fn linear_drift(&self, _t: f64) -> Option<Matrix> {
        Some(Matrix::from_rows(&[&[self.mu]]))
    }
    fn c_lgb(&self) -> Option<f64> {
        Some(self.mu * self.mu + self.sigma * self.sigma)
    }
}

pub fn gbm_oracle(mu: f64, sigma: f64) -> Result<Problem, ModelError> {
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(invalid("gbm", "mu and sigma must be finite"));
    }
    Ok(Problem {
        model: Box::new(GbmModel { mu, sigma }),
        initial: Box::new(SampledLaw::new(1, "x = 1", |_, out| out[0] = 1.0)),
        t_final: 1.0,
        default_rank: 1,
    })
}

/// Model selection by name plus optional parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_b: Option<f64>,
    /// Dimension of the stability model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Number of spatial cells (SADR) or intervals (Laplacian).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reapply_profile: Option<bool>,
}

impl ModelConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            sigma_b: None,
            d: None,
            grid: None,
            mu: None,
            sigma: None,
            reapply_profile: None,
        }
    }

    pub fn build(&self) -> Result<Problem, ModelError> {
        let name = self.name.as_str();
        let reject = |field: &str, set: bool| {
            if set {
                Err(invalid(name, format!("parameter '{field}' does not apply")))
            } else {
                Ok(())
            }
        };
        let toy = matches!(name, "toy_example_1" | "toy_example_2" | "toy_example_3");
        if MODEL_NAMES.contains(&name) {
            reject("sigma_b", self.sigma_b.is_some() && !toy)?;
            reject("d", self.d.is_some() && name != "stability_model")?;
            reject("grid", self.grid.is_some() && !matches!(name, "sadr" | "laplacian"))?;
            reject("mu", self.mu.is_some() && name != "gbm")?;
            reject("sigma", self.sigma.is_some() && name != "gbm")?;
            reject("reapply_profile", self.reapply_profile.is_some() && name != "laplacian")?;
        }
        match name {
            "toy_example_1" => toy_example_1(self.sigma_b.unwrap_or(1e-8)),
            "toy_example_2" => toy_example_2(self.sigma_b.unwrap_or(1e-19)),
            "toy_example_3" => toy_example_3(self.sigma_b.unwrap_or(1e-19)),
            "stability_model" => stability_model(self.d.unwrap_or(10)),
            "sadr" => sadr_model(self.grid.unwrap_or(25)),
            "laplacian" => laplacian_model(self.grid.unwrap_or(25), self.reapply_profile.unwrap_or(false)),
            "gbm" => gbm_oracle(self.mu.unwrap_or(0.05), self.sigma.unwrap_or(0.2)),
            other => Err(ModelError::Unknown(other.to_string())),
        }
    }
}

pub const MODEL_NAMES: [&str; 7] = [
    "toy_example_1",
    "toy_example_2",
    "toy_example_3",
    "stability_model",
    "sadr",
    "laplacian",
    "gbm",
];
