//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting.

use std::io::Write;
use std::time::Instant;

use dlra_core::diagnostics::{
    gramian_bound_refined, gramian_bound_unrelaxed, gramian_recurrence_step, refined_floor, stability_dt_threshold,
};
use dlra_core::ensemble::{self, EnsembleState};
use dlra_core::harness::{
    convergence_study, stability_study, ReferenceKind, StabilityClass, StabilityRun, StudyConfig,
};
use dlra_core::integrators::{
    integrate, row_projector_apply, tangent_projector_apply, InitialState, IntegrateOptions, RunOutput, Scheme,
    StepOptions,
};
use dlra_core::linalg::{reduced_qr, Matrix};
use dlra_core::models::{
    laplacian_model, sadr_model, stability_model, toy_example_1, toy_example_2, toy_example_3,
    LinearModel, Problem, SampledLaw, StabilityModel,
};
use dlra_core::noise::{BrownianGrid, SampleStream};
use dlra_core::diagnostics::{ams_margin, ErrorReport};

const SWEEP: [f64; 4] = [0.1, 0.05, 0.02, 0.01];

fn report(id: u32, title: &str, pass: bool, detail: &str, started: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id:>2} [{verdict}] {title}: {detail} ({:.1}s)\n",
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    let n = b.frobenius_norm();
    if n > 0.0 {
        a.distance(b) / n
    } else {
        a.distance(b)
    }
}

fn low_rank(problem: &Problem, seed: u64, m_paths: usize, k: usize) -> InitialState {
    let samples = problem.initial.sample(seed, m_paths);
    InitialState::LowRank(ensemble::init_rank_k(&samples, k).unwrap())
}

fn run(problem: &Problem, scheme: Scheme, init: &InitialState, grid: &BrownianGrid, step: StepOptions) -> RunOutput {
    let out = integrate(
        problem.model.as_ref(),
        scheme,
        init,
        grid,
        &IntegrateOptions { step },
        &mut |_, _, _| {},
    )
    .unwrap();
    assert!(out.failure.is_none(), "{scheme}: {:?}", out.failure);
    out
}

fn run_collect(
    problem: &Problem,
    scheme: Scheme,
    init: &InitialState,
    grid: &BrownianGrid,
    step: StepOptions,
) -> (RunOutput, Vec<Matrix>) {
    let mut states = Vec::new();
    let out = integrate(
        problem.model.as_ref(),
        scheme,
        init,
        grid,
        &IntegrateOptions { step },
        &mut |_, _, x| states.push(x.clone()),
    )
    .unwrap();
    assert!(out.failure.is_none(), "{scheme}: {:?}", out.failure);
    (out, states)
}

fn study_config(problem: &Problem, rank: usize, paths: usize, seed: u64) -> StudyConfig {
    StudyConfig {
        rank,
        paths,
        seed,
        t_final: problem.t_final,
        step: StepOptions::default(),
    }
}

fn find(reports: &[ErrorReport], scheme: Scheme, reference: ReferenceKind) -> &ErrorReport {
    reports
        .iter()
        .find(|r| r.scheme == scheme && r.reference == reference.as_str())
        .expect("report present")
}

fn describe(reports: &[ErrorReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let errs: Vec<String> = r.relative_errors.iter().map(|e| format!("{e:.3e}")).collect();
            format!(
                "{} vs {}: order {} errors [{}]",
                r.scheme,
                r.reference,
                r.fitted_order.map(|o| format!("{o:.3}")).unwrap_or_else(|| "n/a".into()),
                errs.join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[test]
fn criterion_01_orthonormality_and_factorization() {
    let started = Instant::now();
    let p = toy_example_1(1e-8).unwrap();
    let init = low_rank(&p, 11, 2000, 2);
    let grid = BrownianGrid::generate(11, 0.0, 10.0, 500, p.model.noise_dim(), 2000).unwrap();
    let step = StepOptions {
        debug_identities: true,
        ..StepOptions::default()
    };
    let mut worst_orth: f64 = 0.0;
    let mut worst_fact: f64 = 0.0;
    let mut steps = 0;
    for scheme in Scheme::LOW_RANK {
        let out = run(&p, scheme, &init, &grid, step.clone());
        steps += out.records.len();
        for r in &out.records {
            worst_orth = worst_orth.max(r.orthonormality_defect);
            worst_fact = worst_fact.max(r.factorization_defect.expect("debug on"));
        }
        let state = out.final_state.as_ref().expect("low-rank");
        worst_orth = worst_orth.max(ensemble::orthonormality_defect(state.u()));
    }
    let pass = worst_orth <= 1e-10 && worst_fact <= 1e-10 && steps == 1500;
    report(
        1,
        "orthonormality and factorization",
        pass,
        &format!("{steps} steps, max orthonormality {worst_orth:.2e}, max factorization {worst_fact:.2e}"),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_02_full_rank_matches_em() {
    let started = Instant::now();
    let p = toy_example_1(1e-8).unwrap();
    let samples = p.initial.sample(5, 1000);
    let grid = BrownianGrid::generate(5, 0.0, 2.0, 100, p.model.noise_dim(), 1000).unwrap();
    let (_, em) = run_collect(&p, Scheme::Em, &InitialState::Full(samples.clone()), &grid, StepOptions::default());
    let full = InitialState::LowRank(ensemble::init_rank_k(&samples, 3).unwrap());
    let mut worst: f64 = 0.0;
    for scheme in [Scheme::DlrPsEm, Scheme::DlrPsSde] {
        let (_, xs) = run_collect(&p, scheme, &full, &grid, StepOptions::default());
        assert_eq!(xs.len(), em.len());
        for (x, e) in xs.iter().zip(&em) {
            worst = worst.max(rel(x, e));
        }
    }
    let pass = worst <= 1e-9;
    report(2, "full-rank PS schemes reproduce EM", pass, &format!("max relative deviation {worst:.2e}"), started);
    assert!(pass);
}

#[test]
fn criterion_03_linear_fast_path() {
    let started = Instant::now();
    let p = toy_example_2(1e-19).unwrap();
    assert!(p.model.linear_drift(0.0).is_some());
    let init = low_rank(&p, 3, 2000, 2);
    let grid = BrownianGrid::generate(3, 0.0, 4.0, 200, p.model.noise_dim(), 2000).unwrap();
    let (_, general) = run_collect(&p, Scheme::DlrEm, &init, &grid, StepOptions::default());
    let fast_opts = StepOptions {
        linear_fast_path: true,
        ..StepOptions::default()
    };
    let (_, fast) = run_collect(&p, Scheme::DlrEm, &init, &grid, fast_opts);
    let worst = fast.iter().zip(&general).map(|(a, b)| rel(a, b)).fold(0.0, f64::max);
    let pass = worst <= 1e-8 && fast.len() == 201;
    report(3, "linear-drift fast path", pass, &format!("max relative deviation {worst:.2e} over 200 steps"), started);
    assert!(pass);
}

#[test]
fn criterion_04_gramian_lower_bound() {
    let started = Instant::now();
    let sigma_b = 1e-8;
    let p = toy_example_1(sigma_b).unwrap();
    let init = low_rank(&p, 21, 2000, 2);
    let mut worst_ratio = f64::INFINITY;
    let mut detail = Vec::new();
    for dt in [0.1, 0.05, 0.02] {
        let n = (p.t_final / dt).round() as u64;
        let grid = BrownianGrid::generate(21, 0.0, p.t_final, n, p.model.noise_dim(), 2000).unwrap();
        for scheme in Scheme::LOW_RANK {
            let out = run(&p, scheme, &init, &grid, StepOptions::default());
            let min = out.records.iter().map(|r| r.sigma_min_next).fold(f64::INFINITY, f64::min);
            let ratio = min / (sigma_b * dt);
            worst_ratio = worst_ratio.min(ratio);
            detail.push(format!("{scheme}@{dt}: {ratio:.3e}"));
        }
    }
    let pass = worst_ratio >= 0.8;
    report(
        4,
        "Gramian eigenvalue floor",
        pass,
        &format!("min λ_min/(σ_B Δt) = {worst_ratio:.3e} [{}]", detail.join(", ")),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_05_order_multiplicative_noise() {
    let started = Instant::now();
    let p = toy_example_1(1e-8).unwrap();
    let cfg = study_config(&p, 2, 2000, 31);
    let reports = convergence_study(&p, &cfg, &Scheme::LOW_RANK, &SWEEP, 10, &[ReferenceKind::DlrPsSdeFine]).unwrap();
    let pass = Scheme::LOW_RANK.iter().all(|&s| {
        find(&reports, s, ReferenceKind::DlrPsSdeFine)
            .fitted_order
            .is_some_and(|o| (0.35..=0.75).contains(&o))
    });
    report(5, "strong order, multiplicative noise", pass, &describe(&reports), started);
    assert!(pass);
}

#[test]
fn criterion_06_order_additive_noise() {
    let started = Instant::now();
    let p = toy_example_2(1e-19).unwrap();
    let cfg = study_config(&p, 2, 2000, 41);
    let reports = convergence_study(&p, &cfg, &Scheme::LOW_RANK, &SWEEP, 10, &[ReferenceKind::EmFine]).unwrap();
    let pass = Scheme::LOW_RANK.iter().all(|&s| {
        find(&reports, s, ReferenceKind::EmFine)
            .fitted_order
            .is_some_and(|o| (0.75..=1.25).contains(&o))
    });
    report(6, "strong order, additive noise", pass, &describe(&reports), started);
    assert!(pass);
}

#[test]
fn criterion_07_dlr_em_breakdown() {
    let started = Instant::now();
    let p = toy_example_3(1e-19).unwrap();
    let cfg = study_config(&p, 2, 2000, 51);
    let reports = convergence_study(&p, &cfg, &Scheme::LOW_RANK, &SWEEP, 10, &[ReferenceKind::EmFine]).unwrap();
    let r = |s| find(&reports, s, ReferenceKind::EmFine);
    let dt_min = *SWEEP.last().unwrap();
    let ps_ok = [Scheme::DlrPsEm, Scheme::DlrPsSde]
        .iter()
        .all(|&s| r(s).fitted_order.is_some_and(|o| o >= 0.75));
    let em_err = r(Scheme::DlrEm).error_at(dt_min).unwrap_or(f64::NAN);
    let ps_worst = [Scheme::DlrPsEm, Scheme::DlrPsSde]
        .iter()
        .map(|&s| r(s).error_at(dt_min).unwrap_or(f64::NAN))
        .fold(0.0, f64::max);
    let em_flat = r(Scheme::DlrEm).fitted_order.is_some_and(|o| o <= 0.2);
    let pass = ps_ok && (em_err >= 10.0 * ps_worst || em_flat);
    report(
        7,
        "DLR-EM breakdown under nonlinear drift",
        pass,
        &format!("error ratio at dt {dt_min}: {:.2}; {}", em_err / ps_worst, describe(&reports)),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_08_stability_triptych() {
    let started = Instant::now();
    let p = stability_model(10).unwrap();
    let cfg = StudyConfig {
        rank: p.default_rank,
        paths: 2000,
        seed: 61,
        t_final: 60.0,
        step: StepOptions::default(),
    };
    let runs = stability_study(&p, &cfg, &Scheme::LOW_RANK, &[0.0907, 0.0909, 0.0911]).unwrap();
    let class = |s: Scheme, dt: f64| -> &StabilityRun {
        runs.iter().find(|r| r.scheme == s && r.dt == dt).expect("run present")
    };
    let all = |dt, c| Scheme::LOW_RANK.iter().all(|&s| class(s, dt).class == c);
    let mid = class(Scheme::DlrEm, 0.0909).class == StabilityClass::Unstable
        && [Scheme::DlrPsEm, Scheme::DlrPsSde]
            .iter()
            .all(|&s| class(s, 0.0909).class == StabilityClass::Stable);
    let a0 = p.model.linear_drift(0.0).unwrap();
    let b = StabilityModel { d: 10 }.b_matrices();
    let threshold = stability_dt_threshold(&a0, &b).unwrap();
    let m_lo = ams_margin(&a0, &b, 0.0907).unwrap();
    let m_hi = ams_margin(&a0, &b, 0.0911).unwrap();
    let margins = m_lo < 1.0 && m_hi >= 1.0 && (threshold - 0.0907).abs() <= 5e-4;
    let pass = all(0.0907, StabilityClass::Stable) && mid && all(0.0911, StabilityClass::Unstable) && margins;
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{}@{}: {} ({:.2e})",
                r.scheme,
                r.dt,
                r.class.as_str(),
                r.mean_square.last().unwrap() / r.mean_square[0]
            )
        })
        .collect();
    report(
        8,
        "mean-square stability triptych",
        pass,
        &format!(
            "threshold {threshold:.6}, margins {m_lo:.5}/{m_hi:.5}; {}",
            detail.join(", ")
        ),
        started,
    );
    assert!(pass);
}

fn random_matrix(rng: &mut SampleStream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Sample inner product `E[aᵀb]` of two `d x M` ensembles.
fn sample_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>() / a.cols() as f64
}

#[test]
fn criterion_09_projector_properties() {
    let started = Instant::now();
    let mut rng = SampleStream::new(71);
    let (mut idem, mut adj, mut expand): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for _ in 0..100 {
        let d = 2 + (rng.uniform() * 9.0) as usize % 9;
        let k = 1 + (rng.uniform() * 5.0) as usize % d.min(5);
        let mp = 500;
        let (q, _) = reduced_qr(&random_matrix(&mut rng, d, k)).unwrap();
        let u = q.transpose();
        let y = random_matrix(&mut rng, k, mp);
        let z = random_matrix(&mut rng, d, mp);
        let w = random_matrix(&mut rng, d, mp);
        let pz = tangent_projector_apply(&u, &y, &z, 1e-12).unwrap();
        let pw = tangent_projector_apply(&u, &y, &w, 1e-12).unwrap();
        let ppz = tangent_projector_apply(&u, &y, &pz, 1e-12).unwrap();
        let scale = sample_inner(&z, &z).sqrt() * sample_inner(&w, &w).sqrt();
        idem = idem.max(rel(&ppz, &pz));
        adj = adj.max((sample_inner(&pz, &w) - sample_inner(&z, &pw)).abs() / scale);
        expand = expand.max(sample_inner(&pz, &pz).sqrt() - sample_inner(&z, &z).sqrt());
        // the row projector is the u-part of the tangent projector
        let rz = row_projector_apply(&u, &z);
        assert!(rel(&row_projector_apply(&u, &rz), &rz) < 1e-12);
    }
    let pass = idem <= 1e-9 && adj <= 1e-9 && expand <= 1e-12;
    report(
        9,
        "tangent projector laws",
        pass,
        &format!("idempotency {idem:.2e}, self-adjointness {adj:.2e}, max ‖Pz‖−‖z‖ {expand:.2e}"),
        started,
    );
    assert!(pass);
}

#[test]
fn criterion_10_null_space_independence() {
    let started = Instant::now();
    let d = 5;
    let a = Matrix::from_fn(d, d, |i, j| if i == j { -1.0 } else { 0.3 * ((i + 2 * j) as f64).sin() });
    let model = LinearModel::new("linear_test", a, vec![Matrix::zeros(d, d)]).unwrap();
    // two active stochastic modes inside a rank-3 basis: the third row of y
    // vanishes, so every Gramian in the step is singular
    let mut rng = SampleStream::new(81);
    let mp = 400;
    let (q, _) = reduced_qr(&random_matrix(&mut rng, d, 3)).unwrap();
    let u = q.transpose();
    let y = Matrix::from_fn(3, mp, |i, _| if i < 2 { rng.normal() } else { 0.0 });
    let state = EnsembleState::new(0.0, u, y).unwrap();
    let init = InitialState::LowRank(state);
    let problem = Problem {
        model: Box::new(model),
        initial: Box::new(SampledLaw::new(d, "unused", |_, _| {})),
        t_final: 0.5,
        default_rank: 3,
    };
    assert_eq!(problem.initial.dim(), d);
    let grid = BrownianGrid::generate(81, 0.0, 0.5, 10, 1, mp).unwrap();
    let inject = StepOptions {
        null_space_injection: Some(vec![0.3, -0.2, 0.5, 0.1, -0.4]),
        ..StepOptions::default()
    };
    let mut changes = Vec::new();
    for scheme in Scheme::LOW_RANK {
        let (_, plain) = run_collect(&problem, scheme, &init, &grid, StepOptions::default());
        let (_, injected) = run_collect(&problem, scheme, &init, &grid, inject.clone());
        let change = plain.iter().zip(&injected).map(|(a, b)| rel(b, a)).fold(0.0, f64::max);
        changes.push((scheme, change));
    }
    let change = |s| changes.iter().find(|(c, _)| *c == s).unwrap().1;
    let pass =
        change(Scheme::DlrPsEm) <= 1e-10 && change(Scheme::DlrPsSde) <= 1e-10 && change(Scheme::DlrEm) > 1e-6;
    let detail: Vec<String> = changes.iter().map(|(s, c)| format!("{s}: {c:.2e}")).collect();
    report(10, "minimal-norm independence", pass, &detail.join(", "), started);
    assert!(pass);
}

fn pde_ordering(problem: &Problem, seed: u64) -> (bool, String) {
    let cfg = study_config(problem, problem.default_rank, 1000, seed);
    let dts = [0.04, 0.02, 0.01];
    let reports = convergence_study(problem, &cfg, &Scheme::LOW_RANK, &dts, 10, &[ReferenceKind::EmFine]).unwrap();
    let r = |s| find(&reports, s, ReferenceKind::EmFine);
    let ok = dts.iter().all(|&dt| {
        let em = r(Scheme::DlrEm).error_at(dt).unwrap_or(f64::NAN);
        [Scheme::DlrPsEm, Scheme::DlrPsSde]
            .iter()
            .all(|&s| r(s).error_at(dt).is_some_and(|e| e <= 1.1 * em))
    });
    (ok, format!("{}: {}", problem.model.name(), describe(&reports)))
}

#[test]
fn criterion_11_pde_error_ordering() {
    let started = Instant::now();
    let (sadr_ok, sadr) = pde_ordering(&sadr_model(25).unwrap(), 91);
    let (lap_ok, lap) = pde_ordering(&laplacian_model(25, false).unwrap(), 92);
    let pass = sadr_ok && lap_ok;
    report(11, "PS errors not above DLR-EM on PDE problems", pass, &format!("{sadr} | {lap}"), started);
    assert!(pass);
}

#[test]
fn criterion_12_bound_formula_oracle() {
    let started = Instant::now();
    let mut worst_closed: f64 = 0.0;
    let mut worst_floor: f64 = 0.0;
    let mut violations = 0;
    let mut points = 0;
    for i in 0..10 {
        let sigma_b = 1e-8 * 10f64.powf(i as f64 * 0.7);
        for j in 0..10 {
            let dt = 1e-3 * 10f64.powf(j as f64 / 3.0);
            for l in 0..10 {
                let sigma_0 = 1e-10 * 10f64.powf(l as f64 * 0.9);
                let (c, k) = (48.04, 2.5);
                points += 1;
                // iterate the recurrence from σ₀ and from the relaxed floor
                let floor = refined_floor(sigma_0, sigma_b, c, k, dt);
                let (mut s, mut s_floor) = (sigma_0, floor);
                for n in 0..50u64 {
                    s = gramian_recurrence_step(s, sigma_b, c, k, dt);
                    s_floor = gramian_recurrence_step(s_floor, sigma_b, c, k, dt);
                    let closed = gramian_bound_unrelaxed(sigma_0, sigma_b, c, k, dt, n);
                    worst_closed = worst_closed.max((closed - s).abs() / s.abs());
                    let refined = gramian_bound_refined(sigma_0, sigma_b, c, k, dt, n);
                    if refined > s * (1.0 + 1e-12) {
                        violations += 1;
                    }
                    // the relaxed bound is the recurrence started at its floor
                    // whenever the floor is the stationary level
                    if floor < sigma_0 {
                        worst_floor = worst_floor.max((refined - s_floor).abs() / s_floor.abs());
                    }
                }
            }
        }
    }
    let pass = points == 1000 && worst_closed <= 1e-12 && worst_floor <= 1e-12 && violations == 0;
    report(
        12,
        "Gramian bound formulas against the step recurrence",
        pass,
        &format!(
            "{points} points x 50 steps: closed form {worst_closed:.2e}, relaxed form {worst_floor:.2e}, {violations} bound violations"
        ),
        started,
    );
    assert!(pass);
}
