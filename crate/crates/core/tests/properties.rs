use proptest::prelude::*;

use dlra_core::diagnostics::{gramian_bound_refined, gramian_bound_unrelaxed, l2_sup_error};
use dlra_core::ensemble::{self, EnsembleState};
use dlra_core::integrators::{
    low_rank_step, tangent_projector_apply, Scheme, StepOptions, Trajectory,
};
use dlra_core::linalg::{reduced_qr, solve_spsd_minnorm, sym_eig, Matrix};
use dlra_core::models::toy_example_1;
use dlra_core::noise::BrownianGrid;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn tall() -> impl Strategy<Value = Matrix> {
    (1usize..6)
        .prop_flat_map(|c| (Just(c), c..9))
        .prop_flat_map(|(c, r)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_has_positive_diagonal_and_reconstructs(a in tall()) {
        let (q, r) = match reduced_qr(&a) {
            Ok(qr) => qr,
            Err(_) => return Ok(()),
        };
        for i in 0..r.rows() {
            prop_assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                prop_assert_eq!(r[(i, j)], 0.0);
            }
        }
        let qtq = q.tr_matmul(&q).unwrap();
        prop_assert!(qtq.distance(&Matrix::identity(a.cols())) < 1e-12);
        prop_assert!(q.matmul(&r).unwrap().distance(&a) <= 1e-12 * a.frobenius_norm().max(1.0));
        let (q2, r2) = reduced_qr(&a).unwrap();
        prop_assert_eq!(q.as_slice(), q2.as_slice());
        prop_assert_eq!(r.as_slice(), r2.as_slice());
    }

    #[test]
    fn minnorm_solve_matches_direct_solve_for_spd(b in matrix(4, 4), x0 in matrix(4, 3)) {
        let c = b.tr_matmul(&b).unwrap().add(&Matrix::identity(4).scale(0.5)).unwrap();
        let rhs = c.matmul(&x0).unwrap();
        let x = solve_spsd_minnorm(&c, &rhs, 1e-12).unwrap();
        prop_assert!(x.distance(&x0) <= 1e-8 * x0.frobenius_norm().max(1.0));
    }

    #[test]
    fn eigendecomposition_reconstructs(b in matrix(5, 5)) {
        let c = b.add(&b.transpose()).unwrap();
        let e = sym_eig(&c).unwrap();
        prop_assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(e.reconstruct().distance(&c) <= 1e-12 * c.frobenius_norm().max(1.0));
    }

    #[test]
    fn gramian_is_invariant_under_path_permutation(y in matrix(3, 40), shift in 1usize..40) {
        let permuted = Matrix::from_fn(3, 40, |i, j| y[(i, (j + shift) % 40)]);
        let a = ensemble::gramian(&y);
        let b = ensemble::gramian(&permuted);
        prop_assert!(a.matrix().distance(b.matrix()) <= 1e-15);
        prop_assert!(a.min_eigenvalue() >= -1e-15);
    }

    #[test]
    fn tangent_projector_is_an_orthogonal_projection(
        basis in matrix(6, 3),
        y in matrix(3, 200),
        z in matrix(6, 200),
    ) {
        let (q, _) = match reduced_qr(&basis) {
            Ok(qr) => qr,
            Err(_) => return Ok(()),
        };
        let u = q.transpose();
        let pz = tangent_projector_apply(&u, &y, &z, 1e-12).unwrap();
        let ppz = tangent_projector_apply(&u, &y, &pz, 1e-12).unwrap();
        prop_assert!(ppz.distance(&pz) <= 1e-9 * pz.frobenius_norm().max(1.0));
        prop_assert!(pz.frobenius_norm() <= z.frobenius_norm() + 1e-12);
    }

    #[test]
    fn refined_bound_is_monotone_and_below_unrelaxed(
        sigma_0 in 1e-12..1e-2f64,
        sigma_b in 1e-10..1e-1f64,
        c in 0.1..100.0f64,
        k in 0.0..10.0f64,
        dt in 1e-4..0.5f64,
        n in 0u64..200,
    ) {
        let now = gramian_bound_refined(sigma_0, sigma_b, c, k, dt, n);
        let next = gramian_bound_refined(sigma_0, sigma_b, c, k, dt, n + 1);
        prop_assert!(next >= now);
        prop_assert!(now <= gramian_bound_unrelaxed(sigma_0, sigma_b, c, k, dt, n) * (1.0 + 1e-12));
        prop_assert!(now >= sigma_0.min(sigma_b * sigma_b / (4.0 * c * (1.0 + k))));
    }

    #[test]
    fn l2_sup_error_is_a_pseudometric(a in matrix(2, 12), b in matrix(2, 12), c in matrix(2, 12)) {
        let grid = BrownianGrid::generate(1, 0.0, 1.0, 2, 1, 4).unwrap();
        // each trajectory: three nodes of a 2 x 4 ensemble
        let traj = |m: &Matrix| Trajectory {
            grid: grid.key(),
            times: vec![0.0, 0.5, 1.0],
            states: (0..3)
                .map(|n| Matrix::from_fn(2, 4, |i, j| m[(i, 4 * n + j)]))
                .collect(),
        };
        let (ta, tb, tc) = (traj(&a), traj(&b), traj(&c));
        let ab = l2_sup_error(&ta, &tb).unwrap();
        prop_assert_eq!(l2_sup_error(&ta, &ta).unwrap(), 0.0);
        prop_assert!((ab - l2_sup_error(&tb, &ta).unwrap()).abs() <= 1e-15);
        prop_assert!(ab <= l2_sup_error(&ta, &tc).unwrap() + l2_sup_error(&tc, &tb).unwrap() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn low_rank_steps_keep_orthonormal_modes_and_expand_r(seed in 0u64..1000, scheme_idx in 0usize..3) {
        let p = toy_example_1(1e-8).unwrap();
        let samples = p.initial.sample(seed, 300);
        let state: EnsembleState = ensemble::init_rank_k(&samples, 2).unwrap();
        let grid = BrownianGrid::generate(seed, 0.0, 0.1, 1, 3, 300).unwrap();
        let scheme = Scheme::LOW_RANK[scheme_idx];
        let (next, rec) = low_rank_step(
            scheme,
            p.model.as_ref(),
            &state,
            grid.dt(),
            &grid.increment(0),
            &StepOptions { debug_identities: true, ..StepOptions::default() },
        )
        .unwrap();
        prop_assert!(ensemble::orthonormality_defect(next.u()) <= 1e-10);
        prop_assert!(rec.r_min_eigenvalue >= 1.0 - 1e-10);
        prop_assert!(rec.factorization_defect.unwrap() <= 1e-10);
        if scheme != Scheme::DlrEm {
            prop_assert!(rec.identity_defect.unwrap() <= 1e-9);
        }
    }
}
