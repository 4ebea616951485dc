mod common;

use nalgebra::DMatrix;
use projfold::projection::{
    apply_projection, fold_projection, fold_rows, mask_rows, prune_projection, ClusterAssignment,
};
use projfold::WeightMatrix;
use proptest::prelude::*;
use rand::Rng;

use common::*;

/// Generic `U (UᵀU)⁻¹ Uᵀ` via a dense LU inverse, independent of the
/// closed forms used by the crate.
fn generic_projection(a: &ClusterAssignment) -> DMatrix<f64> {
    let u = DMatrix::from_fn(a.m(), a.k(), |i, j| (a.labels()[i] == j) as u8 as f64);
    let gram = u.transpose() * &u;
    &u * gram.try_inverse().expect("full column rank") * u.transpose()
}

#[test]
fn fold_projection_matches_generic_formula() {
    let mut rng = rng(1);
    for _ in 0..200 {
        let m = rng.random_range(1..=24);
        let a = random_assignment(&mut rng, m);
        let c = fold_projection(&a);
        let g = generic_projection(&a);
        for i in 0..m {
            for j in 0..m {
                assert!((c.matrix().get(i, j) - g[(i, j)]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn projections_are_symmetric_and_idempotent(seed in any::<u64>(), m in 1usize..=64) {
        let mut rng = rng(seed);
        let c = prune_projection(&random_selection(&mut rng, m));
        let tol = c.axiom_tolerance();
        prop_assert!(c.symmetry_residual() <= tol);
        prop_assert!(c.idempotence_residual() <= tol);

        let c = fold_projection(&random_assignment(&mut rng, m));
        let tol = c.axiom_tolerance();
        prop_assert!(c.symmetry_residual() <= tol, "sym {}", c.symmetry_residual());
        prop_assert!(c.idempotence_residual() <= tol, "idem {}", c.idempotence_residual());
    }

    #[test]
    fn fold_rows_agrees_with_matrix_route(seed in any::<u64>(), m in 1usize..=40, p in 1usize..=12) {
        let mut rng = rng(seed);
        let w = uniform_matrix(&mut rng, m, p);
        let a = random_assignment(&mut rng, m);
        let fast = fold_rows(&a, &w).unwrap();
        let slow = apply_projection(&fold_projection(&a), &w).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        // each row equals a directly computed cluster mean
        for (i, &l) in a.labels().iter().enumerate() {
            let members: Vec<usize> = (0..m).filter(|&r| a.labels()[r] == l).collect();
            for j in 0..p {
                let mean = members.iter().map(|&r| w.get(r, j)).sum::<f64>() / members.len() as f64;
                prop_assert!((fast.get(i, j) - mean).abs() <= 1e-12);
            }
        }

        let sel = random_selection(&mut rng, m);
        prop_assert_eq!(mask_rows(&sel, &w).unwrap(), apply_projection(&prune_projection(&sel), &w).unwrap());
    }

    #[test]
    fn fold_is_best_approximation_in_range(seed in any::<u64>(), m in 1usize..=30) {
        let mut rng = rng(seed);
        let a = random_assignment(&mut rng, m);
        let y = uniform_matrix(&mut rng, m, 1);
        let cy = fold_rows(&a, &y).unwrap();
        let best = projfold::analysis::recon_error_sq(&y, &cy).unwrap().sqrt();
        for _ in 0..100 {
            let coef: Vec<f64> = (0..a.k()).map(|_| rng.random_range(-2.0..=2.0)).collect();
            let z = WeightMatrix::new(m, 1, a.labels().iter().map(|&l| coef[l]).collect()).unwrap();
            let d = projfold::analysis::recon_error_sq(&y, &z).unwrap().sqrt();
            prop_assert!(best <= d + 1e-9, "{best} > {d}");
        }
    }
}
