use edmloc::doa::{cost_i, direction_from_tdoas, rank_reduced_gram};
use edmloc::linalg::{
    centering_vector, edm_to_gram, eigendecompose_sym, procrustes, reconstruct_relative_positions,
};
use edmloc::nalgebra::{DMatrix, DVector};
use edmloc::position::{
    alpha_lower_bound, cost_j, minimize_alpha, reconstruct_position, AlphaGrid,
};
use edmloc::tdoa::CenteredTdoaVector;
use edmloc::{Edm, MicArray};
use proptest::prelude::*;

const C: f64 = 343.0;

fn points(
    dim: usize,
    count: std::ops::Range<usize>,
    side: f64,
) -> impl Strategy<Value = DMatrix<f64>> {
    count.prop_flat_map(move |m| {
        prop::collection::vec(-side..side, dim * m)
            .prop_map(move |v| DMatrix::from_column_slice(dim, m, &v))
    })
}

fn well_spread(p: &DMatrix<f64>) -> bool {
    let m = p.ncols();
    let dist = |i: usize, j: usize| (p.column(i) - p.column(j)).norm();
    let pairs: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| dist(i, j))
        .collect();
    let widest = pairs.iter().copied().fold(0.0, f64::max);
    let spaced = pairs.iter().all(|&d| d > 0.05 * widest);
    let centered = p - p.column_mean() * DMatrix::from_element(1, m, 1.0);
    let sv = centered.svd(false, false).singular_values;
    spaced && sv.min() > 0.1 * sv.max()
}

fn orthogonal(seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, seed).qr().q()
}

fn array_of(p: &DMatrix<f64>) -> MicArray {
    MicArray::from_absolute(p).unwrap().0
}

fn unit(v: &[f64]) -> Option<DVector<f64>> {
    let v = DVector::from_column_slice(v);
    let n = v.norm();
    (n > 0.1).then(|| v / n)
}

proptest! {
    #[test]
    fn gram_matches_inner_products(p in points(3, 2..10, 3.0)) {
        let centered = &p - p.column_mean() * DMatrix::from_element(1, p.ncols(), 1.0);
        let g = edm_to_gram(&Edm::from_points(&p), &centering_vector(p.ncols(), 0)).unwrap();
        let direct = centered.transpose() * &centered;
        prop_assert!((g - direct).amax() < 1e-10);
    }

    #[test]
    fn gram_is_invariant_to_rigid_motion(
        p in points(3, 4..9, 2.0),
        q in prop::collection::vec(-1.0..1.0f64, 9),
        shift in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        let q = orthogonal(&q);
        let t = DVector::from_vec(shift);
        let moved = &q * &p + &t * DMatrix::from_element(1, p.ncols(), 1.0);
        let a = centering_vector(p.ncols(), 0);
        let g1 = edm_to_gram(&Edm::from_points(&p), &a).unwrap();
        let g2 = edm_to_gram(&Edm::from_points(&moved), &a).unwrap();
        prop_assert!((g1 - g2).amax() < 1e-9);
    }

    #[test]
    fn centering_weights_sum_to_one(m in 1usize..20, extra in 0usize..3) {
        let a = centering_vector(m, extra);
        prop_assert_eq!(a.len(), m + extra);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().skip(m).all(|&v| v == 0.0));
    }

    #[test]
    fn centered_gram_rows_sum_to_zero(p in points(3, 3..10, 2.0)) {
        let g = edm_to_gram(&Edm::from_points(&p), &centering_vector(p.ncols(), 0)).unwrap();
        for r in 0..g.nrows() {
            prop_assert!(g.row(r).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn trace_equals_mean_squared_distance(p in points(3, 2..10, 2.0)) {
        let m = p.ncols() as f64;
        let edm = Edm::from_points(&p);
        let g = edm_to_gram(&edm, &centering_vector(p.ncols(), 0)).unwrap();
        let expected = edm.matrix().sum() / (2.0 * m);
        prop_assert!((g.trace() - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn eigendecomposition_reconstructs(p in points(3, 2..9, 2.0)) {
        let g = edm_to_gram(&Edm::from_points(&p), &centering_vector(p.ncols(), 0)).unwrap();
        let ev = eigendecompose_sym(&g).unwrap();
        let s = &ev.eigenvectors;
        let n = g.nrows();
        prop_assert!((s.transpose() * s - DMatrix::identity(n, n)).amax() < 1e-9);
        let back = s * DMatrix::from_diagonal(&ev.eigenvalues) * s.transpose();
        prop_assert!((back - &g).amax() <= 1e-9 * g.norm().max(1.0));
        for w in ev.eigenvalues.as_slice().windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn reconstruction_preserves_distances(p in points(3, 4..9, 2.0)) {
        prop_assume!(well_spread(&p));
        let edm = Edm::from_points(&p);
        let g = edm_to_gram(&edm, &centering_vector(p.ncols(), 0)).unwrap();
        let rec = reconstruct_relative_positions(&eigendecompose_sym(&g).unwrap(), 3).unwrap();
        let back = Edm::from_points(&rec.points);
        prop_assert!((back.matrix() - edm.matrix()).amax() < 1e-8);
    }

    #[test]
    fn procrustes_recovers_orthogonal_maps(
        p in points(3, 4..9, 2.0),
        q in prop::collection::vec(-1.0..1.0f64, 9),
    ) {
        prop_assume!(well_spread(&p));
        let q = orthogonal(&q);
        let a = array_of(&p).positions().clone();
        let b = &q * &a;
        let map = procrustes(&a, &b).unwrap();
        prop_assert!((&map.rotation - &q).amax() < 1e-9);
        prop_assert!(map.residual < 1e-9);
    }

    #[test]
    fn position_cost_is_nonnegative(
        p in points(3, 5..9, 1.5),
        src in prop::collection::vec(-3.0..3.0f64, 3),
        alpha in 0.0..6.0f64,
    ) {
        prop_assume!(well_spread(&p));
        let array = array_of(&p);
        let s = DVector::from_vec(src);
        let d0 = (array.position(0) - &s).norm();
        let tdoas: Vec<f64> = (0..array.count())
            .map(|m| ((array.position(m) - &s).norm() - d0) / C)
            .collect();
        if alpha >= alpha_lower_bound(&tdoas, C) {
            let j = cost_j(&array, alpha, &tdoas, C).unwrap();
            prop_assert!(j >= 0.0);
        }
        let j0 = cost_j(&array, d0, &tdoas, C).unwrap();
        let scale = array.gram().trace() + d0 * d0;
        prop_assert!(j0 < 1e-9 * scale);
    }

    #[test]
    fn position_recovery_is_exact_at_true_alpha(
        p in points(3, 5..9, 1.5),
        src in prop::collection::vec(-3.0..3.0f64, 3),
    ) {
        prop_assume!(well_spread(&p));
        let array = array_of(&p);
        let s = DVector::from_vec(src);
        let d0 = (array.position(0) - &s).norm();
        prop_assume!((0..array.count()).all(|m| (array.position(m) - &s).norm() > 0.1));
        prop_assume!(d0 < 5.9);
        let tdoas: Vec<f64> = (0..array.count())
            .map(|m| ((array.position(m) - &s).norm() - d0) / C)
            .collect();
        let (est, _, degenerate) = reconstruct_position(&array, &tdoas, d0, C).unwrap();
        prop_assert!(!degenerate);
        prop_assert!((est - &s).norm() < 1e-6);
        let fit = minimize_alpha(&array, &tdoas, &AlphaGrid::default(), C).unwrap();
        prop_assert!((fit.alpha - d0).abs() < 2e-3);
    }

    #[test]
    fn doa_cost_is_zero_for_plane_waves(
        p in points(3, 5..9, 0.05),
        v in prop::collection::vec(-1.0..1.0f64, 3),
        noise in prop::collection::vec(-1e-4..1e-4f64, 9),
    ) {
        prop_assume!(well_spread(&p));
        let Some(v) = unit(&v) else { return Ok(()); };
        let array = array_of(&p);
        let tau = -(array.positions().transpose() * &v) / C;
        let exact = cost_i(&array, &CenteredTdoaVector(tau.clone()), C).unwrap();
        prop_assert!((0.0..1e-12).contains(&exact));
        let m = array.count();
        let mut bent = DVector::from_fn(m, |i, _| tau[i] + noise[i]);
        let mean = bent.mean();
        bent.add_scalar_mut(-mean);
        let perturbed = cost_i(&array, &CenteredTdoaVector(bent), C).unwrap();
        prop_assert!(perturbed >= 0.0);

        let est = direction_from_tdoas(&array, &CenteredTdoaVector(tau.clone()), C).unwrap();
        prop_assert!((est - &v).norm() < 1e-8);
    }

    #[test]
    fn rank_reduced_gram_has_rank_two(
        p in points(3, 4..10, 0.05),
        v in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        prop_assume!(well_spread(&p));
        let Some(v) = unit(&v) else { return Ok(()); };
        let array = array_of(&p);
        let tau = -(array.positions().transpose() * &v) / C;
        let g = rank_reduced_gram(&array, &CenteredTdoaVector(tau), C).unwrap();
        let ev = eigendecompose_sym(&g.matrix).unwrap();
        let lead = ev.eigenvalues[0];
        prop_assert!(ev.eigenvalues.iter().skip(2).all(|l| l.abs() < 1e-9 * lead));
    }
}

#[test]
fn uncentered_tdoas_are_rejected() {
    let p = DMatrix::from_column_slice(
        3,
        4,
        &[0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1],
    );
    let array = array_of(&p);
    let tau = CenteredTdoaVector(DVector::from_element(4, 1e-4));
    assert!(cost_i(&array, &tau, C).is_err());
}
