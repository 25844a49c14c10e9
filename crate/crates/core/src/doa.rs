//! EDM-based far-field DOA estimation for compact arrays.
//!
//! Centered TDOAs are arrival delays: for a plane wave arriving from unit
//! direction `v`, microphone `m` at centered position `m_m` hears it
//! `-m_m^T v / c` after the centroid. Removing `c^2 tau tau^T` from the
//! microphone Gram leaves a matrix of rank `P - 1` exactly when `tau` fits a
//! plane wave, so no continuous search is needed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{
    eigendecompose_sym, procrustes, reconstruct_relative_positions, sorted_eigenvalues_unchecked,
    tail_abs_sum, GramEval, MicArray,
};
use crate::par;
use crate::position::{default_min_diff, select_combinations};
use crate::tdoa::{center_tdoas, CandidateSet, CenteredTdoaVector, Combination};

const CENTERING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RankReducedGram {
    pub matrix: DMatrix<f64>,
    pub q: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoaEstimate {
    /// Unit vector from the array centroid toward the source.
    pub direction: DVector<f64>,
    /// Radians in `(-pi, pi]`.
    pub azimuth: f64,
    /// Radians in `[-pi/2, pi/2]`.
    pub elevation: f64,
    pub q: usize,
    pub combination: Combination,
    pub cost: f64,
}

fn check_tdoas(array: &MicArray, tdoas: &CenteredTdoaVector, speed: f64) -> Result<()> {
    if tdoas.len() != array.count() {
        return invalid(format!(
            "{} TDOAs for {} microphones",
            tdoas.len(),
            array.count()
        ));
    }
    if tdoas.0.iter().any(|t| !t.is_finite()) {
        return invalid("non-finite TDOA");
    }
    let sum: f64 = tdoas.0.iter().sum();
    if sum.abs() > CENTERING_TOL {
        return invalid(format!("TDOAs are not centered (sum {sum:e})"));
    }
    if !(speed > 0.0) {
        return invalid("speed of sound must be positive");
    }
    Ok(())
}

fn reduce(gram: &DMatrix<f64>, tdoas: &DVector<f64>, speed: f64) -> DMatrix<f64> {
    let scaled = tdoas * speed;
    gram - &scaled * scaled.transpose()
}

/// `G_MM - c^2 tau tau^T`.
pub fn rank_reduced_gram(
    array: &MicArray,
    tdoas: &CenteredTdoaVector,
    speed: f64,
) -> Result<RankReducedGram> {
    check_tdoas(array, tdoas, speed)?;
    Ok(RankReducedGram {
        matrix: reduce(&array.gram(), &tdoas.0, speed),
        q: None,
    })
}

/// Sum of `|sigma_i|` over all but the `P - 1` largest eigenvalues of the
/// rank-reduced Gram.
pub fn cost_i(array: &MicArray, tdoas: &CenteredTdoaVector, speed: f64) -> Result<f64> {
    check_tdoas(array, tdoas, speed)?;
    let eig = sorted_eigenvalues_unchecked(&reduce(&array.gram(), &tdoas.0, speed));
    Ok(tail_abs_sum(&eig, array.dim() - 1))
}

/// `P x M` matrix whose first row is `-c tau^T` (the projection of every
/// microphone onto the DOA) and whose remaining rows are recovered from the
/// rank-reduced Gram.
pub fn reconstruct_mar(
    ev: &GramEval,
    tdoas: &CenteredTdoaVector,
    speed: f64,
    dim: usize,
) -> Result<DMatrix<f64>> {
    let m = tdoas.len();
    if ev.eigenvalues.len() != m {
        return invalid("eigen-decomposition does not match the TDOA vector");
    }
    if dim == 0 || dim > m {
        return invalid(format!("dimension {dim} out of range"));
    }
    let mut mar = DMatrix::zeros(dim, m);
    for c in 0..m {
        mar[(0, c)] = -speed * tdoas.0[c];
    }
    if dim > 1 {
        let rest = reconstruct_relative_positions(ev, dim - 1)?;
        mar.view_mut((1, 0), (dim - 1, m)).copy_from(&rest.points);
    }
    Ok(mar)
}

/// Azimuth and elevation of a unit vector. Azimuth is zero at the poles.
pub fn angles(direction: &DVector<f64>) -> (f64, f64) {
    let x = direction[0];
    let y = if direction.len() > 1 {
        direction[1]
    } else {
        0.0
    };
    let z = if direction.len() > 2 {
        direction[2]
    } else {
        0.0
    };
    let mut azimuth = if x == 0.0 && y == 0.0 {
        0.0
    } else {
        y.atan2(x)
    };
    if azimuth <= -std::f64::consts::PI {
        azimuth = std::f64::consts::PI;
    }
    (azimuth, z.clamp(-1.0, 1.0).asin())
}

/// Unit vector for azimuth/elevation in radians.
pub fn direction_from_angles(azimuth: f64, elevation: f64) -> DVector<f64> {
    DVector::from_vec(vec![
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ])
}

/// DOA of one combination given its centered TDOAs.
pub fn direction_from_tdoas(
    array: &MicArray,
    tdoas: &CenteredTdoaVector,
    speed: f64,
) -> Result<DVector<f64>> {
    check_tdoas(array, tdoas, speed)?;
    let ev = eigendecompose_sym(&reduce(&array.gram(), &tdoas.0, speed))?;
    let mar = reconstruct_mar(&ev, tdoas, speed, array.dim())?;
    let map = procrustes(&mar, array.positions())?;
    let v = map.rotation.column(0).into_owned();
    let norm = v.norm();
    Ok(v / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaParams {
    pub sources: usize,
    pub speed: f64,
    /// Minimum number of differing candidates between selected
    /// combinations; `M - 2` when `None`.
    pub min_diff: Option<usize>,
}

impl Default for DoaParams {
    fn default() -> Self {
        Self {
            sources: 1,
            speed: crate::DEFAULT_SPEED_OF_SOUND,
            min_diff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaCost {
    pub q: usize,
    pub combination: Combination,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoaSearch {
    pub estimates: Vec<DoaEstimate>,
    /// Per-combination costs, indexed by `q`.
    pub costs: Vec<DoaCost>,
    pub shortfall: bool,
}

pub fn estimate_doas(
    array: &MicArray,
    set: &CandidateSet,
    params: &DoaParams,
) -> Result<DoaSearch> {
    if params.sources == 0 {
        return invalid("number of sources must be at least 1");
    }
    if set.mic_count() != array.count() {
        return invalid(format!(
            "candidate set covers {} microphones, array has {}",
            set.mic_count(),
            array.count()
        ));
    }
    if !(params.speed > 0.0) {
        return invalid("speed of sound must be positive");
    }
    let gram = array.gram();
    let keep = array.dim() - 1;
    let costs: Vec<DoaCost> = par::map_range(set.combination_count(), |q| {
        let combination = set.combination_at(q);
        let tdoas = center_tdoas(set, &combination);
        let eig = sorted_eigenvalues_unchecked(&reduce(&gram, &tdoas.0, params.speed));
        let cost = tail_abs_sum(&eig, keep);
        DoaCost {
            q,
            combination,
            cost,
        }
    });

    let min_diff = params
        .min_diff
        .unwrap_or_else(|| default_min_diff(array.count()));
    let keyed: Vec<(Combination, f64)> = costs
        .iter()
        .map(|c| (c.combination.clone(), c.cost))
        .collect();
    let mut estimates = Vec::with_capacity(params.sources);
    select_combinations(&keyed, params.sources, min_diff, |q| {
        let entry = &costs[q];
        let tdoas = center_tdoas(set, &entry.combination);
        match direction_from_tdoas(array, &tdoas, params.speed) {
            Ok(direction) => {
                let (azimuth, elevation) = angles(&direction);
                estimates.push(DoaEstimate {
                    direction,
                    azimuth,
                    elevation,
                    q,
                    combination: entry.combination.clone(),
                    cost: entry.cost,
                });
                true
            }
            Err(_) => false,
        }
    });
    let shortfall = estimates.len() < params.sources;
    Ok(DoaSearch {
        estimates,
        costs,
        shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: f64 = 343.0;

    fn compact_array(rng: &mut ChaCha8Rng, m: usize) -> MicArray {
        let pts: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..0.1)).collect())
            .collect();
        MicArray::from_points(&pts).unwrap().0
    }

    fn random_direction(rng: &mut ChaCha8Rng) -> DVector<f64> {
        loop {
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn plane_wave(array: &MicArray, v: &DVector<f64>) -> CenteredTdoaVector {
        CenteredTdoaVector(-(array.positions().transpose() * v) / C)
    }

    #[test]
    fn zero_tdoas_leave_gram_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let array = compact_array(&mut rng, 5);
        let g = rank_reduced_gram(&array, &CenteredTdoaVector(DVector::zeros(5)), C).unwrap();
        assert_eq!(g.matrix, array.gram());
    }

    #[test]
    fn rejects_uncentered_tdoas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let array = compact_array(&mut rng, 4);
        let t = CenteredTdoaVector(DVector::from_vec(vec![0.0, 1e-4, 0.0, 0.0]));
        assert!(rank_reduced_gram(&array, &t, C).is_err());
    }

    #[test]
    fn plane_wave_drops_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let array = compact_array(&mut rng, 6);
            let v = random_direction(&mut rng);
            let t = plane_wave(&array, &v);
            let g = rank_reduced_gram(&array, &t, C).unwrap();
            let ev = eigendecompose_sym(&g.matrix).unwrap();
            let s1 = ev.eigenvalues[0];
            assert!(ev.eigenvalues.iter().skip(2).all(|s| s.abs() < 1e-8 * s1));
            let trace = array.gram().trace() - C * C * t.0.norm_squared();
            assert!((g.matrix.trace() - trace).abs() < 1e-10);
            assert!(cost_i(&array, &t, C).unwrap() < 1e-8 * s1);
        }
    }

    #[test]
    fn planar_array_residual_rank_one() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.08, 0.01],
            vec![0.03, 0.09],
            vec![0.1, 0.07],
            vec![0.05, 0.04],
        ];
        let array = MicArray::from_points(&pts).unwrap().0;
        let v = DVector::from_vec(vec![0.6, -0.8]);
        let t = CenteredTdoaVector(-(array.positions().transpose() * &v) / C);
        let ev = eigendecompose_sym(&rank_reduced_gram(&array, &t, C).unwrap().matrix).unwrap();
        assert!(ev
            .eigenvalues
            .iter()
            .skip(1)
            .all(|s| s.abs() < 1e-8 * ev.eigenvalues[0]));
        let dir = direction_from_tdoas(&array, &t, C).unwrap();
        assert!((dir - v).norm() < 1e-8);
    }

    #[test]
    fn mar_reproduces_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let array = compact_array(&mut rng, 6);
        let t = plane_wave(&array, &random_direction(&mut rng));
        let ev = eigendecompose_sym(&rank_reduced_gram(&array, &t, C).unwrap().matrix).unwrap();
        let mar = reconstruct_mar(&ev, &t, C, 3).unwrap();
        assert!((mar.transpose() * &mar - array.gram()).amax() < 1e-8);
        assert!((0..6).all(|c| mar[(0, c)] == -C * t.0[c]));
    }

    #[test]
    fn linear_array_second_row_zero() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![0.03 * i as f64, 0.0, 0.0]).collect();
        let array = MicArray::from_points(&pts).unwrap().0;
        let v = DVector::from_vec(vec![0.8, 0.6, 0.0]);
        let t = CenteredTdoaVector(-(array.positions().transpose() * &v) / C);
        let ev = eigendecompose_sym(&rank_reduced_gram(&array, &t, C).unwrap().matrix).unwrap();
        let mar = reconstruct_mar(&ev, &t, C, 3).unwrap();
        assert!(mar.row(2).amax() < 1e-9);
    }

    #[test]
    fn sign_convention_reproduces_tdoas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let array = compact_array(&mut rng, 6);
            let v = random_direction(&mut rng);
            let t = plane_wave(&array, &v);
            let dir = direction_from_tdoas(&array, &t, C).unwrap();
            let angle = dir.dot(&v).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 0.01, "{angle}");
            let back = -(array.positions().transpose() * &dir) / C;
            assert!((back - &t.0).amax() < 1e-9);
            assert!((dir.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn angles_along_axes() {
        let (az, el) = angles(&DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert_eq!((az, el), (0.0, 0.0));
        let (az, el) = angles(&DVector::from_vec(vec![0.0, 0.0, 1.0]));
        assert_eq!(az, 0.0);
        assert!((el - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let (az, _) = angles(&DVector::from_vec(vec![-1.0, -0.0, 0.0]));
        assert_eq!(az, std::f64::consts::PI);
    }

    #[test]
    fn two_sources_two_smallest_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let array = compact_array(&mut rng, 6);
        let v1 = direction_from_angles(0.4, 0.2);
        let v2 = direction_from_angles(-2.0, -0.3);
        let arrival = |v: &DVector<f64>| {
            let proj = -(array.positions().transpose() * v) / C;
            (0..6).map(|m| proj[m] - proj[0]).collect::<Vec<_>>()
        };
        let (t1, t2) = (arrival(&v1), arrival(&v2));
        let set = CandidateSet::new((1..6).map(|m| vec![t1[m], t2[m]]).collect()).unwrap();
        let params = DoaParams {
            sources: 2,
            ..DoaParams::default()
        };
        let search = estimate_doas(&array, &set, &params).unwrap();
        let mut sorted: Vec<f64> = search.costs.iter().map(|c| c.cost).collect();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[2] > 1e4 * sorted[1].max(1e-30));
        let mut qs: Vec<usize> = search.estimates.iter().map(|e| e.q).collect();
        qs.sort_unstable();
        assert_eq!(qs, vec![0, 31]);
        for e in &search.estimates {
            let truth = if e.q == 0 { &v1 } else { &v2 };
            assert!((&e.direction - truth).norm() < 1e-6);
        }
    }
}
