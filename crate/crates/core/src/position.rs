//! EDM-based single- and multi-source position estimation.
//!
//! For every candidate combination the distance `alpha` between source and
//! reference microphone is scanned on a grid; the cost is the sum of the
//! magnitudes of all but the `P` largest eigenvalues of the Gram matrix of the
//! augmented EDM. The `S` combinations with the smallest minima (subject to a
//! minimum number of differing candidates) give the source estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{
    self, centering_vector, eigendecompose_sym, procrustes, reconstruct_relative_positions, Edm,
    GramEval, MicArray,
};
use crate::par;
use crate::tdoa::{combination_difference, parabolic_offset, CandidateSet, Combination};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 6.0,
            step: 0.01,
        }
    }
}

impl AlphaGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        let grid = Self { min, max, step };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.max > self.min && self.step > 0.0) {
            return invalid(format!(
                "alpha grid needs 0 <= min < max and step > 0 (got {}, {}, {})",
                self.min, self.max, self.step
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }
}

/// Smallest `alpha` for which every implied distance `alpha + c * tau_m` is
/// nonnegative.
pub fn alpha_lower_bound(tdoas: &[f64], speed: f64) -> f64 {
    let min_tdoa = tdoas.iter().copied().fold(f64::INFINITY, f64::min);
    (-speed * min_tdoa).max(0.0)
}

/// Builds Gram matrices of the microphone EDM augmented with one source.
///
/// The augmented Gram is the fixed microphone Gram bordered by one row that
/// depends on the source distances. In the eigenbasis of the microphone Gram
/// it is an arrowhead matrix of size `P + 2` plus `M - P - 1` exact zero
/// eigenvalues, so the cost only needs a small eigenproblem.
#[derive(Debug, Clone)]
struct SourceGram {
    mic_sq: DMatrix<f64>,
    centering: DVector<f64>,
    /// Row means of the microphone EDM.
    row_mean: DVector<f64>,
    /// Mean of the microphone EDM.
    mean: f64,
    /// Eigenvectors of the microphone Gram (columns, descending order),
    /// transposed.
    basis_t: DMatrix<f64>,
    /// The `P` largest microphone Gram eigenvalues.
    spectrum: Vec<f64>,
}

impl SourceGram {
    fn new(array: &MicArray) -> Self {
        let mic_sq = array.edm().matrix().clone();
        let m = mic_sq.nrows();
        let row_mean = mic_sq.column_mean();
        let mean = row_mean.mean();
        let ev = eigendecompose_sym(&array.gram()).expect("finite microphone Gram");
        Self {
            centering: centering_vector(m, 1),
            row_mean,
            mean,
            basis_t: ev.eigenvectors.transpose(),
            spectrum: ev.eigenvalues.iter().take(array.dim()).copied().collect(),
            mic_sq,
        }
    }

    fn edm(&self, alpha: f64, tdoas: &[f64], speed: f64) -> DMatrix<f64> {
        let m = self.mic_sq.nrows();
        let mut d = DMatrix::zeros(m + 1, m + 1);
        d.view_mut((0, 0), (m, m)).copy_from(&self.mic_sq);
        for (i, &t) in tdoas.iter().enumerate() {
            let dist = alpha + speed * t;
            d[(i, m)] = dist * dist;
            d[(m, i)] = dist * dist;
        }
        d
    }

    fn gram(&self, alpha: f64, tdoas: &[f64], speed: f64) -> DMatrix<f64> {
        linalg::gram_from_squared_distances(&self.edm(alpha, tdoas, speed), &self.centering)
    }

    /// Arrowhead form `[[diag(lambda_1..lambda_P, 0), z], [z^T, c]]`.
    fn arrowhead(&self, alpha: f64, tdoas: &[f64], speed: f64) -> DMatrix<f64> {
        let m = tdoas.len();
        let p = self.spectrum.len();
        let sq: Vec<f64> = tdoas.iter().map(|t| (alpha + speed * t).powi(2)).collect();
        let source_mean = sq.iter().sum::<f64>() / m as f64;
        let border = DVector::from_fn(m, |i, _| {
            -0.5 * (sq[i] - self.row_mean[i] - source_mean + self.mean)
        });
        let corner = source_mean - 0.5 * self.mean;
        let y = &self.basis_t * border;
        let tail = y.rows(p, m - p).norm();
        let mut a = DMatrix::zeros(p + 2, p + 2);
        for i in 0..p {
            a[(i, i)] = self.spectrum[i];
            a[(i, p + 1)] = y[i];
            a[(p + 1, i)] = y[i];
        }
        a[(p, p + 1)] = tail;
        a[(p + 1, p)] = tail;
        a[(p + 1, p + 1)] = corner;
        a
    }

    fn cost(&self, alpha: f64, tdoas: &[f64], speed: f64) -> f64 {
        let eig = linalg::sorted_eigenvalues_unchecked(&self.arrowhead(alpha, tdoas, speed));
        linalg::tail_abs_sum(&eig, self.spectrum.len())
    }
}

fn check_inputs(array: &MicArray, tdoas: &[f64], speed: f64) -> Result<()> {
    if tdoas.len() != array.count() {
        return invalid(format!(
            "{} TDOAs for {} microphones",
            tdoas.len(),
            array.count()
        ));
    }
    if tdoas.iter().any(|t| !t.is_finite()) {
        return invalid("non-finite TDOA");
    }
    if !(speed > 0.0) {
        return invalid("speed of sound must be positive");
    }
    Ok(())
}

fn check_alpha(alpha: f64, tdoas: &[f64], speed: f64) -> Result<()> {
    let lower = alpha_lower_bound(tdoas, speed);
    if !alpha.is_finite() || alpha < lower - 1e-12 {
        return invalid(format!(
            "alpha {alpha} is below the feasible bound {lower} (negative distance)"
        ));
    }
    Ok(())
}

/// EDM of the microphones plus one source at distances `alpha + c * tau_m`.
/// `tdoas` has one entry per microphone, reference (zero) first.
pub fn build_source_edm(array: &MicArray, alpha: f64, tdoas: &[f64], speed: f64) -> Result<Edm> {
    check_inputs(array, tdoas, speed)?;
    check_alpha(alpha, tdoas, speed)?;
    Ok(Edm::from_matrix_unchecked(
        SourceGram::new(array).edm(alpha, tdoas, speed),
    ))
}

/// Cost `J(alpha)`: sum of `|lambda_i|` beyond the `P` largest eigenvalues.
pub fn cost_j(array: &MicArray, alpha: f64, tdoas: &[f64], speed: f64) -> Result<f64> {
    check_inputs(array, tdoas, speed)?;
    check_alpha(alpha, tdoas, speed)?;
    Ok(SourceGram::new(array).cost(alpha, tdoas, speed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: f64,
    pub cost: f64,
}

/// Grid search over the feasible part of `grid`, followed by a parabolic
/// refinement of the squared cost around the best grid point. The returned cost is evaluated at
/// the refined `alpha`.
pub fn minimize_alpha(
    array: &MicArray,
    tdoas: &[f64],
    grid: &AlphaGrid,
    speed: f64,
) -> Result<AlphaFit> {
    check_inputs(array, tdoas, speed)?;
    grid.validate()?;
    minimize_with(&SourceGram::new(array), tdoas, grid, speed)
}

fn minimize_with(
    builder: &SourceGram,
    tdoas: &[f64],
    grid: &AlphaGrid,
    speed: f64,
) -> Result<AlphaFit> {
    let lower = alpha_lower_bound(tdoas, speed);
    let n = grid.len();
    let first = (0..n).find(|&i| grid.point(i) >= lower).ok_or_else(|| {
        Error::InfeasibleCombination(format!(
            "feasible alpha starts at {lower:.3} m, beyond the grid maximum {}",
            grid.max
        ))
    })?;
    let costs: Vec<f64> = (first..n)
        .map(|i| builder.cost(grid.point(i), tdoas, speed))
        .collect();
    let (best, &best_cost) = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one feasible grid point");
    if best == 0 || best + 1 == costs.len() {
        return Ok(AlphaFit {
            alpha: grid.point(first + best),
            cost: best_cost,
        });
    }
    // J has a linear cusp at an exact minimum; J^2 is smooth there.
    let sq = |v: f64| v * v;
    let offset = parabolic_offset(sq(costs[best - 1]), sq(best_cost), sq(costs[best + 1]));
    let alpha = grid.point(first + best) + offset * grid.step;
    Ok(AlphaFit {
        alpha,
        cost: builder.cost(alpha, tdoas, speed),
    })
}

/// Result of the alpha search for one combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationCost {
    /// 0-based combination number.
    pub q: usize,
    pub combination: Combination,
    /// `None` for infeasible combinations.
    pub alpha: Option<f64>,
    /// `+inf` for infeasible combinations.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimate {
    /// Source position in the array's centered frame.
    pub position: DVector<f64>,
    pub alpha: f64,
    pub q: usize,
    pub combination: Combination,
    pub cost: f64,
    pub gram: GramEval,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionParams {
    pub sources: usize,
    pub grid: AlphaGrid,
    pub speed: f64,
    /// Minimum number of differing candidates between selected
    /// combinations; `M - 2` when `None`.
    pub min_diff: Option<usize>,
}

impl Default for PositionParams {
    fn default() -> Self {
        Self {
            sources: 1,
            grid: AlphaGrid::default(),
            speed: crate::DEFAULT_SPEED_OF_SOUND,
            min_diff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionSearch {
    pub estimates: Vec<PositionEstimate>,
    /// Per-combination minima, indexed by `q`.
    pub costs: Vec<CombinationCost>,
    /// Fewer than the requested number of sources could be selected.
    pub shortfall: bool,
}

/// Default exclusion threshold for `M` microphones.
pub fn default_min_diff(mic_count: usize) -> usize {
    mic_count.saturating_sub(2)
}

/// Indices into `costs` of the selected combinations: ascending cost, each
/// differing from all previously selected ones in at least `min_diff`
/// entries. `accept` may reject a combination after the fact.
pub(crate) fn select_combinations<F>(
    costs: &[(Combination, f64)],
    sources: usize,
    min_diff: usize,
    mut accept: F,
) -> Vec<usize>
where
    F: FnMut(usize) -> bool,
{
    let mut order: Vec<usize> = (0..costs.len())
        .filter(|&q| costs[q].1.is_finite())
        .collect();
    order.sort_by(|&a, &b| costs[a].1.total_cmp(&costs[b].1).then(a.cmp(&b)));
    let mut selected: Vec<usize> = Vec::with_capacity(sources);
    for q in order {
        if selected.len() == sources {
            break;
        }
        let separated = selected
            .iter()
            .all(|&s| combination_difference(&costs[q].0, &costs[s].0) >= min_diff);
        if separated && accept(q) {
            selected.push(q);
        }
    }
    selected
}

/// Position of one source from its TDOAs and estimated reference distance.
pub fn reconstruct_position(
    array: &MicArray,
    tdoas: &[f64],
    alpha: f64,
    speed: f64,
) -> Result<(DVector<f64>, GramEval, bool)> {
    check_inputs(array, tdoas, speed)?;
    let gram = SourceGram::new(array).gram(alpha, tdoas, speed);
    let mut ev = eigendecompose_sym(&gram)?;
    ev.cost = Some(ev.tail_abs_sum(array.dim()));
    let rec = reconstruct_relative_positions(&ev, array.dim())?;
    let m = array.count();
    let mics = rec.points.columns(0, m).into_owned();
    let map = procrustes(&mics, array.positions())?;
    let position = linalg::absolute_position_from_relative(&rec.points, &map)?;
    Ok((position, ev, rec.degenerate || map.rank_deficient))
}

pub fn estimate_positions(
    array: &MicArray,
    set: &CandidateSet,
    params: &PositionParams,
) -> Result<PositionSearch> {
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
    params.grid.validate()?;
    let builder = SourceGram::new(array);
    let costs: Vec<CombinationCost> = par::map_range(set.combination_count(), |q| {
        let combination = set.combination_at(q);
        let tdoas = set.tdoas(&combination);
        match minimize_with(&builder, &tdoas, &params.grid, params.speed) {
            Ok(fit) => CombinationCost {
                q,
                combination,
                alpha: Some(fit.alpha),
                cost: fit.cost,
            },
            Err(_) => CombinationCost {
                q,
                combination,
                alpha: None,
                cost: f64::INFINITY,
            },
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
        let alpha = entry.alpha.expect("finite cost implies a fit");
        let tdoas = set.tdoas(&entry.combination);
        match reconstruct_position(array, &tdoas, alpha, params.speed) {
            Ok((position, gram, degenerate)) => {
                estimates.push(PositionEstimate {
                    position,
                    alpha,
                    q,
                    combination: entry.combination.clone(),
                    cost: entry.cost,
                    gram,
                    degenerate,
                });
                true
            }
            Err(_) => false,
        }
    });
    let shortfall = estimates.len() < params.sources;
    Ok(PositionSearch {
        estimates,
        costs,
        shortfall,
    })
}

/// One sample of a cost curve `J(alpha, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurvePoint {
    pub q: usize,
    pub alpha: f64,
    pub cost: f64,
}

/// `J(alpha, q)` on every feasible grid point of every combination.
pub fn cost_curves(
    array: &MicArray,
    set: &CandidateSet,
    grid: &AlphaGrid,
    speed: f64,
) -> Result<Vec<CostCurvePoint>> {
    if set.mic_count() != array.count() {
        return invalid("candidate set does not match the array");
    }
    grid.validate()?;
    let builder = SourceGram::new(array);
    let curves = par::map_range(set.combination_count(), |q| {
        let tdoas = set.tdoas(&set.combination_at(q));
        let lower = alpha_lower_bound(&tdoas, speed);
        (0..grid.len())
            .map(|i| grid.point(i))
            .filter(|&a| a >= lower)
            .map(|alpha| CostCurvePoint {
                q,
                alpha,
                cost: builder.cost(alpha, &tdoas, speed),
            })
            .collect::<Vec<_>>()
    });
    Ok(curves.into_iter().flatten().collect())
}
