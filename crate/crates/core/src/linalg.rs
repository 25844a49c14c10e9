//! Geometry and linear-algebra core: EDMs, Gram matrices, eigen-based point
//! reconstruction and orthogonal Procrustes alignment.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest tolerated column-mean norm of a centered array, in meters.
const CENTERING_TOL: f64 = 1e-12;

/// Relative threshold below which an eigenvalue counts as vanished.
pub const EIGEN_REL_TOL: f64 = 1e-9;

/// Microphone positions (`P x M`, meters), centered on their centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicArray {
    positions: DMatrix<f64>,
}

impl MicArray {
    /// Wraps already-centered positions. Fails if the centroid is not at the
    /// origin, if `M <= P`, or if two microphones coincide.
    pub fn new(positions: DMatrix<f64>) -> Result<Self> {
        let (dim, count) = positions.shape();
        if !(1..=3).contains(&dim) {
            return invalid(format!("array dimension must be 1..=3, got {dim}"));
        }
        if count <= dim {
            return invalid(format!(
                "need more microphones than dimensions (M={count}, P={dim})"
            ));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite microphone position");
        }
        let mean = positions.column_mean();
        if mean.norm() > CENTERING_TOL {
            return invalid(format!(
                "microphone positions are not centered (centroid norm {:e})",
                mean.norm()
            ));
        }
        for i in 0..count {
            for j in (i + 1)..count {
                if (positions.column(i) - positions.column(j)).norm() <= 0.0 {
                    return invalid(format!("microphones {i} and {j} coincide"));
                }
            }
        }
        Ok(Self { positions })
    }

    /// Centers absolute positions and returns the array together with the
    /// centroid that was subtracted.
    pub fn from_absolute(positions: &DMatrix<f64>) -> Result<(Self, DVector<f64>)> {
        if positions.ncols() == 0 {
            return invalid("empty microphone matrix");
        }
        let centroid = positions.column_mean();
        let mut centered = positions.clone();
        for mut col in centered.column_iter_mut() {
            col -= &centroid;
        }
        Ok((Self::new(centered)?, centroid))
    }

    /// Builds an array from per-microphone coordinate rows, centering them.
    pub fn from_points(points: &[Vec<f64>]) -> Result<(Self, DVector<f64>)> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return invalid("microphone coordinates have inconsistent dimensions");
        }
        let m = DMatrix::from_fn(dim, points.len(), |r, c| points[c][r]);
        Self::from_absolute(&m)
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn count(&self) -> usize {
        self.positions.ncols()
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn position(&self, m: usize) -> DVector<f64> {
        self.positions.column(m).into_owned()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.positions.column(i) - self.positions.column(j)).norm()
    }

    /// Largest inter-microphone distance.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.count() {
            for j in (i + 1)..self.count() {
                best = best.max(self.distance(i, j));
            }
        }
        best
    }

    /// EDM of the microphones (`D_MM`).
    pub fn edm(&self) -> Edm {
        Edm::from_points(&self.positions)
    }

    /// Microphone Gram matrix `M^T M`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.positions.transpose() * &self.positions
    }

    /// Same array with microphone `reference` moved to index 0; the other
    /// microphones keep their relative order. Also returns the permutation
    /// (`new index -> old index`).
    pub fn with_reference_first(&self, reference: usize) -> (Self, Vec<usize>) {
        let order = reference_first_order(self.count(), reference);
        let positions = DMatrix::from_fn(self.dim(), self.count(), |r, c| {
            self.positions[(r, order[c])]
        });
        (Self { positions }, order)
    }

    /// Applies an orthogonal transform to all positions.
    pub fn transformed(&self, transform: &DMatrix<f64>) -> Result<Self> {
        if transform.shape() != (self.dim(), self.dim()) {
            return invalid("transform shape does not match array dimension");
        }
        Self::new(transform * &self.positions)
    }
}

pub(crate) fn reference_first_order(count: usize, reference: usize) -> Vec<usize> {
    std::iter::once(reference)
        .chain((0..count).filter(|&m| m != reference))
        .collect()
}

/// Euclidean distance matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Edm {
    matrix: DMatrix<f64>,
}

impl Edm {
    /// Validates symmetry, zero diagonal and nonnegativity.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return invalid("EDM must be square");
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return invalid("EDM has non-finite entries");
        }
        let scale = matrix.amax().max(1.0);
        let n = matrix.nrows();
        for i in 0..n {
            if matrix[(i, i)] != 0.0 {
                return invalid(format!("EDM diagonal entry {i} is nonzero"));
            }
            for j in 0..n {
                if matrix[(i, j)] < 0.0 {
                    return invalid(format!("EDM entry ({i},{j}) is negative"));
                }
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 * scale {
                    return invalid(format!("EDM is not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(Self { matrix })
    }

    /// Squared pairwise distances between the columns of `points`.
    pub fn from_points(points: &DMatrix<f64>) -> Self {
        let n = points.ncols();
        let matrix = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (points.column(i) - points.column(j)).norm_squared()
            }
        });
        Self { matrix }
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub(crate) fn from_matrix_unchecked(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }
}

/// Centering vector `1/M` over the first `count` points, zero for `extra`
/// trailing points.
pub fn centering_vector(count: usize, extra: usize) -> DVector<f64> {
    let w = 1.0 / count as f64;
    DVector::from_fn(count + extra, |i, _| if i < count { w } else { 0.0 })
}

/// Gram matrix `-1/2 (I - 1 a^T) D (I - a 1^T)` of an EDM.
pub fn edm_to_gram(edm: &Edm, centering: &DVector<f64>) -> Result<DMatrix<f64>> {
    if centering.len() != edm.size() {
        return invalid(format!(
            "centering vector has length {}, EDM is {}x{}",
            centering.len(),
            edm.size(),
            edm.size()
        ));
    }
    Ok(gram_from_squared_distances(edm.matrix(), centering))
}

// Entry-wise form of the double centering: with r = D a and s = a^T D a,
// G_ij = -(D_ij - r_i - r_j + s) / 2.
pub(crate) fn gram_from_squared_distances(d: &DMatrix<f64>, a: &DVector<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let r = d * a;
    let s = a.dot(&r);
    DMatrix::from_fn(n, n, |i, j| -0.5 * (d[(i, j)] - r[i] - r[j] + s))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending signed order.
#[derive(Debug, Clone, PartialEq)]
pub struct GramEval {
    pub eigenvalues: DVector<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
    /// Cost derived from the eigenvalues, filled in by callers.
    pub cost: Option<f64>,
}

impl GramEval {
    /// Sum of `|lambda_i|` over all but the `keep` largest eigenvalues.
    pub fn tail_abs_sum(&self, keep: usize) -> f64 {
        tail_abs_sum(self.eigenvalues.as_slice(), keep)
    }
}

pub(crate) fn tail_abs_sum(sorted_desc: &[f64], keep: usize) -> f64 {
    sorted_desc.iter().skip(keep).map(|v| v.abs()).sum()
}

fn check_square_finite(g: &DMatrix<f64>) -> Result<()> {
    if !g.is_square() {
        return invalid("matrix must be square");
    }
    if g.iter().any(|v| !v.is_finite()) {
        return invalid("matrix has non-finite entries");
    }
    Ok(())
}

fn symmetrized(g: &DMatrix<f64>) -> DMatrix<f64> {
    (g + g.transpose()) * 0.5
}

pub fn eigendecompose_sym(g: &DMatrix<f64>) -> Result<GramEval> {
    check_square_finite(g)?;
    let eig = SymmetricEigen::new(symmetrized(g));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(GramEval {
        eigenvalues,
        eigenvectors,
        cost: None,
    })
}

/// Eigenvalues only, sorted descending. Cheaper than [`eigendecompose_sym`]
/// for cost evaluation.
pub fn sorted_eigenvalues(g: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_square_finite(g)?;
    Ok(sorted_eigenvalues_unchecked(g))
}

pub(crate) fn sorted_eigenvalues_unchecked(g: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = symmetrized(g)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Point coordinates recovered from a Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `P x N` relative coordinates.
    pub points: DMatrix<f64>,
    /// At least one of the top `P` eigenvalues vanished (rank below `P`).
    pub degenerate: bool,
}

/// Rows `sqrt(lambda_i) * s_i^T` for the `dim` largest eigenvalues. Tiny
/// negative eigenvalues (within `1e-9 * lambda_1`) are clamped to zero;
/// larger negatives mean the Gram is not realizable in `dim` dimensions.
pub fn reconstruct_relative_positions(ev: &GramEval, dim: usize) -> Result<Reconstruction> {
    let n = ev.eigenvalues.len();
    if dim == 0 || dim > n {
        return invalid(format!(
            "cannot reconstruct {dim} dimensions from {n} eigenvalues"
        ));
    }
    let tol = EIGEN_REL_TOL * ev.eigenvalues[0].max(0.0);
    let mut points = DMatrix::zeros(dim, n);
    let mut degenerate = false;
    for i in 0..dim {
        let lambda = ev.eigenvalues[i];
        if lambda < -tol {
            return Err(Error::DegenerateGeometry(format!(
                "eigenvalue {i} is negative ({lambda:e})"
            )));
        }
        if lambda <= tol {
            degenerate = true;
            continue;
        }
        let scale = lambda.sqrt();
        for c in 0..n {
            points[(i, c)] = scale * ev.eigenvectors[(c, i)];
        }
    }
    Ok(Reconstruction { points, degenerate })
}

/// Orthogonal map `R` minimizing `||R A - B||_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesMap {
    pub rotation: DMatrix<f64>,
    pub residual: f64,
    /// `A B^T` was rank deficient, so `rotation` is one of several minimizers.
    pub rank_deficient: bool,
}

/// Solves the orthogonal Procrustes problem mapping `a` onto the reference
/// `b`. Reflections are allowed (no determinant correction).
pub fn procrustes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ProcrustesMap> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "Procrustes inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return invalid("Procrustes input has non-finite entries");
    }
    let cross = a * b.transpose();
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let rotation = v_t.transpose() * u.transpose();
    let largest = svd.singular_values.max();
    let smallest = svd.singular_values.min();
    let rank_deficient = largest <= 0.0 || smallest <= 1e-12 * largest;
    let residual = (&rotation * a - b).norm();
    Ok(ProcrustesMap {
        rotation,
        residual,
        rank_deficient,
    })
}

/// Absolute position of the last reconstructed point: `R * P_r e_{N}`.
pub fn absolute_position_from_relative(
    relative: &DMatrix<f64>,
    map: &ProcrustesMap,
) -> Result<DVector<f64>> {
    if relative.ncols() == 0 || relative.nrows() != map.rotation.ncols() {
        return invalid("relative positions do not match the mapping dimension");
    }
    Ok(&map.rotation * relative.column(relative.ncols() - 1))
}
