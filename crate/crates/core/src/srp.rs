//! SRP-PHAT baseline: coarse-to-fine grid search over positions or
//! directions.
//!
//! The functional sums, over all microphone pairs and frequency bins, the
//! PHAT-normalized cross-spectrum steered by the delay implied by a grid
//! point. Since it is linear in the cross-spectrum, the frame average is
//! taken once on the spectra; the result is identical to averaging the
//! per-frame functionals.

use nalgebra::DVector;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::doa::{angles, direction_from_angles};
use crate::error::{invalid, Result};
use crate::linalg::MicArray;
use crate::par;
use crate::signal::{averaged_phase_spectrum, Spectrogram, StftConfig};

/// Frame-averaged phase spectra for all pairs `i > j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectra {
    pairs: Vec<(usize, usize)>,
    spectra: Vec<Vec<Complex64>>,
    frame_len: usize,
    sample_rate: f64,
}

impl PhaseSpectra {
    pub fn from_spectrograms(spectra: &[Spectrogram], stft: &StftConfig) -> Result<Self> {
        stft.validate()?;
        if spectra.len() < 2 {
            return invalid("SRP needs at least two channels");
        }
        if spectra.iter().any(|s| s.bins() != stft.bins()) {
            return invalid("spectrogram does not match the STFT configuration");
        }
        let pairs: Vec<(usize, usize)> = (1..spectra.len())
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .collect();
        let averaged = par::map_slice(&pairs, |&(i, j)| {
            averaged_phase_spectrum(&spectra[i], &spectra[j])
        });
        Ok(Self {
            pairs,
            spectra: averaged.into_iter().collect::<Result<_>>()?,
            frame_len: stft.frame_len,
            sample_rate: stft.sample_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.0 + 1)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_spectrum(&self, pair: usize) -> &[Complex64] {
        &self.spectra[pair]
    }

    /// Upper bound of the functional: pairs times frame length.
    pub fn bound(&self) -> f64 {
        (self.pairs.len() * self.frame_len) as f64
    }

    /// `Re sum_k psi[k] exp(-j 2 pi fs tau k / K)` over the full
    /// (conjugate-symmetric) spectrum of one pair.
    fn steered(&self, pair: usize, tau: f64) -> f64 {
        let psi = &self.spectra[pair];
        let half = self.frame_len / 2;
        let step = Complex64::from_polar(
            1.0,
            -2.0 * std::f64::consts::PI * self.sample_rate * tau / self.frame_len as f64,
        );
        let mut phasor = Complex64::new(1.0, 0.0);
        let mut edge = psi[0].re;
        let mut inner = 0.0;
        for value in &psi[1..half] {
            phasor *= step;
            inner += value.re * phasor.re - value.im * phasor.im;
        }
        phasor *= step;
        edge += psi[half].re * phasor.re - psi[half].im * phasor.im;
        edge + 2.0 * inner
    }

    fn check_array(&self, array: &MicArray) -> Result<()> {
        if array.count() != self.channels() {
            return invalid(format!(
                "phase spectra cover {} channels, array has {}",
                self.channels(),
                array.count()
            ));
        }
        Ok(())
    }

    fn value_from_distances(&self, distances: &[f64], speed: f64) -> f64 {
        self.pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j))| self.steered(n, (distances[j] - distances[i]) / speed))
            .sum()
    }

    fn value_from_projections(&self, projections: &[f64], speed: f64) -> f64 {
        self.pairs
            .iter()
            .enumerate()
            .map(|(n, &(i, j))| self.steered(n, (projections[i] - projections[j]) / speed))
            .sum()
    }
}

/// SRP value at a candidate position (array-centered frame).
pub fn srp_value_position(
    spectra: &PhaseSpectra,
    position: &DVector<f64>,
    array: &MicArray,
    speed: f64,
) -> Result<f64> {
    spectra.check_array(array)?;
    if position.len() != array.dim() {
        return invalid("position dimension does not match the array");
    }
    let distances: Vec<f64> = (0..array.count())
        .map(|m| (array.positions().column(m) - position).norm())
        .collect();
    Ok(spectra.value_from_distances(&distances, speed))
}

/// SRP value for a plane wave from unit direction `direction`.
pub fn srp_value_doa(
    spectra: &PhaseSpectra,
    direction: &DVector<f64>,
    array: &MicArray,
    speed: f64,
) -> Result<f64> {
    spectra.check_array(array)?;
    if direction.len() != array.dim() {
        return invalid("direction dimension does not match the array");
    }
    if (direction.norm() - 1.0).abs() > 1e-9 {
        return invalid("direction must be a unit vector");
    }
    let projections: Vec<f64> = (0..array.count())
        .map(|m| array.positions().column(m).dot(direction))
        .collect();
    Ok(spectra.value_from_projections(&projections, speed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridKind {
    /// Box in the array-centered frame (room walls shifted by the centroid).
    Position { lower: [f64; 3], upper: [f64; 3] },
    /// Azimuth/elevation sphere; steps and extents in degrees.
    Doa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrpGrid {
    pub kind: GridKind,
    pub coarse_step: f64,
    pub fine_step: f64,
    /// Half-width of the fine patch around each coarse candidate.
    pub fine_extent: f64,
    /// Number of coarse candidates refined.
    pub beta: usize,
    /// Minimum coarse-level separation between selected sources (meters or
    /// degrees).
    pub exclusion: f64,
}

/// A grid point: the steering vector plus azimuth/elevation for DOA grids.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub vector: DVector<f64>,
    pub angles: Option<(f64, f64)>,
}

impl SrpGrid {
    /// Position grid for a room `[0, L]` whose origin sits at `-centroid` in
    /// the array frame.
    pub fn position(room: [f64; 3], centroid: &DVector<f64>) -> Self {
        let lower = [-centroid[0], -centroid[1], -centroid[2]];
        let upper = [
            room[0] - centroid[0],
            room[1] - centroid[1],
            room[2] - centroid[2],
        ];
        Self {
            kind: GridKind::Position { lower, upper },
            coarse_step: 0.1,
            fine_step: 0.01,
            fine_extent: 0.1,
            beta: 3,
            exclusion: 0.5,
        }
    }

    pub fn doa() -> Self {
        Self {
            kind: GridKind::Doa,
            coarse_step: 5.0,
            fine_step: 0.5,
            fine_extent: 5.0,
            beta: 2,
            exclusion: 20.0,
        }
    }

    pub fn validate(&self, sources: usize) -> Result<()> {
        if !(self.fine_step > 0.0 && self.fine_step < self.coarse_step) {
            return invalid("fine step must be positive and below the coarse step");
        }
        if !(self.fine_extent >= 0.0) {
            return invalid("fine extent must be nonnegative");
        }
        if self.beta < sources {
            return invalid(format!(
                "beta ({}) must be at least the number of sources ({sources})",
                self.beta
            ));
        }
        if let GridKind::Position { lower, upper } = self.kind {
            if (0..3).any(|a| !(upper[a] - lower[a] >= 2.0 * self.coarse_step)) {
                return invalid("position grid box is smaller than two coarse steps");
            }
        }
        Ok(())
    }

    fn steps(extent: f64, step: f64) -> usize {
        (extent / step + 1e-9).floor() as usize
    }

    /// Coarse grid: interior lattice points of the box at `coarse_step`,
    /// or the azimuth/elevation lattice plus both poles.
    pub fn coarse_points(&self) -> Vec<GridPoint> {
        match self.kind {
            GridKind::Position { lower, upper } => {
                let n: Vec<usize> = (0..3)
                    .map(|a| ((upper[a] - lower[a]) / self.coarse_step).round() as usize)
                    .collect();
                let mut pts = Vec::with_capacity((n[0] - 1) * (n[1] - 1) * (n[2] - 1));
                for i in 1..n[0] {
                    for j in 1..n[1] {
                        for k in 1..n[2] {
                            pts.push(GridPoint {
                                vector: DVector::from_vec(vec![
                                    lower[0] + i as f64 * self.coarse_step,
                                    lower[1] + j as f64 * self.coarse_step,
                                    lower[2] + k as f64 * self.coarse_step,
                                ]),
                                angles: None,
                            });
                        }
                    }
                }
                pts
            }
            GridKind::Doa => {
                let step = self.coarse_step;
                let n_az = (360.0 / step).round() as usize;
                let n_el = Self::steps(180.0, step) - 1;
                let mut pts = Vec::with_capacity(n_az * n_el + 2);
                for e in 1..=n_el {
                    let el = -90.0 + e as f64 * step;
                    for a in 0..n_az {
                        let az = 180.0 - (n_az - 1 - a) as f64 * step;
                        pts.push(Self::direction_point(az, el));
                    }
                }
                pts.push(Self::direction_point(0.0, 90.0));
                pts.push(Self::direction_point(0.0, -90.0));
                pts
            }
        }
    }

    fn direction_point(az_deg: f64, el_deg: f64) -> GridPoint {
        let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
        let vector = direction_from_angles(az, el);
        GridPoint {
            angles: Some(angles(&vector)),
            vector,
        }
    }

    /// Fine grid around one coarse point.
    pub fn fine_points(&self, center: &GridPoint) -> Vec<GridPoint> {
        let n = Self::steps(self.fine_extent, self.fine_step) as isize;
        let offsets: Vec<f64> = (-n..=n).map(|i| i as f64 * self.fine_step).collect();
        match self.kind {
            GridKind::Position { .. } => {
                let c = &center.vector;
                let mut pts = Vec::with_capacity(offsets.len().pow(3));
                for dx in &offsets {
                    for dy in &offsets {
                        for dz in &offsets {
                            pts.push(GridPoint {
                                vector: DVector::from_vec(vec![c[0] + dx, c[1] + dy, c[2] + dz]),
                                angles: None,
                            });
                        }
                    }
                }
                pts
            }
            GridKind::Doa => {
                let (az0, el0) = center.angles.unwrap_or_else(|| angles(&center.vector));
                let (az0, el0) = (az0.to_degrees(), el0.to_degrees());
                let mut pts = Vec::with_capacity(offsets.len().pow(2));
                for de in &offsets {
                    for da in &offsets {
                        pts.push(Self::direction_point(az0 + da, el0 + de));
                    }
                }
                pts
            }
        }
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_points().len()
    }

    /// Fine-stage point count over all `beta` refined candidates.
    pub fn fine_len(&self) -> usize {
        let per_axis = 2 * Self::steps(self.fine_extent, self.fine_step) + 1;
        let dims = match self.kind {
            GridKind::Position { .. } => 3,
            GridKind::Doa => 2,
        };
        self.beta * per_axis.pow(dims)
    }

    /// Separation used by the exclusion rule (meters or degrees).
    fn separation(&self, a: &GridPoint, b: &GridPoint) -> f64 {
        match self.kind {
            GridKind::Position { .. } => (&a.vector - &b.vector).norm(),
            GridKind::Doa => a.vector.dot(&b.vector).clamp(-1.0, 1.0).acos().to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrpEstimate {
    pub point: GridPoint,
    pub value: f64,
    /// Index of the coarse point that was refined.
    pub coarse_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrpSearch {
    pub estimates: Vec<SrpEstimate>,
    pub coarse_values: Vec<f64>,
    pub shortfall: bool,
}

fn evaluate(
    spectra: &PhaseSpectra,
    array: &MicArray,
    grid: &SrpGrid,
    speed: f64,
    point: &GridPoint,
) -> f64 {
    let m = array.count();
    let pos = array.positions();
    match grid.kind {
        GridKind::Position { .. } => {
            let d: Vec<f64> = (0..m)
                .map(|i| (pos.column(i) - &point.vector).norm())
                .collect();
            spectra.value_from_distances(&d, speed)
        }
        GridKind::Doa => {
            let proj: Vec<f64> = (0..m).map(|i| pos.column(i).dot(&point.vector)).collect();
            spectra.value_from_projections(&proj, speed)
        }
    }
}

fn refine(
    spectra: &PhaseSpectra,
    array: &MicArray,
    grid: &SrpGrid,
    speed: f64,
    coarse: &[GridPoint],
    index: usize,
) -> SrpEstimate {
    let fine = grid.fine_points(&coarse[index]);
    let values = par::map_slice(&fine, |p| evaluate(spectra, array, grid, speed, p));
    let best = argmax(&values);
    SrpEstimate {
        point: fine[best].clone(),
        value: values[best],
        coarse_index: index,
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Coarse evaluation, refinement of the `beta` best coarse points, then
/// greedy selection by fine value. From the second source on, a candidate
/// qualifies only if its coarse point keeps the exclusion distance to every
/// selected coarse point; when no refined candidate qualifies, further coarse
/// points are refined in order of decreasing value.
pub fn srp_localize(
    spectra: &PhaseSpectra,
    array: &MicArray,
    sources: usize,
    grid: &SrpGrid,
    speed: f64,
) -> Result<SrpSearch> {
    spectra.check_array(array)?;
    if sources == 0 {
        return invalid("number of sources must be at least 1");
    }
    if array.dim() != 3 {
        return invalid("SRP grids are three-dimensional");
    }
    grid.validate(sources)?;
    let coarse = grid.coarse_points();
    let coarse_values = par::map_slice(&coarse, |p| evaluate(spectra, array, grid, speed, p));
    let mut order: Vec<usize> = (0..coarse.len()).collect();
    order.sort_by(|&a, &b| {
        coarse_values[b]
            .total_cmp(&coarse_values[a])
            .then(a.cmp(&b))
    });

    let mut refined: Vec<SrpEstimate> = order
        .iter()
        .take(grid.beta)
        .map(|&i| refine(spectra, array, grid, speed, &coarse, i))
        .collect();
    let mut cursor = grid.beta.min(order.len());
    let mut chosen: Vec<SrpEstimate> = Vec::with_capacity(sources);
    let separated = |c: usize, chosen: &[SrpEstimate]| {
        chosen
            .iter()
            .all(|s| grid.separation(&coarse[c], &coarse[s.coarse_index]) >= grid.exclusion)
    };
    while chosen.len() < sources {
        let pick = refined
            .iter()
            .enumerate()
            .filter(|(_, e)| separated(e.coarse_index, &chosen))
            .max_by(|a, b| a.1.value.total_cmp(&b.1.value).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        if let Some(i) = pick {
            chosen.push(refined.swap_remove(i));
            continue;
        }
        while cursor < order.len() && !separated(order[cursor], &chosen) {
            cursor += 1;
        }
        if cursor == order.len() {
            break;
        }
        refined.push(refine(spectra, array, grid, speed, &coarse, order[cursor]));
        cursor += 1;
    }
    let shortfall = chosen.len() < sources;
    Ok(SrpSearch {
        estimates: chosen,
        coarse_values,
        shortfall,
    })
}
