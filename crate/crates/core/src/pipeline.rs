//! End-to-end estimators from microphone signals.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::doa::{estimate_doas, DoaParams, DoaSearch};
use crate::error::{invalid, Result};
use crate::linalg::MicArray;
use crate::par;
use crate::position::{estimate_positions, AlphaGrid, PositionParams, PositionSearch};
use crate::signal::{stft, GccConfig, GccEngine, Spectrogram, StftConfig};
use crate::srp::{srp_localize, PhaseSpectra, SrpGrid, SrpSearch};
use crate::tdoa::{extract_candidates, select_reference_mic, ArrayKind, CandidateSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmConfig {
    pub stft: StftConfig,
    pub gcc: GccConfig,
    /// Candidate TDOAs per microphone pair.
    pub candidates: usize,
    pub sources: usize,
    pub min_diff: Option<usize>,
    pub speed_of_sound: f64,
    /// Only used for position estimation.
    pub alpha_grid: AlphaGrid,
}

impl EdmConfig {
    /// Distributed-array defaults: three candidates, `gamma = 30`.
    pub fn position() -> Self {
        Self {
            stft: StftConfig::default(),
            gcc: GccConfig::new(20, 30.0),
            candidates: 3,
            sources: 2,
            min_diff: None,
            speed_of_sound: crate::DEFAULT_SPEED_OF_SOUND,
            alpha_grid: AlphaGrid::default(),
        }
    }

    /// Compact-array defaults: two candidates, `gamma = 50`.
    pub fn doa() -> Self {
        Self {
            gcc: GccConfig::new(20, 50.0),
            candidates: 2,
            ..Self::position()
        }
    }
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self::position()
    }
}

fn spectrograms(signals: &[Vec<f64>], cfg: &StftConfig) -> Result<Vec<Spectrogram>> {
    par::map_slice(signals, |s| stft(s, cfg))
        .into_iter()
        .collect()
}

fn check_signals(signals: &[Vec<f64>], array: &MicArray) -> Result<()> {
    if signals.len() != array.count() {
        return invalid(format!(
            "{} channels for {} microphones",
            signals.len(),
            array.count()
        ));
    }
    Ok(())
}

/// Reference selection, STFT and candidate extraction. Returns the
/// reordered array (reference first), its candidate set and the reference
/// index in the original order.
pub fn candidates_from_signals(
    signals: &[Vec<f64>],
    array: &MicArray,
    kind: ArrayKind,
    cfg: &EdmConfig,
) -> Result<(MicArray, CandidateSet, usize)> {
    check_signals(signals, array)?;
    let reference = select_reference_mic(array, kind);
    let (ordered, order) = array.with_reference_first(reference);
    let reordered: Vec<Vec<f64>> = order.iter().map(|&m| signals[m].clone()).collect();
    let spectra = spectrograms(&reordered, &cfg.stft)?;
    let engine = GccEngine::new(cfg.stft, cfg.gcc)?;
    let set = extract_candidates(
        &spectra,
        &ordered,
        &engine,
        cfg.candidates,
        cfg.speed_of_sound,
    )?;
    Ok((ordered, set, reference))
}

#[derive(Debug, Clone)]
pub struct EdmPositionOutput {
    /// Positions in the array's centered frame.
    pub positions: Vec<DVector<f64>>,
    pub search: PositionSearch,
    pub candidates: CandidateSet,
    pub reference: usize,
}

pub fn edm_positions(
    signals: &[Vec<f64>],
    array: &MicArray,
    cfg: &EdmConfig,
) -> Result<EdmPositionOutput> {
    let (ordered, set, reference) =
        candidates_from_signals(signals, array, ArrayKind::Distributed, cfg)?;
    let params = PositionParams {
        sources: cfg.sources,
        grid: cfg.alpha_grid,
        speed: cfg.speed_of_sound,
        min_diff: cfg.min_diff,
    };
    let search = estimate_positions(&ordered, &set, &params)?;
    Ok(EdmPositionOutput {
        positions: search
            .estimates
            .iter()
            .map(|e| e.position.clone())
            .collect(),
        search,
        candidates: set,
        reference,
    })
}

#[derive(Debug, Clone)]
pub struct EdmDoaOutput {
    pub directions: Vec<DVector<f64>>,
    pub search: DoaSearch,
    pub candidates: CandidateSet,
    pub reference: usize,
}

pub fn edm_doas(signals: &[Vec<f64>], array: &MicArray, cfg: &EdmConfig) -> Result<EdmDoaOutput> {
    let (ordered, set, reference) =
        candidates_from_signals(signals, array, ArrayKind::Compact, cfg)?;
    let params = DoaParams {
        sources: cfg.sources,
        speed: cfg.speed_of_sound,
        min_diff: cfg.min_diff,
    };
    let search = estimate_doas(&ordered, &set, &params)?;
    Ok(EdmDoaOutput {
        directions: search
            .estimates
            .iter()
            .map(|e| e.direction.clone())
            .collect(),
        search,
        candidates: set,
        reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrpConfig {
    pub stft: StftConfig,
    pub sources: usize,
    pub speed_of_sound: f64,
    pub grid: SrpGrid,
}

impl SrpConfig {
    /// Position search over a room with the array centroid at `centroid`.
    pub fn position(room: [f64; 3], centroid: &DVector<f64>) -> Self {
        Self {
            stft: StftConfig::default(),
            sources: 2,
            speed_of_sound: crate::DEFAULT_SPEED_OF_SOUND,
            grid: SrpGrid::position(room, centroid),
        }
    }

    pub fn doa() -> Self {
        Self {
            grid: SrpGrid::doa(),
            ..Self::position([1.0; 3], &DVector::zeros(3))
        }
    }
}

/// SRP-PHAT estimates: positions (centered frame) or unit directions,
/// depending on the grid kind.
pub fn srp_estimates(
    signals: &[Vec<f64>],
    array: &MicArray,
    cfg: &SrpConfig,
) -> Result<(Vec<DVector<f64>>, SrpSearch)> {
    check_signals(signals, array)?;
    let spectra = spectrograms(signals, &cfg.stft)?;
    let phase = PhaseSpectra::from_spectrograms(&spectra, &cfg.stft)?;
    let search = srp_localize(&phase, array, cfg.sources, &cfg.grid, cfg.speed_of_sound)?;
    let points = search
        .estimates
        .iter()
        .map(|e| e.point.vector.clone())
        .collect();
    Ok((points, search))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{sample_scenario, simulate, truth_tdoas, ScenarioConfig};

    #[test]
    fn gcc_candidates_match_geometry_free_field() {
        let mut cfg = ScenarioConfig::distributed(1.5);
        cfg.snr_db = None;
        cfg.reflection_order = 0;
        cfg.source_distances = vec![1.5];
        cfg.duration = 1.0;
        let sc = sample_scenario(&cfg, 11).unwrap();
        let (_, mix) = simulate(&sc).unwrap();
        let (array, _) = sc.array().unwrap();
        let edm = EdmConfig {
            candidates: 1,
            sources: 1,
            ..EdmConfig::position()
        };
        let (_, set, reference) =
            candidates_from_signals(&mix, &array, ArrayKind::Distributed, &edm).unwrap();
        let truth = truth_tdoas(&sc).unwrap();
        let (_, order) = array.with_reference_first(reference);
        let resolution = 1.0 / (20.0 * cfg.sample_rate);
        for (i, list) in set.lists().iter().enumerate() {
            let expected = truth.tdoa(0, order[i + 1], reference);
            assert!(
                (list[0] - expected).abs() <= resolution,
                "{} vs {expected}",
                list[0]
            );
        }
    }

    #[test]
    fn end_to_end_doa_sign() {
        let mut cfg = ScenarioConfig::compact(3.0);
        cfg.snr_db = None;
        cfg.reflection_order = 0;
        cfg.source_distances = vec![3.0];
        cfg.duration = 1.0;
        let sc = sample_scenario(&cfg, 5).unwrap();
        let (_, mix) = simulate(&sc).unwrap();
        let (array, _) = sc.array().unwrap();
        let edm = EdmConfig {
            sources: 1,
            ..EdmConfig::doa()
        };
        let out = edm_doas(&mix, &array, &edm).unwrap();
        let truth = truth_tdoas(&sc).unwrap();
        let v = DVector::from_column_slice(&truth.directions[0]);
        let angle = out.directions[0]
            .dot(&v)
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!(angle < 5.0, "angle {angle}");
    }
}
