//! Candidate TDOA extraction and combination bookkeeping.
//!
//! Microphone 0 of the array handed to these functions is the reference.
//! Candidate lists are kept for microphones `1..M`; the reference TDOA is
//! identically zero.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::MicArray;
use crate::par;
use crate::signal::{GccCurve, GccEngine, Spectrogram};

/// A refined GCC peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Refined lag in interpolated samples.
    pub lag: f64,
    /// TDOA in seconds.
    pub tdoa: f64,
    /// Curve value at the integer peak.
    pub height: f64,
}

/// The `count` highest strict local maxima of `curve`, each refined with a
/// parabola through the peak and its neighbours. Returns fewer than `count`
/// when the curve has fewer maxima.
pub fn pick_candidates(curve: &GccCurve, count: usize) -> Result<Vec<Candidate>> {
    if curve.values.is_empty() {
        return invalid("empty GCC curve");
    }
    if count == 0 {
        return invalid("candidate count must be at least 1");
    }
    let v = &curve.values;
    let mut peaks: Vec<(usize, f64)> = (1..v.len().saturating_sub(1))
        .filter(|&i| v[i] > v[i - 1] && v[i] > v[i + 1])
        .map(|i| (i, v[i]))
        .collect();
    peaks.sort_by(|a, b| {
        let la = curve.lag(a.0);
        let lb = curve.lag(b.0);
        b.1.total_cmp(&a.1)
            .then(la.abs().cmp(&lb.abs()))
            .then(la.cmp(&lb))
    });
    peaks.truncate(count);
    Ok(peaks
        .into_iter()
        .map(|(i, height)| {
            let offset = parabolic_offset(v[i - 1], v[i], v[i + 1]);
            let lag = curve.lag(i) as f64 + offset;
            Candidate {
                lag,
                tdoa: lag / curve.rate,
                height,
            }
        })
        .collect())
}

/// Vertex offset of the parabola through three equally spaced samples,
/// clamped to one sample either way.
pub(crate) fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom == 0.0 || !denom.is_finite() {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-1.0, 1.0)
}

/// Candidate TDOAs (seconds) for microphones `1..M` against microphone 0,
/// each list sorted by descending peak height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    candidates: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<Vec<f64>>) -> Result<Self> {
        if candidates.is_empty() {
            return invalid("candidate set needs at least one non-reference microphone");
        }
        if let Some(m) = candidates.iter().position(Vec::is_empty) {
            return invalid(format!("microphone {} has no candidate TDOAs", m + 1));
        }
        if candidates.iter().flatten().any(|t| !t.is_finite()) {
            return invalid("non-finite candidate TDOA");
        }
        Ok(Self { candidates })
    }

    /// One candidate per microphone, e.g. exact TDOAs. `tdoas[0]` belongs to
    /// the reference and must be zero.
    pub fn from_exact(tdoas: &[f64]) -> Result<Self> {
        match tdoas.split_first() {
            Some((0.0, rest)) => Self::new(rest.iter().map(|&t| vec![t]).collect()),
            _ => invalid("exact TDOA vector must start with the reference (0.0)"),
        }
    }

    /// Number of microphones including the reference.
    pub fn mic_count(&self) -> usize {
        self.candidates.len() + 1
    }

    pub fn lists(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    /// Candidate counts `C_m` for microphones `1..M`.
    pub fn counts(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }

    /// Total number of combinations `Q`.
    pub fn combination_count(&self) -> usize {
        self.candidates.iter().map(Vec::len).product()
    }

    /// Combination number `q` (0-based) in lexicographic order.
    pub fn combination_at(&self, q: usize) -> Combination {
        let mut rest = q;
        let mut idx = vec![0; self.candidates.len()];
        for (slot, list) in idx.iter_mut().zip(&self.candidates).rev() {
            *slot = rest % list.len();
            rest /= list.len();
        }
        Combination(idx)
    }

    pub fn combinations(&self) -> Combinations<'_> {
        enumerate_combinations(self)
    }

    /// Raw TDOAs of a combination, length `M`, reference first (zero).
    pub fn tdoas(&self, combination: &Combination) -> Vec<f64> {
        std::iter::once(0.0)
            .chain(
                combination
                    .0
                    .iter()
                    .zip(&self.candidates)
                    .map(|(&c, list)| list[c]),
            )
            .collect()
    }
}

/// Index of the chosen candidate for each non-reference microphone
/// (0-based; displayed 1-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combination(pub Vec<usize>);

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{}", c + 1)?;
        }
        Ok(())
    }
}

/// Lexicographic iterator over all combinations of a [`CandidateSet`].
#[derive(Debug, Clone)]
pub struct Combinations<'a> {
    counts: Vec<usize>,
    next: Option<Vec<usize>>,
    _set: std::marker::PhantomData<&'a CandidateSet>,
}

impl Iterator for Combinations<'_> {
    type Item = Combination;

    fn next(&mut self) -> Option<Combination> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut pos = succ.len();
        let mut done = true;
        while pos > 0 {
            pos -= 1;
            succ[pos] += 1;
            if succ[pos] < self.counts[pos] {
                done = false;
                break;
            }
            succ[pos] = 0;
        }
        if !done {
            self.next = Some(succ);
        }
        Some(Combination(current))
    }
}

pub fn enumerate_combinations(set: &CandidateSet) -> Combinations<'_> {
    Combinations {
        counts: set.counts(),
        next: Some(vec![0; set.candidates.len()]),
        _set: std::marker::PhantomData,
    }
}

/// Number of positions where two combinations pick the same candidate.
pub fn combination_overlap(a: &Combination, b: &Combination) -> Result<usize> {
    if a.0.len() != b.0.len() {
        return invalid(format!(
            "combination lengths differ ({} vs {})",
            a.0.len(),
            b.0.len()
        ));
    }
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count())
}

/// Number of positions where two combinations differ.
pub(crate) fn combination_difference(a: &Combination, b: &Combination) -> usize {
    a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count()
}

/// TDOAs relative to the array centroid, seconds; entries sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredTdoaVector(pub DVector<f64>);

impl CenteredTdoaVector {
    /// Centers an arbitrary TDOA vector.
    pub fn from_raw(raw: &[f64]) -> Self {
        let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        Self(DVector::from_iterator(
            raw.len(),
            raw.iter().map(|t| t - mean),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

pub fn center_tdoas(set: &CandidateSet, combination: &Combination) -> CenteredTdoaVector {
    CenteredTdoaVector::from_raw(&set.tdoas(combination))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    /// Microphone closest to the centroid (spatially distributed arrays).
    Distributed,
    /// Microphone with the largest mean distance to the others (compact
    /// arrays).
    Compact,
}

pub fn select_reference_mic(array: &MicArray, mode: ArrayKind) -> usize {
    let m = array.count();
    let score = |i: usize| -> f64 {
        match mode {
            ArrayKind::Distributed => -array.position(i).norm(),
            ArrayKind::Compact => {
                (0..m)
                    .filter(|&j| j != i)
                    .map(|j| array.distance(i, j))
                    .sum::<f64>()
                    / (m - 1) as f64
            }
        }
    };
    let scores: Vec<f64> = (0..m).map(score).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1e-300);
    scores.iter().position(|&s| s >= best - tol).unwrap_or(0)
}

/// GCC-PHAT candidates for every microphone against microphone 0.
/// `spectra[m]` is the STFT of microphone `m` in the array's order.
pub fn extract_candidates(
    spectra: &[Spectrogram],
    array: &MicArray,
    engine: &GccEngine,
    count: usize,
    speed: f64,
) -> Result<CandidateSet> {
    if spectra.len() != array.count() {
        return invalid(format!(
            "{} spectrograms for {} microphones",
            spectra.len(),
            array.count()
        ));
    }
    let lists = par::map_range(array.count() - 1, |i| {
        let m = i + 1;
        let curve = engine.curve(
            &spectra[m],
            &spectra[0],
            array.distance(m, 0),
            speed,
            (m, 0),
        )?;
        let picks = pick_candidates(&curve, count)?;
        Ok(picks.into_iter().map(|c| c.tdoa).collect::<Vec<_>>())
    });
    CandidateSet::new(lists.into_iter().collect::<Result<Vec<_>>>()?)
}
