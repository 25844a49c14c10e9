//! STFT front end and GCC-PHAT.
//!
//! GCC curves follow the delay convention used across the crate: for the pair
//! `(m, ref)` the peak sits at lag `+D` when channel `m` is a copy of the
//! reference delayed by `D` samples.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Bins whose cross-spectrum magnitude falls below this are zeroed instead of
/// normalized.
pub const PHASE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    /// Frame length `K` in samples (power of two).
    pub frame_len: usize,
    /// Hop in samples; always `K / 2`.
    pub hop: usize,
    pub sample_rate: f64,
}

impl StftConfig {
    pub fn new(frame_len: usize, sample_rate: f64) -> Result<Self> {
        let cfg = Self {
            frame_len,
            hop: frame_len / 2,
            sample_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return invalid(format!(
                "frame length {} is not a power of two",
                self.frame_len
            ));
        }
        if self.hop != self.frame_len / 2 {
            return invalid("hop must be half the frame length");
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return invalid("sample rate must be positive");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Number of full frames in a signal of `len` samples (no tail padding).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            sample_rate: 16_000.0,
        }
    }
}

/// One-sided STFT: `frame_len / 2 + 1` bins per frame, frames stored
/// contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame(&self, l: usize) -> &[Complex64] {
        &self.data[l * self.bins..(l + 1) * self.bins]
    }

    pub fn frame_iter(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.bins)
    }

    /// Spectrogram with frames in the given order (used to check that
    /// frame-averaged quantities are order independent).
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &l in order {
            data.extend_from_slice(self.frame(l));
        }
        Self {
            bins: self.bins,
            frames: order.len(),
            data,
        }
    }
}

/// Square-root periodic Hann window; satisfies the COLA condition at 50%
/// overlap when applied for both analysis and synthesis.
pub fn sqrt_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| (PI * n as f64 / len as f64).sin())
        .collect()
}

pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if signal.len() < cfg.frame_len {
        return invalid(format!(
            "signal has {} samples, shorter than one frame ({})",
            signal.len(),
            cfg.frame_len
        ));
    }
    let k = cfg.frame_len;
    let bins = cfg.bins();
    let frames = cfg.frame_count(signal.len());
    let window = sqrt_hann(k);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(k);
    let mut buf = vec![Complex64::default(); k];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for l in 0..frames {
        let start = l * cfg.hop;
        for (b, (&x, &w)) in buf
            .iter_mut()
            .zip(signal[start..start + k].iter().zip(&window))
        {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { bins, frames, data })
}

/// Instantaneous normalized phase spectrum `Y_i Y_j^* / |Y_i Y_j^*|`, zero
/// where the cross-spectrum magnitude is below [`PHASE_GUARD`].
pub fn phase_spectrum(yi: &[Complex64], yj: &[Complex64]) -> Vec<Complex64> {
    yi.iter()
        .zip(yj)
        .map(|(a, b)| normalized_cross(*a, *b))
        .collect()
}

#[inline]
fn normalized_cross(a: Complex64, b: Complex64) -> Complex64 {
    let cross = a * b.conj();
    let mag = cross.norm();
    if mag < PHASE_GUARD {
        Complex64::default()
    } else {
        cross / mag
    }
}

/// Frame average of the normalized phase spectra of two channels.
pub fn averaged_phase_spectrum(yi: &Spectrogram, yj: &Spectrogram) -> Result<Vec<Complex64>> {
    check_compatible(yi, yj)?;
    let mut acc = vec![Complex64::default(); yi.bins];
    for (fi, fj) in yi.frame_iter().zip(yj.frame_iter()) {
        for (a, (x, y)) in acc.iter_mut().zip(fi.iter().zip(fj)) {
            *a += normalized_cross(*x, *y);
        }
    }
    let inv = 1.0 / yi.frames.max(1) as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

fn check_compatible(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.bins != b.bins || a.frames != b.frames {
        return invalid(format!(
            "spectrogram shapes differ: {}x{} vs {}x{}",
            a.bins, a.frames, b.bins, b.frames
        ));
    }
    if a.frames == 0 {
        return invalid("spectrogram has no frames");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GccConfig {
    /// Lag-domain interpolation factor `R`.
    pub interp_factor: usize,
    /// Peak emphasis exponent: each frame's curve is mapped through
    /// `exp(gamma * xi)` before averaging.
    pub gamma: f64,
    /// Optional pass band `[f_lo, f_hi]` in Hz; full band when `None`.
    pub band: Option<(f64, f64)>,
}

impl GccConfig {
    pub fn new(interp_factor: usize, gamma: f64) -> Self {
        Self {
            interp_factor,
            gamma,
            band: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.interp_factor == 0 {
            return invalid("interpolation factor must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return invalid("gamma must be a finite nonnegative number");
        }
        if let Some((lo, hi)) = self.band {
            if !(lo >= 0.0 && hi > lo) {
                return invalid("band must satisfy 0 <= f_lo < f_hi");
            }
        }
        Ok(())
    }
}

impl Default for GccConfig {
    fn default() -> Self {
        Self::new(20, 30.0)
    }
}

/// Frame-averaged, weighted GCC-PHAT over the plausible lags of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GccCurve {
    /// `values[i]` belongs to interpolated lag `i - max_lag`.
    pub values: Vec<f64>,
    pub max_lag: usize,
    /// Lag sampling rate `R * f_s` in Hz.
    pub rate: f64,
    pub pair: (usize, usize),
}

impl GccCurve {
    pub fn lag(&self, index: usize) -> isize {
        index as isize - self.max_lag as isize
    }

    pub fn value_at_lag(&self, lag: isize) -> Option<f64> {
        let idx = lag + self.max_lag as isize;
        usize::try_from(idx)
            .ok()
            .and_then(|i| self.values.get(i).copied())
    }

    /// Index of the largest value.
    pub fn argmax_lag(&self) -> Option<isize> {
        self.values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| self.lag(i))
    }
}

/// Largest integer lag strictly below `rate * distance / speed`.
pub fn plausible_max_lag(rate: f64, distance: f64, speed: f64) -> usize {
    let bound = rate * distance / speed;
    let ceil = bound.ceil();
    (ceil as usize).saturating_sub(1)
}

/// Reusable GCC-PHAT engine; holds the inverse FFT plan for `K * R` points.
pub struct GccEngine {
    stft: StftConfig,
    cfg: GccConfig,
    ifft: Arc<dyn ComplexToReal<f64>>,
    band_mask: Vec<bool>,
}

impl std::fmt::Debug for GccEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GccEngine")
            .field("stft", &self.stft)
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl GccEngine {
    pub fn new(stft: StftConfig, cfg: GccConfig) -> Result<Self> {
        stft.validate()?;
        cfg.validate()?;
        let n = stft.frame_len * cfg.interp_factor;
        let ifft = RealFftPlanner::<f64>::new().plan_fft_inverse(n);
        let band_mask = (0..stft.bins())
            .map(|k| {
                let f = k as f64 * stft.sample_rate / stft.frame_len as f64;
                cfg.band.is_none_or(|(lo, hi)| f >= lo && f <= hi)
            })
            .collect();
        Ok(Self {
            stft,
            cfg,
            ifft,
            band_mask,
        })
    }

    pub fn lag_rate(&self) -> f64 {
        self.stft.sample_rate * self.cfg.interp_factor as f64
    }

    /// GCC curve for channel `spec_m` against `spec_ref`, restricted to lags
    /// that are physically possible for microphones `pair_distance` apart.
    pub fn curve(
        &self,
        spec_m: &Spectrogram,
        spec_ref: &Spectrogram,
        pair_distance: f64,
        speed: f64,
        pair: (usize, usize),
    ) -> Result<GccCurve> {
        if !(pair_distance > 0.0) {
            return invalid(format!(
                "pair distance must be positive, got {pair_distance}"
            ));
        }
        if !(speed > 0.0) {
            return invalid("speed of sound must be positive");
        }
        check_compatible(spec_m, spec_ref)?;
        if spec_m.bins != self.stft.bins() {
            return invalid("spectrogram does not match the STFT configuration");
        }
        let k = self.stft.frame_len;
        let r = self.cfg.interp_factor;
        let n = k * r;
        let half = k / 2;
        let max_lag = plausible_max_lag(self.lag_rate(), pair_distance, speed).min(n / 2 - 1);
        let width = 2 * max_lag + 1;
        let mut acc = vec![0.0; width];
        let mut spectrum = self.ifft.make_input_vec();
        let mut out = self.ifft.make_output_vec();
        let mut scratch = self.ifft.make_scratch_vec();
        let inv_k = 1.0 / k as f64;
        for (fm, fr) in spec_m.frame_iter().zip(spec_ref.frame_iter()) {
            spectrum.iter_mut().for_each(|b| *b = Complex64::default());
            for kk in 0..=half {
                if !self.band_mask[kk] {
                    continue;
                }
                let psi = normalized_cross(fm[kk], fr[kk]);
                spectrum[kk] = if kk == 0 || (kk == half && r == 1) {
                    Complex64::new(psi.re, 0.0)
                } else if kk == half {
                    // Nyquist bin is split between both sides of the padded spectrum.
                    psi * 0.5
                } else {
                    psi
                };
            }
            self.ifft
                .process_with_scratch(&mut spectrum, &mut out, &mut scratch)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for (i, a) in acc.iter_mut().enumerate() {
                let lag = i as isize - max_lag as isize;
                let idx = lag.rem_euclid(n as isize) as usize;
                *a += (self.cfg.gamma * out[idx] * inv_k).exp();
            }
        }
        let inv_l = 1.0 / spec_m.frames as f64;
        acc.iter_mut().for_each(|a| *a *= inv_l);
        Ok(GccCurve {
            values: acc,
            max_lag,
            rate: self.lag_rate(),
            pair,
        })
    }
}

/// One-shot GCC-PHAT; see [`GccEngine::curve`].
pub fn gcc_phat(
    spec_m: &Spectrogram,
    spec_ref: &Spectrogram,
    stft_cfg: &StftConfig,
    pair_distance: f64,
    speed: f64,
    cfg: &GccConfig,
) -> Result<GccCurve> {
    GccEngine::new(*stft_cfg, *cfg)?.curve(spec_m, spec_ref, pair_distance, speed, (1, 0))
}
