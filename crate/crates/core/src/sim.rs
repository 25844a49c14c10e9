//! Deterministic scenario sampling and multichannel rendering.
//!
//! Geometry is drawn by rejection sampling from a seeded ChaCha generator.
//! Signals are rendered with a windowed-sinc fractional delay per propagation
//! path (direct path plus shoebox image sources up to a small order) and
//! mixed with independent pink noise per channel.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::MicArray;
use crate::par;
use crate::tdoa::ArrayKind;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

const RETRY_CAP: usize = 10_000;
const FD_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;
const GAIN_FLOOR: f64 = 0.1;

// Independent random streams derived from one scenario seed.
const STREAM_GEOMETRY: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_SOURCES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub room: [f64; 3],
    pub kind: ArrayKind,
    pub mic_count: usize,
    /// Side of the cube holding the microphones; centered in the room.
    pub cube_side: f64,
    pub min_mic_spacing: f64,
    /// Distance of each source from the array centroid.
    pub source_distances: Vec<f64>,
    pub min_source_spacing: f64,
    /// Minimum angle between sources seen from the centroid, degrees.
    pub min_source_angle: f64,
    /// Minimum distance of sources from the walls.
    pub wall_margin: f64,
    /// `None` disables noise.
    pub snr_db: Option<f64>,
    pub reflection_order: usize,
    pub reflection_coeff: f64,
    pub sample_rate: f64,
    pub duration: f64,
    pub speed_of_sound: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::distributed(2.0)
    }
}

impl ScenarioConfig {
    /// Two sources around a 2 m cube of six microphones; the second source
    /// sits 2 m from the centroid.
    pub fn distributed(first_distance: f64) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            room: [6.0, 6.0, 2.4],
            kind: ArrayKind::Distributed,
            mic_count: 6,
            cube_side: 2.0,
            min_mic_spacing: 0.1,
            source_distances: vec![first_distance, 2.0],
            min_source_spacing: 1.0,
            min_source_angle: 20.0,
            wall_margin: 0.1,
            snr_db: Some(20.0),
            reflection_order: 1,
            reflection_coeff: 0.5,
            sample_rate: 16_000.0,
            duration: 5.0,
            speed_of_sound: crate::DEFAULT_SPEED_OF_SOUND,
        }
    }

    /// Same as [`Self::distributed`] with a 10 cm cube.
    pub fn compact(first_distance: f64) -> Self {
        Self {
            kind: ArrayKind::Compact,
            cube_side: 0.1,
            min_mic_spacing: 0.04,
            ..Self::distributed(first_distance)
        }
    }

    pub fn for_kind(kind: ArrayKind, first_distance: f64) -> Self {
        match kind {
            ArrayKind::Distributed => Self::distributed(first_distance),
            ArrayKind::Compact => Self::compact(first_distance),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        if self.room.iter().any(|&l| !(l > 0.0)) {
            return invalid("room dimensions must be positive");
        }
        if self.mic_count < 4 {
            return invalid("at least four microphones are needed in 3D");
        }
        if !(self.cube_side > 0.0) || self.room.iter().any(|&l| self.cube_side > l) {
            return invalid("microphone cube must fit inside the room");
        }
        if self.source_distances.is_empty() {
            return invalid("at least one source is needed");
        }
        if self.source_distances.iter().any(|&d| !(d >= 0.0)) {
            return invalid("source distances must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.reflection_coeff) {
            return invalid("reflection coefficient must lie in [0, 1)");
        }
        if self.reflection_order > 2 {
            return invalid("reflection order above 2 is not supported");
        }
        if !(self.sample_rate > 0.0 && self.duration > 0.0 && self.speed_of_sound > 0.0) {
            return invalid("sample rate, duration and speed of sound must be positive");
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return invalid("SNR must be finite; omit it to disable noise");
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ScenarioConfig,
    /// Absolute microphone positions in room coordinates.
    pub microphones: Vec<[f64; 3]>,
    /// Absolute source positions in room coordinates.
    pub sources: Vec<[f64; 3]>,
}

impl Scenario {
    pub fn centroid(&self) -> DVector<f64> {
        let m = self.microphones.len() as f64;
        DVector::from_fn(3, |a, _| {
            self.microphones.iter().map(|p| p[a]).sum::<f64>() / m
        })
    }

    /// Centered array and its centroid.
    pub fn array(&self) -> Result<(MicArray, DVector<f64>)> {
        let pts: Vec<Vec<f64>> = self.microphones.iter().map(|p| p.to_vec()).collect();
        MicArray::from_points(&pts)
    }

    /// Source positions relative to the array centroid.
    pub fn centered_sources(&self) -> Vec<DVector<f64>> {
        let c = self.centroid();
        self.sources
            .iter()
            .map(|p| DVector::from_column_slice(p) - &c)
            .collect()
    }

    pub fn room_diagonal(&self) -> f64 {
        self.config.room.iter().map(|l| l * l).sum::<f64>().sqrt()
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn sample_mics(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let lower: Vec<f64> = cfg.room.iter().map(|l| 0.5 * (l - cfg.cube_side)).collect();
    let mut mics: Vec<[f64; 3]> = Vec::with_capacity(cfg.mic_count);
    let mut tries = 0;
    while mics.len() < cfg.mic_count {
        tries += 1;
        if tries > RETRY_CAP {
            return Err(Error::InfeasibleConfig(format!(
                "could not place {} microphones {} m apart in a {} m cube",
                cfg.mic_count, cfg.min_mic_spacing, cfg.cube_side
            )));
        }
        let p = [
            lower[0] + rng.random::<f64>() * cfg.cube_side,
            lower[1] + rng.random::<f64>() * cfg.cube_side,
            lower[2] + rng.random::<f64>() * cfg.cube_side,
        ];
        if mics.iter().all(|q| dist(&p, q) >= cfg.min_mic_spacing) {
            mics.push(p);
        }
    }
    Ok(mics)
}

fn sample_sources(
    cfg: &ScenarioConfig,
    centroid: &[f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 3]>> {
    let cos_limit = cfg.min_source_angle.to_radians().cos();
    let mut sources: Vec<[f64; 3]> = Vec::with_capacity(cfg.source_distances.len());
    let mut directions: Vec<Option<[f64; 3]>> = Vec::new();
    for &d in &cfg.source_distances {
        let mut placed = false;
        for _ in 0..RETRY_CAP {
            let v = unit_vector(rng);
            let p = [
                centroid[0] + d * v[0],
                centroid[1] + d * v[1],
                centroid[2] + d * v[2],
            ];
            let inside =
                (0..3).all(|a| p[a] >= cfg.wall_margin && p[a] <= cfg.room[a] - cfg.wall_margin);
            let spaced = sources
                .iter()
                .all(|q| dist(&p, q) >= cfg.min_source_spacing);
            let this_dir = (d > 1e-9).then_some(v);
            let apart = match this_dir {
                None => true,
                Some(v) => directions
                    .iter()
                    .flatten()
                    .all(|u| v[0] * u[0] + v[1] * u[1] + v[2] * u[2] <= cos_limit),
            };
            if inside && spaced && apart {
                sources.push(p);
                directions.push(this_dir);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleConfig(format!(
                "could not place a source {d} m from the array centroid"
            )));
        }
    }
    Ok(sources)
}

/// Random geometry satisfying all spacing constraints; a pure function of
/// `(cfg, seed)`.
pub fn sample_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = rng(seed, STREAM_GEOMETRY);
    let microphones = sample_mics(cfg, &mut rng)?;
    let m = microphones.len() as f64;
    let centroid: [f64; 3] =
        std::array::from_fn(|a| microphones.iter().map(|p| p[a]).sum::<f64>() / m);
    let sources = sample_sources(cfg, &centroid, &mut rng)?;
    Ok(Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        microphones,
        sources,
    })
}

/// Ground truth for one scenario, recomputed from the geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthOracle {
    pub speed_of_sound: f64,
    /// `distances[s][m]`: source `s` to microphone `m`.
    pub distances: Vec<Vec<f64>>,
    /// Unit vectors from the array centroid toward each source (zero for a
    /// source at the centroid).
    pub directions: Vec<[f64; 3]>,
    /// Plane-wave arrival delays relative to the centroid,
    /// `-m_m^T v / c`; they sum to zero.
    pub far_field: Vec<Vec<f64>>,
}

impl TruthOracle {
    /// Near-field TDOA `(d_m - d_ref) / c` of source `s`.
    pub fn tdoa(&self, s: usize, m: usize, reference: usize) -> f64 {
        (self.distances[s][m] - self.distances[s][reference]) / self.speed_of_sound
    }

    /// TDOAs of source `s` for every microphone against `reference`.
    pub fn tdoas(&self, s: usize, reference: usize) -> Vec<f64> {
        (0..self.distances[s].len())
            .map(|m| self.tdoa(s, m, reference))
            .collect()
    }
}

pub fn truth_tdoas(scenario: &Scenario) -> Result<TruthOracle> {
    let (array, centroid) = scenario.array()?;
    let c = scenario.config.speed_of_sound;
    let mut distances = Vec::new();
    let mut directions = Vec::new();
    let mut far_field = Vec::new();
    for p in &scenario.sources {
        distances.push(scenario.microphones.iter().map(|m| dist(m, p)).collect());
        let rel = DVector::from_column_slice(p) - &centroid;
        let n = rel.norm();
        let v = if n > 0.0 { rel / n } else { DVector::zeros(3) };
        far_field.push(
            (array.positions().transpose() * &v)
                .iter()
                .map(|x| -x / c)
                .collect(),
        );
        directions.push([v[0], v[1], v[2]]);
    }
    Ok(TruthOracle {
        speed_of_sound: c,
        distances,
        directions,
        far_field,
    })
}

fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = 0.25 * x * x;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Adds a Kaiser-windowed sinc kernel for a delay of `delay` samples with
/// gain `gain` into `rir`.
fn add_fractional_delay(rir: &mut [f64], delay: f64, gain: f64) {
    let base = delay.floor();
    let frac = delay - base;
    let half = (FD_TAPS / 2) as isize;
    let norm = bessel_i0(KAISER_BETA);
    for k in (1 - half)..=half {
        let n = base as isize + k;
        if n < 0 || n as usize >= rir.len() {
            continue;
        }
        let t = k as f64 - frac;
        let x = t / half as f64;
        if x.abs() > 1.0 {
            continue;
        }
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            (PI * t).sin() / (PI * t)
        };
        let w = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / norm;
        rir[n as usize] += gain * sinc * w;
    }
}

/// Image sources `(position, reflection count)` of a shoebox room up to
/// `order` reflections.
fn image_sources(source: &[f64; 3], room: &[f64; 3], order: usize) -> Vec<([f64; 3], usize)> {
    let span = order as i64;
    let mut images = Vec::new();
    for nx in -span..=span {
        for ny in -span..=span {
            for nz in -span..=span {
                for mask in 0..8u8 {
                    let n = [nx, ny, nz];
                    let mut pos = [0.0; 3];
                    let mut count = 0usize;
                    for a in 0..3 {
                        let u = ((mask >> a) & 1) as i64;
                        pos[a] = (1 - 2 * u) as f64 * source[a] + 2.0 * n[a] as f64 * room[a];
                        count += ((n[a] - u).abs() + n[a].abs()) as usize;
                    }
                    if count <= order {
                        images.push((pos, count));
                    }
                }
            }
        }
    }
    images.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.partial_cmp(&b.0).expect("finite")));
    images
}

/// Impulse response from `source` to `mic`: direct path plus image
/// sources, `coeff^order / max(d, 0.1)` gain each.
pub fn room_impulse_response(scenario: &Scenario, source: usize, mic: usize) -> Vec<f64> {
    let cfg = &scenario.config;
    let images = image_sources(&scenario.sources[source], &cfg.room, cfg.reflection_order);
    let mic_pos = &scenario.microphones[mic];
    let max_d = images
        .iter()
        .map(|(p, _)| dist(p, mic_pos))
        .fold(0.0, f64::max);
    let len = (max_d / cfg.speed_of_sound * cfg.sample_rate).ceil() as usize + FD_TAPS + 1;
    let mut rir = vec![0.0; len];
    for (pos, count) in &images {
        let d = dist(pos, mic_pos);
        let gain = cfg.reflection_coeff.powi(*count as i32) / d.max(GAIN_FLOOR);
        add_fractional_delay(&mut rir, d / cfg.speed_of_sound * cfg.sample_rate, gain);
    }
    rir
}

fn fft_convolve(x_spec: &[Complex64], rir: &[f64], len: usize) -> Vec<f64> {
    let n = x_spec.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut h: Vec<Complex64> = rir.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    h.resize(n, Complex64::default());
    fwd.process(&mut h);
    for (a, b) in h.iter_mut().zip(x_spec) {
        *a *= b;
    }
    inv.process(&mut h);
    let scale = 1.0 / n as f64;
    h[..len].iter().map(|c| c.re * scale).collect()
}

/// Reverberant source images at every microphone, without noise.
pub fn render_clean(scenario: &Scenario, source_signals: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cfg = &scenario.config;
    if source_signals.len() != scenario.sources.len() {
        return invalid(format!(
            "{} source signals for {} sources",
            source_signals.len(),
            scenario.sources.len()
        ));
    }
    for p in &scenario.sources {
        if (0..3).any(|a| p[a] < 0.0 || p[a] > cfg.room[a]) {
            return invalid("source lies outside the room");
        }
    }
    let len = source_signals.first().map_or(0, Vec::len);
    if len == 0 || source_signals.iter().any(|s| s.len() != len) {
        return invalid("source signals must be non-empty and of equal length");
    }
    let m = scenario.microphones.len();
    let rirs: Vec<Vec<f64>> = par::map_range(scenario.sources.len() * m, |i| {
        room_impulse_response(scenario, i / m, i % m)
    });
    let max_rir = rirs.iter().map(Vec::len).max().unwrap_or(0);
    let n = (len + max_rir).next_power_of_two();
    let spectra: Vec<Vec<Complex64>> = par::map_slice(source_signals, |s| {
        let mut buf: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(n, Complex64::default());
        FftPlanner::<f64>::new()
            .plan_fft_forward(n)
            .process(&mut buf);
        buf
    });
    let images = par::map_range(rirs.len(), |i| fft_convolve(&spectra[i / m], &rirs[i], len));
    let mut out = vec![vec![0.0; len]; m];
    for (i, img) in images.iter().enumerate() {
        for (o, v) in out[i % m].iter_mut().zip(img) {
            *o += v;
        }
    }
    Ok(out)
}

/// Renders all sources and adds pink noise at the configured SNR (noise
/// power relative to the signal power averaged over microphones).
pub fn synthesize(scenario: &Scenario, source_signals: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut channels = render_clean(scenario, source_signals)?;
    let Some(snr_db) = scenario.config.snr_db else {
        return Ok(channels);
    };
    let len = channels[0].len();
    let signal_power = channels
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / len as f64)
        .sum::<f64>()
        / channels.len() as f64;
    let noise_std = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = rng(scenario.seed, STREAM_NOISE);
    for c in &mut channels {
        let noise = pink_noise(&mut rng, len);
        for (v, n) in c.iter_mut().zip(&noise) {
            *v += noise_std * n;
        }
    }
    Ok(channels)
}

/// Unit-RMS pink noise: white Gaussian noise shaped by `1/sqrt(f)`.
pub fn pink_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let n = len.next_power_of_two();
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::default();
    for (k, b) in buf.iter_mut().enumerate().skip(1) {
        *b /= (k.min(n - k) as f64).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
    normalize_rms(&mut out);
    out
}

fn normalize_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Pink noise modulated by a 4 Hz syllable-rate envelope, unit RMS.
pub fn speech_like_source(seed: u64, duration: f64, sample_rate: f64) -> Vec<f64> {
    let len = (duration * sample_rate).round() as usize;
    let mut rng = rng(seed, STREAM_SOURCES);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let mut x = pink_noise(&mut rng, len);
    for (n, v) in x.iter_mut().enumerate() {
        let t = n as f64 / sample_rate;
        let env = 0.1 + 0.9 * 0.5 * (1.0 - (2.0 * PI * 4.0 * t + phase).cos());
        *v *= env;
    }
    normalize_rms(&mut x);
    x
}

/// Seed of the dry signal of source `s` in scenario `seed`.
pub fn source_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(s as u64 + 1)
}

pub type Signal = Vec<f64>;

/// Dry signals plus microphone mixture for a scenario.
pub fn simulate(scenario: &Scenario) -> Result<(Vec<Signal>, Vec<Signal>)> {
    let cfg = &scenario.config;
    let dry: Vec<Vec<f64>> = (0..scenario.sources.len())
        .map(|s| speech_like_source(source_seed(scenario.seed, s), cfg.duration, cfg.sample_rate))
        .collect();
    let mix = synthesize(scenario, &dry)?;
    Ok((dry, mix))
}

/// Microphone positions as a `3 x M` matrix in room coordinates.
pub fn absolute_positions(scenario: &Scenario) -> DMatrix<f64> {
    DMatrix::from_fn(3, scenario.microphones.len(), |r, c| {
        scenario.microphones[c][r]
    })
}
