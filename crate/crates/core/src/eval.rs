//! Batch experiments, error metrics, aggregation and runtime benchmarks.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::pipeline::{edm_doas, edm_positions, srp_estimates, EdmConfig, SrpConfig};
use crate::sim::{sample_scenario, simulate, truth_tdoas, Scenario, ScenarioConfig};
use crate::tdoa::ArrayKind;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Error assigned to a source that was not estimated.
pub const DOA_SENTINEL_DEG: f64 = 180.0;

/// Pairs `(truth, estimate, error)` found by repeatedly taking the globally
/// closest unpaired pair; ties go to the lower truth index, then the lower
/// estimate index. Sorted by truth index.
pub fn greedy_assign<T, F>(
    truth: &[T],
    estimates: &[T],
    metric: F,
) -> Result<Vec<(usize, usize, f64)>>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    if truth.len() != estimates.len() {
        return invalid(format!(
            "{} true sources but {} estimates",
            truth.len(),
            estimates.len()
        ));
    }
    assign_partial(truth, estimates, metric)
}

fn assign_partial<T, F>(truth: &[T], estimates: &[T], metric: F) -> Result<Vec<(usize, usize, f64)>>
where
    F: Fn(&T, &T) -> Result<f64>,
{
    let mut pairs = Vec::with_capacity(truth.len() * estimates.len());
    for (t, a) in truth.iter().enumerate() {
        for (e, b) in estimates.iter().enumerate() {
            pairs.push((t, e, metric(a, b)?));
        }
    }
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut used_t = vec![false; truth.len()];
    let mut used_e = vec![false; estimates.len()];
    let mut out = Vec::new();
    for (t, e, err) in pairs {
        if !used_t[t] && !used_e[e] {
            used_t[t] = true;
            used_e[e] = true;
            out.push((t, e, err));
        }
    }
    out.sort_by_key(|p| p.0);
    Ok(out)
}

/// Euclidean distance in centimeters.
pub fn error_pos(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return invalid("position dimensions differ");
    }
    if truth.iter().chain(estimate.iter()).any(|v| !v.is_finite()) {
        return invalid("non-finite position");
    }
    Ok(100.0 * (truth - estimate).norm())
}

/// Angle between two directions in degrees.
pub fn error_doa(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return invalid("direction dimensions differ");
    }
    let (a, b) = (truth.norm(), estimate.norm());
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return invalid("direction must be finite and nonzero");
    }
    Ok((truth.dot(estimate) / (a * b))
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "edm-pos")]
    EdmPos,
    #[serde(rename = "srp-pos")]
    SrpPos,
    #[serde(rename = "edm-doa")]
    EdmDoa,
    #[serde(rename = "srp-doa")]
    SrpDoa,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::EdmPos => "edm-pos",
            Method::SrpPos => "srp-pos",
            Method::EdmDoa => "edm-doa",
            Method::SrpDoa => "srp-doa",
        }
    }

    pub fn is_position(self) -> bool {
        matches!(self, Method::EdmPos | Method::SrpPos)
    }

    /// Methods applicable to an array kind.
    pub fn for_kind(kind: ArrayKind) -> [Method; 2] {
        match kind {
            ArrayKind::Distributed => [Method::EdmPos, Method::SrpPos],
            ArrayKind::Compact => [Method::EdmDoa, Method::SrpDoa],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edm-pos" => Ok(Method::EdmPos),
            "srp-pos" => Ok(Method::SrpPos),
            "edm-doa" => Ok(Method::EdmDoa),
            "srp-doa" => Ok(Method::SrpDoa),
            other => invalid(format!("unknown method '{other}'")),
        }
    }
}

/// Estimates of one method on one scenario, in the array-centered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub estimates: Vec<DVector<f64>>,
    pub shortfall: bool,
    pub degenerate: bool,
}

/// Runs one method on a mixture; the returned duration covers only the
/// estimator.
pub fn run_method(
    method: Method,
    scenario: &Scenario,
    mix: &[Vec<f64>],
    edm: &EdmConfig,
) -> Result<(MethodOutput, f64)> {
    let (array, centroid) = scenario.array()?;
    let sources = scenario.sources.len();
    let edm = EdmConfig {
        sources,
        speed_of_sound: scenario.config.speed_of_sound,
        ..*edm
    };
    let start = Instant::now();
    let out = match method {
        Method::EdmPos => {
            let r = edm_positions(mix, &array, &edm)?;
            MethodOutput {
                degenerate: r.search.estimates.iter().any(|e| e.degenerate),
                shortfall: r.search.shortfall,
                estimates: r.positions,
            }
        }
        Method::EdmDoa => {
            let r = edm_doas(mix, &array, &edm)?;
            MethodOutput {
                degenerate: false,
                shortfall: r.search.shortfall,
                estimates: r.directions,
            }
        }
        Method::SrpPos | Method::SrpDoa => {
            let mut cfg = if method == Method::SrpPos {
                SrpConfig::position(scenario.config.room, &centroid)
            } else {
                SrpConfig::doa()
            };
            cfg.sources = sources;
            cfg.speed_of_sound = scenario.config.speed_of_sound;
            cfg.stft = edm.stft;
            let (estimates, search) = srp_estimates(mix, &array, &cfg)?;
            MethodOutput {
                estimates,
                shortfall: search.shortfall,
                degenerate: false,
            }
        }
    };
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok((out, elapsed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Shortfall,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub distance: f64,
    pub method: Method,
    /// Per true source: cm for positions, degrees for DOAs.
    pub errors: Vec<f64>,
    pub runtime_ms: f64,
    pub status: RunStatus,
    pub degenerate: bool,
}

/// Per-source errors after greedy assignment; unmatched sources receive the
/// sentinel.
pub fn score(method: Method, scenario: &Scenario, output: &MethodOutput) -> Result<Vec<f64>> {
    let (truth, sentinel): (Vec<DVector<f64>>, f64) = if method.is_position() {
        (
            scenario.centered_sources(),
            100.0 * scenario.room_diagonal(),
        )
    } else {
        let oracle = truth_tdoas(scenario)?;
        (
            oracle
                .directions
                .iter()
                .map(|d| DVector::from_column_slice(d))
                .collect(),
            DOA_SENTINEL_DEG,
        )
    };
    let metric = |a: &DVector<f64>, b: &DVector<f64>| {
        if method.is_position() {
            error_pos(a, b)
        } else {
            error_doa(a, b)
        }
    };
    let mut errors = vec![sentinel; truth.len()];
    for (t, _, e) in assign_partial(&truth, &output.estimates, metric)? {
        errors[t] = e;
    }
    Ok(errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ArrayKind,
    /// Distances of the first source from the array centroid.
    pub distances: Vec<f64>,
    pub scenarios: usize,
    pub seed_start: u64,
    pub methods: Vec<Method>,
    /// Scenario template; `kind` and the first source distance are
    /// overridden per run.
    pub scenario: Option<ScenarioConfig>,
    pub edm: Option<EdmConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_kind(ArrayKind::Distributed)
    }
}

impl ExperimentConfig {
    pub fn for_kind(kind: ArrayKind) -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            kind,
            distances: match kind {
                ArrayKind::Distributed => vec![1.0, 2.0, 3.0],
                ArrayKind::Compact => vec![1.0, 2.0, 3.0, 4.0],
            },
            scenarios: 50,
            seed_start: 1,
            methods: Method::for_kind(kind).to_vec(),
            scenario: None,
            edm: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: EXPERIMENT_SCHEMA_VERSION,
            });
        }
        if self.distances.is_empty() || self.scenarios == 0 || self.methods.is_empty() {
            return invalid("experiment needs distances, scenarios and methods");
        }
        for m in &self.methods {
            let ok = Method::for_kind(self.kind).contains(m);
            if !ok {
                return invalid(format!("method {m} does not apply to this array kind"));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.scenarios as u64)
            .map(|i| self.seed_start + i)
            .collect()
    }

    pub fn scenario_config(&self, distance: f64) -> ScenarioConfig {
        let mut cfg = match &self.scenario {
            Some(base) => base.clone(),
            None => ScenarioConfig::for_kind(self.kind, distance),
        };
        cfg.kind = self.kind;
        if cfg.source_distances.is_empty() {
            cfg.source_distances.push(distance);
        } else {
            cfg.source_distances[0] = distance;
        }
        cfg
    }

    pub fn edm_config(&self) -> EdmConfig {
        self.edm.unwrap_or(match self.kind {
            ArrayKind::Distributed => EdmConfig::position(),
            ArrayKind::Compact => EdmConfig::doa(),
        })
    }
}

fn run_scenario(cfg: &ExperimentConfig, distance: f64, seed: u64) -> Vec<RunResult> {
    let scenario_cfg = cfg.scenario_config(distance);
    let sources = scenario_cfg.source_distances.len();
    let diagonal_cm = 100.0 * scenario_cfg.room.iter().map(|l| l * l).sum::<f64>().sqrt();
    let failed = |method: Method| RunResult {
        seed,
        distance,
        method,
        errors: vec![
            if method.is_position() {
                diagonal_cm
            } else {
                DOA_SENTINEL_DEG
            };
            sources
        ],
        runtime_ms: 0.0,
        status: RunStatus::Failed,
        degenerate: false,
    };
    let prepared =
        sample_scenario(&scenario_cfg, seed).and_then(|sc| simulate(&sc).map(|(_, mix)| (sc, mix)));
    let Ok((scenario, mix)) = prepared else {
        return cfg.methods.iter().map(|&m| failed(m)).collect();
    };
    let edm = cfg.edm_config();
    cfg.methods
        .iter()
        .map(|&method| {
            let outcome = run_method(method, &scenario, &mix, &edm)
                .and_then(|(out, ms)| score(method, &scenario, &out).map(|e| (out, ms, e)));
            match outcome {
                Ok((out, runtime_ms, errors)) => RunResult {
                    seed,
                    distance,
                    method,
                    errors,
                    runtime_ms,
                    status: if out.shortfall {
                        RunStatus::Shortfall
                    } else {
                        RunStatus::Ok
                    },
                    degenerate: out.degenerate,
                },
                Err(_) => failed(method),
            }
        })
        .collect()
}

/// Runs every (distance, seed) scenario; results are ordered by distance,
/// seed and method regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let jobs: Vec<(f64, u64)> = cfg
        .distances
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let runs = par::map_slice(&jobs, |&(d, s)| run_scenario(cfg, d, s));
    Ok(runs.into_iter().flatten().collect())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-run CSV without runtimes, so it is reproducible byte for byte.
pub fn write_runs_csv<W: Write>(runs: &[RunResult], out: W) -> Result<()> {
    let sources = runs.iter().map(|r| r.errors.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["seed".to_string(), "distance".into(), "method".into()];
    header.extend((1..=sources).map(|s| format!("error_{s}")));
    header.extend(["status".to_string(), "degenerate".into()]);
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![
            r.seed.to_string(),
            fmt_f64(r.distance),
            r.method.to_string(),
        ];
        row.extend((0..sources).map(|s| r.errors.get(s).map_or(String::new(), |e| fmt_f64(*e))));
        row.push(
            match r.status {
                RunStatus::Ok => "ok",
                RunStatus::Shortfall => "shortfall",
                RunStatus::Failed => "failed",
            }
            .into(),
        );
        row.push(r.degenerate.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: Write>(runs: &[RunResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "distance", "method", "runtime_ms"])?;
    for r in runs {
        w.write_record([
            r.seed.to_string(),
            fmt_f64(r.distance),
            r.method.to_string(),
            format!("{:.3}", r.runtime_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

impl BoxStats {
    /// Tukey box statistics (1.5 IQR whiskers). NaNs are ignored.
    pub fn from_values(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        let q1 = quantile(&v, 0.25);
        let q3 = quantile(&v, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo && *x <= hi).collect();
        Self {
            count: v.len(),
            median: quantile(&v, 0.5),
            q1,
            q3,
            whisker_low: inside.first().copied().unwrap_or(f64::NAN),
            whisker_high: inside.last().copied().unwrap_or(f64::NAN),
            outliers: v.len() - inside.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub method: Method,
    pub distance: f64,
    /// Errors pooled over all sources.
    pub pooled: BoxStats,
    /// One entry per source index.
    pub per_source: Vec<BoxStats>,
    pub failed_runs: usize,
    pub shortfall_runs: usize,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub kind: ArrayKind,
    /// `cm` or `deg`.
    pub unit: String,
    pub scenarios: usize,
    pub entries: Vec<AggregateEntry>,
}

impl AggregateReport {
    pub fn from_runs(kind: ArrayKind, runs: &[RunResult]) -> Self {
        let mut keys: Vec<(Method, f64)> = Vec::new();
        for r in runs {
            if !keys.iter().any(|k| k.0 == r.method && k.1 == r.distance) {
                keys.push((r.method, r.distance));
            }
        }
        keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let entries = keys
            .into_iter()
            .map(|(method, distance)| {
                let group: Vec<&RunResult> = runs
                    .iter()
                    .filter(|r| r.method == method && r.distance == distance)
                    .collect();
                let pooled: Vec<f64> = group
                    .iter()
                    .flat_map(|r| r.errors.iter().copied())
                    .collect();
                let sources = group.iter().map(|r| r.errors.len()).max().unwrap_or(0);
                let per_source = (0..sources)
                    .map(|s| {
                        let v: Vec<f64> = group
                            .iter()
                            .filter_map(|r| r.errors.get(s).copied())
                            .collect();
                        BoxStats::from_values(&v)
                    })
                    .collect();
                let timed: Vec<f64> = group
                    .iter()
                    .filter(|r| r.status != RunStatus::Failed)
                    .map(|r| r.runtime_ms)
                    .collect();
                AggregateEntry {
                    method,
                    distance,
                    pooled: BoxStats::from_values(&pooled),
                    per_source,
                    failed_runs: group
                        .iter()
                        .filter(|r| r.status == RunStatus::Failed)
                        .count(),
                    shortfall_runs: group
                        .iter()
                        .filter(|r| r.status == RunStatus::Shortfall)
                        .count(),
                    mean_runtime_ms: if timed.is_empty() {
                        f64::NAN
                    } else {
                        timed.iter().sum::<f64>() / timed.len() as f64
                    },
                }
            })
            .collect();
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind,
            unit: match kind {
                ArrayKind::Distributed => "cm".into(),
                ArrayKind::Compact => "deg".into(),
            },
            scenarios: seeds.len(),
            entries,
        }
    }

    pub fn entry(&self, method: Method, distance: f64) -> Option<&AggregateEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.distance == distance)
    }

    /// Accuracy checks for `eval --check`: the EDM median stays below the
    /// bound (at 2 m for positions, everywhere for DOAs) and never exceeds the
    /// SRP median.
    pub fn checks(&self) -> Vec<Check> {
        let (edm, srp, bound) = match self.kind {
            ArrayKind::Distributed => (Method::EdmPos, Method::SrpPos, 5.0),
            ArrayKind::Compact => (Method::EdmDoa, Method::SrpDoa, 4.0),
        };
        let mut checks = Vec::new();
        let mut distances: Vec<f64> = self.entries.iter().map(|e| e.distance).collect();
        distances.sort_by(f64::total_cmp);
        distances.dedup();
        for d in distances {
            let e = self.entry(edm, d).map(|e| e.pooled.median);
            let s = self.entry(srp, d).map(|e| e.pooled.median);
            let bounded = match self.kind {
                ArrayKind::Distributed => d == 2.0,
                ArrayKind::Compact => true,
            };
            if let (true, Some(e)) = (bounded, e) {
                checks.push(Check {
                    name: format!("{edm} median < {bound} {} at {d} m", self.unit),
                    passed: e < bound,
                    detail: format!("{e:.3}"),
                });
            }
            if let (Some(e), Some(s)) = (e, s) {
                checks.push(Check {
                    name: format!("{edm} median <= {srp} median at {d} m"),
                    passed: e <= s,
                    detail: format!("{e:.3} vs {s:.3}"),
                });
            }
        }
        checks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub kind: ArrayKind,
    pub distance: f64,
    pub scenarios: usize,
    pub seed_start: u64,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kind: ArrayKind::Distributed,
            distance: 2.0,
            scenarios: 3,
            seed_start: 1,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    /// Median over repetitions of the mean per-scenario runtime.
    pub median_ms: f64,
    pub repetitions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub parallel: bool,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Runtime of the SRP method divided by that of the EDM method.
    pub fn ratio(&self) -> Option<f64> {
        let [edm, srp] = Method::for_kind(self.config.kind);
        let get = |m| {
            self.rows
                .iter()
                .find(|r| r.method == m)
                .map(|r| r.median_ms)
        };
        Some(get(srp)? / get(edm)?)
    }
}

/// Times both methods for an array kind on a fixed scenario set. One warm-up
/// pass is discarded; the reported figure is the median of the repetitions.
pub fn bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions < 5 {
        return invalid("at least five repetitions are required");
    }
    if cfg.scenarios == 0 {
        return invalid("at least one scenario is required");
    }
    let scen_cfg = ScenarioConfig::for_kind(cfg.kind, cfg.distance);
    let prepared: Vec<(Scenario, Vec<Vec<f64>>)> = (0..cfg.scenarios as u64)
        .map(|i| {
            let sc = sample_scenario(&scen_cfg, cfg.seed_start + i)?;
            let (_, mix) = simulate(&sc)?;
            Ok((sc, mix))
        })
        .collect::<Result<_>>()?;
    let edm = match cfg.kind {
        ArrayKind::Distributed => EdmConfig::position(),
        ArrayKind::Compact => EdmConfig::doa(),
    };
    let mut rows = Vec::new();
    for method in Method::for_kind(cfg.kind) {
        let pass = || -> Result<f64> {
            let mut total = 0.0;
            for (sc, mix) in &prepared {
                total += run_method(method, sc, mix, &edm)?.1;
            }
            Ok(total / prepared.len() as f64)
        };
        pass()?;
        let repetitions = (0..cfg.repetitions)
            .map(|_| pass())
            .collect::<Result<Vec<_>>>()?;
        let mut sorted = repetitions.clone();
        sorted.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            method,
            median_ms: quantile(&sorted, 0.5),
            repetitions,
        });
    }
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        parallel: crate::is_parallel(),
        threads: thread_count(),
        rows,
    })
}

#[cfg(feature = "parallel")]
fn thread_count() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn thread_count() -> usize {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    #[test]
    fn greedy_examples() {
        let d = |a: &DVector<f64>, b: &DVector<f64>| Ok((a - b).norm());
        let one = greedy_assign(&[p(0.0, 0.0)], &[p(3.0, 4.0)], d).unwrap();
        assert_eq!(one, vec![(0, 0, 5.0)]);
        let truth = [p(0.0, 0.0), p(10.0, 0.0)];
        let pairs = greedy_assign(&truth, &[p(9.0, 0.0), p(1.0, 0.0)], d).unwrap();
        assert_eq!(pairs, vec![(0, 1, 1.0), (1, 0, 1.0)]);
        let perm = greedy_assign(&truth, &[p(10.0, 0.0), p(0.0, 0.0)], d).unwrap();
        assert_eq!(perm, vec![(0, 1, 0.0), (1, 0, 0.0)]);
        assert!(greedy_assign(&truth, &[p(0.0, 0.0)], d).is_err());
    }

    #[test]
    fn greedy_tie_prefers_lower_truth() {
        let d = |a: &DVector<f64>, b: &DVector<f64>| Ok((a - b).norm());
        let truth = [p(-1.0, 0.0), p(1.0, 0.0)];
        let pairs = greedy_assign(&truth, &[p(0.0, 0.0), p(5.0, 0.0)], d).unwrap();
        assert_eq!(pairs[0], (0, 0, 1.0));
    }

    #[test]
    fn error_metrics() {
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(error_pos(&x, &x).unwrap(), 0.0);
        assert_eq!(error_doa(&x, &x).unwrap(), 0.0);
        assert!((error_doa(&x, &(-&x)).unwrap() - 180.0).abs() < 1e-12);
        let y = DVector::from_vec(vec![1.0, 1.0, 0.0]) / 2f64.sqrt();
        assert!((error_doa(&x, &y).unwrap() - 45.0).abs() < 1e-12);
        assert!(error_doa(&x, &DVector::zeros(3)).is_err());
        let z = DVector::from_vec(vec![1.0, 0.5, 0.0]);
        assert!((error_pos(&x, &z).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn box_stats_tukey() {
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        let b = BoxStats::from_values(&v);
        assert_eq!(b.median, 3.0);
        assert_eq!((b.q1, b.q3), (2.0, 4.0));
        assert_eq!(b.outliers, 1);
        assert_eq!(b.whisker_high, 4.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::EdmPos,
            Method::SrpPos,
            Method::EdmDoa,
            Method::SrpDoa,
        ] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn experiment_config_toml() {
        let cfg = ExperimentConfig::for_kind(ArrayKind::Compact);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let bad = ExperimentConfig {
            methods: vec![Method::EdmPos],
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
