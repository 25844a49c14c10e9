use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edmloc::doa::angles;
use edmloc::eval::{
    bench, run_experiment, write_runs_csv, write_timings_csv, AggregateReport, BenchConfig,
    ExperimentConfig,
};
use edmloc::nalgebra::DVector;
use edmloc::pipeline::{edm_doas, edm_positions, srp_estimates, EdmConfig, SrpConfig};
use edmloc::position::{cost_curves, AlphaGrid};
use edmloc::sim::{sample_scenario, simulate, truth_tdoas, Scenario, ScenarioConfig};
use edmloc::tdoa::ArrayKind;
use edmloc::wav::{read_wav, write_wav};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "edmloc",
    version,
    about = "EDM-based acoustic source localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scenario and render its microphone signals.
    Simulate(SimulateArgs),
    /// Localize sources in a multichannel WAV file.
    Estimate(EstimateArgs),
    /// Run a batch experiment and aggregate errors.
    Eval(EvalArgs),
    /// Time EDM against SRP on a fixed scenario set.
    Bench(BenchArgs),
    /// Write cost curves or SRP coarse-grid values as CSV.
    DumpCurves(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Distributed,
    Compact,
}

impl From<Kind> for ArrayKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Distributed => ArrayKind::Distributed,
            Kind::Compact => ArrayKind::Compact,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Position,
    Doa,
    SrpPosition,
    SrpDoa,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML; overrides --kind and --distance.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "distributed")]
    kind: Kind,
    /// Distance of the first source from the array centroid (m).
    #[arg(long, default_value_t = 2.0)]
    distance: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Disable noise.
    #[arg(long)]
    clean: bool,
    #[arg(long, default_value = "scenario")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EstimatorArgs {
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    interp_factor: Option<usize>,
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    alpha_step: Option<f64>,
    #[arg(long, default_value_t = 2)]
    sources: usize,
    #[arg(long)]
    min_diff: Option<usize>,
    #[arg(long, default_value_t = edmloc::DEFAULT_SPEED_OF_SOUND)]
    speed_of_sound: f64,
}

impl EstimatorArgs {
    fn edm_config(&self, mode: Mode) -> Result<EdmConfig> {
        let mut cfg = if mode == Mode::Doa {
            EdmConfig::doa()
        } else {
            EdmConfig::position()
        };
        cfg.sources = self.sources;
        cfg.min_diff = self.min_diff;
        cfg.speed_of_sound = self.speed_of_sound;
        if let Some(c) = self.candidates {
            cfg.candidates = c;
        }
        if let Some(g) = self.gamma {
            cfg.gcc.gamma = g;
        }
        if let Some(r) = self.interp_factor {
            cfg.gcc.interp_factor = r;
        }
        cfg.alpha_grid = AlphaGrid::new(
            cfg.alpha_grid.min,
            self.alpha_max.unwrap_or(cfg.alpha_grid.max),
            self.alpha_step.unwrap_or(cfg.alpha_grid.step),
        )?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Multichannel WAV, one channel per microphone.
    #[arg(long)]
    wav: PathBuf,
    /// Scenario JSON written by `simulate` (microphone positions, room).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "position")]
    mode: Mode,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment TOML; command-line options are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "distributed")]
    kind: Kind,
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    scenarios: usize,
    #[arg(long, default_value_t = 1)]
    seed_start: u64,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Exit with a nonzero code when an accuracy check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "distributed")]
    kind: Kind,
    #[arg(long, default_value_t = 2.0)]
    distance: f64,
    #[arg(long, default_value_t = 3)]
    scenarios: usize,
    #[arg(long, default_value_t = 1)]
    seed_start: u64,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "position")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(a) => simulate_cmd(a)?,
        Command::Estimate(a) => estimate_cmd(a)?,
        Command::Eval(a) => return eval_cmd(a),
        Command::Bench(a) => bench_cmd(a)?,
        Command::DumpCurves(a) => dump_cmd(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => ScenarioConfig::from_toml(&fs::read_to_string(path)?)?,
        None => ScenarioConfig::for_kind(a.kind.into(), a.distance),
    };
    if a.clean {
        cfg.snr_db = None;
    }
    let scenario = sample_scenario(&cfg, a.seed)?;
    let (_, mix) = simulate(&scenario)?;
    fs::create_dir_all(&a.out_dir)?;
    write_wav(a.out_dir.join("mix.wav"), &mix, cfg.sample_rate)?;
    fs::write(
        a.out_dir.join("scenario.json"),
        serde_json::to_string_pretty(&scenario)?,
    )?;
    let truth = truth_tdoas(&scenario)?;
    fs::write(
        a.out_dir.join("truth.json"),
        serde_json::to_string_pretty(&json!({
            "sources": scenario.sources,
            "centroid": scenario.centroid().as_slice(),
            "truth": truth,
        }))?,
    )?;
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn load_inputs(wav: &Path, scenario: &Path) -> Result<(Vec<Vec<f64>>, Scenario)> {
    let (signals, fs_wav) = read_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
    let scenario: Scenario = serde_json::from_str(
        &fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?,
    )?;
    if signals.len() != scenario.microphones.len() {
        bail!(
            "WAV has {} channels, scenario has {} microphones",
            signals.len(),
            scenario.microphones.len()
        );
    }
    if (fs_wav - scenario.config.sample_rate).abs() > 0.5 {
        bail!(
            "sample rate mismatch: {fs_wav} vs {}",
            scenario.config.sample_rate
        );
    }
    Ok((signals, scenario))
}

fn srp_config(mode: Mode, scenario: &Scenario, est: &EstimatorArgs) -> SrpConfig {
    let mut cfg = if mode == Mode::SrpPosition {
        SrpConfig::position(scenario.config.room, &scenario.centroid())
    } else {
        SrpConfig::doa()
    };
    cfg.sources = est.sources;
    cfg.speed_of_sound = est.speed_of_sound;
    cfg
}

fn estimate_cmd(a: EstimateArgs) -> Result<()> {
    let (signals, scenario) = load_inputs(&a.wav, &a.scenario)?;
    let (array, centroid) = scenario.array()?;
    let absolute = |v: &DVector<f64>| -> Vec<f64> { (v + &centroid).iter().copied().collect() };
    let report = match a.mode {
        Mode::Position => {
            let out = edm_positions(&signals, &array, &a.estimator.edm_config(a.mode)?)?;
            json!({
                "mode": "edm-position",
                "reference_mic": out.reference,
                "shortfall": out.search.shortfall,
                "estimates": out.search.estimates.iter().map(|e| json!({
                    "position": absolute(&e.position),
                    "alpha": e.alpha,
                    "combination": e.combination.to_string(),
                    "cost": e.cost,
                    "degenerate": e.degenerate,
                })).collect::<Vec<_>>(),
            })
        }
        Mode::Doa => {
            let out = edm_doas(&signals, &array, &a.estimator.edm_config(a.mode)?)?;
            json!({
                "mode": "edm-doa",
                "reference_mic": out.reference,
                "shortfall": out.search.shortfall,
                "estimates": out.search.estimates.iter().map(|e| json!({
                    "direction": e.direction.as_slice(),
                    "azimuth_deg": e.azimuth.to_degrees(),
                    "elevation_deg": e.elevation.to_degrees(),
                    "combination": e.combination.to_string(),
                    "cost": e.cost,
                })).collect::<Vec<_>>(),
            })
        }
        Mode::SrpPosition | Mode::SrpDoa => {
            let cfg = srp_config(a.mode, &scenario, &a.estimator);
            let (points, search) = srp_estimates(&signals, &array, &cfg)?;
            let estimates: Vec<_> = points
                .iter()
                .zip(&search.estimates)
                .map(|(p, e)| {
                    if a.mode == Mode::SrpPosition {
                        json!({ "position": absolute(p), "value": e.value })
                    } else {
                        let (az, el) = angles(p);
                        json!({
                            "direction": p.as_slice(),
                            "azimuth_deg": az.to_degrees(),
                            "elevation_deg": el.to_degrees(),
                            "value": e.value,
                        })
                    }
                })
                .collect();
            json!({
                "mode": if a.mode == Mode::SrpPosition { "srp-position" } else { "srp-doa" },
                "shortfall": search.shortfall,
                "estimates": estimates,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(path) => ExperimentConfig::from_toml(&fs::read_to_string(path)?)?,
        None => {
            let mut cfg = ExperimentConfig::for_kind(a.kind.into());
            if let Some(d) = a.distances {
                cfg.distances = d;
            }
            cfg.scenarios = a.scenarios;
            cfg.seed_start = a.seed_start;
            cfg
        }
    };
    let runs = run_experiment(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    write_runs_csv(
        &runs,
        BufWriter::new(File::create(a.out_dir.join("runs.csv"))?),
    )?;
    write_timings_csv(
        &runs,
        BufWriter::new(File::create(a.out_dir.join("timings.csv"))?),
    )?;
    let report = AggregateReport::from_runs(cfg.kind, &runs);
    fs::write(
        a.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    for e in &report.entries {
        println!(
            "{:8} d={:.1} m  median {:8.3} {}  q1 {:8.3}  q3 {:8.3}  outliers {:3}  failed {:3}  mean {:9.1} ms",
            e.method.name(),
            e.distance,
            e.pooled.median,
            report.unit,
            e.pooled.q1,
            e.pooled.q3,
            e.pooled.outliers,
            e.failed_runs,
            e.mean_runtime_ms
        );
    }
    let checks = report.checks();
    let mut all_ok = true;
    for c in &checks {
        all_ok &= c.passed;
        println!(
            "[{}] {} ({})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if a.check && !all_ok {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        kind: a.kind.into(),
        distance: a.distance,
        scenarios: a.scenarios,
        seed_start: a.seed_start,
        repetitions: a.repetitions,
    };
    let report = bench(&cfg)?;
    for row in &report.rows {
        eprintln!("{:8} median {:10.2} ms", row.method.name(), row.median_ms);
    }
    if let Some(r) = report.ratio() {
        eprintln!("SRP/EDM runtime ratio {r:.2}");
    }
    let text = serde_json::to_string_pretty(&report)?;
    match a.out {
        Some(path) => fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn dump_cmd(a: DumpArgs) -> Result<()> {
    let (signals, scenario) = load_inputs(&a.wav, &a.scenario)?;
    let (array, _) = scenario.array()?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    match a.mode {
        Mode::Position => {
            let cfg = a.estimator.edm_config(a.mode)?;
            let out_est = edm_positions(&signals, &array, &cfg)?;
            let (ordered, _) = array.with_reference_first(out_est.reference);
            let points = cost_curves(
                &ordered,
                &out_est.candidates,
                &cfg.alpha_grid,
                cfg.speed_of_sound,
            )?;
            writeln!(out, "q,alpha,cost")?;
            for p in points {
                writeln!(out, "{},{:.4},{:.9e}", p.q + 1, p.alpha, p.cost)?;
            }
        }
        Mode::Doa => {
            let cfg = a.estimator.edm_config(a.mode)?;
            let res = edm_doas(&signals, &array, &cfg)?;
            let mut costs = res.search.costs.clone();
            costs.sort_by(|x, y| x.cost.total_cmp(&y.cost));
            writeln!(out, "rank,q,combination,cost")?;
            for (rank, c) in costs.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:.9e}",
                    rank + 1,
                    c.q + 1,
                    c.combination,
                    c.cost
                )?;
            }
        }
        Mode::SrpPosition | Mode::SrpDoa => {
            let cfg = srp_config(a.mode, &scenario, &a.estimator);
            let (_, search) = srp_estimates(&signals, &array, &cfg)?;
            let points = cfg.grid.coarse_points();
            if a.mode == Mode::SrpPosition {
                writeln!(out, "x,y,z,value")?;
                let c = scenario.centroid();
                for (p, v) in points.iter().zip(&search.coarse_values) {
                    let q = &p.vector + &c;
                    writeln!(out, "{:.3},{:.3},{:.3},{:.6}", q[0], q[1], q[2], v)?;
                }
            } else {
                writeln!(out, "azimuth_deg,elevation_deg,value")?;
                for (p, v) in points.iter().zip(&search.coarse_values) {
                    let (az, el) = p.angles.unwrap_or_else(|| angles(&p.vector));
                    writeln!(
                        out,
                        "{:.2},{:.2},{:.6}",
                        az.to_degrees(),
                        el.to_degrees(),
                        v
                    )?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}
