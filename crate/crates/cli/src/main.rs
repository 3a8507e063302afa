//! Command-line frontend of the channel-sounding toolkit.
//!
//! Five subcommands mirror the processing stages and chain through plain
//! files, so every stage can be rerun or swapped in isolation:
//!
//! * `synth`    — simulate a scenario into a capture directory,
//! * `ic`       — separate the interfering cells of a capture,
//! * `estimate` — high-resolution path estimation on a single-cell capture,
//! * `eval`     — score estimates against the capture's ground truth,
//! * `pipeline` — all of the above in one run directory, with resume.
//!
//! A pipeline run writes `run.json`: tool version, configuration digest,
//! seed, per-stage timings and artifact digests. Re-invoking the pipeline on
//! the same output directory skips every stage whose artifacts are already
//! present and intact, so an interrupted run continues from the last
//! completed stage instead of starting over.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/format error
//! (including I/O), 4 numerical failure. All floating-point work is
//! deterministic for a fixed configuration and seed: parallelism only ever
//! distributes independent sub-problems, so results do not depend on the
//! thread count (`--threads`, or the `SOUNDER_THREADS` variable).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sounder_core::eval::{
    crlb_compare, evaluate, trajectory_sweep, write_sweep_csv, EvalReport, MatchGates,
    ParamStats, PathObs,
};
use sounder_core::rimax::{
    estimate_snapshot_set, write_records_csv, write_records_json, PathRecord, RimaxConfig,
};
use sounder_core::synth::{synthesize, ScenarioConfig, SnapshotSet, Truth};
use sounder_core::{separate, Error, IcConfig, Result};

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "sounder",
    version,
    about = "Synthetic multi-cell channel sounding: simulation, interference \
             cancellation, high-resolution path estimation and scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for the parallel stages; falls back to the
    /// SOUNDER_THREADS environment variable, then to one thread per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Pin the deterministic execution plan (it is also the default; the
    /// flag exists to record the intent in the run manifest).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the master seed of the scenario configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario into a capture directory.
    Synth {
        /// Scenario description (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Capture directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate the interfering cells of a capture into one single-cell
    /// capture per cell.
    Ic {
        /// Input capture directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Cancellation settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (one `cell_<id>` capture per cell, plus
        /// `telemetry.csv`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate multipath parameters on a single-cell capture.
    Estimate {
        /// Input capture directory (raw single-cell synthesis or one
        /// separated cell).
        #[arg(long = "in")]
        input: PathBuf,
        /// Estimator settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (`records.csv`, `records.json`, `dmc.json`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimator records against the ground truth of their capture.
    Eval {
        /// Path records produced by `estimate` (`records.json`).
        #[arg(long)]
        records: PathBuf,
        /// Capture directory holding the matching ground truth.
        #[arg(long)]
        capture: PathBuf,
        /// Scoring settings (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (`report.json`, `sweep.csv`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run synth, ic, estimate and eval into one output directory, resuming
    /// completed stages of an earlier interrupted run.
    Pipeline {
        /// Pipeline configuration (JSON: scenario plus optional per-stage
        /// settings).
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Stop after this stage (the run can be resumed later).
        #[arg(long, value_enum)]
        until: Option<StageName>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum StageName {
    Synth,
    Ic,
    Estimate,
    Eval,
}

/// Die quietly on a closed pipe (`sounder ... | head`) like any Unix tool,
/// instead of panicking on the broken-pipe write error.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    });
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Dims(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = resolve_threads(cli.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&config, cli.seed, &out),
        Command::Ic { input, config, out } => cmd_ic(&input, config.as_deref(), &out),
        Command::Estimate { input, config, out } => {
            cmd_estimate(&input, config.as_deref(), &out).map(|_| ())
        }
        Command::Eval { records, capture, config, out } => {
            cmd_eval(&records, &capture, config.as_deref(), &out).map(|_| ())
        }
        Command::Pipeline { config, out, until } => cmd_pipeline(
            &config,
            &out,
            cli.seed,
            cli.deterministic,
            threads,
            until,
        ),
    }
}

/// `--threads` wins, then `SOUNDER_THREADS`, then the library default.
fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SOUNDER_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::config(format!("SOUNDER_THREADS must be an integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

// ---------------------------------------------------------------------------
// Configuration files
// ---------------------------------------------------------------------------

/// Read and parse a configuration file; any failure here is the caller's
/// configuration problem, never a data-format one.
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::config(format!("cannot parse {}: {e}", path.display())))
}

fn load_config_or_default<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T> {
    match path {
        Some(p) => load_config(p),
        None => Ok(T::default()),
    }
}

/// Scoring settings of the `eval` stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSettings {
    gates: MatchGates,
    /// RMSE-to-bound ratio above which a parameter is flagged.
    efficiency_threshold: f64,
    /// Delay resolution in seconds; derived from the capture's spanned
    /// bandwidth when omitted.
    delay_bin_s: Option<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            gates: MatchGates::default(),
            efficiency_threshold: 3.0,
            delay_bin_s: None,
        }
    }
}

/// One configuration file for the whole pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineConfig {
    scenario: ScenarioConfig,
    #[serde(default)]
    ic: IcConfig,
    #[serde(default)]
    estimate: RimaxConfig,
    #[serde(default)]
    eval: EvalSettings,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Delay bin of a capture: reciprocal of the bandwidth its widest pilot comb
/// spans (pilot spacing is three subcarriers once both slots are merged).
fn capture_delay_bin(set: &SnapshotSet) -> f64 {
    let comb_hz = 3.0 * set.scenario.subcarrier_spacing_hz;
    1.0 / (set.layout.re_counts[0] as f64 * comb_hz)
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

fn cmd_synth(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut scenario: ScenarioConfig = load_config(config)?;
    if let Some(s) = seed {
        scenario.master_seed = s;
    }
    let set = synthesize(&scenario)?;
    set.write_dir(out)?;
    println!(
        "synth: {} snapshots, {} antennas, {} cells -> {}",
        set.n_snapshots(),
        set.m_antennas(),
        set.scenario.bs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ic(input: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let set = SnapshotSet::read_dir(input)?;
    let cfg: IcConfig = load_config_or_default(config)?;
    let outcome = separate(&set, &cfg)?;
    std::fs::create_dir_all(out)?;
    for sep in &outcome.separated {
        sep.write_dir(&out.join(format!("cell_{}", sep.scenario.bs[0].cell_id)))?;
    }
    outcome.telemetry.write_csv(&out.join("telemetry.csv"))?;
    for t in 0..set.n_snapshots() {
        if let Some(last) = outcome
            .telemetry
            .rows
            .iter()
            .filter(|r| r.snapshot == t)
            .last()
        {
            println!(
                "ic: snapshot {t} residual {:.3e} after {} sweeps",
                last.residual_nmse, last.sweep
            );
        }
    }
    println!("ic: {} cells -> {}", outcome.separated.len(), out.display());
    Ok(())
}

fn cmd_estimate(input: &Path, config: Option<&Path>, out: &Path) -> Result<Vec<PathRecord>> {
    let cfg: RimaxConfig = load_config_or_default(config)?;
    estimate_capture(input, &cfg, out)
}

fn estimate_capture(input: &Path, cfg: &RimaxConfig, out: &Path) -> Result<Vec<PathRecord>> {
    let set = SnapshotSet::read_dir(input)?;
    // The receiver speed enters the motion model; without the truth sidecar
    // there is no trustworthy velocity, so assume a static receiver.
    let speed_override = if set.truth.is_none() {
        eprintln!(
            "warning: {} has no velocity metadata (truth.json); assuming v = 0",
            input.display()
        );
        Some(0.0)
    } else {
        None
    };
    let run = estimate_snapshot_set(&set, cfg, speed_override)?;
    std::fs::create_dir_all(out)?;
    write_records_csv(&out.join("records.csv"), &run.records)?;
    write_records_json(&out.join("records.json"), &run.records)?;
    let dj = serde_json::to_string_pretty(&run.dmc)?;
    std::fs::write(out.join("dmc.json"), dj)?;
    println!(
        "estimate: {} paths over {} snapshots -> {}",
        run.records.len(),
        set.n_snapshots(),
        out.display()
    );
    Ok(run.records)
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Scores of one cell: one report per snapshot/port instance plus their
/// pooled summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CellReport {
    cell_id: u16,
    snapshots: Vec<EvalReport>,
    overall: EvalReport,
}

/// Top-level scoring artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct EvalOutput {
    delay_bin_s: f64,
    gates: MatchGates,
    cells: Vec<CellReport>,
}

/// Pool per-instance reports into one summary. RMSE (and the bound) pool
/// exactly: the pooled mean square is the match-count-weighted mean of the
/// per-instance mean squares.
fn pool_reports(parts: &[EvalReport], threshold: f64) -> EvalReport {
    let mut out = EvalReport::default();
    let mut n_total = 0usize;
    let mut sq = [0.0f64; 3];
    let mut mean = [0.0f64; 3];
    let mut bsq = [0.0f64; 3];
    let mut bound_ok = true;
    for p in parts {
        out.matched += p.matched;
        out.missed += p.missed;
        out.false_alarms += p.false_alarms;
        out.total_cost += p.total_cost;
        let n = p.matched as f64;
        if p.matched == 0 {
            continue;
        }
        n_total += p.matched;
        sq[0] += n * p.rmse.delay_s * p.rmse.delay_s;
        sq[1] += n * p.rmse.azimuth_rad * p.rmse.azimuth_rad;
        sq[2] += n * p.rmse.elevation_rad * p.rmse.elevation_rad;
        mean[0] += n * p.bias.delay_s;
        mean[1] += n * p.bias.azimuth_rad;
        mean[2] += n * p.bias.elevation_rad;
        match &p.bound {
            Some(b) => {
                bsq[0] += n * b.delay_s * b.delay_s;
                bsq[1] += n * b.azimuth_rad * b.azimuth_rad;
                bsq[2] += n * b.elevation_rad * b.elevation_rad;
            }
            None => bound_ok = false,
        }
    }
    if n_total > 0 {
        let n = n_total as f64;
        out.rmse = ParamStats {
            delay_s: (sq[0] / n).sqrt(),
            azimuth_rad: (sq[1] / n).sqrt(),
            elevation_rad: (sq[2] / n).sqrt(),
        };
        out.bias = ParamStats {
            delay_s: mean[0] / n,
            azimuth_rad: mean[1] / n,
            elevation_rad: mean[2] / n,
        };
        if bound_ok {
            out.bound = Some(ParamStats {
                delay_s: (bsq[0] / n).sqrt(),
                azimuth_rad: (bsq[1] / n).sqrt(),
                elevation_rad: (bsq[2] / n).sqrt(),
            });
        }
    }
    out.efficiency = crlb_compare(&out.rmse, out.bound.as_ref(), threshold);
    out
}

/// Score records against ground truth, cell by cell. Matching runs per
/// snapshot and pilot port (paths from different snapshots must never pair),
/// and the per-cell summary pools those instances.
fn eval_records(
    records: &[PathRecord],
    truth: &Truth,
    settings: &EvalSettings,
    delay_bin_s: f64,
) -> Result<Vec<CellReport>> {
    // cell -> (snapshot, port) -> record indices
    let mut cells: BTreeMap<u16, BTreeMap<(usize, u8), Vec<usize>>> = BTreeMap::new();
    let mut ports: std::collections::BTreeSet<u8> = [0u8].into();
    for (i, r) in records.iter().enumerate() {
        if r.snapshot >= truth.snapshots.len() {
            return Err(Error::format(format!(
                "record references snapshot {} but the capture has {}",
                r.snapshot,
                truth.snapshots.len()
            )));
        }
        cells.entry(r.cell_id).or_default().entry((r.snapshot, r.port)).or_default().push(i);
        ports.insert(r.port);
    }
    // Cells present in truth but never detected still need scoring (all
    // their paths are misses).
    if let Some(first) = truth.snapshots.first() {
        for b in &first.bs {
            cells.entry(b.cell_id).or_default();
        }
    }

    let mut reports = Vec::new();
    for (cell_id, instances) in &cells {
        let mut parts = Vec::new();
        for t in 0..truth.snapshots.len() {
            let cell_truth = truth.snapshots[t]
                .bs
                .iter()
                .find(|b| b.cell_id == *cell_id)
                .ok_or_else(|| {
                    Error::format(format!("records mention cell {cell_id}, the truth does not"))
                })?;
            let truth_obs: Vec<PathObs> = cell_truth
                .paths
                .iter()
                .map(|p| PathObs::new(p.delay_s, p.azimuth_rad, p.elevation_rad))
                .collect();
            for &port in &ports {
                let idx = instances.get(&(t, port)).map(Vec::as_slice).unwrap_or(&[]);
                let est: Vec<PathObs> =
                    idx.iter().map(|&i| PathObs::from_record(&records[i])).collect();
                let stds: Vec<ParamStats> =
                    idx.iter().map(|&i| ParamStats::from_record_stds(&records[i])).collect();
                let mut rep = evaluate(
                    &est,
                    &truth_obs,
                    Some(&stds),
                    &settings.gates,
                    delay_bin_s,
                    settings.efficiency_threshold,
                )?;
                rep.meta.insert("snapshot".into(), t.to_string());
                rep.meta.insert("port".into(), port.to_string());
                parts.push(rep);
            }
        }
        let overall = pool_reports(&parts, settings.efficiency_threshold);
        reports.push(CellReport { cell_id: *cell_id, snapshots: parts, overall });
    }
    Ok(reports)
}

fn cmd_eval(
    records_path: &Path,
    capture: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<EvalOutput> {
    let records: Vec<PathRecord> =
        serde_json::from_str(&std::fs::read_to_string(records_path)?)?;
    let set = SnapshotSet::read_dir(capture)?;
    let truth = set.truth.as_ref().ok_or_else(|| {
        Error::format(format!(
            "{} carries no ground truth; nothing to score against",
            capture.display()
        ))
    })?;
    let settings: EvalSettings = load_config_or_default(config)?;
    let delay_bin_s = settings.delay_bin_s.unwrap_or_else(|| capture_delay_bin(&set));

    let cells = eval_records(&records, truth, &settings, delay_bin_s)?;
    let output = EvalOutput { delay_bin_s, gates: settings.gates, cells };

    std::fs::create_dir_all(out)?;
    let rj = serde_json::to_string_pretty(&output)?;
    std::fs::write(out.join("report.json"), rj)?;
    write_sweep_csv(&trajectory_sweep(&records, Some(truth)), &out.join("sweep.csv"))?;

    for c in &output.cells {
        println!(
            "eval: cell {} matched {} missed {} false alarms {} \
             (delay rmse {:.3e} s, azimuth rmse {:.3e} rad)",
            c.cell_id,
            c.overall.matched,
            c.overall.missed,
            c.overall.false_alarms,
            c.overall.rmse.delay_s,
            c.overall.rmse.azimuth_rad,
        );
    }
    Ok(output)
}

// ---------------------------------------------------------------------------
// Pipeline with resume
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct StageRecord {
    completed: bool,
    /// The stage did not apply to this scenario (e.g. nothing to separate).
    #[serde(default)]
    skipped: bool,
    /// Reused intact artifacts of an earlier run instead of recomputing.
    #[serde(default)]
    resumed: bool,
    seconds: f64,
    artifacts: Vec<Artifact>,
}

/// Provenance and progress of one pipeline run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    config_sha256: String,
    seed: u64,
    deterministic: bool,
    /// Resolved worker threads; 0 means the library default.
    threads: usize,
    stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn write(&self, out: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(out.join("run.json"), s)?;
        Ok(())
    }
}

/// A prior stage record is reusable when the run identity matches and every
/// artifact is still on disk with the digest the manifest recorded.
fn stage_cached(prior: Option<&RunManifest>, name: &str, out: &Path) -> Option<StageRecord> {
    let rec = prior?.stages.get(name)?;
    if !rec.completed {
        return None;
    }
    for a in &rec.artifacts {
        let bytes = std::fs::read(out.join(&a.path)).ok()?;
        if sha256_hex(&bytes) != a.sha256 {
            return None;
        }
    }
    let mut rec = rec.clone();
    rec.resumed = true;
    Some(rec)
}

/// Digest files under `out`, recursing into directories, as run artifacts
/// with out-relative paths.
fn collect_artifacts(out: &Path, paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.sort();
            files.extend(collect_artifacts(out, &entries)?);
        } else {
            let bytes = std::fs::read(p)?;
            let rel = p.strip_prefix(out).unwrap_or(p).to_string_lossy().into_owned();
            files.push(Artifact { path: rel, sha256: sha256_hex(&bytes) });
        }
    }
    Ok(files)
}

fn cmd_pipeline(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    deterministic: bool,
    threads: Option<usize>,
    until: Option<StageName>,
) -> Result<()> {
    let config_bytes = std::fs::read(config)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", config.display())))?;
    let mut pc: PipelineConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::config(format!("cannot parse {}: {e}", config.display())))?;
    if let Some(s) = seed {
        pc.scenario.master_seed = s;
    }
    let config_sha256 = sha256_hex(&config_bytes);
    std::fs::create_dir_all(out)?;

    // A prior manifest only counts if it describes the same run.
    let prior: Option<RunManifest> = std::fs::read_to_string(out.join("run.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<RunManifest>(&s).ok())
        .filter(|m| {
            m.config_sha256 == config_sha256
                && m.seed == pc.scenario.master_seed
                && m.deterministic == deterministic
        });

    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256,
        seed: pc.scenario.master_seed,
        deterministic,
        threads: threads.unwrap_or(0),
        stages: BTreeMap::new(),
    };

    let capture_dir = out.join("capture");
    let separated_dir = out.join("separated");
    let estimates_dir = out.join("estimates");
    let eval_dir = out.join("eval");
    let multi_cell = pc.scenario.bs.len() > 1;

    // Once one stage has to run, everything after it is stale.
    let mut chain_intact = true;
    let run_stage = |manifest: &mut RunManifest,
                         chain_intact: &mut bool,
                         name: &str,
                         work: &mut dyn FnMut() -> Result<(Vec<PathBuf>, bool)>|
     -> Result<()> {
        if *chain_intact {
            if let Some(rec) = stage_cached(prior.as_ref(), name, out) {
                println!("{name}: cached ({} artifacts)", rec.artifacts.len());
                manifest.stages.insert(name.to_string(), rec);
                manifest.write(out)?;
                return Ok(());
            }
        }
        *chain_intact = false;
        let start = Instant::now();
        let (paths, skipped) = work()?;
        let artifacts = collect_artifacts(out, &paths)?;
        manifest.stages.insert(
            name.to_string(),
            StageRecord {
                completed: true,
                skipped,
                resumed: false,
                seconds: start.elapsed().as_secs_f64(),
                artifacts,
            },
        );
        manifest.write(out)?;
        Ok(())
    };

    // -- synth --------------------------------------------------------------
    run_stage(&mut manifest, &mut chain_intact, "synth", &mut || {
        let set = synthesize(&pc.scenario)?;
        set.write_dir(&capture_dir)?;
        println!(
            "synth: {} snapshots, {} antennas, {} cells -> {}",
            set.n_snapshots(),
            set.m_antennas(),
            set.scenario.bs.len(),
            capture_dir.display()
        );
        Ok((vec![capture_dir.clone()], false))
    })?;
    if until == Some(StageName::Synth) {
        return Ok(());
    }

    // -- ic -----------------------------------------------------------------
    run_stage(&mut manifest, &mut chain_intact, "ic", &mut || {
        if !multi_cell {
            println!("ic: single cell, nothing to separate");
            return Ok((vec![], true));
        }
        let set = SnapshotSet::read_dir(&capture_dir)?;
        let outcome = separate(&set, &pc.ic)?;
        std::fs::create_dir_all(&separated_dir)?;
        for sep in &outcome.separated {
            sep.write_dir(&separated_dir.join(format!("cell_{}", sep.scenario.bs[0].cell_id)))?;
        }
        outcome.telemetry.write_csv(&separated_dir.join("telemetry.csv"))?;
        println!(
            "ic: {} cells separated -> {}",
            outcome.separated.len(),
            separated_dir.display()
        );
        Ok((vec![separated_dir.clone()], false))
    })?;
    if until == Some(StageName::Ic) {
        return Ok(());
    }

    // Single-cell captures the estimator consumes, in cell order.
    let cell_captures = |multi: bool| -> Result<Vec<(u16, PathBuf)>> {
        if multi {
            pc.scenario
                .bs
                .iter()
                .map(|b| Ok((b.cell_id, separated_dir.join(format!("cell_{}", b.cell_id)))))
                .collect()
        } else {
            Ok(vec![(pc.scenario.bs[0].cell_id, capture_dir.clone())])
        }
    };

    // -- estimate -------------------------------------------------------------
    run_stage(&mut manifest, &mut chain_intact, "estimate", &mut || {
        let mut artifacts = Vec::new();
        for (cell_id, cap) in cell_captures(multi_cell)? {
            let dir = estimates_dir.join(format!("cell_{cell_id}"));
            estimate_capture(&cap, &pc.estimate, &dir)?;
            artifacts.push(dir);
        }
        Ok((artifacts, false))
    })?;
    if until == Some(StageName::Estimate) {
        return Ok(());
    }

    // -- eval -----------------------------------------------------------------
    let cfg_digest = manifest.config_sha256.clone();
    let run_seed = manifest.seed;
    run_stage(&mut manifest, &mut chain_intact, "eval", &mut || {
        std::fs::create_dir_all(&eval_dir)?;
        // Final-sweep separation residual per snapshot, reported alongside
        // the per-cell scores.
        let ic_nmse: Vec<f64> = if multi_cell {
            let text = std::fs::read_to_string(separated_dir.join("telemetry.csv"))?;
            let mut last: BTreeMap<usize, f64> = BTreeMap::new();
            for line in text.lines().skip(1) {
                let mut it = line.split(',');
                let snap: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("malformed telemetry row"))?;
                let _sweep = it.next();
                let nmse: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("malformed telemetry row"))?;
                last.insert(snap, nmse);
            }
            last.into_values().collect()
        } else {
            Vec::new()
        };

        let mut cells = Vec::new();
        let mut delay_bin = pc.eval.delay_bin_s;
        for (cell_id, cap) in cell_captures(multi_cell)? {
            let records_path = estimates_dir.join(format!("cell_{cell_id}")).join("records.json");
            let records: Vec<PathRecord> =
                serde_json::from_str(&std::fs::read_to_string(&records_path)?)?;
            let set = SnapshotSet::read_dir(&cap)?;
            let truth = set
                .truth
                .as_ref()
                .ok_or_else(|| Error::format("pipeline capture lost its ground truth"))?;
            let bin = pc.eval.delay_bin_s.unwrap_or_else(|| capture_delay_bin(&set));
            delay_bin = Some(bin);
            let mut reports = eval_records(&records, truth, &pc.eval, bin)?;
            for rep in &mut reports {
                rep.overall.ic_nmse = ic_nmse.clone();
                rep.overall.meta.insert("config_sha256".into(), cfg_digest.clone());
                rep.overall.meta.insert("seed".into(), run_seed.to_string());
                rep.overall.meta.insert("snapshots".into(), truth.snapshots.len().to_string());
                rep.overall.meta.insert("delay_bin_s".into(), bin.to_string());
            }
            cells.extend(reports);
            write_sweep_csv(
                &trajectory_sweep(&records, Some(truth)),
                &eval_dir.join(format!("sweep_cell_{cell_id}.csv")),
            )?;
        }
        let output = EvalOutput {
            delay_bin_s: delay_bin.unwrap_or(0.0),
            gates: pc.eval.gates,
            cells,
        };
        let rj = serde_json::to_string_pretty(&output)?;
        std::fs::write(eval_dir.join("report.json"), rj)?;
        for c in &output.cells {
            println!(
                "eval: cell {} matched {} missed {} false alarms {}",
                c.cell_id, c.overall.matched, c.overall.missed, c.overall.false_alarms
            );
        }
        Ok((vec![eval_dir.clone()], false))
    })?;

    println!("pipeline: complete -> {}", out.display());
    Ok(())
}
