//! `cassm`: collect decay data, fit models, benchmark them open loop, track
//! references in closed loop and inspect fitted models.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cassm_core::experiment::{self, AnyModel, DataSet, ExperimentConfig, FitOutcome, OpenLoopSummary, Seeds, CODE_VERSION};
use cassm_core::features::{FeatureKind, FeatureMap, KernelCheck};
use cassm_core::pipeline::{Split, Trajectory, TrajectoryMeta};
use cassm_core::plant::Plant;
use cassm_core::Error;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "cassm", version, about = "Actuator-aware manifold models for a simulated soft arm")]
struct Cli {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (falls back to the configuration, then `out`).
    #[arg(long, global = true, env = "CASSM_OUT")]
    out: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Record decay trajectories and calibration staircases.
    Collect,
    /// Fit every configured model on collected data.
    Fit {
        /// Data directory written by `collect` (default `<out>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Open-loop segment benchmark on a fresh random-staircase run.
    Predict {
        /// Model files; defaults to `<out>/models/<kind>.json` for every configured kind.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Closed-loop MPC tracking of the configured references.
    Track {
        /// Model file (default `<out>/models/cassm.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Reference tags to run; all configured references when omitted.
        #[arg(long = "reference")]
        references: Vec<String>,
        /// Noise realizations per reference.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Spectral report, invariance residual, kernel check and dimensions of a model.
    Diagnose {
        model: PathBuf,
    },
}

/// A failed command with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    fn compute(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    /// Configuration, I/O and parse errors exit with 2, numerical ones with 1.
    fn from_core(context: &str, e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Json(_) | Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, message: format!("{context}: {e}") }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    json: bool,
}

impl Context {
    fn plant(&self) -> CliResult<Plant> {
        Plant::new(self.cfg.plant.clone()).map_err(|e| Failure::from_core("plant", e))
    }

    fn header(&self) -> Value {
        json!({ "config_hash": self.cfg.hash(), "code_version": CODE_VERSION, "seed": self.cfg.seed })
    }

    fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("json value"));
        } else {
            print!("{}", text());
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::io(format!("invalid config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::io(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<u8> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.clone().or_else(|| cfg.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Context { cfg, out, json: cli.json };
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&ctx.cfg).expect("config serializes"));
            Ok(0)
        }
        Command::Collect => cmd_collect(&ctx),
        Command::Fit { data } => cmd_fit(&ctx, data),
        Command::Predict { models } => cmd_predict(&ctx, models),
        Command::Track { model, references, runs } => cmd_track(&ctx, model, &references, runs),
        Command::Diagnose { model } => cmd_diagnose(&ctx, &model),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::io(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> cassm_core::Result<()>) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write(&mut w).and_then(|_| w.flush().map_err(Error::from)).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct FileEntry {
    file: String,
    tag: String,
    seed: u64,
    release_index: Option<usize>,
    /// `train`, `validation` or `test` for decays; absent for calibration runs.
    split: Option<String>,
    smoothed: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    code_version: String,
    seed: u64,
    seeds: Seeds,
    dt: f64,
    discarded: usize,
    decays: Vec<FileEntry>,
    calibration: Vec<FileEntry>,
}

fn split_label(split: &Split, i: usize) -> &'static str {
    if split.train.contains(&i) {
        "train"
    } else if split.validation.contains(&i) {
        "validation"
    } else {
        "test"
    }
}

fn cmd_collect(ctx: &Context) -> CliResult<u8> {
    let plant = ctx.plant()?;
    let data = experiment::collect(&ctx.cfg, &plant).map_err(|e| Failure::from_core("collection failed", e))?;
    let smoothed = ctx.cfg.smooth(&data.decays).map_err(|e| Failure::from_core("smoothing failed", e))?;
    let dir = ctx.out.join("data");
    create_dir(&dir.join("smoothed"))?;
    create_dir(&dir.join("calibration"))?;
    let mut decays = Vec::new();
    for (i, (raw, smooth)) in data.decays.iter().zip(&smoothed).enumerate() {
        let file = format!("{}.csv", raw.meta.tag);
        let smooth_file = format!("smoothed/{}.csv", raw.meta.tag);
        write_file(&dir.join(&file), |w| raw.write_csv(w))?;
        write_file(&dir.join(&smooth_file), |w| smooth.write_csv(w))?;
        decays.push(FileEntry {
            file,
            tag: raw.meta.tag.clone(),
            seed: raw.meta.seed,
            release_index: raw.meta.release_index,
            split: Some(split_label(&data.split, i).to_string()),
            smoothed: Some(smooth_file),
        });
    }
    let mut calibration = Vec::new();
    for t in &data.calibration {
        let file = format!("calibration/{}.csv", t.meta.tag);
        write_file(&dir.join(&file), |w| t.write_csv(w))?;
        calibration.push(FileEntry { file, tag: t.meta.tag.clone(), seed: t.meta.seed, release_index: None, split: None, smoothed: None });
    }
    let manifest = Manifest {
        config_hash: ctx.cfg.hash(),
        code_version: CODE_VERSION.to_string(),
        seed: ctx.cfg.seed,
        seeds: ctx.cfg.seeds(),
        dt: ctx.cfg.protocol.decay.dt,
        discarded: data.discarded,
        decays,
        calibration,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    ctx.emit(&value, || {
        format!(
            "collected {} decay trajectories ({} discarded) and {} calibration runs into {}\n",
            manifest.decays.len(),
            manifest.discarded,
            manifest.calibration.len(),
            dir.display()
        )
    });
    Ok(0)
}

fn read_trajectory(path: &Path, meta: TrajectoryMeta) -> CliResult<Trajectory> {
    let file = fs::File::open(path).map_err(|e| Failure::io(format!("cannot read {}: {e}", path.display())))?;
    Trajectory::read_csv(BufReader::new(file), meta).map_err(|e| Failure::io(format!("invalid trajectory {}: {e}", path.display())))
}

fn load_data(dir: &Path, cfg: &ExperimentConfig) -> CliResult<DataSet> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| Failure::io(format!("invalid manifest {}: {e}", path.display())))?;
    if manifest.config_hash != cfg.hash() {
        log::warn!("data in {} was collected with a different configuration", dir.display());
    }
    let mut split = Split { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    let mut decays = Vec::new();
    for (i, e) in manifest.decays.iter().enumerate() {
        let meta = TrajectoryMeta { seed: e.seed, tag: e.tag.clone(), release_index: e.release_index };
        decays.push(read_trajectory(&dir.join(&e.file), meta)?);
        match e.split.as_deref() {
            Some("train") => split.train.push(i),
            Some("validation") => split.validation.push(i),
            _ => split.test.push(i),
        }
    }
    let calibration = manifest
        .calibration
        .iter()
        .map(|e| read_trajectory(&dir.join(&e.file), TrajectoryMeta { seed: e.seed, tag: e.tag.clone(), release_index: None }))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(DataSet { decays, discarded: manifest.discarded, calibration, split })
}

/// Fit report written next to the model files.
#[derive(Debug, Serialize, Deserialize)]
struct FitReport {
    config_hash: String,
    code_version: String,
    seed: u64,
    models: Vec<FitOutcome>,
}

fn cmd_fit(ctx: &Context, data_dir: Option<PathBuf>) -> CliResult<u8> {
    let plant = ctx.plant()?;
    let data_dir = data_dir.unwrap_or_else(|| ctx.out.join("data"));
    let data = load_data(&data_dir, &ctx.cfg)?;
    let dir = ctx.out.join("models");
    create_dir(&dir)?;
    let mut outcomes = Vec::new();
    for spec in &ctx.cfg.models {
        let kind = spec.kind();
        match experiment::fit_model(&ctx.cfg, &plant, &data, spec) {
            Ok((model, report)) => {
                let text = model.to_json().map_err(|e| Failure::from_core(kind, e))?;
                write_file(&dir.join(format!("{kind}.json")), |w| Ok(w.write_all(text.as_bytes())?))?;
                outcomes.push(FitOutcome { kind: kind.to_string(), ok: true, error: None, report });
            }
            Err(e) => {
                log::error!("{kind} fit failed: {e}");
                outcomes.push(FitOutcome { kind: kind.to_string(), ok: false, error: Some(e.to_string()), report: Value::Null });
            }
        }
    }
    let report = FitReport { config_hash: ctx.cfg.hash(), code_version: CODE_VERSION.to_string(), seed: ctx.cfg.seed, models: outcomes };
    write_json(&dir.join("fit_report.json"), &report)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    ctx.emit(&value, || {
        let mut s = String::new();
        for o in &report.models {
            match &o.error {
                None => s.push_str(&format!("{:8} ok\n", o.kind)),
                Some(e) => s.push_str(&format!("{:8} FAILED: {e}\n", o.kind)),
            }
        }
        s
    });
    let failed = report.models.iter().filter(|o| !o.ok).count();
    Ok(if failed > 0 { 1 } else { 0 })
}

fn load_model(path: &Path) -> CliResult<AnyModel> {
    let text = read_text(path)?;
    AnyModel::from_json(&text).map_err(|e| Failure::io(format!("schema error in {}: {e}", path.display())))
}

fn fmt_mm(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "-".into()
    }
}

fn cmd_predict(ctx: &Context, models: Vec<PathBuf>) -> CliResult<u8> {
    let paths = if models.is_empty() { ctx.cfg.models.iter().map(|s| ctx.out.join("models").join(format!("{}.json", s.kind()))).collect() } else { models };
    let loaded = paths.iter().map(|p| load_model(p)).collect::<CliResult<Vec<_>>>()?;
    let plant = ctx.plant()?;
    let (test, lead) = experiment::test_sequence(&ctx.cfg, &plant).map_err(|e| Failure::compute(format!("test sequence failed: {e}")))?;
    let dir = ctx.out.join("predict");
    create_dir(&dir)?;
    let mut summaries: Vec<OpenLoopSummary> = Vec::new();
    let mut rows = vec!["model,segment,start_t,rmse_mm,diverged".to_string()];
    for m in &loaded {
        let (summary, segments) = experiment::open_loop_benchmark(&ctx.cfg, &plant, &test, lead, m.as_model()).map_err(|e| Failure::compute(format!("{} benchmark failed: {e}", m.as_model().kind())))?;
        for s in &segments {
            rows.push(format!("{},{},{},{},{}", summary.model, s.segment, s.start_t, s.rmse_mm.map_or(String::new(), |v| v.to_string()), s.diverged));
        }
        summaries.push(summary);
    }
    write_file(&dir.join("segments.csv"), |w| {
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })?;
    let mut summary = ctx.header();
    summary["models"] = serde_json::to_value(&summaries).expect("summary serializes");
    write_json(&dir.join("summary.json"), &summary)?;
    ctx.emit(&summary, || {
        let mut s = format!("{:8} {:>14} {:>16} {:>10}\n", "model", "mean_rmse_mm", "median_rmse_mm", "diverged");
        for m in &summaries {
            s.push_str(&format!("{:8} {:>14} {:>16} {:>10}\n", m.model, fmt_mm(m.mean_rmse_mm), fmt_mm(m.median_rmse_mm), m.diverged_segments));
        }
        s
    });
    Ok(0)
}

fn cmd_track(ctx: &Context, model: Option<PathBuf>, references: &[String], runs: u64) -> CliResult<u8> {
    let path = model.unwrap_or_else(|| ctx.out.join("models").join("cassm.json"));
    let model = load_model(&path)?;
    let specs: Vec<_> = ctx.cfg.closedloop.iter().filter(|s| references.is_empty() || references.contains(&s.label())).collect();
    if let Some(missing) = references.iter().find(|r| !ctx.cfg.closedloop.iter().any(|s| &s.label() == *r)) {
        return Err(Failure::io(format!("unknown reference tag {missing:?}")));
    }
    let plant = ctx.plant()?;
    let u_max = ctx.cfg.mpc.u_max.first().copied().unwrap_or(1.0);
    let workspace = plant.workspace_radius(u_max).map_err(|e| Failure::compute(format!("workspace radius: {e}")))?;
    let dir = ctx.out.join("track");
    create_dir(&dir)?;
    let kind = model.as_model().kind();
    let mut entries = Vec::new();
    for spec in specs {
        for run in 0..runs.max(1) {
            let tag = spec.label();
            let res = experiment::track(&ctx.cfg, &plant, model.as_model(), spec, workspace, run).map_err(|e| Failure::compute(format!("{tag}: {e}")))?;
            let log_name = if runs > 1 { format!("{kind}-{tag}-run{run}.csv") } else { format!("{kind}-{tag}.csv") };
            write_file(&dir.join(&log_name), |w| res.write_csv(w))?;
            entries.push(json!({
                "tag": tag,
                "run": run,
                "status": if res.diverged { "diverged" } else { "ok" },
                "rmse_mm": if res.diverged { Value::Null } else { json!(res.rmse_mm) },
                "diverged_at": res.diverged_at,
                "mean_solve_ms": res.mean_solve_ms,
                "max_solve_ms": res.max_solve_ms,
                "budget_exceeded": res.budget_exceeded,
                "solves": res.solves,
                "max_kkt_residual": res.max_kkt_residual,
                "fallbacks": res.fallbacks,
                "non_optimal_solves": res.non_optimal_solves,
                "log": log_name,
            }));
        }
    }
    let mut summary = ctx.header();
    summary["model"] = json!(kind);
    summary["workspace_radius_m"] = json!(workspace);
    summary["runs"] = json!(entries);
    write_json(&dir.join(format!("{kind}-summary.json")), &summary)?;
    ctx.emit(&summary, || {
        let mut s = String::new();
        for e in &entries {
            let result = match e["rmse_mm"].as_f64() {
                Some(v) => format!("RMSE {v:.3} mm"),
                None => "Diverged".to_string(),
            };
            s.push_str(&format!("{kind} {} run {}: {result}, mean solve {:.2} ms\n", e["tag"].as_str().unwrap_or(""), e["run"], e["mean_solve_ms"].as_f64().unwrap_or(0.0)));
        }
        s
    });
    Ok(0)
}

fn kernel_check(name: &str, map: &FeatureMap) -> Option<(String, KernelCheck)> {
    match &map.map {
        FeatureKind::Rff(r) => Some((name.to_string(), r.kernel_check(500, 0))),
        FeatureKind::Polynomial(_) => None,
    }
}

fn cmd_diagnose(ctx: &Context, path: &Path) -> CliResult<u8> {
    let model = load_model(path)?;
    let m = model.as_model();
    let mut report = json!({
        "path": path.display().to_string(),
        "kind": m.kind(),
        "dims": { "n_obs": m.n_obs(), "n_inputs": m.n_inputs(), "state_dim": m.state_dim(), "history_len": m.history_len(), "dt": m.dt() },
        "spectral": Value::Null,
        "invariance_residual": Value::Null,
        "kernel_checks": [],
    });
    if let AnyModel::Cassm(c) = &model {
        let plant = Plant::new(ctx.cfg.plant.clone()).ok().filter(|p| p.config().n_obs() == c.o && p.config().m_inputs == c.m);
        let lin = plant.as_ref().and_then(|p| p.linearize().ok());
        report["spectral"] = serde_json::to_value(c.spectral_diagnostic(lin.as_ref())).expect("spectral report serializes");
        if let (Some(p), Some(l)) = (&plant, &lin) {
            report["invariance_residual"] = json!(c.invariance_residual(l, &p.observation_matrix()).ok());
        }
        let checks: Vec<Value> = [kernel_check("w", &c.w_map), kernel_check("r", &c.r_map)]
            .into_iter()
            .flatten()
            .map(|(name, k)| {
                let mut v = serde_json::to_value(k).expect("kernel check serializes");
                v["map"] = json!(name);
                v
            })
            .collect();
        report["kernel_checks"] = json!(checks);
        report["dims"]["lags"] = json!(c.lags);
    }
    ctx.emit(&report, || {
        let mut s = format!("{} model from {}\n", m.kind(), path.display());
        s.push_str(&format!("  dims: n_obs {} n_inputs {} state {} history {}\n", m.n_obs(), m.n_inputs(), m.state_dim(), m.history_len()));
        if let Some(c) = report["spectral"]["classification"].as_str() {
            s.push_str(&format!("  spectral classification: {c}\n"));
            s.push_str(&format!("  actuator eigenvalues: {}\n", report["spectral"]["actuator_eigenvalues"]));
            s.push_str(&format!("  reduced eigenvalues: {}\n", report["spectral"]["reduced_eigenvalues"]));
        }
        if let Some(r) = report["invariance_residual"].as_f64() {
            s.push_str(&format!("  invariance residual: {r:.4}\n"));
        }
        for k in report["kernel_checks"].as_array().into_iter().flatten() {
            s.push_str(&format!(
                "  rff {} map: D {} mean |k - k_rff| {:.4} ({})\n",
                k["map"].as_str().unwrap_or(""),
                k["d"],
                k["mean_abs_error"].as_f64().unwrap_or(f64::NAN),
                if k["pass"].as_bool() == Some(true) { "ok" } else { "poor" }
            ));
        }
        s
    });
    Ok(0)
}
