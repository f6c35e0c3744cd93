//! Experiment harness shared by the command-line tool and the acceptance
//! tests: configuration, data products, model fitting, the open-loop segment
//! benchmark and closed-loop tracking runs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{fit_koopman, fit_ossm, KoopmanConfig, KoopmanModel, OssmConfig, OssmModel, KOOPMAN_VERSION, OSSM_VERSION};
use crate::cassm::{fit_cassm, CassmConfig, ManifoldModel, MODEL_VERSION};
use crate::control::closed_loop::{closed_loop_run, rest_point, ClosedLoopConfig, ClosedLoopResult};
use crate::control::mpc::MpcConfig;
use crate::control::reference::{Reference, Shape};
use crate::error::{Error, Result};
use crate::model::{rollout, ReducedModel};
use crate::pipeline::{collect_decays, collect_staircase, kalman_rts_smooth, split_trajectories, DecayProtocol, Split, Trajectory};
use crate::plant::{Plant, PlantConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.7, validation: 0.15 }
    }
}

/// Staircase runs used only to calibrate the oSSM input matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub n_traj: usize,
    pub duration: f64,
    pub hold: f64,
    pub amplitude: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { n_traj: 10, duration: 6.0, hold: 0.25, amplitude: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub q_noise: f64,
    /// Measurement variance; `None` uses the plant's noise variance.
    pub r_noise: Option<f64>,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { q_noise: 1e-3, r_noise: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// `direction_seed` is replaced by the experiment seed.
    pub decay: DecayProtocol,
    pub split: SplitConfig,
    pub smoothing: Option<SmoothingConfig>,
    pub calibration: CalibrationConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { decay: DecayProtocol::default(), split: SplitConfig::default(), smoothing: Some(SmoothingConfig::default()), calibration: CalibrationConfig::default() }
    }
}

/// Model to fit, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Cassm {
        #[serde(default)]
        config: CassmConfig,
        /// RFF length scales tried on the validation decays; empty keeps the configured ones.
        #[serde(default = "default_length_grid")]
        length_scale_grid: Vec<f64>,
    },
    Ossm {
        #[serde(default)]
        config: OssmConfig,
    },
    Koopman {
        #[serde(default)]
        config: KoopmanConfig,
    },
}

fn default_length_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Cassm { .. } => "cassm",
            ModelSpec::Ossm { .. } => "ossm",
            ModelSpec::Koopman { .. } => "koopman",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenLoopConfig {
    pub total_s: f64,
    pub segment_steps: usize,
    pub dt: f64,
    /// Staircase level duration, seconds.
    pub hold: f64,
    /// Staircase amplitude; `None` spans the full input bound.
    pub amplitude: Option<f64>,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        OpenLoopConfig { total_s: 15.0, segment_steps: 5, dt: 0.02, hold: 0.25, amplitude: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub shape: Shape,
    /// Radius as a fraction of the workspace radius.
    pub radius_fraction: f64,
    pub omega: f64,
    #[serde(default = "default_track_duration")]
    pub duration: f64,
    #[serde(default)]
    pub tag: String,
}

fn default_track_duration() -> f64 {
    20.0
}

impl TrackSpec {
    pub fn label(&self) -> String {
        if !self.tag.is_empty() {
            return self.tag.clone();
        }
        let shape = match self.shape {
            Shape::Circle => "circle",
            Shape::FigureEight => "figure-eight",
            Shape::Hold => "hold",
        };
        format!("{shape}-{:.0}pct-{}rad", 100.0 * self.radius_fraction, self.omega)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub plant: PlantConfig,
    pub protocol: ProtocolConfig,
    pub models: Vec<ModelSpec>,
    pub openloop: OpenLoopConfig,
    pub closedloop: Vec<TrackSpec>,
    pub closed_loop: ClosedLoopConfig,
    pub mpc: MpcConfig,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let track = |shape, radius_fraction, omega, tag: &str| TrackSpec { shape, radius_fraction, omega, duration: 20.0, tag: tag.to_string() };
        ExperimentConfig {
            seed: 1,
            plant: PlantConfig { noise_std: 2e-4, ..PlantConfig::default() },
            protocol: ProtocolConfig::default(),
            models: vec![
                ModelSpec::Cassm { config: CassmConfig::default(), length_scale_grid: default_length_grid() },
                ModelSpec::Ossm { config: OssmConfig::default() },
                ModelSpec::Koopman { config: KoopmanConfig::default() },
            ],
            openloop: OpenLoopConfig::default(),
            closedloop: vec![
                track(Shape::Circle, 0.3, 0.5, "circle-30"),
                track(Shape::Circle, 0.5, 0.5, "circle-50"),
                track(Shape::Circle, 0.65, 0.5, "circle-65"),
                track(Shape::Circle, 0.8, 0.5, "circle-80"),
                track(Shape::FigureEight, 0.5, 0.5, "figure-eight-nominal"),
                track(Shape::FigureEight, 0.5, 1.0, "figure-eight-fast"),
            ],
            closed_loop: ClosedLoopConfig::default(),
            mpc: MpcConfig::default(),
            output_dir: None,
        }
    }
}

/// Seeds of the individual random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub decay: u64,
    pub split: u64,
    pub calibration: u64,
    pub openloop: u64,
    pub closedloop: u64,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds { decay: s, split: s + 2, calibration: 1000 + 100 * s.saturating_sub(1), openloop: 76 + s, closedloop: 500 + 100 * s }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        if (self.openloop.dt - self.protocol.decay.dt).abs() > 1e-12 {
            return Err(Error::Config("open-loop dt must equal the collection dt".into()));
        }
        if (self.mpc.dt - self.protocol.decay.dt).abs() > 1e-12 {
            return Err(Error::Config("MPC dt must equal the collection dt".into()));
        }
        if self.openloop.segment_steps == 0 {
            return Err(Error::Config("segment_steps must be positive".into()));
        }
        let split = &self.protocol.split;
        if !(split.train > 0.0 && split.validation >= 0.0 && split.train + split.validation <= 1.0) {
            return Err(Error::Config("split fractions must be positive and sum to at most 1".into()));
        }
        self.mpc.validate(self.plant.n_obs(), self.plant.m_inputs)
    }

    /// SHA-256 over the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn decay_protocol(&self) -> DecayProtocol {
        DecayProtocol { direction_seed: self.seeds().decay, ..self.protocol.decay.clone() }
    }

    fn smoothing(&self) -> Option<(f64, f64)> {
        let s = self.protocol.smoothing.as_ref()?;
        let r = s.r_noise.unwrap_or(self.plant.noise_std * self.plant.noise_std);
        (r > 0.0).then_some((s.q_noise, r))
    }

    /// Applies the configured smoother (or passes data through when off).
    pub fn smooth(&self, trajs: &[Trajectory]) -> Result<Vec<Trajectory>> {
        match self.smoothing() {
            Some((q, r)) => trajs.iter().map(|t| kalman_rts_smooth(t, q, r)).collect(),
            None => Ok(trajs.to_vec()),
        }
    }
}

/// Raw measured data of one experiment.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub decays: Vec<Trajectory>,
    pub discarded: usize,
    pub calibration: Vec<Trajectory>,
    pub split: Split,
}

impl DataSet {
    pub fn train(&self) -> Vec<Trajectory> {
        self.split.train.iter().map(|&i| self.decays[i].clone()).collect()
    }

    pub fn validation(&self) -> Vec<Trajectory> {
        self.split.validation.iter().map(|&i| self.decays[i].clone()).collect()
    }
}

pub fn collect(cfg: &ExperimentConfig, plant: &Plant) -> Result<DataSet> {
    let seeds = cfg.seeds();
    let decays = collect_decays(plant, &cfg.decay_protocol())?;
    let c = &cfg.protocol.calibration;
    let calibration = (0..c.n_traj)
        .map(|i| collect_staircase(plant, c.duration, cfg.protocol.decay.dt, c.hold, c.amplitude, seeds.calibration + i as u64, &format!("cal-{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    let split = split_trajectories(decays.trajectories.len(), cfg.protocol.split.train, cfg.protocol.split.validation, seeds.split);
    Ok(DataSet { decays: decays.trajectories, discarded: decays.discarded, calibration, split })
}

/// Any fitted model, serialized with its own `version` tag.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Cassm(ManifoldModel),
    Ossm(OssmModel),
    Koopman(KoopmanModel),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn ReducedModel {
        match self {
            AnyModel::Cassm(m) => m,
            AnyModel::Ossm(m) => m,
            AnyModel::Koopman(m) => m,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            AnyModel::Cassm(m) => serde_json::to_string(m)?,
            AnyModel::Ossm(m) => serde_json::to_string(m)?,
            AnyModel::Koopman(m) => serde_json::to_string(m)?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(|v| v.as_str()).ok_or_else(|| Error::Config("model file has no version field".into()))?;
        match version {
            MODEL_VERSION => Ok(AnyModel::Cassm(serde_json::from_value(value)?)),
            OSSM_VERSION => Ok(AnyModel::Ossm(serde_json::from_value(value)?)),
            KOOPMAN_VERSION => Ok(AnyModel::Koopman(serde_json::from_value(value)?)),
            other => Err(Error::Config(format!("unknown model version {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutcome {
    pub kind: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Model-specific fit report.
    pub report: serde_json::Value,
}

/// Per-segment open-loop errors on tip position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub segment: usize,
    pub start_t: f64,
    pub rmse_mm: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSummary {
    pub model: String,
    pub mean_rmse_mm: f64,
    pub median_rmse_mm: f64,
    pub diverged_segments: usize,
    pub segments: usize,
}

/// Segment RMSE of `model` on `traj`: starting every `steps` samples once
/// enough history is available, roll out `steps` commands and compare the
/// predicted tip with the measured tip.
pub fn evaluate_segments(model: &dyn ReducedModel, traj: &Trajectory, steps: usize, start: usize, tip: [usize; 3], max_segments: Option<usize>) -> Vec<SegmentResult> {
    let mut out = Vec::new();
    let mut k = start.max(model.history_len().saturating_sub(1));
    while k + steps < traj.len() && max_segments.is_none_or(|n| out.len() < n) {
        let window = &traj.samples[..=k];
        let commands: Vec<Vec<f64>> = (0..steps).map(|j| traj.samples[k + j].u_ref.clone()).collect();
        let seg = out.len();
        let start_t = traj.samples[k].t;
        match rollout(model, window, &commands) {
            Ok(pred) => {
                let sq: f64 = (1..=steps).map(|j| tip.iter().map(|&r| (pred[j][r] - traj.samples[k + j].y[r]).powi(2)).sum::<f64>()).sum();
                out.push(SegmentResult { segment: seg, start_t, rmse_mm: Some((sq / steps as f64).sqrt() * 1e3), diverged: false });
            }
            Err(_) => out.push(SegmentResult { segment: seg, start_t, rmse_mm: None, diverged: true }),
        }
        k += steps;
    }
    out
}

pub fn summarize(model: &str, segments: &[SegmentResult]) -> OpenLoopSummary {
    let mut ok: Vec<f64> = segments.iter().filter_map(|s| s.rmse_mm).collect();
    ok.sort_by(f64::total_cmp);
    let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    let median = match ok.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => ok[n / 2],
        n => 0.5 * (ok[n / 2 - 1] + ok[n / 2]),
    };
    OpenLoopSummary { model: model.to_string(), mean_rmse_mm: mean, median_rmse_mm: median, diverged_segments: segments.iter().filter(|s| s.diverged).count(), segments: segments.len() }
}

fn tip_rows(plant: &Plant) -> Result<[usize; 3]> {
    plant.tip_rows().ok_or_else(|| Error::Config("the tip node must be observed".into()))
}

/// Mean validation-decay segment RMSE, used for hyperparameter selection.
pub fn validation_score(model: &dyn ReducedModel, validation: &[Trajectory], steps: usize, tip: [usize; 3]) -> f64 {
    let segs: Vec<SegmentResult> = validation.iter().flat_map(|t| evaluate_segments(model, t, steps, t.meta.release_index.unwrap_or(0), tip, None)).collect();
    let s = summarize("validation", &segs);
    if s.diverged_segments > 0 || !s.mean_rmse_mm.is_finite() {
        f64::INFINITY
    } else {
        s.mean_rmse_mm
    }
}

/// Fits one model spec. Training data is smoothed once here; caSSM's own
/// smoothing option stays available for standalone use.
pub fn fit_model(cfg: &ExperimentConfig, plant: &Plant, data: &DataSet, spec: &ModelSpec) -> Result<(AnyModel, serde_json::Value)> {
    let groups = plant.config().obs_groups();
    let train = cfg.smooth(&data.train())?;
    match spec {
        ModelSpec::Cassm { config, length_scale_grid } => {
            let tip = tip_rows(plant)?;
            let validation = data.validation();
            let candidates: Vec<CassmConfig> = if length_scale_grid.is_empty() || validation.is_empty() {
                vec![config.clone()]
            } else {
                length_scale_grid
                    .iter()
                    .map(|&ell| CassmConfig { w_features: config.w_features.with_length_scale(ell), r_features: config.r_features.with_length_scale(ell), ..config.clone() })
                    .collect()
            };
            let mut best: Option<(f64, ManifoldModel, crate::cassm::CassmFitReport, CassmConfig)> = None;
            let mut scores = Vec::new();
            let mut last_err = None;
            for c in candidates {
                match fit_cassm(&train, &groups, &c) {
                    Ok((model, report)) => {
                        let score = if validation.is_empty() { 0.0 } else { validation_score(&model, &validation, cfg.openloop.segment_steps, tip) };
                        scores.push(serde_json::json!({ "w_features": c.w_features, "validation_rmse_mm": score }));
                        if best.as_ref().is_none_or(|b| score < b.0) {
                            best = Some((score, model, report, c));
                        }
                    }
                    Err(e) => {
                        scores.push(serde_json::json!({ "w_features": c.w_features, "error": e.to_string() }));
                        last_err = Some(e);
                    }
                }
            }
            let Some((score, model, report, chosen)) = best else {
                return Err(last_err.unwrap_or_else(|| Error::Parameter("no caSSM candidates".into())));
            };
            let lin = plant.linearize().ok();
            let spectral = model.spectral_diagnostic(lin.as_ref());
            let invariance = lin.as_ref().and_then(|l| model.invariance_residual(l, &plant.observation_matrix()).ok());
            let lambda_true = crate::cassm::complex_pairs(&crate::linalg::sorted_eigenvalues(&plant.config().lambda_true));
            let json = serde_json::json!({
                "fit": report,
                "chosen": chosen,
                "validation_rmse_mm": score,
                "selection": scores,
                "lambda_true_eigenvalues": lambda_true,
                "invariance_residual": invariance,
                "spectral": spectral,
                "dims": { "o": model.o, "m": model.m, "lags": model.lags, "n": model.n },
            });
            Ok((AnyModel::Cassm(model), json))
        }
        ModelSpec::Ossm { config } => {
            let cal = cfg.smooth(&data.calibration)?;
            let (model, report) = fit_ossm(&train, &cal, &groups, config)?;
            Ok((AnyModel::Ossm(model), serde_json::to_value(report)?))
        }
        ModelSpec::Koopman { config } => {
            let (model, report) = fit_koopman(&train, &groups, config)?;
            Ok((AnyModel::Koopman(model), serde_json::to_value(report)?))
        }
    }
}

/// Open-loop test sequence: a seeded per-input staircase with one segment of
/// lead-in so the first segment has a full history window.
pub fn test_sequence(cfg: &ExperimentConfig, plant: &Plant) -> Result<(Trajectory, usize)> {
    let ol = &cfg.openloop;
    let lead = ol.segment_steps;
    let amplitude = ol.amplitude.unwrap_or(cfg.protocol.decay.input_bound);
    let duration = ol.total_s + lead as f64 * ol.dt;
    let traj = collect_staircase(plant, duration, ol.dt, ol.hold, amplitude, cfg.seeds().openloop, "openloop")?;
    Ok((traj, lead))
}

/// Runs the segment benchmark for `model`.
pub fn open_loop_benchmark(cfg: &ExperimentConfig, plant: &Plant, test: &Trajectory, lead: usize, model: &dyn ReducedModel) -> Result<(OpenLoopSummary, Vec<SegmentResult>)> {
    let n_seg = (cfg.openloop.total_s / cfg.openloop.dt).round() as usize / cfg.openloop.segment_steps;
    let segs = evaluate_segments(model, test, cfg.openloop.segment_steps, lead, tip_rows(plant)?, Some(n_seg));
    Ok((summarize(model.kind(), &segs), segs))
}

pub fn reference_for(cfg: &ExperimentConfig, plant: &Plant, spec: &TrackSpec, workspace: f64) -> Reference {
    let center = rest_point(plant, &cfg.mpc.perf_rows);
    Reference { shape: spec.shape, radius: spec.radius_fraction * workspace, omega: spec.omega, ramp: 1.0, center }
}

/// Closed-loop run of `model` on `spec`; `run` selects the noise stream.
pub fn track(cfg: &ExperimentConfig, plant: &Plant, model: &dyn ReducedModel, spec: &TrackSpec, workspace: f64, run: u64) -> Result<ClosedLoopResult> {
    let reference = reference_for(cfg, plant, spec, workspace);
    let cl = ClosedLoopConfig { duration: spec.duration, seed: cfg.seeds().closedloop + run, ..cfg.closed_loop.clone() };
    closed_loop_run(plant, model, &cfg.mpc, &reference, &cl)
}
