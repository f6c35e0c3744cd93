//! Simulated closed loop: plant at the model rate, MPC at the actuation rate
//! with zero-order hold, raw noisy measurements.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::mpc::{mpc_step, MpcConfig, MpcState, MpcStatus};
use crate::control::reference::Reference;
use crate::error::{Error, Result};
use crate::model::ReducedModel;
use crate::plant::{Observation, Plant, PlantState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopConfig {
    pub duration: f64,
    /// Initial interval excluded from the RMSE, seconds.
    pub transient: f64,
    /// Measurement noise seed.
    pub seed: u64,
    /// Record wall-clock solve times; when false the log holds zeros so runs
    /// are byte-reproducible.
    pub timing: bool,
    /// A run diverges once any node leaves this distance from rest, metres.
    pub divergence_radius: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig { duration: 20.0, transient: 1.0, seed: 0, timing: true, divergence_radius: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub y: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub u: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub solve_ms: f64,
    pub scp_iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub rows: Vec<LogRow>,
    /// Tracking RMSE over the weighted performance rows, millimetres.
    pub rmse_mm: f64,
    pub diverged: bool,
    pub diverged_at: Option<f64>,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    /// Mean solve time exceeded the actuation period.
    pub budget_exceeded: bool,
    pub solves: usize,
    pub max_kkt_residual: f64,
    /// Every QP KKT residual in order.
    pub kkt_residuals: Vec<f64>,
    /// MPC calls that failed and held the previous command.
    pub fallbacks: usize,
    pub non_optimal_solves: usize,
}

impl ClosedLoopResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let first = self.rows.first();
        let (o, p, m) = first.map_or((0, 0, 0), |r| (r.y.len(), r.y_ref.len(), r.u.len()));
        let mut header = vec!["t".to_string()];
        header.extend((1..=o).map(|i| format!("y{i}")));
        header.extend((1..=p).map(|i| format!("yref{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=m).map(|i| format!("uref{i}")));
        header.push("solve_ms".into());
        header.push("scp_iters".into());
        writeln!(w, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells = vec![r.t.to_string()];
            cells.extend(r.y.iter().chain(&r.y_ref).chain(&r.u).chain(&r.u_ref).map(|v| v.to_string()));
            cells.push(r.solve_ms.to_string());
            cells.push(r.scp_iters.to_string());
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Runs `model` in closed loop on `plant` tracking `reference`.
pub fn closed_loop_run(plant: &Plant, model: &dyn ReducedModel, mpc: &MpcConfig, reference: &Reference, cl: &ClosedLoopConfig) -> Result<ClosedLoopResult> {
    let cfg = plant.config();
    let m = cfg.m_inputs;
    mpc.validate(cfg.n_obs(), m)?;
    if (model.dt() - mpc.dt).abs() > 1e-12 {
        return Err(Error::Config(format!("model dt {} differs from MPC dt {}", model.dt(), mpc.dt)));
    }
    let dt = mpc.dt;
    let hold = mpc.hold();
    let n_steps = (cl.duration / dt).round() as usize;
    let tracked: Vec<usize> = (0..mpc.q.len()).filter(|&i| mpc.q[i] > 0.0 || mpc.q_f[i] > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cl.seed);
    let mut state = PlantState::equilibrium(cfg);
    let mut u_cmd = vec![0.0; m];
    let first = plant.observe_noisy(&state, &u_cmd, &mut rng);
    let hist = model.history_len().max(2);
    let mut window: Vec<Observation> = (0..hist).map(|i| Observation { t: -dt * (hist - 1 - i) as f64, ..first.clone() }).collect();
    let mut mpc_state = MpcState::default();
    let mut rows = Vec::with_capacity(n_steps);
    let mut solve_times = Vec::new();
    let mut kkt = Vec::new();
    let mut fallbacks = 0;
    let mut non_optimal = 0;
    let mut diverged_at = None;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let mut solve_ms = 0.0;
        let mut scp_iters = 0;
        if k % hold == 0 {
            let ref_window = reference.window(t, dt, mpc.horizon);
            match mpc_step(model, &window, &ref_window, mpc, &mut mpc_state) {
                Ok(sol) => {
                    u_cmd = sol.u_ref[0].clone();
                    solve_ms = if cl.timing { sol.solve_ms } else { 0.0 };
                    scp_iters = sol.scp_iterations;
                    solve_times.push(sol.solve_ms);
                    kkt.extend(sol.kkt_residuals.iter().cloned());
                    if sol.status != MpcStatus::Optimal {
                        non_optimal += 1;
                    }
                }
                Err(e) => {
                    log::warn!("MPC failed at t = {t:.3} s ({e}); holding previous command");
                    fallbacks += 1;
                    mpc_state.last_applied = Some(u_cmd.clone());
                    mpc_state.previous = None;
                }
            }
        }
        let last = window.len() - 1;
        window[last].u_ref = u_cmd.clone();
        let y_ref = reference.at(t);
        rows.push(LogRow { t, y: window[last].y.clone(), y_ref: y_ref.iter().cloned().collect(), u: state.u.clone(), u_ref: u_cmd.clone(), solve_ms, scp_iters });
        state = match plant.advance(&state, &u_cmd, dt) {
            Ok(s) => s,
            Err(Error::Blowup { time }) => {
                diverged_at = Some(time);
                break;
            }
            Err(e) => return Err(e),
        };
        let excursion = state.q.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if excursion > cl.divergence_radius {
            diverged_at = Some(state.t);
            break;
        }
        window.remove(0);
        window.push(plant.observe_noisy(&state, &u_cmd, &mut rng));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for r in rows.iter().filter(|r| r.t >= cl.transient - 1e-9) {
        sq += tracked.iter().map(|&i| (r.y[mpc.perf_rows[i]] - r.y_ref[i]).powi(2)).sum::<f64>();
        count += 1;
    }
    let rmse_mm = if diverged_at.is_some() || count == 0 { f64::NAN } else { (sq / count as f64).sqrt() * 1e3 };
    let mean_solve_ms = if solve_times.is_empty() { 0.0 } else { solve_times.iter().sum::<f64>() / solve_times.len() as f64 };
    Ok(ClosedLoopResult {
        rows,
        rmse_mm,
        diverged: diverged_at.is_some(),
        diverged_at,
        mean_solve_ms: if cl.timing { mean_solve_ms } else { 0.0 },
        max_solve_ms: if cl.timing { solve_times.iter().cloned().fold(0.0, f64::max) } else { 0.0 },
        budget_exceeded: mean_solve_ms > mpc.actuation_period * 1e3,
        solves: solve_times.len(),
        max_kkt_residual: kkt.iter().cloned().fold(0.0, f64::max),
        kkt_residuals: kkt,
        fallbacks,
        non_optimal_solves: non_optimal,
    })
}

/// Tip rest position for a reference center.
pub fn rest_point(plant: &Plant, rows: &[usize]) -> [f64; 3] {
    let y = plant.equilibrium_observation().y;
    let v = DVector::from_fn(rows.len(), |i, _| y[rows[i]]);
    [v[0], v.get(1).cloned().unwrap_or(0.0), v.get(2).cloned().unwrap_or(0.0)]
}
