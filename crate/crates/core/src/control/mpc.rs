//! Reduced-order tracking MPC solved by sequential convex programming.
//!
//! Decision variables are the commands of each actuation period, held over
//! `hold = actuation_period / dt` model steps. Each SCP round linearizes the
//! model along the nominal rollout, condenses the horizon into a dense box QP
//! in the input increments, and accepts the step only if the nonlinear cost
//! does not increase.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::qp::{self, QpStatus};
use crate::error::{Error, Result};
use crate::model::{ReducedModel, StepLinearization};
use crate::plant::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub actuation_period: f64,
    /// Diagonal stage weight on the performance outputs.
    pub q: Vec<f64>,
    /// Diagonal terminal weight.
    pub q_f: Vec<f64>,
    /// Diagonal weight on command changes.
    pub r_delta: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Soft box on the performance outputs, metres.
    pub y_bounds: Option<OutputBounds>,
    /// Rows of the observation vector forming `y_perf`.
    pub perf_rows: Vec<usize>,
    /// Multiplies `y_perf` errors before weighting (100 gives centimetres).
    pub output_scale: f64,
    pub scp_iters: usize,
    /// Converged once the accepted step is below this in the infinity norm.
    pub scp_tol: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Initial trust-region radius; `None` uses 20% of the input range.
    pub trust_region: Option<f64>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            dt: 0.02,
            actuation_period: 0.04,
            q: vec![7.0, 7.0, 0.0],
            q_f: vec![20.0, 20.0, 0.0],
            r_delta: vec![0.16, 0.16],
            u_min: vec![-1.0, -1.0],
            u_max: vec![1.0, 1.0],
            y_bounds: None,
            perf_rows: vec![6, 7, 8],
            output_scale: 100.0,
            scp_iters: 3,
            scp_tol: 1e-6,
            qp_tol: 1e-8,
            qp_max_iter: 5000,
            trust_region: None,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, n_obs: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("MPC dt must be positive".into()));
        }
        let ratio = self.actuation_period / self.dt;
        if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("actuation period {} is not an integer multiple of dt {}", self.actuation_period, self.dt)));
        }
        let p = self.perf_rows.len();
        crate::error::check_dim("MPC stage weight", p, self.q.len())?;
        crate::error::check_dim("MPC terminal weight", p, self.q_f.len())?;
        crate::error::check_dim("MPC input-change weight", m, self.r_delta.len())?;
        crate::error::check_dim("MPC lower input bound", m, self.u_min.len())?;
        crate::error::check_dim("MPC upper input bound", m, self.u_max.len())?;
        if self.q.iter().chain(&self.q_f).chain(&self.r_delta).any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("MPC weights must be non-negative".into()));
        }
        if self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("MPC input bounds must satisfy u_min < u_max".into()));
        }
        if let Some(b) = &self.y_bounds {
            crate::error::check_dim("MPC output lower bound", p, b.lo.len())?;
            crate::error::check_dim("MPC output upper bound", p, b.hi.len())?;
        }
        if let Some(&r) = self.perf_rows.iter().find(|&&r| r >= n_obs) {
            return Err(Error::Config(format!("performance row {r} out of range for {n_obs} observations")));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::Config("output scale must be positive".into()));
        }
        Ok(())
    }

    /// Model steps per actuation period.
    pub fn hold(&self) -> usize {
        (self.actuation_period / self.dt).round() as usize
    }

    pub fn n_blocks(&self) -> usize {
        self.horizon.div_ceil(self.hold())
    }

    fn initial_trust(&self) -> f64 {
        self.trust_region.unwrap_or_else(|| 0.2 * self.input_range())
    }

    fn input_range(&self) -> f64 {
        self.u_min.iter().zip(&self.u_max).map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
    }
}

/// Per-step affine models along a nominal rollout.
#[derive(Debug, Clone)]
pub struct AffineHorizon {
    /// Step `k` maps `s_k` to `s_{k+1}`.
    pub steps: Vec<StepLinearization>,
    /// Nominal states `s_0..s_N`.
    pub states: Vec<DVector<f64>>,
    /// Nominal performance outputs at `s_0..s_N`, metres.
    pub outputs: Vec<DVector<f64>>,
    /// `d y_perf / d s` at `s_0..s_N`.
    pub output_jacobians: Vec<DMatrix<f64>>,
    /// Nominal command per block.
    pub blocks: Vec<Vec<f64>>,
    /// Commands applied before the horizon, newest first.
    pub history: Vec<Vec<f64>>,
    pub hold: usize,
}

/// Commands entering model step `k`, newest first.
fn step_inputs(blocks: &[Vec<f64>], history: &[Vec<f64>], hold: usize, k: usize, lags: usize) -> Vec<Vec<f64>> {
    let m = blocks[0].len();
    (0..lags)
        .map(|j| {
            let idx = k as isize - j as isize;
            if idx >= 0 {
                blocks[(idx as usize / hold).min(blocks.len() - 1)].clone()
            } else {
                let h = (-idx - 1) as usize;
                history.get(h).or(history.last()).cloned().unwrap_or_else(|| vec![0.0; m])
            }
        })
        .collect()
}

/// Block index feeding lag `j` of step `k`, if it lies inside the horizon.
fn step_block(hold: usize, n_blocks: usize, k: usize, j: usize) -> Option<usize> {
    (k >= j).then(|| ((k - j) / hold).min(n_blocks - 1))
}

fn perf(model: &dyn ReducedModel, s: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    let y = model.decode(s);
    DVector::from_fn(rows.len(), |i, _| y[rows[i]])
}

fn perf_jacobian(model: &dyn ReducedModel, s: &DVector<f64>, rows: &[usize]) -> DMatrix<f64> {
    let j = model.decode_jacobian(s);
    DMatrix::from_fn(rows.len(), j.ncols(), |i, c| j[(rows[i], c)])
}

fn diverged(model: &dyn ReducedModel, s: &DVector<f64>) -> bool {
    !s.iter().all(|v| v.is_finite()) || s.norm() > model.divergence_bound()
}

/// Linearizes `model` along the rollout of `blocks` from `s0`.
pub fn linearize_reduced(model: &dyn ReducedModel, s0: &DVector<f64>, blocks: &[Vec<f64>], history: &[Vec<f64>], horizon: usize, hold: usize, perf_rows: &[usize]) -> Result<AffineHorizon> {
    let lags = model.input_lags();
    let mut states = vec![s0.clone()];
    let mut steps = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let lin = model.linearize_step(&states[k], &step_inputs(blocks, history, hold, k, lags));
        if diverged(model, &lin.next) {
            return Err(Error::Divergence { step: k + 1 });
        }
        states.push(lin.next.clone());
        steps.push(lin);
    }
    Ok(AffineHorizon {
        outputs: states.iter().map(|s| perf(model, s, perf_rows)).collect(),
        output_jacobians: states.iter().map(|s| perf_jacobian(model, s, perf_rows)).collect(),
        steps,
        states,
        blocks: blocks.to_vec(),
        history: history.to_vec(),
        hold,
    })
}

/// Nonlinear rollout returning performance outputs at steps `0..=N`.
pub fn rollout_outputs(model: &dyn ReducedModel, s0: &DVector<f64>, blocks: &[Vec<f64>], history: &[Vec<f64>], cfg: &MpcConfig) -> Result<Vec<DVector<f64>>> {
    let lags = model.input_lags();
    let hold = cfg.hold();
    let mut s = s0.clone();
    let mut out = vec![perf(model, &s, &cfg.perf_rows)];
    for k in 0..cfg.horizon {
        s = model.step(&s, &step_inputs(blocks, history, hold, k, lags));
        if diverged(model, &s) {
            return Err(Error::Divergence { step: k + 1 });
        }
        out.push(perf(model, &s, &cfg.perf_rows));
    }
    Ok(out)
}

fn y_penalty_weight(cfg: &MpcConfig) -> f64 {
    1e3 * cfg.q.iter().chain(&cfg.q_f).cloned().fold(0.0, f64::max)
}

/// Largest violation of the soft output box over steps `1..=N`, metres.
pub fn output_violation(outputs: &[DVector<f64>], cfg: &MpcConfig) -> f64 {
    let Some(b) = &cfg.y_bounds else { return 0.0 };
    outputs
        .iter()
        .skip(1)
        .flat_map(|y| (0..y.len()).map(move |i| (y[i] - b.hi[i]).max(b.lo[i] - y[i]).max(0.0)))
        .fold(0.0, f64::max)
}

/// Tracking cost of a rollout: weighted output errors at steps `1..=N`,
/// command changes (the first against `prev_u`) and the soft output penalty.
pub fn tracking_cost(outputs: &[DVector<f64>], reference: &[DVector<f64>], blocks: &[Vec<f64>], prev_u: &[f64], cfg: &MpcConfig) -> f64 {
    let n = cfg.horizon;
    let sc = cfg.output_scale;
    let mut cost = 0.0;
    for k in 1..=n {
        let w = if k == n { &cfg.q_f } else { &cfg.q };
        for i in 0..w.len() {
            cost += w[i] * (sc * (outputs[k][i] - reference[k][i])).powi(2);
        }
    }
    let mut prev = prev_u;
    for b in blocks {
        for i in 0..b.len() {
            cost += cfg.r_delta[i] * (b[i] - prev[i]).powi(2);
        }
        prev = b;
    }
    if let Some(bounds) = &cfg.y_bounds {
        let wy = y_penalty_weight(cfg);
        for y in outputs.iter().skip(1) {
            for i in 0..y.len() {
                let v = (y[i] - bounds.hi[i]).max(bounds.lo[i] - y[i]).max(0.0);
                cost += wy * (sc * v).powi(2);
            }
        }
    }
    cost
}

/// Condensed QP in the block increments `d = U - U_bar`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    /// Objective value at `d = 0`.
    pub constant: f64,
}

pub fn condense(h: &AffineHorizon, reference: &[DVector<f64>], cfg: &MpcConfig, prev_u: &[f64], trust: f64) -> Result<CondensedQp> {
    let n_steps = h.steps.len();
    crate::error::check_dim("reference window", n_steps + 1, reference.len())?;
    let m = prev_u.len();
    let nb = h.blocks.len();
    let nu = nb * m;
    let ns = h.states[0].len();
    let sc = cfg.output_scale;
    let mut p = DMatrix::<f64>::zeros(nu, nu);
    let mut q = DVector::<f64>::zeros(nu);
    let mut constant = 0.0;
    let mut sens = DMatrix::<f64>::zeros(ns, nu);
    let wy = y_penalty_weight(cfg);
    for k in 0..n_steps {
        let step = &h.steps[k];
        let mut next = &step.a * &sens;
        for (j, bj) in step.b.iter().enumerate() {
            if let Some(blk) = step_block(h.hold, nb, k, j) {
                let mut cols = next.columns_mut(blk * m, m);
                cols += bj;
            }
        }
        sens = next;
        let kk = k + 1;
        let w = if kk == n_steps { &cfg.q_f } else { &cfg.q };
        let g = &h.output_jacobians[kk] * &sens * sc;
        let y = &h.outputs[kk];
        let mut add = |i: usize, weight: f64, err: f64| {
            if weight == 0.0 {
                return;
            }
            let gi = g.row(i);
            p.ger(2.0 * weight, &gi.transpose(), &gi.transpose(), 1.0);
            q.axpy(2.0 * weight * err, &gi.transpose(), 1.0);
            constant += weight * err * err;
        };
        for i in 0..w.len() {
            add(i, w[i], sc * (y[i] - reference[kk][i]));
        }
        if let Some(b) = &cfg.y_bounds {
            for i in 0..y.len() {
                if y[i] > b.hi[i] {
                    add(i, wy, sc * (y[i] - b.hi[i]));
                } else if y[i] < b.lo[i] {
                    add(i, wy, sc * (y[i] - b.lo[i]));
                }
            }
        }
    }
    // Command changes: (U_b - U_{b-1}) with U_{-1} = prev_u.
    for b in 0..nb {
        for i in 0..m {
            let r = cfg.r_delta[i];
            let cur = b * m + i;
            let before = if b == 0 { prev_u[i] } else { h.blocks[b - 1][i] };
            let diff = h.blocks[b][i] - before;
            p[(cur, cur)] += 2.0 * r;
            q[cur] += 2.0 * r * diff;
            if b > 0 {
                let prv = (b - 1) * m + i;
                p[(prv, prv)] += 2.0 * r;
                p[(cur, prv)] -= 2.0 * r;
                p[(prv, cur)] -= 2.0 * r;
                q[prv] -= 2.0 * r * diff;
            }
            constant += r * diff * diff;
        }
    }
    let lo = DVector::from_fn(nu, |c, _| (cfg.u_min[c % m] - h.blocks[c / m][c % m]).max(-trust).min(0.0));
    let hi = DVector::from_fn(nu, |c, _| (cfg.u_max[c % m] - h.blocks[c / m][c % m]).min(trust).max(0.0));
    let p = (&p + p.transpose()) * 0.5;
    Ok(CondensedQp { p, q, lo, hi, constant })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpcStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Command per actuation block.
    pub u_ref: Vec<Vec<f64>>,
    /// Predicted reduced states `s_0..s_N` under `u_ref`.
    pub predicted_z: Vec<DVector<f64>>,
    pub predicted_y: Vec<DVector<f64>>,
    pub cost: f64,
    pub solve_ms: f64,
    pub qp_iterations: usize,
    pub scp_iterations: usize,
    /// Whether the last SCP step fell below `scp_tol`.
    pub converged: bool,
    pub kkt_residuals: Vec<f64>,
    pub status: MpcStatus,
}

/// Solves the tracking QP on `h`, returning the new blocks and the QP result.
pub fn solve_tracking_qp(h: &AffineHorizon, reference: &[DVector<f64>], cfg: &MpcConfig, prev_u: &[f64], trust: f64) -> Result<(Vec<Vec<f64>>, qp::QpSolution)> {
    let c = condense(h, reference, cfg, prev_u, trust)?;
    let m = prev_u.len();
    let sol = qp::solve_box_qp(&c.p, &c.q, &c.lo, &c.hi, &DVector::zeros(c.q.len()), cfg.qp_tol, cfg.qp_max_iter);
    let blocks = h.blocks.iter().enumerate().map(|(b, u)| (0..m).map(|i| u[i] + sol.x[b * m + i]).collect()).collect();
    Ok((blocks, sol))
}

/// Warm-start memory carried between MPC calls.
#[derive(Debug, Clone, Default)]
pub struct MpcState {
    pub previous: Option<Vec<Vec<f64>>>,
    pub last_applied: Option<Vec<f64>>,
    /// Ignore `previous` and start from the held last command.
    pub cold: bool,
}

/// Runs the SCP loop from the measured `window` and returns the plan; its
/// first block is the command to apply for the next actuation period.
pub fn mpc_step(model: &dyn ReducedModel, window: &[Observation], reference: &[DVector<f64>], cfg: &MpcConfig, state: &mut MpcState) -> Result<MpcSolution> {
    let start = Instant::now();
    let m = model.n_inputs();
    cfg.validate(model.n_obs(), m)?;
    crate::error::check_dim("reference window", cfg.horizon + 1, reference.len())?;
    let s0 = model.encode(window)?;
    let history: Vec<Vec<f64>> = window.iter().rev().skip(1).take(model.input_lags().saturating_sub(1).max(1)).map(|o| o.u_ref.clone()).collect();
    let prev_u = state.last_applied.clone().or_else(|| window.len().checked_sub(2).map(|i| window[i].u_ref.clone())).unwrap_or_else(|| vec![0.0; m]);
    let nb = cfg.n_blocks();
    let clamp = |u: &[f64]| -> Vec<f64> { (0..m).map(|i| u[i].clamp(cfg.u_min[i], cfg.u_max[i])).collect() };
    let mut blocks: Vec<Vec<f64>> = match (&state.previous, state.cold) {
        (Some(prev), false) if prev.len() == nb => {
            let mut b: Vec<Vec<f64>> = prev[1..].to_vec();
            b.push(prev[nb - 1].clone());
            b.iter().map(|u| clamp(u)).collect()
        }
        _ => vec![clamp(&prev_u); nb],
    };
    let range = cfg.input_range();
    let mut trust = cfg.initial_trust();
    let mut qp_iterations = 0;
    let mut kkt = Vec::new();
    let mut any_max_iter = false;
    let mut converged = false;
    let mut rounds = 0;
    let mut horizon = linearize_reduced(model, &s0, &blocks, &history, cfg.horizon, cfg.hold(), &cfg.perf_rows)?;
    let mut cost = tracking_cost(&horizon.outputs, reference, &blocks, &prev_u, cfg);
    while rounds < cfg.scp_iters {
        rounds += 1;
        let (cand, sol) = solve_tracking_qp(&horizon, reference, cfg, &prev_u, trust)?;
        qp_iterations += sol.iterations;
        kkt.push(sol.kkt_residual);
        any_max_iter |= sol.status == QpStatus::MaxIter;
        let step = sol.x.amax();
        if step <= cfg.scp_tol {
            converged = true;
            break;
        }
        let accepted = match rollout_outputs(model, &s0, &cand, &history, cfg) {
            Ok(out) => {
                let c = tracking_cost(&out, reference, &cand, &prev_u, cfg);
                (c <= cost + 1e-12 * cost.abs().max(1.0)).then_some(c)
            }
            Err(_) => None,
        };
        match accepted {
            Some(c) => {
                blocks = cand;
                cost = c;
                trust = (2.0 * trust).min(range);
                horizon = linearize_reduced(model, &s0, &blocks, &history, cfg.horizon, cfg.hold(), &cfg.perf_rows)?;
            }
            None => {
                trust *= 0.5;
                if trust < cfg.scp_tol {
                    break;
                }
            }
        }
    }
    let status = if cfg.y_bounds.is_some() && output_violation(&horizon.outputs, cfg) > 1e-4 {
        MpcStatus::Infeasible
    } else if any_max_iter {
        MpcStatus::MaxIter
    } else {
        MpcStatus::Optimal
    };
    state.previous = Some(blocks.clone());
    state.last_applied = Some(blocks[0].clone());
    Ok(MpcSolution {
        u_ref: blocks,
        predicted_y: horizon.outputs,
        predicted_z: horizon.states,
        cost,
        solve_ms: start.elapsed().as_secs_f64() * 1e3,
        qp_iterations,
        scp_iterations: rounds,
        converged,
        kkt_residuals: kkt,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar linear model `s' = a s + b u` observed directly.
    struct Scalar {
        a: f64,
        b: f64,
    }

    impl ReducedModel for Scalar {
        fn kind(&self) -> &'static str {
            "scalar"
        }
        fn dt(&self) -> f64 {
            0.02
        }
        fn n_obs(&self) -> usize {
            1
        }
        fn n_inputs(&self) -> usize {
            1
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn history_len(&self) -> usize {
            1
        }
        fn input_lags(&self) -> usize {
            1
        }
        fn divergence_bound(&self) -> f64 {
            1e6
        }
        fn encode(&self, window: &[Observation]) -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![window.last().unwrap().y[0]]))
        }
        fn step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> DVector<f64> {
            DVector::from_vec(vec![self.a * s[0] + self.b * inputs[0][0]])
        }
        fn linearize_step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> StepLinearization {
            StepLinearization { next: self.step(s, inputs), a: DMatrix::from_element(1, 1, self.a), b: vec![DMatrix::from_element(1, 1, self.b)] }
        }
        fn decode(&self, s: &DVector<f64>) -> DVector<f64> {
            s.clone()
        }
        fn decode_jacobian(&self, _s: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
    }

    fn scalar_cfg(n: usize) -> MpcConfig {
        MpcConfig {
            horizon: n,
            actuation_period: 0.02,
            q: vec![3.0],
            q_f: vec![5.0],
            r_delta: vec![0.7],
            u_min: vec![-100.0],
            u_max: vec![100.0],
            perf_rows: vec![0],
            output_scale: 1.0,
            trust_region: Some(1e3),
            ..MpcConfig::default()
        }
    }

    fn obs(y: f64, u_ref: f64) -> Observation {
        Observation { t: 0.0, y: vec![y], u: vec![u_ref], u_ref: vec![u_ref] }
    }

    #[test]
    fn single_step_closed_form() {
        let (a, b, s0, r, up) = (0.9, 0.4, 0.3, 1.1, -0.2);
        let cfg = scalar_cfg(1);
        let model = Scalar { a, b };
        let h = linearize_reduced(&model, &DVector::from_vec(vec![s0]), &[vec![up]], &[], 1, 1, &[0]).unwrap();
        let reference = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![r])];
        let (blocks, sol) = solve_tracking_qp(&h, &reference, &cfg, &[up], 1e3).unwrap();
        // min qf (a s0 + b u - r)^2 + rd (u - up)^2
        let expected = (cfg.q_f[0] * b * (r - a * s0) + cfg.r_delta[0] * up) / (cfg.q_f[0] * b * b + cfg.r_delta[0]);
        assert!((blocks[0][0] - expected).abs() < 1e-8, "{} vs {expected}", blocks[0][0]);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn equilibrium_reference_gives_zero_input() {
        let model = Scalar { a: 0.95, b: 0.3 };
        let cfg = scalar_cfg(10);
        let reference = vec![DVector::from_vec(vec![0.0]); 11];
        let mut st = MpcState::default();
        let sol = mpc_step(&model, &[obs(0.0, 0.0)], &reference, &cfg, &mut st).unwrap();
        assert!(sol.u_ref.iter().all(|u| u[0] == 0.0));
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn far_reference_clamps_to_bound() {
        let model = Scalar { a: 0.95, b: 0.3 };
        let cfg = MpcConfig { u_min: vec![-1.0], u_max: vec![1.0], trust_region: None, scp_iters: 20, ..scalar_cfg(5) };
        let reference = vec![DVector::from_vec(vec![100.0]); 6];
        let sol = mpc_step(&model, &[obs(0.0, 0.0)], &reference, &cfg, &mut MpcState::default()).unwrap();
        assert!(sol.u_ref.iter().all(|u| u[0] == 1.0), "{:?}", sol.u_ref);
    }

    #[test]
    fn linear_model_affine_rollout_is_exact() {
        let model = Scalar { a: 0.97, b: -0.5 };
        let cfg = MpcConfig { actuation_period: 0.04, ..scalar_cfg(6) };
        let s0 = DVector::from_vec(vec![0.2]);
        let blocks = vec![vec![0.1], vec![-0.3], vec![0.5]];
        let h = linearize_reduced(&model, &s0, &blocks, &[], 6, 2, &[0]).unwrap();
        let out = rollout_outputs(&model, &s0, &blocks, &[], &cfg).unwrap();
        for (a, b) in h.outputs.iter().zip(&out) {
            assert!((a - b).amax() < 1e-12);
        }
        // The QP's predicted objective matches the true cost of its solution.
        let reference: Vec<_> = (0..=6).map(|k| DVector::from_vec(vec![0.1 * k as f64])).collect();
        let c = condense(&h, &reference, &cfg, &[0.0], 1e3).unwrap();
        let sol = qp::solve_box_qp(&c.p, &c.q, &c.lo, &c.hi, &DVector::zeros(3), 1e-12, 10_000);
        let new_blocks: Vec<Vec<f64>> = (0..3).map(|b| vec![blocks[b][0] + sol.x[b]]).collect();
        let true_cost = tracking_cost(&rollout_outputs(&model, &s0, &new_blocks, &[], &cfg).unwrap(), &reference, &new_blocks, &[0.0], &cfg);
        assert!((sol.objective + c.constant - true_cost).abs() < 1e-9 * true_cost.max(1.0));
    }

    #[test]
    fn repeated_calls_are_deterministic() {
        let model = Scalar { a: 0.9, b: 0.2 };
        let cfg = scalar_cfg(8);
        let reference = vec![DVector::from_vec(vec![0.5]); 9];
        let a = mpc_step(&model, &[obs(0.1, 0.0)], &reference, &cfg, &mut MpcState::default()).unwrap();
        let b = mpc_step(&model, &[obs(0.1, 0.0)], &reference, &cfg, &mut MpcState::default()).unwrap();
        assert_eq!(a.u_ref, b.u_ref);
    }

    #[test]
    fn soft_output_bound_limits_overshoot() {
        let model = Scalar { a: 0.9, b: 0.2 };
        let reference = vec![DVector::from_vec(vec![1.0]); 9];
        let free = mpc_step(&model, &[obs(0.0, 0.0)], &reference, &MpcConfig { scp_iters: 10, ..scalar_cfg(8) }, &mut MpcState::default()).unwrap();
        let bounded_cfg = MpcConfig { scp_iters: 10, y_bounds: Some(OutputBounds { lo: vec![-1.0], hi: vec![0.5] }), ..scalar_cfg(8) };
        let bounded = mpc_step(&model, &[obs(0.0, 0.0)], &reference, &bounded_cfg, &mut MpcState::default()).unwrap();
        let peak = |s: &MpcSolution| s.predicted_y.iter().map(|y| y[0]).fold(f64::MIN, f64::max);
        assert!(peak(&free) > 0.9);
        assert!(peak(&bounded) < 0.52, "{}", peak(&bounded));
    }
}
