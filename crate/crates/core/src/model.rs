//! Common interface of the reduced models used by the open-loop benchmark and
//! the MPC, plus RK4 helpers with forward sensitivities.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::plant::Observation;

/// One discretized step linearized around `(s, inputs)`.
///
/// `next ~ next_bar + a (s - s_bar) + sum_j b[j] (u_j - u_bar_j)` with the
/// input lags newest first.
#[derive(Debug, Clone)]
pub struct StepLinearization {
    pub next: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
}

/// Discrete-time view of a reduced model at its sample period.
pub trait ReducedModel: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Sample period of `step`.
    fn dt(&self) -> f64;
    fn n_obs(&self) -> usize;
    fn n_inputs(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Observations needed by [`ReducedModel::encode`].
    fn history_len(&self) -> usize;
    /// Number of commanded inputs (current plus past) entering one step.
    fn input_lags(&self) -> usize;
    /// State norm beyond which a rollout counts as diverged.
    fn divergence_bound(&self) -> f64;
    /// Reduced state from the most recent `history_len` observations.
    fn encode(&self, window: &[Observation]) -> Result<DVector<f64>>;
    /// Advances one sample with `inputs[j]` the command `j` steps back.
    fn step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> DVector<f64>;
    fn linearize_step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> StepLinearization;
    /// Observation vector in physical units.
    fn decode(&self, s: &DVector<f64>) -> DVector<f64>;
    /// `n_obs x state_dim` Jacobian of [`ReducedModel::decode`].
    fn decode_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64>;
}

/// Open-loop rollout from the measured window under `commands` (one per step).
///
/// Returns the decoded observations at steps `0..=commands.len()`. Input
/// lags older than the first command come from the window's `u_ref` record.
pub fn rollout(model: &dyn ReducedModel, window: &[Observation], commands: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut s = model.encode(window)?;
    let lags = model.input_lags();
    let mut history: Vec<Vec<f64>> = window.iter().rev().skip(1).take(lags.saturating_sub(1)).map(|o| o.u_ref.clone()).collect();
    while history.len() + 1 < lags {
        history.push(history.last().cloned().unwrap_or_else(|| vec![0.0; model.n_inputs()]));
    }
    let bound = model.divergence_bound();
    let mut out = Vec::with_capacity(commands.len() + 1);
    out.push(model.decode(&s));
    for (k, u) in commands.iter().enumerate() {
        let mut inputs = Vec::with_capacity(lags);
        inputs.push(u.clone());
        inputs.extend(history.iter().take(lags - 1).cloned());
        s = model.step(&s, &inputs);
        if !s.iter().all(|v| v.is_finite()) || s.norm() > bound {
            return Err(Error::Divergence { step: k + 1 });
        }
        out.push(model.decode(&s));
        if lags > 1 {
            history.insert(0, u.clone());
            history.truncate(lags - 1);
        }
    }
    Ok(out)
}

/// RK4 for `z' = g(z) + r` with `r` held constant, split into `substeps`.
pub fn rk4_forced<G>(g: G, z: &DVector<f64>, r: &DVector<f64>, h: f64, substeps: usize) -> DVector<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let hs = h / substeps as f64;
    let f = |x: &DVector<f64>| g(x) + r;
    let mut x = z.clone();
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (hs / 2.0)));
        let k3 = f(&(&x + &k2 * (hs / 2.0)));
        let k4 = f(&(&x + &k3 * hs));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0);
    }
    x
}

/// [`rk4_forced`] with forward sensitivities: returns `(next, d next/d z,
/// d next/d r)`.
pub fn rk4_forced_sensitivity<G, J>(g: G, jac: J, z: &DVector<f64>, r: &DVector<f64>, h: f64, substeps: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>)
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let n = z.len();
    let hs = h / substeps as f64;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = z.clone();
    let mut sz = eye.clone();
    let mut sr = DMatrix::<f64>::zeros(n, n);
    for _ in 0..substeps {
        // Stage derivatives and their sensitivities w.r.t. the step's start state and r.
        let k1 = g(&x) + r;
        let j1 = jac(&x);
        let (d1z, d1r) = (&j1 * &sz, &j1 * &sr + &eye);
        let x2 = &x + &k1 * (hs / 2.0);
        let k2 = g(&x2) + r;
        let j2 = jac(&x2);
        let (d2z, d2r) = (&j2 * (&sz + &d1z * (hs / 2.0)), &j2 * (&sr + &d1r * (hs / 2.0)) + &eye);
        let x3 = &x + &k2 * (hs / 2.0);
        let k3 = g(&x3) + r;
        let j3 = jac(&x3);
        let (d3z, d3r) = (&j3 * (&sz + &d2z * (hs / 2.0)), &j3 * (&sr + &d2r * (hs / 2.0)) + &eye);
        let x4 = &x + &k3 * hs;
        let k4 = g(&x4) + r;
        let j4 = jac(&x4);
        let (d4z, d4r) = (&j4 * (&sz + &d3z * hs), &j4 * (&sr + &d3r * hs) + &eye);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0);
        sz += (d1z + d2z * 2.0 + d3z * 2.0 + d4z) * (hs / 6.0);
        sr += (d1r + d2r * 2.0 + d3r * 2.0 + d4r) * (hs / 6.0);
    }
    (x, sz, sr)
}

/// Substeps keeping `h * rho / substeps` inside the RK4 stability region with margin.
pub fn substeps_for(h: f64, spectral_radius: f64) -> usize {
    ((h * spectral_radius / 1.5).ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_matches_finite_differences() {
        let g = |x: &DVector<f64>| DVector::from_vec(vec![x[1], -4.0 * x[0].sin() - 0.3 * x[1] + x[0] * x[1]]);
        let jac = |x: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0 * x[0].cos() + x[1], -0.3 + x[0]]);
        let z = DVector::from_vec(vec![0.4, -0.2]);
        let r = DVector::from_vec(vec![0.1, -0.5]);
        let (next, sz, sr) = rk4_forced_sensitivity(g, jac, &z, &r, 0.05, 3);
        assert!((&next - rk4_forced(g, &z, &r, 0.05, 3)).amax() < 1e-15);
        let h = 1e-6;
        for j in 0..2 {
            let mut e = DVector::zeros(2);
            e[j] = h;
            let fz = (rk4_forced(g, &(&z + &e), &r, 0.05, 3) - rk4_forced(g, &(&z - &e), &r, 0.05, 3)) / (2.0 * h);
            let fr = (rk4_forced(g, &z, &(&r + &e), 0.05, 3) - rk4_forced(g, &z, &(&r - &e), 0.05, 3)) / (2.0 * h);
            assert!((fz - sz.column(j)).amax() < 1e-8);
            assert!((fr - sr.column(j)).amax() < 1e-8);
        }
    }
}
