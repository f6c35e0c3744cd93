//! Comparison models: observation-only SSM with a calibrated affine input map
//! (oSSM) and a delay-lifted polynomial EDMD model with inputs (Koopman).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cassm::fit_subspace;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Polynomial};
use crate::linalg;
use crate::model::{self, ReducedModel, StepLinearization};
use crate::pipeline::{self, Normalizer, Trajectory};
use crate::plant::Observation;
use crate::serde_mat;

pub const OSSM_VERSION: &str = "ossm/1";
pub const KOOPMAN_VERSION: &str = "koopman/1";

/// Largest lifted dimension the EDMD fit accepts.
pub const MAX_LIFTED_DIM: usize = 5000;

/// Stacks `[y(t); y(t - dt); ...]` from the last `lags` samples, newest first.
pub fn embed_observations(window: &[Observation], lags: usize) -> Result<DVector<f64>> {
    if window.len() < lags || lags == 0 {
        return Err(Error::Parameter(format!("need {lags} samples to embed observations, have {}", window.len())));
    }
    let last = window.len() - 1;
    let o = window[last].y.len();
    let mut v = Vec::with_capacity(lags * o);
    for k in 0..lags {
        v.extend_from_slice(&window[last - k].y);
    }
    Ok(DVector::from_vec(v))
}

fn obs_normalizer(trajs: &[Trajectory], groups: &[usize], lags: usize, data: &[DVector<f64>]) -> Result<Normalizer> {
    let eq = pipeline::estimate_equilibrium(trajs)?;
    let eq_obs = Observation { t: 0.0, y: eq.y, u: vec![], u_ref: vec![] };
    Ok(Normalizer::for_embedding(&eq_obs, groups, lags, data))
}

fn obs_windows(traj: &Trajectory, lags: usize, from: usize) -> Result<Vec<DVector<f64>>> {
    (from.max(lags - 1)..traj.len()).map(|k| embed_observations(&traj.samples[..=k], lags)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OssmConfig {
    pub n: usize,
    pub lags: usize,
    pub degree: usize,
    pub ridge: f64,
}

impl Default for OssmConfig {
    fn default() -> Self {
        OssmConfig { n: 5, lags: 2, degree: 2, ridge: 1e-6 }
    }
}

/// Observation-only SSM with affine control `zdot = R0 z + R_nl phi(z) + B_r u_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OssmModel {
    pub version: String,
    pub o: usize,
    pub m: usize,
    pub lags: usize,
    pub n: usize,
    pub dt: f64,
    pub substeps: usize,
    pub normalizer: Normalizer,
    #[serde(with = "serde_mat")]
    pub v: DMatrix<f64>,
    pub map: FeatureMap,
    #[serde(with = "serde_mat")]
    pub w_nl: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub r0: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub r_nl: DMatrix<f64>,
    /// Maps the physical command to the normalized reduced derivative.
    #[serde(with = "serde_mat")]
    pub b_r: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    pub max_train_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OssmFitReport {
    pub explained_variance: Vec<f64>,
    pub r_residual_rms: f64,
    pub calibration_residual_rms: f64,
}

/// Fits the autonomous part on decay data and `B_r` on separate controlled
/// calibration data.
pub fn fit_ossm(decays: &[Trajectory], calibration: &[Trajectory], obs_groups: &[usize], cfg: &OssmConfig) -> Result<(OssmModel, OssmFitReport)> {
    let first = decays.first().ok_or_else(|| Error::Parameter("no decay trajectories".into()))?;
    if calibration.is_empty() || calibration.iter().all(|t| t.len() < 5 + cfg.lags) {
        return Err(Error::Calibration("oSSM needs controlled calibration trajectories to fit B_r".into()));
    }
    let (o, m, dt) = (first.n_obs(), first.n_inputs(), first.dt);
    let lags = cfg.lags.max(1);
    let mut segments = Vec::new();
    for t in decays {
        let from = t.meta.release_index.unwrap_or(0) + lags - 1;
        segments.push(obs_windows(t, lags, from)?);
    }
    let all: Vec<DVector<f64>> = segments.iter().flatten().cloned().collect();
    let normalizer = obs_normalizer(decays, obs_groups, lags, &all)?;
    let x = linalg::rows_to_matrix(&all.iter().map(|v| normalizer.normalize(v)).collect::<Vec<_>>());
    let (v, explained_variance) = fit_subspace(&x, cfg.n)?;
    let map = FeatureMap::polynomial(cfg.n, 2, cfg.degree.max(2))?;
    let w_nl = crate::cassm::fit_parameterization(&x, &v, &map, cfg.ridge)?;

    let reduce = |seg: &[DVector<f64>]| -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let z: Vec<DVector<f64>> = seg.iter().map(|x| v.tr_mul(&normalizer.normalize(x))).collect();
        let zd = pipeline::estimate_derivatives(&z, dt)?;
        let len = z.len();
        Ok((z[2..len - 2].to_vec(), zd[2..len - 2].to_vec()))
    };
    let mut z_rows = Vec::new();
    let mut zd_rows = Vec::new();
    for seg in &segments {
        let (z, zd) = reduce(seg)?;
        z_rows.extend(z);
        zd_rows.extend(zd);
    }
    let (r0, r_nl, _) = crate::cassm::fit_reduced_dynamics(&linalg::rows_to_matrix(&z_rows), &linalg::rows_to_matrix(&zd_rows), &map, cfg.ridge)?;
    let field = |z: &DVector<f64>| &r0 * z + &r_nl * map.eval(z.as_slice());
    let mut auto_err = Vec::new();
    for (z, zd) in z_rows.iter().zip(&zd_rows) {
        auto_err.extend((field(z) - zd).iter().cloned());
    }

    // B_r: residual derivative on the calibration data regressed on the command.
    let mut res_rows = Vec::new();
    let mut u_rows = Vec::new();
    for t in calibration {
        let seg = obs_windows(t, lags, 0)?;
        if seg.len() < 5 {
            continue;
        }
        let (z, zd) = reduce(&seg)?;
        for (i, (zi, zdi)) in z.iter().zip(&zd).enumerate() {
            // Window i + 2 ends at sample i + 2 + lags - 1.
            let k = i + 2 + lags - 1;
            res_rows.push(zdi - field(zi));
            u_rows.push(DVector::from_column_slice(&t.samples[k].u_ref));
        }
    }
    let res = linalg::rows_to_matrix(&res_rows);
    let um = linalg::rows_to_matrix(&u_rows);
    let b_r = linalg::ridge_solve(&um, &res, cfg.ridge)?.transpose();
    let cal_err = &res - &um * b_r.transpose();

    let max_train_norm = (&x * &v).row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let j0 = &r0 + &r_nl * map.jacobian(&vec![0.0; cfg.n]);
    let model = OssmModel {
        version: OSSM_VERSION.into(),
        o,
        m,
        lags,
        n: cfg.n,
        dt,
        substeps: model::substeps_for(dt, linalg::spectral_radius(&j0)),
        normalizer,
        v,
        map,
        w_nl,
        r0,
        r_nl,
        b_r,
        explained_variance: explained_variance.clone(),
        max_train_norm,
    };
    let report = OssmFitReport { explained_variance, r_residual_rms: linalg::rms(&auto_err), calibration_residual_rms: linalg::rms(cal_err.as_slice()) };
    Ok((model, report))
}

impl OssmModel {
    fn field(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.r0 * z + &self.r_nl * self.map.eval(z.as_slice())
    }

    fn field_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.r0 + &self.r_nl * self.map.jacobian(z.as_slice())
    }

    pub fn predict(&self, window: &[Observation], commands: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        model::rollout(self, window, commands)
    }
}

impl ReducedModel for OssmModel {
    fn kind(&self) -> &'static str {
        "ossm"
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn n_obs(&self) -> usize {
        self.o
    }

    fn n_inputs(&self) -> usize {
        self.m
    }

    fn state_dim(&self) -> usize {
        self.n
    }

    fn history_len(&self) -> usize {
        self.lags
    }

    fn input_lags(&self) -> usize {
        1
    }

    fn divergence_bound(&self) -> f64 {
        1e3 * self.max_train_norm
    }

    fn encode(&self, window: &[Observation]) -> Result<DVector<f64>> {
        Ok(self.v.tr_mul(&self.normalizer.normalize(&embed_observations(window, self.lags)?)))
    }

    fn step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> DVector<f64> {
        let r = &self.b_r * DVector::from_column_slice(&inputs[0]);
        model::rk4_forced(|z| self.field(z), s, &r, self.dt, self.substeps)
    }

    fn linearize_step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> StepLinearization {
        let r = &self.b_r * DVector::from_column_slice(&inputs[0]);
        let (next, a, sr) = model::rk4_forced_sensitivity(|z| self.field(z), |z| self.field_jacobian(z), s, &r, self.dt, self.substeps);
        StepLinearization { next, a, b: vec![sr * &self.b_r] }
    }

    fn decode(&self, s: &DVector<f64>) -> DVector<f64> {
        let x = &self.v * s + &self.w_nl * self.map.eval(s.as_slice());
        DVector::from_fn(self.o, |i, _| x[i] * self.normalizer.scale[i] + self.normalizer.center[i])
    }

    fn decode_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let full = &self.v + &self.w_nl * self.map.jacobian(s.as_slice());
        DMatrix::from_fn(self.o, self.n, |i, j| full[(i, j)] * self.normalizer.scale[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KoopmanConfig {
    /// Highest monomial degree of the lifting (linear terms always included).
    pub degree: usize,
    /// Number of delayed observation copies in the lifted base vector.
    pub delays: usize,
    pub ridge: f64,
}

impl Default for KoopmanConfig {
    fn default() -> Self {
        KoopmanConfig { degree: 2, delays: 1, ridge: 1e-6 }
    }
}

/// Discrete EDMD model `psi' = A psi + B u_ref` on lifted delay coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub version: String,
    pub o: usize,
    pub m: usize,
    pub degree: usize,
    pub delays: usize,
    pub dt: f64,
    pub normalizer: Normalizer,
    /// Nonlinear lifting terms; `None` for a purely linear lifting.
    pub lift: Option<FeatureMap>,
    #[serde(with = "serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub b: DMatrix<f64>,
    pub spectral_radius: f64,
    pub max_train_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanFitReport {
    pub lifted_dim: usize,
    pub spectral_radius: f64,
    pub one_step_residual_rms: f64,
}

impl KoopmanModel {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Lifted vector of a normalized delay stack: `[xi; monomials(xi)]`.
    pub fn lift(&self, xi: &DVector<f64>) -> DVector<f64> {
        match &self.lift {
            None => xi.clone(),
            Some(map) => {
                let nl = map.eval(xi.as_slice());
                let mut v = DVector::zeros(xi.len() + nl.len());
                v.rows_mut(0, xi.len()).copy_from(xi);
                v.rows_mut(xi.len(), nl.len()).copy_from(&nl);
                v
            }
        }
    }

    pub fn predict(&self, window: &[Observation], commands: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        model::rollout(self, window, commands)
    }
}

/// Fits the EDMD operators on one-step pairs from uniformly sampled
/// trajectories (commanded input held over each step).
pub fn fit_koopman(trajs: &[Trajectory], obs_groups: &[usize], cfg: &KoopmanConfig) -> Result<(KoopmanModel, KoopmanFitReport)> {
    let first = trajs.first().ok_or_else(|| Error::Parameter("no trajectories for the Koopman fit".into()))?;
    let (o, m, dt) = (first.n_obs(), first.n_inputs(), first.dt);
    let lags = cfg.delays + 1;
    let base = o * lags;
    let lift = if cfg.degree >= 2 {
        let count = crate::features::monomial_count(base, 2, cfg.degree).unwrap_or(usize::MAX);
        if base.saturating_add(count) > MAX_LIFTED_DIM {
            return Err(Error::Refused(format!("lifted dimension {} exceeds {MAX_LIFTED_DIM}", base.saturating_add(count))));
        }
        Some(FeatureMap::from_kind(crate::features::FeatureKind::Polynomial(Polynomial::new(base, 2, cfg.degree)?), false))
    } else {
        None
    };
    let windows: Vec<Vec<DVector<f64>>> = trajs.iter().map(|t| obs_windows(t, lags, 0)).collect::<Result<_>>()?;
    let all: Vec<DVector<f64>> = windows.iter().flatten().cloned().collect();
    let normalizer = obs_normalizer(trajs, obs_groups, lags, &all)?;
    let mut model = KoopmanModel {
        version: KOOPMAN_VERSION.into(),
        o,
        m,
        degree: cfg.degree,
        delays: cfg.delays,
        dt,
        normalizer,
        lift,
        a: DMatrix::zeros(0, 0),
        b: DMatrix::zeros(0, m),
        spectral_radius: 0.0,
        max_train_norm: 0.0,
    };
    let mut now = Vec::new();
    let mut next = Vec::new();
    for (t, w) in trajs.iter().zip(&windows) {
        let psi: Vec<DVector<f64>> = w.iter().map(|x| model.lift(&model.normalizer.normalize(x))).collect();
        for i in 0..psi.len().saturating_sub(1) {
            let k = i + lags - 1;
            let mut row = DVector::zeros(psi[i].len() + m);
            row.rows_mut(0, psi[i].len()).copy_from(&psi[i]);
            row.rows_mut(psi[i].len(), m).copy_from(&DVector::from_column_slice(&t.samples[k].u_ref));
            now.push(row);
            next.push(psi[i + 1].clone());
        }
    }
    if now.is_empty() {
        return Err(Error::Parameter("no one-step pairs for the Koopman fit".into()));
    }
    let xm = linalg::rows_to_matrix(&now);
    let ym = linalg::rows_to_matrix(&next);
    let coef = linalg::ridge_solve(&xm, &ym, cfg.ridge)?;
    let nk = ym.ncols();
    model.a = coef.rows(0, nk).transpose();
    model.b = coef.rows(nk, m).transpose();
    model.spectral_radius = linalg::spectral_radius(&model.a);
    model.max_train_norm = ym.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if model.spectral_radius > 1.0 + 1e-6 {
        log::warn!("Koopman operator unstable: spectral radius {:.6}", model.spectral_radius);
    }
    log::info!("Koopman lifted dimension {nk}");
    let resid = &ym - &xm * &coef;
    let report = KoopmanFitReport { lifted_dim: nk, spectral_radius: model.spectral_radius, one_step_residual_rms: linalg::rms(resid.as_slice()) };
    Ok((model, report))
}

impl ReducedModel for KoopmanModel {
    fn kind(&self) -> &'static str {
        "koopman"
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn n_obs(&self) -> usize {
        self.o
    }

    fn n_inputs(&self) -> usize {
        self.m
    }

    fn state_dim(&self) -> usize {
        self.lifted_dim()
    }

    fn history_len(&self) -> usize {
        self.delays + 1
    }

    fn input_lags(&self) -> usize {
        1
    }

    fn divergence_bound(&self) -> f64 {
        1e3 * self.max_train_norm
    }

    fn encode(&self, window: &[Observation]) -> Result<DVector<f64>> {
        let xi = self.normalizer.normalize(&embed_observations(window, self.delays + 1)?);
        Ok(self.lift(&xi))
    }

    fn step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> DVector<f64> {
        &self.a * s + &self.b * DVector::from_column_slice(&inputs[0])
    }

    fn linearize_step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> StepLinearization {
        StepLinearization { next: self.step(s, inputs), a: self.a.clone(), b: vec![self.b.clone()] }
    }

    fn decode(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.o, |i, _| s[i] * self.normalizer.scale[i] + self.normalizer.center[i])
    }

    fn decode_jacobian(&self, _s: &DVector<f64>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.o, self.lifted_dim());
        for i in 0..self.o {
            c[(i, i)] = self.normalizer.scale[i];
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TrajectoryMeta;

    fn linear_data(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64, n: usize, seed: u64) -> Trajectory {
        // Exact zero-order-hold discretization of a linear system.
        let nx = a.nrows();
        let mut aug = DMatrix::zeros(nx + b.ncols(), nx + b.ncols());
        aug.view_mut((0, 0), (nx, nx)).copy_from(&(a * dt));
        aug.view_mut((0, nx), (nx, b.ncols())).copy_from(&(b * dt));
        let e = aug.exp();
        let (ad, bd) = (e.view((0, 0), (nx, nx)).into_owned(), e.view((0, nx), (nx, b.ncols())).into_owned());
        let mut x = DVector::zeros(nx);
        let mut samples = Vec::new();
        for k in 0..n {
            let tk = k as f64 * dt;
            let u = vec![(tk * (1.1 + seed as f64)).sin() + 0.5 * (tk * (5.3 + 0.7 * seed as f64)).cos() - 0.5; b.ncols()];
            samples.push(Observation { t: k as f64 * dt, y: x.as_slice().to_vec(), u: u.clone(), u_ref: u.clone() });
            x = &ad * &x + &bd * DVector::from_column_slice(&u);
        }
        Trajectory { samples, dt, meta: TrajectoryMeta::default() }
    }

    #[test]
    fn degree_one_edmd_recovers_exact_discretization() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -4.0, -0.4, 0.5, 0.0, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 2.0]);
        let dt = 0.02;
        let trajs: Vec<Trajectory> = (0..4).map(|s| linear_data(&a, &b, dt, 300, s)).collect();
        let cfg = KoopmanConfig { degree: 1, delays: 0, ridge: 0.0 };
        let (km, rep) = fit_koopman(&trajs, &[3], &cfg).unwrap();
        assert_eq!(rep.lifted_dim, 3);
        // The operator acts on scaled coordinates; undo the scaling to compare.
        let s = &km.normalizer.scale;
        let a_phys = DMatrix::from_fn(3, 3, |i, j| km.a[(i, j)] * s[i] / s[j]);
        let expected = (&a * dt).exp();
        assert!((a_phys - expected).amax() < 1e-4);
    }

    #[test]
    fn lifted_dimension_guard() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut t = linear_data(&a, &b, 0.02, 20, 1);
        for s in &mut t.samples {
            s.y = vec![s.y[0]; 40];
        }
        let cfg = KoopmanConfig { degree: 3, delays: 1, ridge: 1e-6 };
        assert!(matches!(fit_koopman(&[t], &[40], &cfg), Err(Error::Refused(_))));
    }

    #[test]
    fn ossm_refuses_without_calibration() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.4]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let t = linear_data(&a, &b, 0.02, 100, 2);
        let cfg = OssmConfig { n: 2, lags: 1, ..OssmConfig::default() };
        assert!(matches!(fit_ossm(&[t], &[], &[2], &cfg), Err(Error::Calibration(_))));
    }
}
