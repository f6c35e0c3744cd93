//! Control-augmented SSM identification: subspace, graph-style
//! parameterization, reduced dynamics, actuator matrix, control reference and
//! diagnostics.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::model::{self, ReducedModel, StepLinearization};
use crate::pipeline::{self, Normalizer, Trajectory};
use crate::plant::{Linearization, Observation};
use crate::serde_mat;

pub const MODEL_VERSION: &str = "cassm-model/1";

/// Feature family used for a fitted nonlinear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureConfig {
    Polynomial { degree_lo: usize, degree_hi: usize },
    Rff { features: usize, length_scale: f64, seed: u64 },
}

impl FeatureConfig {
    /// Builds the map over `n` inputs; RFF maps are centered so they vanish at the origin.
    pub fn build(&self, n: usize) -> Result<FeatureMap> {
        match *self {
            FeatureConfig::Polynomial { degree_lo, degree_hi } => FeatureMap::polynomial(n, degree_lo, degree_hi),
            FeatureConfig::Rff { features, length_scale, seed } => FeatureMap::rff(n, features, length_scale, seed, true),
        }
    }

    pub fn with_length_scale(&self, ell: f64) -> Self {
        match self.clone() {
            FeatureConfig::Rff { features, seed, .. } => FeatureConfig::Rff { features, length_scale: ell, seed },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    Exact,
    #[default]
    Approx,
}

/// Actuator rows entering the least-squares identification of the actuator matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRows {
    #[default]
    Lag0,
    AllLags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub q_noise: f64,
    pub r_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CassmConfig {
    pub n: usize,
    pub lags: usize,
    pub w_features: FeatureConfig,
    pub r_features: FeatureConfig,
    pub ridge: f64,
    pub ref_mode: RefMode,
    pub lambda_rows: LambdaRows,
    pub smoothing: Option<Smoothing>,
    /// Time after release (s) discarded so fast transients have decayed onto the manifold.
    pub settle_time: f64,
}

impl Default for CassmConfig {
    fn default() -> Self {
        CassmConfig {
            n: 7,
            lags: 2,
            w_features: FeatureConfig::Rff { features: 512, length_scale: 0.5, seed: 11 },
            r_features: FeatureConfig::Rff { features: 512, length_scale: 0.5, seed: 12 },
            ridge: 1e-6,
            ref_mode: RefMode::Approx,
            lambda_rows: LambdaRows::Lag0,
            smoothing: None,
            settle_time: 0.3,
        }
    }
}

/// Fitted caSSM. All matrices act on normalized embedded coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub version: String,
    pub o: usize,
    pub m: usize,
    pub lags: usize,
    pub n: usize,
    pub dt: f64,
    pub substeps: usize,
    pub normalizer: Normalizer,
    /// `L(o+m) x n`, orthonormal columns.
    #[serde(with = "serde_mat")]
    pub v: DMatrix<f64>,
    pub w_map: FeatureMap,
    #[serde(with = "serde_mat")]
    pub w_nl: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub r0: DMatrix<f64>,
    pub r_map: FeatureMap,
    #[serde(with = "serde_mat")]
    pub theta: DMatrix<f64>,
    /// Origin Jacobian of the fitted vector field.
    #[serde(with = "serde_mat")]
    pub j0: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub lambda: DMatrix<f64>,
    pub ref_mode: RefMode,
    pub explained_variance: Vec<f64>,
    pub max_train_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CassmFitReport {
    pub explained_variance: Vec<f64>,
    pub samples: usize,
    /// RMS of the off-subspace residual after the nonlinear parameterization (normalized units).
    pub w_residual_rms: f64,
    /// RMS error of the reduced vector field on training derivatives.
    pub r_residual_rms: f64,
    pub j0_eigenvalues: Vec<[f64; 2]>,
    pub lambda_eigenvalues: Vec<[f64; 2]>,
}

pub fn complex_pairs(ev: &[Complex<f64>]) -> Vec<[f64; 2]> {
    ev.iter().map(|c| [c.re, c.im]).collect()
}

/// Top-`n` principal directions of the rows of `x` (uncentered: the data is
/// already expressed relative to the equilibrium) and the explained-variance
/// ratio of every retained direction.
pub fn fit_subspace(x: &DMatrix<f64>, n: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let dim = x.ncols();
    if n == 0 || n > dim {
        return Err(Error::Parameter(format!("subspace dimension {n} outside 1..={dim}")));
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sv.first().cloned().unwrap_or(0.0);
    let tol = smax * (x.nrows().max(dim) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if n > rank {
        return Err(Error::Rank { requested: n, rank, singular_values: sv });
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut v = DMatrix::zeros(dim, n);
    for (c, &i) in order.iter().take(n).enumerate() {
        let mut col = v_t.row(i).transpose();
        // Deterministic sign: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
        }
        v.set_column(c, &col);
    }
    let explained = sv.iter().take(n).map(|s| s * s / total).collect();
    Ok((v, explained))
}

/// Ridge fit of the off-subspace residual `x - V V^T x` on features of
/// `z = V^T x`, projected so that `V^T W_nl = 0`.
pub fn fit_parameterization(x: &DMatrix<f64>, v: &DMatrix<f64>, map: &FeatureMap, ridge: f64) -> Result<DMatrix<f64>> {
    let z = x * v;
    let residual = x - &z * v.transpose();
    let phi = map.eval_rows(&z);
    let coef = linalg::ridge_solve(&phi, &residual, ridge)?;
    let w = coef.transpose();
    Ok(&w - v * (v.transpose() * &w))
}

/// Joint ridge fit of `zdot = R0 z + Theta phi(z)`; returns `(R0, Theta, J0)`
/// with `J0 = R0 + Theta Dphi(0)`.
pub fn fit_reduced_dynamics(z: &DMatrix<f64>, zdot: &DMatrix<f64>, map: &FeatureMap, ridge: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = z.ncols();
    let phi = map.eval_rows(z);
    let mut feats = DMatrix::zeros(z.nrows(), n + phi.ncols());
    feats.columns_mut(0, n).copy_from(z);
    feats.columns_mut(n, phi.ncols()).copy_from(&phi);
    let coef = linalg::ridge_solve(&feats, zdot, ridge)?;
    let r0 = coef.rows(0, n).transpose();
    let theta = coef.rows(n, phi.ncols()).transpose();
    let j0 = &r0 + &theta * map.jacobian(&vec![0.0; n]);
    let abscissa = linalg::spectral_abscissa(&j0);
    if abscissa > 0.0 {
        log::warn!("fitted reduced dynamics unstable at the origin: {:?}", linalg::sorted_eigenvalues(&j0));
    }
    Ok((r0, theta, j0))
}

/// Rows of the actuator block at lag `k` in the embedded layout.
fn actuator_rows(o: usize, m: usize, k: usize) -> std::ops::Range<usize> {
    let start = k * (o + m) + o;
    start..start + m
}

/// Least-squares actuator matrix `(E_u V J0)(E_u V)^+`.
pub fn identify_lambda(v: &DMatrix<f64>, j0: &DMatrix<f64>, o: usize, m: usize, lags: usize, rows: LambdaRows) -> Result<DMatrix<f64>> {
    let blocks = match rows {
        LambdaRows::Lag0 => 1,
        LambdaRows::AllLags => lags,
    };
    let n = v.ncols();
    let mut vu = DMatrix::zeros(m, n * blocks);
    let mut target = DMatrix::zeros(m, n * blocks);
    for k in 0..blocks {
        let r = actuator_rows(o, m, k);
        let euv = v.rows(r.start, m).into_owned();
        target.columns_mut(k * n, n).copy_from(&(&euv * j0));
        vu.columns_mut(k * n, n).copy_from(&euv);
    }
    let rank = linalg::rank(&v.rows(actuator_rows(o, m, 0).start, m).into_owned());
    if rank < m {
        return Err(Error::ActuatorRank { rank, m });
    }
    Ok(target * linalg::pinv(&vu))
}

fn decay_windows(traj: &Trajectory, lags: usize, settle_steps: usize) -> Result<Vec<DVector<f64>>> {
    let start = traj.meta.release_index.unwrap_or(0) + lags - 1 + settle_steps;
    let embedded = pipeline::delay_embed(traj, lags)?;
    // embedded[i] ends at sample i + lags - 1
    Ok(embedded.into_iter().skip(start + 1 - lags).collect())
}

/// Fits the full caSSM from decay trajectories.
///
/// Samples before `release_index + lags - 1` are excluded so every retained
/// embedding sees `u_ref = 0` at all lags.
pub fn fit_cassm(train: &[Trajectory], obs_groups: &[usize], cfg: &CassmConfig) -> Result<(ManifoldModel, CassmFitReport)> {
    let first = train.first().ok_or_else(|| Error::Parameter("no training trajectories".into()))?;
    let (o, m, dt) = (first.n_obs(), first.n_inputs(), first.dt);
    if cfg.n < m {
        return Err(Error::Parameter(format!("caSSM dimension n = {} must be at least the input count m = {m}", cfg.n)));
    }
    if obs_groups.iter().sum::<usize>() != o {
        return Err(Error::Dimension { what: "observation groups".into(), expected: o, got: obs_groups.iter().sum() });
    }
    let smoothed: Vec<Trajectory> = match cfg.smoothing {
        Some(s) => train.iter().map(|t| pipeline::kalman_rts_smooth(t, s.q_noise, s.r_noise)).collect::<Result<_>>()?,
        None => train.to_vec(),
    };
    let mut segments = Vec::new();
    for t in &smoothed {
        if (t.dt - dt).abs() > 1e-12 || t.n_obs() != o || t.n_inputs() != m {
            return Err(Error::Parameter(format!("trajectory {} inconsistent with the training set", t.meta.tag)));
        }
        let seg = decay_windows(t, cfg.lags, (cfg.settle_time / dt).round() as usize)?;
        if seg.len() < 5 + 4 {
            return Err(Error::Parameter(format!("decay segment of {} too short", t.meta.tag)));
        }
        segments.push(seg);
    }
    let equilibrium = pipeline::estimate_equilibrium(&smoothed)?;
    let all: Vec<DVector<f64>> = segments.iter().flatten().cloned().collect();
    let normalizer = Normalizer::for_embedding(&equilibrium, obs_groups, cfg.lags, &all);
    let x = linalg::rows_to_matrix(&all.iter().map(|v| normalizer.normalize(v)).collect::<Vec<_>>());

    let (v, explained_variance) = fit_subspace(&x, cfg.n)?;
    let w_map = cfg.w_features.build(cfg.n)?;
    let w_nl = fit_parameterization(&x, &v, &w_map, cfg.ridge)?;

    let mut z_rows = Vec::new();
    let mut zdot_rows = Vec::new();
    for seg in &segments {
        let z: Vec<DVector<f64>> = seg.iter().map(|x| v.tr_mul(&normalizer.normalize(x))).collect();
        let zd = pipeline::estimate_derivatives(&z, dt)?;
        // One-sided end stencils are dropped.
        let len = z.len();
        z_rows.extend(z[2..len - 2].iter().cloned());
        zdot_rows.extend(zd[2..len - 2].iter().cloned());
    }
    let zm = linalg::rows_to_matrix(&z_rows);
    let zdm = linalg::rows_to_matrix(&zdot_rows);
    let r_map = cfg.r_features.build(cfg.n)?;
    let (r0, theta, j0) = fit_reduced_dynamics(&zm, &zdm, &r_map, cfg.ridge)?;
    let lambda = identify_lambda(&v, &j0, o, m, cfg.lags, cfg.lambda_rows)?;

    let zall = &x * &v;
    let max_train_norm = zall.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let substeps = model::substeps_for(dt, linalg::spectral_radius(&j0));
    let model = ManifoldModel {
        version: MODEL_VERSION.to_string(),
        o,
        m,
        lags: cfg.lags,
        n: cfg.n,
        dt,
        substeps,
        normalizer,
        v,
        w_map,
        w_nl,
        r0,
        r_map,
        theta,
        j0,
        lambda,
        ref_mode: cfg.ref_mode,
        explained_variance,
        max_train_norm,
    };

    let recon = &zall * model.v.transpose() + model.w_map.eval_rows(&zall) * model.w_nl.transpose();
    let w_residual_rms = linalg::rms((&x - recon).as_slice());
    let mut err = Vec::with_capacity(zdot_rows.len() * cfg.n);
    for (z, zd) in z_rows.iter().zip(&zdot_rows) {
        err.extend((model.reduced_field(z) - zd).iter().cloned());
    }
    let report = CassmFitReport {
        explained_variance: model.explained_variance.clone(),
        samples: x.nrows(),
        w_residual_rms,
        r_residual_rms: linalg::rms(&err),
        j0_eigenvalues: complex_pairs(&linalg::sorted_eigenvalues(&model.j0)),
        lambda_eigenvalues: complex_pairs(&linalg::sorted_eigenvalues(&model.lambda)),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overlap {
    SeparatedFast,
    Overlapping,
    ActuatorSlower,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralReport {
    pub reduced_eigenvalues: Vec<[f64; 2]>,
    pub actuator_eigenvalues: Vec<[f64; 2]>,
    /// Reduced eigenvalues left after removing those closest to the actuator spectrum.
    pub system_eigenvalues: Vec<[f64; 2]>,
    pub plant_eigenvalues: Option<Vec<[f64; 2]>>,
    pub classification: Overlap,
}

/// Separated-fast when the actuators are more than 3x faster than the fastest
/// retained system mode; actuator-slower when some actuator eigenvalue lies
/// right of the slowest system mode; overlapping otherwise.
pub fn classify_overlap(actuator: &[Complex<f64>], system: &[Complex<f64>]) -> Overlap {
    let min_act = actuator.iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min);
    let max_act_re = actuator.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let max_sys_abs = system.iter().map(|l| l.re.abs()).fold(0.0, f64::max);
    let slowest_sys = system.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if min_act > 3.0 * max_sys_abs {
        Overlap::SeparatedFast
    } else if !system.is_empty() && max_act_re > slowest_sys {
        Overlap::ActuatorSlower
    } else {
        Overlap::Overlapping
    }
}

impl ManifoldModel {
    fn u_scale(&self) -> f64 {
        self.normalizer.scale[self.o]
    }

    /// Normalized-coordinate forcing gain of the lag-`k` command: `-V_{u,k}^T Lambda`.
    fn ref_gain(&self, k: usize) -> DMatrix<f64> {
        let vu = self.v.rows(actuator_rows(self.o, self.m, k).start, self.m);
        -(vu.transpose() * &self.lambda)
    }

    fn normalized_input(&self, u: &[f64]) -> DVector<f64> {
        let c = self.normalizer.center.rows(self.o, self.m);
        (DVector::from_column_slice(u) - c) / self.u_scale()
    }

    /// Reduced control reference for commands newest first.
    ///
    /// Exact mode needs `lags` commands and stacks each at its own lag; approximate
    /// mode repeats the current command across all lag blocks.
    pub fn control_reference(&self, inputs: &[Vec<f64>], mode: RefMode) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(self.n);
        match mode {
            RefMode::Exact => {
                if inputs.len() < self.lags {
                    return Err(Error::Parameter(format!("exact control reference needs {} commands, got {}", self.lags, inputs.len())));
                }
                for k in 0..self.lags {
                    r += self.ref_gain(k) * self.normalized_input(&inputs[k]);
                }
            }
            RefMode::Approx => {
                let u0 = inputs.first().ok_or_else(|| Error::Parameter("control reference needs the current command".into()))?;
                let un = self.normalized_input(u0);
                for k in 0..self.lags {
                    r += self.ref_gain(k) * &un;
                }
            }
        }
        Ok(r)
    }

    /// Autonomous part `R0 z + Theta phi(z)`.
    pub fn reduced_field(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.r0 * z + &self.theta * self.r_map.eval(z.as_slice())
    }

    pub fn reduced_field_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.r0 + &self.theta * self.r_map.jacobian(z.as_slice())
    }

    pub fn reduced_derivative(&self, z: &DVector<f64>, inputs: &[Vec<f64>]) -> Result<DVector<f64>> {
        Ok(self.reduced_field(z) + self.control_reference(inputs, self.ref_mode)?)
    }

    /// Chart: reduced coordinates of a physical embedded vector.
    pub fn chart(&self, x: &DVector<f64>) -> DVector<f64> {
        self.v.tr_mul(&self.normalizer.normalize(x))
    }

    /// Parameterization in normalized coordinates: `V z + W_nl phi(z)`.
    pub fn parameterization(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.v * z + &self.w_nl * self.w_map.eval(z.as_slice())
    }

    pub fn predict_open_loop(&self, window: &[Observation], commands: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        model::rollout(self, window, commands)
    }

    fn padded(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut v = inputs.to_vec();
        if v.is_empty() {
            v.push(vec![0.0; self.m]);
        }
        while v.len() < self.lags {
            v.push(v.last().cloned().expect("non-empty"));
        }
        v
    }

    /// Relative residual of the linear invariance condition
    /// `||V J0 - A V||_F / ||A V||_F` in the model's normalized coordinates.
    ///
    /// `observation` maps the mechanical state to `y`. Under full-state
    /// observation `A = I_L (x) [[A, A_u], [0, Lambda]]`. Otherwise `A` is the
    /// plant's slowest invariant subspace of dimension at least `n`, seen
    /// through the delay embedding: `A = M S M^+` with `M` stacking
    /// `C_aug E exp(-S j dt)` over lags `j`.
    pub fn invariance_residual(&self, lin: &Linearization, observation: &DMatrix<f64>) -> Result<f64> {
        let aug = lin.augmented();
        let nx = lin.a.nrows();
        if observation.ncols() != nx || observation.nrows() != self.o {
            return Err(Error::Dimension { what: "observation matrix".into(), expected: self.o * nx, got: observation.nrows() * observation.ncols() });
        }
        let s = &self.normalizer.scale;
        let full_state = self.o == nx && *observation == DMatrix::identity(nx, nx);
        let a_n = if full_state {
            let big = linalg::kron(&DMatrix::identity(self.lags, self.lags), &aug);
            DMatrix::from_fn(big.nrows(), big.ncols(), |i, j| big[(i, j)] * s[j] / s[i])
        } else {
            let (e, slow) = linalg::slow_invariant_subspace(&aug, self.n)?;
            let mut c_aug = DMatrix::zeros(self.o + self.m, nx + self.m);
            c_aug.view_mut((0, 0), (self.o, nx)).copy_from(observation);
            c_aug.view_mut((self.o, nx), (self.m, self.m)).fill_with_identity();
            let ce = &c_aug * &e;
            let back = (&slow * -self.dt).exp();
            let block = self.o + self.m;
            let mut emb = DMatrix::zeros(self.lags * block, e.ncols());
            let mut prop = DMatrix::identity(e.ncols(), e.ncols());
            for j in 0..self.lags {
                emb.view_mut((j * block, 0), (block, e.ncols())).copy_from(&(&ce * &prop));
                prop = &back * prop;
            }
            for i in 0..emb.nrows() {
                emb.row_mut(i).scale_mut(1.0 / s[i]);
            }
            &emb * &slow * linalg::pinv(&emb)
        };
        let av = &a_n * &self.v;
        Ok((&self.v * &self.j0 - &av).norm() / av.norm())
    }

    pub fn spectral_diagnostic(&self, plant: Option<&Linearization>) -> SpectralReport {
        let reduced = linalg::sorted_eigenvalues(&self.j0);
        let actuator = linalg::sorted_eigenvalues(&self.lambda);
        let mut system = reduced.clone();
        for a in &actuator {
            if let Some((idx, _)) = system.iter().enumerate().min_by(|x, y| (x.1 - a).norm().total_cmp(&(y.1 - a).norm())) {
                system.remove(idx);
            }
        }
        SpectralReport {
            reduced_eigenvalues: complex_pairs(&reduced),
            actuator_eigenvalues: complex_pairs(&actuator),
            classification: classify_overlap(&actuator, &system),
            system_eigenvalues: complex_pairs(&system),
            plant_eigenvalues: plant.map(|l| complex_pairs(&linalg::sorted_eigenvalues(&l.a))),
        }
    }
}

impl ReducedModel for ManifoldModel {
    fn kind(&self) -> &'static str {
        "cassm"
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
        match self.ref_mode {
            RefMode::Exact => self.lags,
            RefMode::Approx => 1,
        }
    }

    fn divergence_bound(&self) -> f64 {
        1e3 * self.max_train_norm
    }

    fn encode(&self, window: &[Observation]) -> Result<DVector<f64>> {
        Ok(self.chart(&pipeline::embed_window(window, self.lags)?))
    }

    fn step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> DVector<f64> {
        let r = self.control_reference(&self.padded(inputs), self.ref_mode).expect("padded input history");
        model::rk4_forced(|z| self.reduced_field(z), s, &r, self.dt, self.substeps)
    }

    fn linearize_step(&self, s: &DVector<f64>, inputs: &[Vec<f64>]) -> StepLinearization {
        let r = self.control_reference(&self.padded(inputs), self.ref_mode).expect("padded input history");
        let (next, a, sr) = model::rk4_forced_sensitivity(|z| self.reduced_field(z), |z| self.reduced_field_jacobian(z), s, &r, self.dt, self.substeps);
        let inv = 1.0 / self.u_scale();
        let b = match self.ref_mode {
            RefMode::Exact => (0..self.lags).map(|k| &sr * self.ref_gain(k) * inv).collect(),
            RefMode::Approx => {
                let total = (0..self.lags).fold(DMatrix::zeros(self.n, self.m), |acc, k| acc + self.ref_gain(k));
                vec![&sr * total * inv]
            }
        };
        StepLinearization { next, a, b }
    }

    fn decode(&self, s: &DVector<f64>) -> DVector<f64> {
        let x = self.parameterization(s);
        DVector::from_fn(self.o, |i, _| x[i] * self.normalizer.scale[i] + self.normalizer.center[i])
    }

    fn decode_jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
        let full = &self.v + &self.w_nl * self.w_map.jacobian(s.as_slice());
        DMatrix::from_fn(self.o, self.n, |i, j| full[(i, j)] * self.normalizer.scale[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    #[test]
    fn overlap_thresholds() {
        let system = [c(-5.0), c(-1.0), Complex::new(-2.0, 3.0)];
        assert_eq!(classify_overlap(&[c(-100.0), c(-100.0)], &system), Overlap::SeparatedFast);
        assert_eq!(classify_overlap(&[c(-3.0), c(-3.0)], &system), Overlap::Overlapping);
        assert_eq!(classify_overlap(&[c(-0.5), c(-0.5)], &system), Overlap::ActuatorSlower);
    }

    #[test]
    fn subspace_recovers_plane() {
        let basis = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).sin());
        let q = basis.qr().q();
        let coeffs = DMatrix::from_fn(200, 3, |i, j| ((i as f64 + 1.0) * (1.3 + 0.71 * j as f64)).sin() * (3.0 - j as f64));
        let x = &coeffs * q.transpose();
        let (v, ev) = fit_subspace(&x, 3).unwrap();
        assert!((v.tr_mul(&v) - DMatrix::identity(3, 3)).norm() < 1e-10);
        let sv = (q.transpose() * &v).singular_values();
        assert!(sv.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(fit_subspace(&x, 4), Err(Error::Rank { rank: 3, .. })));
    }

    #[test]
    fn lambda_from_identity_embedding() {
        // Two system coordinates plus two actuators; V selects the actuator block.
        let v = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let lam = DMatrix::from_row_slice(2, 2, &[-3.0, 0.5, 0.0, -7.0]);
        let got = identify_lambda(&v, &lam, 2, 2, 1, LambdaRows::Lag0).unwrap();
        assert!((got - lam).amax() < 1e-14);
        let v_bad = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(identify_lambda(&v_bad, &DMatrix::identity(2, 2), 2, 2, 1, LambdaRows::Lag0), Err(Error::ActuatorRank { .. })));
    }

    #[test]
    fn linear_data_has_no_nonlinear_part() {
        let v0 = DMatrix::from_fn(5, 2, |i, j| ((i * 3 + j) as f64).cos()).qr().q();
        let x = DMatrix::from_fn(100, 2, |i, j| ((i + 5 * j) as f64 * 0.21).sin()) * v0.transpose();
        let (v, _) = fit_subspace(&x, 2).unwrap();
        let map = FeatureMap::polynomial(2, 2, 3).unwrap();
        let w = fit_parameterization(&x, &v, &map, 1e-10).unwrap();
        assert!(w.norm() < 1e-8);
    }

    #[test]
    fn planted_polynomial_manifold_is_recovered() {
        let v = DMatrix::from_fn(6, 2, |i, j| ((i * 5 + j * 2) as f64 * 0.7).sin()).qr().q();
        let map = FeatureMap::polynomial(2, 2, 2).unwrap();
        let raw = DMatrix::from_fn(6, 3, |i, j| ((i + j * 4) as f64 * 0.3).cos());
        let w_star = &raw - &v * v.tr_mul(&raw);
        let z = DMatrix::from_fn(400, 2, |i, j| 0.8 * ((i * (j + 3)) as f64 * 0.113).sin());
        let x = &z * v.transpose() + map.eval_rows(&z) * w_star.transpose();
        let w = fit_parameterization(&x, &v, &map, 0.0).unwrap();
        assert!((&w - &w_star).norm() / w_star.norm() < 1e-3);
        assert!(v.tr_mul(&w).amax() < 1e-12);
    }

    #[test]
    fn planted_linear_dynamics() {
        let r_star = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -2.0, -0.7]);
        let z = DMatrix::from_fn(300, 2, |i, j| ((i * (j + 2)) as f64 * 0.05).cos());
        let zdot = &z * r_star.transpose();
        let map = FeatureMap::polynomial(2, 2, 2).unwrap();
        let (r0, theta, j0) = fit_reduced_dynamics(&z, &zdot, &map, 0.0).unwrap();
        assert!((&r0 - &r_star).amax() < 1e-6);
        assert!(theta.amax() < 1e-6);
        assert!((&j0 - &r_star).amax() < 1e-6);
        let (r0, theta, _) = fit_reduced_dynamics(&z, &DMatrix::zeros(300, 2), &map, 1e-6).unwrap();
        assert!(r0.amax() == 0.0 && theta.amax() == 0.0);
    }

    fn hand_model(v: DMatrix<f64>, j0: DMatrix<f64>, o: usize, m: usize, lags: usize, dt: f64) -> ManifoldModel {
        let n = v.ncols();
        let map = FeatureMap::polynomial(n, 2, 2).unwrap();
        let d = map.len();
        ManifoldModel {
            version: "test".into(),
            o,
            m,
            lags,
            n,
            dt,
            substeps: 1,
            normalizer: Normalizer::identity(v.nrows()),
            w_nl: DMatrix::zeros(v.nrows(), d),
            w_map: map.clone(),
            r0: j0.clone(),
            theta: DMatrix::zeros(n, d),
            r_map: map,
            j0,
            lambda: DMatrix::from_element(m, m, -10.0),
            ref_mode: RefMode::Exact,
            explained_variance: vec![1.0; n],
            max_train_norm: 1.0,
            v,
        }
    }

    #[test]
    fn observed_invariance_of_slow_mode() {
        // Two decoupled modes (-1, -4), one actuator (-10), y = x1 + x2, two lags.
        let lin = Linearization {
            a: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -4.0]),
            a_u: DMatrix::zeros(2, 1),
            lambda: DMatrix::from_element(1, 1, -10.0),
        };
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let dt: f64 = 0.1;
        // Slow mode seen through the delays: [y; u] = [1; 0] now, [e^dt; 0] one lag back.
        let raw = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, dt.exp(), 0.0]);
        let v = &raw / raw.norm();
        let exact = hand_model(v.clone(), DMatrix::from_element(1, 1, -1.0), 1, 1, 2, dt);
        assert!(exact.invariance_residual(&lin, &c).unwrap() < 1e-12);
        let off = hand_model(v, DMatrix::from_element(1, 1, -1.1), 1, 1, 2, dt);
        assert!((off.invariance_residual(&lin, &c).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn full_state_invariance_uses_every_lag() {
        let lin = Linearization { a: DMatrix::from_element(1, 1, -2.0), a_u: DMatrix::from_element(1, 1, 1.0), lambda: DMatrix::from_element(1, 1, -5.0) };
        // Eigenvector of [[-2, 1], [0, -5]] for -2 is (1, 0).
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let model = hand_model(v, DMatrix::from_element(1, 1, -2.0), 1, 1, 1, 0.02);
        assert!(model.invariance_residual(&lin, &DMatrix::identity(1, 1)).unwrap() < 1e-14);
    }
}
