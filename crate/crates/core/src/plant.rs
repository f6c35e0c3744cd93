//! Synthetic full-order plant: a hanging 3D point-mass chain with linear plus
//! cubic segment springs, discrete bending stiffness, Rayleigh damping and a
//! first-order actuator lag `u' = Lambda (u - u_ref)`.
//!
//! Generalized coordinates `q` are node displacements from the straight
//! hanging rest configuration, so the equilibrium sits at the origin of the
//! state `[q; qdot; u]`. Segment springs carry the pretension that balances
//! gravity in the rest configuration.
//!
//! Inputs act through `G(q) = B (1 + gamma * tanh(|tip_xy|^2 / d^2))`, a
//! smooth state-dependent input coupling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::serde_mat;

/// What the sensors report as `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationMode {
    /// Absolute 3D positions of the observed nodes (motion-capture markers).
    #[default]
    Markers,
    /// The full mechanical state `[q; qdot]` in deviation coordinates.
    FullState,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantConfig {
    pub n_nodes: usize,
    /// Total rest length of the chain (m).
    pub length: f64,
    /// Mass per node (kg).
    pub mass: f64,
    /// Linear segment stiffness (N/m).
    pub k_lin: f64,
    /// Cubic segment stiffness (N/m^3).
    pub k_cub: f64,
    /// Discrete bending stiffness on second differences of node positions (N/m).
    pub k_bend: f64,
    /// Rayleigh coefficients: mass-proportional (1/s), stiffness-proportional (s).
    pub c_damp: [f64; 2],
    /// Upper bound on the per-mode damping rate `alpha + beta w^2` (1/s);
    /// `None` keeps plain Rayleigh damping.
    #[serde(default)]
    pub damping_cap: Option<f64>,
    pub m_inputs: usize,
    #[serde(with = "serde_mat")]
    pub lambda_true: DMatrix<f64>,
    /// Maps inputs to generalized forces, `3 n_nodes x m`.
    #[serde(with = "serde_mat")]
    pub input_gain_linear: DMatrix<f64>,
    /// Coefficient of the state-dependent input coupling.
    pub input_gain_state: f64,
    /// Tip deflection scale entering the input coupling (m).
    pub deflection_scale: f64,
    /// 1-based node indices carrying markers.
    pub observed_nodes: Vec<usize>,
    #[serde(default)]
    pub observation: ObservationMode,
    pub gravity: f64,
    /// RK4 substeps per sample interval when advancing the plant.
    pub substeps: usize,
    /// Standard deviation of additive marker noise (m).
    #[serde(default)]
    pub noise_std: f64,
    /// Simulate the linearization about the origin instead of the nonlinear model.
    #[serde(default)]
    pub linear: bool,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let n_nodes = 12;
        let observed_nodes = vec![n_nodes / 3, 2 * n_nodes / 3, n_nodes];
        let input_gain_linear = tendon_gain(n_nodes, &observed_nodes, 0.5);
        PlantConfig {
            n_nodes,
            length: 0.3,
            mass: 0.025,
            k_lin: 800.0,
            k_cub: 1.0e6,
            k_bend: 300.0,
            c_damp: [0.6, 0.05],
            damping_cap: Some(60.0),
            m_inputs: 2,
            lambda_true: DMatrix::from_diagonal_element(2, 2, -4.0),
            input_gain_linear,
            input_gain_state: -0.3,
            deflection_scale: 0.05,
            observed_nodes,
            observation: ObservationMode::Markers,
            gravity: 9.81,
            substeps: 10,
            noise_std: 0.0,
            linear: false,
        }
    }
}

/// Input map for two antagonistic tendon groups: input 0 pulls along +x and
/// input 1 along +y, each with `force` newtons per unit command at every
/// attachment node.
pub fn tendon_gain(n_nodes: usize, attachments: &[usize], force: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(3 * n_nodes, 2);
    for &node in attachments {
        if node >= 1 && node <= n_nodes {
            b[(3 * (node - 1), 0)] = force;
            b[(3 * (node - 1) + 1, 1)] = force;
        }
    }
    b
}

impl PlantConfig {
    pub fn nq(&self) -> usize {
        3 * self.n_nodes
    }

    /// Full state dimension `2 nq + m`.
    pub fn n_state(&self) -> usize {
        2 * self.nq() + self.m_inputs
    }

    /// Number of observed coordinates `o`.
    pub fn n_obs(&self) -> usize {
        match self.observation {
            ObservationMode::Markers => 3 * self.observed_nodes.len(),
            ObservationMode::FullState => 2 * self.nq(),
        }
    }

    /// Sizes of observation groups sharing one normalization scale.
    pub fn obs_groups(&self) -> Vec<usize> {
        match self.observation {
            ObservationMode::Markers => vec![self.n_obs()],
            ObservationMode::FullState => vec![self.nq(), self.nq()],
        }
    }

    pub fn segment_length(&self) -> f64 {
        self.length / self.n_nodes as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 1 {
            return Err(Error::Config("n_nodes must be at least 1".into()));
        }
        if !(self.mass > 0.0) || !(self.k_lin > 0.0) || !(self.length > 0.0) {
            return Err(Error::Config("mass, length and k_lin must be positive".into()));
        }
        if self.c_damp.iter().any(|c| !(*c >= 0.0)) || self.k_cub < 0.0 || self.k_bend < 0.0 {
            return Err(Error::Config("damping and stiffness coefficients must be non-negative".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be positive".into()));
        }
        check_dim("lambda_true rows", self.m_inputs, self.lambda_true.nrows())?;
        check_dim("lambda_true cols", self.m_inputs, self.lambda_true.ncols())?;
        check_dim("input_gain_linear rows", self.nq(), self.input_gain_linear.nrows())?;
        check_dim("input_gain_linear cols", self.m_inputs, self.input_gain_linear.ncols())?;
        if !linalg::is_hurwitz(&self.lambda_true) {
            return Err(Error::Config("lambda_true must be Hurwitz".into()));
        }
        let mut seen = self.observed_nodes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.observed_nodes.len() {
            return Err(Error::Config("observed_nodes must be distinct".into()));
        }
        if self.observed_nodes.iter().any(|&k| k < 1 || k > self.n_nodes) {
            return Err(Error::Config(format!("observed_nodes must lie in 1..={}", self.n_nodes)));
        }
        if self.noise_std < 0.0 || self.deflection_scale <= 0.0 {
            return Err(Error::Config("noise_std must be >= 0 and deflection_scale > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub u: Vec<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn equilibrium(cfg: &PlantConfig) -> Self {
        PlantState {
            q: vec![0.0; cfg.nq()],
            qdot: vec![0.0; cfg.nq()],
            u: vec![0.0; cfg.m_inputs],
            t: 0.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.q.len() + self.u.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.qdot);
        x.extend_from_slice(&self.u);
        x
    }

    pub fn from_slice(x: &[f64], nq: usize, t: f64) -> Self {
        PlantState {
            q: x[..nq].to_vec(),
            qdot: x[nq..2 * nq].to_vec(),
            u: x[2 * nq..].to_vec(),
            t,
        }
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.q) && linalg::all_finite(&self.qdot) && linalg::all_finite(&self.u)
    }
}

/// Sensor reading at one sample instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub u_ref: Vec<f64>,
}

/// Jacobians of the plant at the origin.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Mechanical block `d xdot / d x`, `2 nq x 2 nq`.
    pub a: DMatrix<f64>,
    /// Cross term `d xdot / d u`, `2 nq x m`.
    pub a_u: DMatrix<f64>,
    /// Actuator block.
    pub lambda: DMatrix<f64>,
}

impl Linearization {
    /// `[[A, A_u], [0, Lambda]]`.
    pub fn augmented(&self) -> DMatrix<f64> {
        let nx = self.a.nrows();
        let m = self.lambda.nrows();
        let mut out = DMatrix::zeros(nx + m, nx + m);
        out.view_mut((0, 0), (nx, nx)).copy_from(&self.a);
        out.view_mut((0, nx), (nx, m)).copy_from(&self.a_u);
        out.view_mut((nx, nx), (m, m)).copy_from(&self.lambda);
        out
    }
}

/// Classical fourth-order Runge-Kutta step of `x' = f(x)`.
pub fn rk4_step<F>(x: &[f64], dt: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(&tmp, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    seg: f64,
    pretension: Vec<f64>,
    damping: DMatrix<f64>,
    linear: Option<Linearization>,
}

impl Plant {
    pub fn new(cfg: PlantConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_nodes;
        let weight = cfg.mass * cfg.gravity;
        let pretension = (1..=n).map(|j| (n - j + 1) as f64 * weight).collect();
        let mut plant = Plant {
            seg: cfg.segment_length(),
            pretension,
            damping: DMatrix::zeros(cfg.nq(), cfg.nq()),
            linear: None,
            cfg,
        };
        let k0 = plant.rest_stiffness();
        let nq = plant.cfg.nq();
        let [alpha, beta] = plant.cfg.c_damp;
        plant.damping = match plant.cfg.damping_cap {
            None => DMatrix::identity(nq, nq) * (alpha * plant.cfg.mass) + k0 * beta,
            Some(cap) => {
                // Modal form of the Rayleigh model with the per-mode rate capped.
                let mass = plant.cfg.mass;
                let sym = (&k0 + k0.transpose()) * (0.5 / mass);
                let eig = sym.symmetric_eigen();
                let rates = eig.eigenvalues.map(|w2| (alpha + beta * w2.max(0.0)).min(cap) * mass);
                &eig.eigenvectors * DMatrix::from_diagonal(&rates) * eig.eigenvectors.transpose()
            }
        };
        if plant.cfg.linear {
            let lin = plant.linearize_nonlinear();
            plant.linear = Some(lin);
        }
        Ok(plant)
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn n_state(&self) -> usize {
        self.cfg.n_state()
    }

    /// Rest position of free node `i` (1-based).
    fn rest(&self, i: usize) -> [f64; 3] {
        [0.0, 0.0, -(i as f64) * self.seg]
    }

    /// Position of node `i`, including the clamped base (0) and the virtual
    /// node above it (-1) that fixes the base tangent.
    fn position(&self, q: &[f64], i: isize) -> [f64; 3] {
        match i {
            -1 => [0.0, 0.0, self.seg],
            0 => [0.0, 0.0, 0.0],
            _ => {
                let k = i as usize;
                let r = self.rest(k);
                let o = 3 * (k - 1);
                [r[0] + q[o], r[1] + q[o + 1], r[2] + q[o + 2]]
            }
        }
    }

    /// Conservative generalized force `-dV/dq` (springs, bending, gravity).
    pub fn conservative_force(&self, q: &[f64], out: &mut [f64]) {
        let n = self.cfg.n_nodes as isize;
        out.iter_mut().for_each(|f| *f = 0.0);
        let mut add = |node: isize, f: [f64; 3], scale: f64| {
            if node >= 1 {
                let o = 3 * (node as usize - 1);
                for c in 0..3 {
                    out[o + c] += scale * f[c];
                }
            }
        };
        for j in 1..=n {
            let a = self.position(q, j - 1);
            let b = self.position(q, j);
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let e = len - self.seg;
            let tension = self.pretension[(j - 1) as usize] + self.cfg.k_lin * e + self.cfg.k_cub * e * e * e;
            let f = [tension * d[0] / len, tension * d[1] / len, tension * d[2] / len];
            add(j, f, -1.0);
            add(j - 1, f, 1.0);
        }
        let kb = self.cfg.k_bend;
        if kb > 0.0 {
            for c in 0..n {
                let pm = self.position(q, c - 1);
                let p0 = self.position(q, c);
                let pp = self.position(q, c + 1);
                let kappa = [
                    pp[0] - 2.0 * p0[0] + pm[0],
                    pp[1] - 2.0 * p0[1] + pm[1],
                    pp[2] - 2.0 * p0[2] + pm[2],
                ];
                add(c + 1, kappa, -kb);
                add(c, kappa, 2.0 * kb);
                add(c - 1, kappa, -kb);
            }
        }
        let w = self.cfg.mass * self.cfg.gravity;
        for k in 0..self.cfg.n_nodes {
            out[3 * k + 2] -= w;
        }
    }

    /// Hessian of the potential at rest, by central differences of the force.
    fn rest_stiffness(&self) -> DMatrix<f64> {
        let nq = self.cfg.nq();
        let h = 1e-7;
        let mut k = DMatrix::zeros(nq, nq);
        let mut fp = vec![0.0; nq];
        let mut fm = vec![0.0; nq];
        let mut q = vec![0.0; nq];
        for j in 0..nq {
            q[j] = h;
            self.conservative_force(&q, &mut fp);
            q[j] = -h;
            self.conservative_force(&q, &mut fm);
            q[j] = 0.0;
            for i in 0..nq {
                k[(i, j)] = -(fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (&k + k.transpose()) * 0.5
    }

    /// Scalar multiplier of the linear input map at configuration `q`.
    pub fn input_scaling(&self, q: &[f64]) -> f64 {
        let o = 3 * (self.cfg.n_nodes - 1);
        let d2 = (q[o] * q[o] + q[o + 1] * q[o + 1]) / (self.cfg.deflection_scale * self.cfg.deflection_scale);
        1.0 + self.cfg.input_gain_state * d2.tanh()
    }

    /// Time derivative of the packed state `[q; qdot; u]`.
    pub fn derivative_into(&self, x: &[f64], u_ref: &[f64], out: &mut [f64]) {
        let nq = self.cfg.nq();
        let m = self.cfg.m_inputs;
        let (q, rest) = x.split_at(nq);
        let (qd, u) = rest.split_at(nq);
        if let Some(lin) = &self.linear {
            let nx = 2 * nq;
            for i in 0..nx {
                let mut acc = 0.0;
                for j in 0..nx {
                    acc += lin.a[(i, j)] * x[j];
                }
                for j in 0..m {
                    acc += lin.a_u[(i, j)] * u[j];
                }
                out[i] = acc;
            }
        } else {
            let (dq, rest_out) = out.split_at_mut(nq);
            let (ddq, _) = rest_out.split_at_mut(nq);
            dq.copy_from_slice(qd);
            self.conservative_force(q, ddq);
            let s = self.input_scaling(q);
            let inv_m = 1.0 / self.cfg.mass;
            for i in 0..nq {
                let mut f = ddq[i];
                for j in 0..nq {
                    f -= self.damping[(i, j)] * qd[j];
                }
                for j in 0..m {
                    f += s * self.cfg.input_gain_linear[(i, j)] * u[j];
                }
                ddq[i] = f * inv_m;
            }
        }
        let lam = &self.cfg.lambda_true;
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += lam[(i, j)] * (u[j] - u_ref[j]);
            }
            out[2 * nq + i] = acc;
        }
    }

    /// `[qdot; qddot; udot]` for a structured state.
    pub fn derivative(&self, state: &PlantState, u_ref: &[f64]) -> Result<PlantState> {
        self.check_state(state, u_ref)?;
        let x = state.to_vec();
        let mut out = vec![0.0; x.len()];
        self.derivative_into(&x, u_ref, &mut out);
        Ok(PlantState::from_slice(&out, self.cfg.nq(), state.t))
    }

    fn check_state(&self, state: &PlantState, u_ref: &[f64]) -> Result<()> {
        check_dim("state q", self.cfg.nq(), state.q.len())?;
        check_dim("state qdot", self.cfg.nq(), state.qdot.len())?;
        check_dim("state u", self.cfg.m_inputs, state.u.len())?;
        check_dim("u_ref", self.cfg.m_inputs, u_ref.len())
    }

    /// One classical RK4 step of length `dt` with `u_ref` held constant.
    pub fn rk4_step(&self, state: &PlantState, u_ref: &[f64], dt: f64) -> Result<PlantState> {
        if !(dt > 0.0) {
            return Err(Error::Parameter("dt must be positive".into()));
        }
        self.check_state(state, u_ref)?;
        let x = rk4_step(&state.to_vec(), dt, |x, out| self.derivative_into(x, u_ref, out));
        let next = PlantState::from_slice(&x, self.cfg.nq(), state.t + dt);
        if !next.is_finite() {
            return Err(Error::Blowup { time: next.t });
        }
        Ok(next)
    }

    /// Advances one sample interval `dt` using `substeps` RK4 steps.
    pub fn advance(&self, state: &PlantState, u_ref: &[f64], dt: f64) -> Result<PlantState> {
        if !(dt > 0.0) {
            return Err(Error::Parameter("dt must be positive".into()));
        }
        self.check_state(state, u_ref)?;
        let h = dt / self.cfg.substeps as f64;
        let mut x = state.to_vec();
        for _ in 0..self.cfg.substeps {
            x = rk4_step(&x, h, |x, out| self.derivative_into(x, u_ref, out));
        }
        let next = PlantState::from_slice(&x, self.cfg.nq(), state.t + dt);
        if !next.is_finite() {
            return Err(Error::Blowup { time: next.t });
        }
        Ok(next)
    }

    fn linearize_nonlinear(&self) -> Linearization {
        let nq = self.cfg.nq();
        let m = self.cfg.m_inputs;
        let n = 2 * nq + m;
        // Normalized step: positions scale with a segment, velocities with a
        // segment per 0.1 s, actuator states are already unit-scaled.
        let scale: Vec<f64> = (0..n)
            .map(|i| if i < nq { self.seg } else if i < 2 * nq { 10.0 * self.seg } else { 1.0 })
            .collect();
        let eps = 1e-6;
        let u_ref = vec![0.0; m];
        let mut jac = DMatrix::zeros(n, n);
        let mut x = vec![0.0; n];
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let plain = Plant { linear: None, ..self.clone() };
        for j in 0..n {
            let h = eps * scale[j];
            x[j] = h;
            plain.derivative_into(&x, &u_ref, &mut fp);
            x[j] = -h;
            plain.derivative_into(&x, &u_ref, &mut fm);
            x[j] = 0.0;
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Linearization {
            a: jac.view((0, 0), (2 * nq, 2 * nq)).into_owned(),
            a_u: jac.view((0, 2 * nq), (2 * nq, m)).into_owned(),
            lambda: jac.view((2 * nq, 2 * nq), (m, m)).into_owned(),
        }
    }

    /// Central finite-difference linearization about the origin.
    ///
    /// Rejects configurations whose mechanical block is not Hurwitz.
    pub fn linearize(&self) -> Result<Linearization> {
        let lin = match &self.linear {
            Some(l) => l.clone(),
            None => self.linearize_nonlinear(),
        };
        let abscissa = linalg::spectral_abscissa(&lin.a);
        if abscissa >= 0.0 {
            return Err(Error::Config(format!(
                "plant linearization is not Hurwitz (max Re = {abscissa:.3e})"
            )));
        }
        Ok(lin)
    }

    /// Exact sensor reading.
    pub fn observe(&self, state: &PlantState, u_ref: &[f64]) -> Observation {
        let y = match self.cfg.observation {
            ObservationMode::Markers => {
                let mut y = Vec::with_capacity(self.cfg.n_obs());
                for &k in &self.cfg.observed_nodes {
                    y.extend_from_slice(&self.position(&state.q, k as isize));
                }
                y
            }
            ObservationMode::FullState => {
                let mut y = state.q.clone();
                y.extend_from_slice(&state.qdot);
                y
            }
        };
        Observation { t: state.t, y, u: state.u.clone(), u_ref: u_ref.to_vec() }
    }

    /// Jacobian of `y` with respect to the mechanical state `[q; qdot]`.
    pub fn observation_matrix(&self) -> DMatrix<f64> {
        let nx = 2 * self.cfg.nq();
        match self.cfg.observation {
            ObservationMode::Markers => {
                let mut c = DMatrix::zeros(self.cfg.n_obs(), nx);
                for (p, &k) in self.cfg.observed_nodes.iter().enumerate() {
                    for d in 0..3 {
                        c[(3 * p + d, 3 * (k - 1) + d)] = 1.0;
                    }
                }
                c
            }
            ObservationMode::FullState => DMatrix::identity(nx, nx),
        }
    }

    /// Sensor reading with additive Gaussian noise of `noise_std` on `y`.
    pub fn observe_noisy<R: Rng>(&self, state: &PlantState, u_ref: &[f64], rng: &mut R) -> Observation {
        let mut obs = self.observe(state, u_ref);
        if self.cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_std).expect("validated noise std");
            obs.y.iter_mut().for_each(|y| *y += normal.sample(rng));
        }
        obs
    }

    /// Observation of the rest configuration.
    pub fn equilibrium_observation(&self) -> Observation {
        let m = self.cfg.m_inputs;
        self.observe(&PlantState::equilibrium(&self.cfg), &vec![0.0; m])
    }

    /// Horizontal tip displacement after holding `u_ref` for `settle` seconds.
    pub fn settled_tip(&self, u_ref: &[f64], settle: f64, dt: f64) -> Result<[f64; 2]> {
        let mut s = PlantState::equilibrium(&self.cfg);
        let steps = (settle / dt).ceil() as usize;
        for _ in 0..steps {
            s = self.advance(&s, u_ref, dt)?;
        }
        let o = 3 * (self.cfg.n_nodes - 1);
        Ok([s.q[o], s.q[o + 1]])
    }

    /// Radius of the reachable tip workspace: steady horizontal tip deflection
    /// under a full-scale command on the first input.
    pub fn workspace_radius(&self, u_max: f64) -> Result<f64> {
        let mut u = vec![0.0; self.cfg.m_inputs];
        u[0] = u_max;
        let tip = self.settled_tip(&u, 15.0, 0.02)?;
        Ok((tip[0] * tip[0] + tip[1] * tip[1]).sqrt())
    }

    /// Row indices of the tip marker in `y`, if the tip is observed.
    pub fn tip_rows(&self) -> Option<[usize; 3]> {
        match self.cfg.observation {
            ObservationMode::Markers => self
                .cfg
                .observed_nodes
                .iter()
                .position(|&k| k == self.cfg.n_nodes)
                .map(|p| [3 * p, 3 * p + 1, 3 * p + 2]),
            ObservationMode::FullState => {
                let o = 3 * (self.cfg.n_nodes - 1);
                Some([o, o + 1, o + 2])
            }
        }
    }

    pub fn state_vector(&self, state: &PlantState) -> DVector<f64> {
        DVector::from_vec(state.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plant() -> Plant {
        Plant::new(PlantConfig::default()).unwrap()
    }

    /// Independent potential energy of the chain for the gradient oracle.
    fn potential(cfg: &PlantConfig, q: &[f64]) -> f64 {
        let n = cfg.n_nodes;
        let s = cfg.length / n as f64;
        let pos = |i: isize| -> [f64; 3] {
            if i == -1 {
                [0.0, 0.0, s]
            } else if i == 0 {
                [0.0; 3]
            } else {
                let k = (i - 1) as usize;
                [q[3 * k], q[3 * k + 1], -(i as f64) * s + q[3 * k + 2]]
            }
        };
        let mut v = 0.0;
        for j in 1..=n as isize {
            let a = pos(j - 1);
            let b = pos(j);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
            let e = len - s;
            let t0 = (n as isize - j + 1) as f64 * cfg.mass * cfg.gravity;
            v += t0 * e + 0.5 * cfg.k_lin * e * e + 0.25 * cfg.k_cub * e.powi(4);
        }
        for c in 0..n as isize {
            let (a, b, d) = (pos(c - 1), pos(c), pos(c + 1));
            for k in 0..3 {
                v += 0.5 * cfg.k_bend * (d[k] - 2.0 * b[k] + a[k]).powi(2);
            }
        }
        for i in 1..=n as isize {
            v += cfg.mass * cfg.gravity * pos(i)[2];
        }
        v
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let p = plant();
        let s = PlantState::equilibrium(p.config());
        let d = p.derivative(&s, &[0.0, 0.0]).unwrap();
        let worst = d.to_vec().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(worst < 1e-10, "worst {worst}");
    }

    #[test]
    fn actuator_rows_are_exact() {
        let p = plant();
        let mut s = PlantState::equilibrium(p.config());
        s.u = vec![0.3, -0.7];
        let d = p.derivative(&s, &[0.0, 0.0]).unwrap();
        let expected = &p.config().lambda_true * DVector::from_vec(s.u.clone());
        assert_eq!(d.u, expected.as_slice());
    }

    #[test]
    fn conservative_force_matches_energy_gradient() {
        let p = plant();
        let cfg = p.config().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let q: Vec<f64> = (0..cfg.nq()).map(|_| rng.random_range(-0.01..0.01)).collect();
            let s = PlantState { q: q.clone(), qdot: vec![0.0; cfg.nq()], u: vec![0.0; 2], t: 0.0 };
            let d = p.derivative(&s, &[0.0, 0.0]).unwrap();
            let h = 1e-6;
            let mut grad = vec![0.0; cfg.nq()];
            for j in 0..cfg.nq() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                grad[j] = (potential(&cfg, &qp) - potential(&cfg, &qm)) / (2.0 * h);
            }
            let force: Vec<f64> = d.qdot.iter().map(|a| a * cfg.mass).collect();
            let err: f64 = force.iter().zip(&grad).map(|(f, g)| (f + g).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!(err / norm < 1e-8, "relative error {}", err / norm);
        }
    }

    #[test]
    fn rk4_matches_exponential() {
        let x = rk4_step(&[1.0], 0.02, |x, out| out[0] = -x[0]);
        assert!((x[0] - (-0.02f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let x0 = [0.3, -1.0, 2.5];
        let x = rk4_step(&x0, 0.1, |_, out| out.iter_mut().for_each(|o| *o = 0.0));
        assert_eq!(x, x0);
    }

    /// Global error over 1 s of plant simulation using single RK4 steps.
    fn global_error(p: &Plant, dt: f64, reference: &[f64]) -> f64 {
        let mut s = PlantState::equilibrium(p.config());
        s.q[33] = 0.02;
        s.q[34] = -0.01;
        s.u = vec![0.4, -0.2];
        let steps = (1.0 / dt).round() as usize;
        for _ in 0..steps {
            s = p.rk4_step(&s, &[0.1, 0.0], dt).unwrap();
        }
        let x = s.to_vec();
        x.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        let p = plant();
        let fine: f64 = 4e-4 / 32.0;
        let mut s = PlantState::equilibrium(p.config());
        s.q[33] = 0.02;
        s.q[34] = -0.01;
        s.u = vec![0.4, -0.2];
        for _ in 0..(1.0 / fine).round() as usize {
            s = p.rk4_step(&s, &[0.1, 0.0], fine).unwrap();
        }
        let reference = s.to_vec();
        let e1 = global_error(&p, 4e-4, &reference);
        let e2 = global_error(&p, 2e-4, &reference);
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn linearization_is_hurwitz_with_exact_actuator_block() {
        let p = plant();
        let lin = p.linearize().unwrap();
        assert!(linalg::spectral_abscissa(&lin.a) < 0.0);
        let lt = &p.config().lambda_true;
        assert!((&lin.lambda - lt).norm() < 1e-6 * lt.norm());
    }

    #[test]
    fn augmented_spectrum_is_union() {
        let p = plant();
        let lin = p.linearize().unwrap();
        let mut union: Vec<f64> = linalg::eigenvalues(&lin.a).iter().map(|l| l.re).collect();
        union.extend(linalg::eigenvalues(&lin.lambda).iter().map(|l| l.re));
        union.sort_by(f64::total_cmp);
        let mut aug: Vec<f64> = linalg::eigenvalues(&lin.augmented()).iter().map(|l| l.re).collect();
        aug.sort_by(f64::total_cmp);
        for (a, b) in union.iter().zip(&aug) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn observation_dimensions() {
        let p = plant();
        let obs = p.equilibrium_observation();
        assert_eq!(obs.y.len(), 9);
        assert!((obs.y[8] + 0.3).abs() < 1e-12);
        let cfg = PlantConfig { observed_nodes: vec![12], ..PlantConfig::default() };
        let p = Plant::new(cfg).unwrap();
        assert_eq!(p.equilibrium_observation().y.len(), 3);
    }

    #[test]
    fn observation_noise_std() {
        let sigma = 5e-4;
        let cfg = PlantConfig { noise_std: sigma, observed_nodes: vec![12], ..PlantConfig::default() };
        let p = Plant::new(cfg).unwrap();
        let s = PlantState::equilibrium(p.config());
        let clean = p.observe(&s, &[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = Vec::new();
        while acc.len() < 10_000 {
            let o = p.observe_noisy(&s, &[0.0, 0.0], &mut rng);
            acc.extend(o.y.iter().zip(&clean.y).map(|(a, b)| a - b));
        }
        acc.truncate(10_000);
        let std = linalg::rms(&acc);
        assert!((std / sigma - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = PlantConfig::default();
        cfg.lambda_true[(0, 0)] = 1.0;
        assert!(Plant::new(cfg).is_err());
        let cfg = PlantConfig { observed_nodes: vec![4, 4], ..PlantConfig::default() };
        assert!(Plant::new(cfg).is_err());
        let cfg = PlantConfig { observed_nodes: vec![13], ..PlantConfig::default() };
        assert!(Plant::new(cfg).is_err());
        let cfg = PlantConfig { k_lin: 0.0, ..PlantConfig::default() };
        assert!(Plant::new(cfg).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = plant();
        let s = PlantState::equilibrium(p.config());
        assert!(matches!(p.derivative(&s, &[0.0]), Err(Error::Dimension { .. })));
    }
}
