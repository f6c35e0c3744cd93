//! Data pipeline: controlled decay collection, random staircase excitation,
//! offline Kalman/RTS smoothing, delay embedding, derivative estimation and
//! trajectory-disjoint dataset splits.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{Observation, Plant, PlantState};
use crate::serde_mat;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub tag: String,
    /// Index of the first sample after the input pulse is released.
    #[serde(default)]
    pub release_index: Option<usize>,
}

/// Uniformly sampled series of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Observation>,
    pub dt: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.samples.first().map_or(0, |s| s.y.len())
    }

    pub fn n_inputs(&self) -> usize {
        self.samples.first().map_or(0, |s| s.u.len())
    }

    /// Checks uniform timestamps and consistent sample dimensions.
    pub fn validate(&self) -> Result<()> {
        let (o, m) = (self.n_obs(), self.n_inputs());
        for (k, s) in self.samples.iter().enumerate() {
            if s.y.len() != o || s.u.len() != m || s.u_ref.len() != m {
                return Err(Error::Dimension { what: format!("sample {k}"), expected: o + 2 * m, got: s.y.len() + s.u.len() + s.u_ref.len() });
            }
            let expected_t = self.samples[0].t + k as f64 * self.dt;
            if (s.t - expected_t).abs() > 1e-9 {
                return Err(Error::Parameter(format!("non-uniform timestamp at sample {k}: {} vs {expected_t}", s.t)));
            }
        }
        Ok(())
    }

    /// Writes `t,y1..yo,u1..um,uref1..urefm`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (o, m) = (self.n_obs(), self.n_inputs());
        let mut header = vec!["t".to_string()];
        header.extend((1..=o).map(|i| format!("y{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=m).map(|i| format!("uref{i}")));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> = std::iter::once(s.t)
                .chain(s.y.iter().cloned())
                .chain(s.u.iter().cloned())
                .chain(s.u_ref.iter().cloned())
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Parses the CSV layout of [`Trajectory::write_csv`]; `dt` is inferred
    /// from the first two timestamps.
    pub fn read_csv<R: BufRead>(r: R, meta: TrajectoryMeta) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parameter("empty trajectory csv".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let o = cols.iter().filter(|c| c.starts_with('y')).count();
        let m = cols.iter().filter(|c| c.starts_with("uref")).count();
        if cols.first() != Some(&"t") || cols.len() != 1 + o + 2 * m {
            return Err(Error::Parameter(format!("unexpected csv header: {header}")));
        }
        let mut samples = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parameter(format!("csv row {}: {e}", k + 2)))?;
            if vals.len() != cols.len() {
                return Err(Error::Parameter(format!("csv row {} has {} fields", k + 2, vals.len())));
            }
            samples.push(Observation {
                t: vals[0],
                y: vals[1..1 + o].to_vec(),
                u: vals[1 + o..1 + o + m].to_vec(),
                u_ref: vals[1 + o + m..].to_vec(),
            });
        }
        let dt = if samples.len() > 1 { samples[1].t - samples[0].t } else { 0.0 };
        let traj = Trajectory { samples, dt, meta };
        traj.validate()?;
        Ok(traj)
    }
}

/// Controlled decay collection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProtocol {
    pub n_traj: usize,
    /// Duration the random input pulse is held (s).
    pub pulse_duration: f64,
    /// Norm of the commanded pulse.
    pub pulse_magnitude: f64,
    /// Seed of the per-trajectory direction and noise streams.
    pub direction_seed: u64,
    /// Recording time after release (s).
    pub record_horizon: f64,
    pub dt: f64,
    /// Input bound the pulse must respect.
    #[serde(default = "default_input_bound")]
    pub input_bound: f64,
}

fn default_input_bound() -> f64 {
    1.0
}

impl Default for DecayProtocol {
    fn default() -> Self {
        DecayProtocol {
            n_traj: 30,
            pulse_duration: 0.4,
            pulse_magnitude: 0.8,
            direction_seed: 1,
            record_horizon: 4.0,
            dt: 0.02,
            input_bound: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecayCollection {
    pub trajectories: Vec<Trajectory>,
    /// Trajectories dropped because the plant integration blew up.
    pub discarded: usize,
}

fn random_direction<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Simulates the plant from rest under a per-sample command sequence.
///
/// Sample `k` records the state at `k dt` together with the command applied
/// over `[k dt, (k+1) dt)`; one extra sample closes the series.
pub fn simulate_commands<R: Rng>(plant: &Plant, commands: &[Vec<f64>], dt: f64, rng: &mut R) -> Result<Vec<Observation>> {
    let m = plant.config().m_inputs;
    let mut state = PlantState::equilibrium(plant.config());
    let mut samples = Vec::with_capacity(commands.len() + 1);
    for cmd in commands {
        samples.push(plant.observe_noisy(&state, cmd, rng));
        state = plant.advance(&state, cmd, dt)?;
    }
    let last = commands.last().cloned().unwrap_or_else(|| vec![0.0; m]);
    samples.push(plant.observe_noisy(&state, &last, rng));
    Ok(samples)
}

/// Randomized pulse-and-release experiments recording the controlled decay
/// of the actuator-augmented state.
pub fn collect_decays(plant: &Plant, protocol: &DecayProtocol) -> Result<DecayCollection> {
    if protocol.pulse_magnitude < 0.0 || protocol.pulse_magnitude > protocol.input_bound {
        return Err(Error::Parameter(format!(
            "pulse magnitude {} outside actuator bound {}",
            protocol.pulse_magnitude, protocol.input_bound
        )));
    }
    if !(protocol.dt > 0.0) {
        return Err(Error::Parameter("dt must be positive".into()));
    }
    let m = plant.config().m_inputs;
    let n_pulse = (protocol.pulse_duration / protocol.dt).round() as usize;
    let n_decay = (protocol.record_horizon / protocol.dt).round() as usize;
    let mut trajectories = Vec::with_capacity(protocol.n_traj);
    let mut discarded = 0;
    for i in 0..protocol.n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.direction_seed);
        rng.set_stream(i as u64);
        let dir = random_direction(m, &mut rng);
        let pulse: Vec<f64> = dir.iter().map(|d| d * protocol.pulse_magnitude).collect();
        let commands: Vec<Vec<f64>> = (0..n_pulse + n_decay)
            .map(|k| if k < n_pulse { pulse.clone() } else { vec![0.0; m] })
            .collect();
        match simulate_commands(plant, &commands, protocol.dt, &mut rng) {
            Ok(samples) => trajectories.push(Trajectory {
                samples,
                dt: protocol.dt,
                meta: TrajectoryMeta { seed: protocol.direction_seed, tag: format!("decay-{i:03}"), release_index: Some(n_pulse) },
            }),
            Err(e) => {
                log::warn!("decay trajectory {i} discarded: {e}");
                discarded += 1;
            }
        }
    }
    if discarded > 0 {
        log::warn!("{discarded} of {} decay trajectories discarded", protocol.n_traj);
    }
    Ok(DecayCollection { trajectories, discarded })
}

/// Per-input independent staircase: each level is drawn uniformly in
/// `[-amplitude, amplitude]` and held for `hold_steps` samples.
pub fn staircase(m: usize, n_steps: usize, hold_steps: usize, amplitude: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hold = hold_steps.max(1);
    let mut level = vec![0.0; m];
    (0..n_steps)
        .map(|k| {
            if k % hold == 0 {
                for l in level.iter_mut() {
                    *l = rng.random_range(-amplitude..=amplitude);
                }
            }
            level.clone()
        })
        .collect()
}

/// Staircase-excited trajectory from rest.
pub fn collect_staircase(plant: &Plant, duration: f64, dt: f64, hold: f64, amplitude: f64, seed: u64, tag: &str) -> Result<Trajectory> {
    let m = plant.config().m_inputs;
    let n = (duration / dt).round() as usize;
    let hold_steps = (hold / dt).round() as usize;
    let commands = staircase(m, n, hold_steps, amplitude, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5e45);
    let samples = simulate_commands(plant, &commands, dt, &mut rng)?;
    Ok(Trajectory { samples, dt, meta: TrajectoryMeta { seed, tag: tag.to_string(), release_index: None } })
}

/// Constant-velocity Kalman filter with Rauch-Tung-Striebel smoothing applied
/// independently to every observed coordinate. Actuator channels pass
/// through untouched.
///
/// `q_noise` is the white-acceleration spectral density, `r_noise` the
/// measurement variance.
pub fn kalman_rts_smooth(traj: &Trajectory, q_noise: f64, r_noise: f64) -> Result<Trajectory> {
    if !(q_noise > 0.0) || !(r_noise > 0.0) {
        return Err(Error::Parameter("q_noise and r_noise must be positive".into()));
    }
    let n = traj.len();
    let mut out = traj.clone();
    if n == 0 {
        return Ok(out);
    }
    let dt = traj.dt;
    let f = Matrix2::new(1.0, dt, 0.0, 1.0);
    let q = Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt) * q_noise;
    for c in 0..traj.n_obs() {
        let mut xf = Vec::with_capacity(n);
        let mut pf = Vec::with_capacity(n);
        let mut xp_all = Vec::with_capacity(n);
        let mut pp_all = Vec::with_capacity(n);
        let mut x = Vector2::new(traj.samples[0].y[c], 0.0);
        let mut p = Matrix2::new(r_noise, 0.0, 0.0, 1.0);
        for k in 0..n {
            let (xp, pp) = if k == 0 { (x, p) } else { (f * x, f * p * f.transpose() + q) };
            let innov = traj.samples[k].y[c] - xp[0];
            let s = pp[(0, 0)] + r_noise;
            let gain = Vector2::new(pp[(0, 0)], pp[(1, 0)]) / s;
            x = xp + gain * innov;
            p = pp - gain * Vector2::new(pp[(0, 0)], pp[(0, 1)]).transpose();
            p = (p + p.transpose()) * 0.5;
            if !p.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("kalman covariance non-finite at sample {k}")));
            }
            xp_all.push(xp);
            pp_all.push(pp);
            xf.push(x);
            pf.push(p);
        }
        let mut xs = xf[n - 1];
        let mut ps = pf[n - 1];
        out.samples[n - 1].y[c] = xs[0];
        for k in (0..n - 1).rev() {
            let pp_inv = pp_all[k + 1]
                .try_inverse()
                .ok_or_else(|| Error::Numerical(format!("singular predicted covariance at sample {}", k + 1)))?;
            let gain = pf[k] * f.transpose() * pp_inv;
            xs = xf[k] + gain * (xs - xp_all[k + 1]);
            ps = pf[k] + gain * (ps - pp_all[k + 1]) * gain.transpose();
            if !ps.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("smoother covariance non-finite at sample {k}")));
            }
            out.samples[k].y[c] = xs[0];
        }
    }
    Ok(out)
}

/// Stacks `lags` per-lag blocks `[y(t - k dt); u(t - k dt)]`, newest first,
/// from the last `lags` samples of `window`.
pub fn embed_window(window: &[Observation], lags: usize) -> Result<DVector<f64>> {
    if lags < 1 {
        return Err(Error::Parameter("embedding depth must be at least 1".into()));
    }
    if window.len() < lags {
        return Err(Error::Parameter(format!("need {lags} samples to embed, have {}", window.len())));
    }
    let last = window.len() - 1;
    let (o, m) = (window[last].y.len(), window[last].u.len());
    let mut v = Vec::with_capacity(lags * (o + m));
    for k in 0..lags {
        let s = &window[last - k];
        v.extend_from_slice(&s.y);
        v.extend_from_slice(&s.u);
    }
    Ok(DVector::from_vec(v))
}

/// Delay-embeds a trajectory; the first `lags - 1` samples only serve as history.
pub fn delay_embed(traj: &Trajectory, lags: usize) -> Result<Vec<DVector<f64>>> {
    if lags < 1 {
        return Err(Error::Parameter("embedding depth must be at least 1".into()));
    }
    if traj.len() <= lags.saturating_sub(1) || traj.len() < lags {
        return Err(Error::Parameter(format!("trajectory of length {} too short for {lags} lags", traj.len())));
    }
    (lags - 1..traj.len()).map(|k| embed_window(&traj.samples[..=k], lags)).collect()
}

/// Derivative of a uniformly sampled series: fourth-order central differences
/// in the interior, second-order stencils at the two samples nearest each end.
pub fn estimate_derivatives(series: &[DVector<f64>], dt: f64) -> Result<Vec<DVector<f64>>> {
    let n = series.len();
    if n < 5 {
        return Err(Error::Parameter(format!("need at least 5 samples for derivatives, have {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let d = match k {
            0 => (-3.0 * &series[0] + 4.0 * &series[1] - &series[2]) / (2.0 * dt),
            1 => (&series[2] - &series[0]) / (2.0 * dt),
            k if k == n - 2 => (&series[n - 1] - &series[n - 3]) / (2.0 * dt),
            k if k == n - 1 => (3.0 * &series[n - 1] - 4.0 * &series[n - 2] + &series[n - 3]) / (2.0 * dt),
            k => (-&series[k + 2] + 8.0 * &series[k + 1] - 8.0 * &series[k - 1] + &series[k - 2]) / (12.0 * dt),
        };
        out.push(d);
    }
    Ok(out)
}

/// Affine coordinate scaling `x_n = (x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    #[serde(with = "serde_mat::vector")]
    pub center: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub scale: DVector<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { center: DVector::zeros(dim), scale: DVector::from_element(dim, 1.0) }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.center).component_div(&self.scale)
    }

    pub fn denormalize(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.scale) + &self.center
    }

    /// Centers each lag block at the equilibrium `[y_eq; u_eq]` and scales
    /// every observation group and the actuator block by one RMS value each.
    pub fn for_embedding(equilibrium: &Observation, groups: &[usize], lags: usize, data: &[DVector<f64>]) -> Self {
        let (o, m) = (equilibrium.y.len(), equilibrium.u.len());
        let block: Vec<f64> = equilibrium.y.iter().chain(&equilibrium.u).cloned().collect();
        let center = DVector::from_fn(lags * (o + m), |i, _| block[i % (o + m)]);
        // Group boundaries inside one block; the actuator block is the last group.
        let mut bounds = Vec::new();
        let mut start = 0;
        for &g in groups {
            bounds.push((start, start + g));
            start += g;
        }
        bounds.push((o, o + m));
        let mut block_scale = vec![1.0; o + m];
        for &(a, b) in &bounds {
            let mut acc = 0.0;
            let mut count = 0usize;
            for x in data {
                for i in a..b {
                    acc += (x[i] - center[i]).powi(2);
                    count += 1;
                }
            }
            let rms = if count > 0 { (acc / count as f64).sqrt() } else { 0.0 };
            let s = if rms > 1e-12 { rms } else { 1.0 };
            block_scale[a..b].iter_mut().for_each(|v| *v = s);
        }
        let scale = DVector::from_fn(lags * (o + m), |i, _| block_scale[i % (o + m)]);
        Normalizer { center, scale }
    }
}

/// Mean of the first (pre-excitation) sample across trajectories.
pub fn estimate_equilibrium(trajs: &[Trajectory]) -> Result<Observation> {
    let first: Vec<&Observation> = trajs.iter().filter_map(|t| t.samples.first()).collect();
    if first.is_empty() {
        return Err(Error::Parameter("no trajectories to estimate the equilibrium from".into()));
    }
    let n = first.len() as f64;
    let mean = |f: &dyn Fn(&Observation) -> &Vec<f64>| -> Vec<f64> {
        let dim = f(first[0]).len();
        (0..dim).map(|i| first.iter().map(|s| f(s)[i]).sum::<f64>() / n).collect()
    };
    Ok(Observation { t: 0.0, y: mean(&|s| &s.y), u: mean(&|s| &s.u), u_ref: vec![0.0; first[0].u.len()] })
}

/// Trajectory-level split indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of trajectory indices into train/validation/test by the
/// given fractions (the test share takes the remainder).
pub fn split_trajectories(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut train = idx[..n_train].to_vec();
    let mut validation = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Split { train, validation, test }
}

/// Partitioned decay data with the normalization of the training part.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub normalizer: Normalizer,
    pub lags: usize,
}

impl Dataset {
    pub fn build(trajs: &[Trajectory], lags: usize, groups: &[usize], split: &Split) -> Result<Self> {
        let pick = |ids: &[usize]| ids.iter().map(|&i| trajs[i].clone()).collect::<Vec<_>>();
        let train = pick(&split.train);
        let validation = pick(&split.validation);
        let test = pick(&split.test);
        let equilibrium = estimate_equilibrium(&train)?;
        let mut embedded = Vec::new();
        for t in &train {
            embedded.extend(delay_embed(t, lags)?);
        }
        let normalizer = Normalizer::for_embedding(&equilibrium, groups, lags, &embedded);
        Ok(Dataset { train, validation, test, normalizer, lags })
    }
}

/// Matrix with one normalized embedded vector per row.
pub fn embedded_matrix(trajs: &[Trajectory], lags: usize, normalizer: &Normalizer) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for t in trajs {
        for v in delay_embed(t, lags)? {
            rows.push(normalizer.normalize(&v));
        }
    }
    Ok(crate::linalg::rows_to_matrix(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantConfig;

    fn obs(t: f64, y: Vec<f64>, u: Vec<f64>) -> Observation {
        let m = u.len();
        Observation { t, y, u, u_ref: vec![0.0; m] }
    }

    fn series(f: impl Fn(f64) -> f64, n: usize, dt: f64) -> Vec<DVector<f64>> {
        (0..n).map(|k| DVector::from_element(1, f(k as f64 * dt))).collect()
    }

    #[test]
    fn derivative_exact_for_quadratic() {
        let dt = 0.02;
        let d = estimate_derivatives(&series(|t| t * t, 50, dt), dt).unwrap();
        for k in 2..48 {
            assert!((d[k][0] - 2.0 * k as f64 * dt).abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_truncation_order() {
        let dt = 0.02;
        let d = estimate_derivatives(&series(|t| (10.0 * t).sin(), 200, dt), dt).unwrap();
        let bound = (10.0 * dt).powi(4);
        for k in 2..198 {
            let exact = 10.0 * (10.0 * k as f64 * dt).cos();
            assert!((d[k][0] - exact).abs() < bound);
        }
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let d = estimate_derivatives(&series(|_| 3.5, 10, 0.1), 0.1).unwrap();
        assert!(d.iter().all(|v| v[0].abs() < 1e-12));
        assert!(estimate_derivatives(&series(|_| 1.0, 4, 0.1), 0.1).is_err());
    }

    #[test]
    fn embedding_layout() {
        let traj = Trajectory {
            samples: (0..4).map(|k| obs(k as f64, vec![k as f64, 10.0 + k as f64], vec![-(k as f64)])).collect(),
            dt: 1.0,
            meta: TrajectoryMeta::default(),
        };
        let one = delay_embed(&traj, 1).unwrap();
        assert_eq!(one.len(), 4);
        assert_eq!(one[2].as_slice(), &[2.0, 12.0, -2.0]);
        let two = delay_embed(&traj, 2).unwrap();
        assert_eq!(two.len(), 3);
        assert_eq!(two[0].as_slice(), &[1.0, 11.0, -1.0, 0.0, 10.0, 0.0]);
        assert!(delay_embed(&traj, 0).is_err());
        assert!(delay_embed(&traj, 5).is_err());
    }

    #[test]
    fn embedding_dimension_for_markers() {
        let traj = Trajectory {
            samples: (0..5).map(|k| obs(k as f64 * 0.02, vec![0.0; 9], vec![0.0; 2])).collect(),
            dt: 0.02,
            meta: TrajectoryMeta::default(),
        };
        assert_eq!(delay_embed(&traj, 2).unwrap()[0].len(), 22);
    }

    #[test]
    fn constant_trajectory_has_identical_blocks() {
        let traj = Trajectory {
            samples: (0..6).map(|k| obs(k as f64, vec![1.5, -2.0], vec![0.25])).collect(),
            dt: 1.0,
            meta: TrajectoryMeta::default(),
        };
        for v in delay_embed(&traj, 3).unwrap() {
            assert_eq!(v.rows(0, 3), v.rows(3, 3));
            assert_eq!(v.rows(0, 3), v.rows(6, 3));
        }
    }

    #[test]
    fn smoother_pins_to_noiseless_measurements() {
        let dt = 0.02;
        let traj = Trajectory {
            samples: (0..200).map(|k| obs(k as f64 * dt, vec![(2.0 * std::f64::consts::PI * k as f64 * dt).sin()], vec![0.0])).collect(),
            dt,
            meta: TrajectoryMeta::default(),
        };
        let s = kalman_rts_smooth(&traj, 1.0, 1e-12).unwrap();
        for (a, b) in s.samples.iter().zip(&traj.samples) {
            assert!((a.y[0] - b.y[0]).abs() < 1e-9);
        }
        assert!(kalman_rts_smooth(&traj, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let eq = obs(0.0, vec![0.1, -0.3], vec![0.0]);
        let data: Vec<DVector<f64>> = (0..20).map(|k| DVector::from_vec(vec![0.1 + 0.01 * k as f64, -0.3, 0.5 - 0.05 * k as f64, 0.1, -0.3, 0.2])).collect();
        let n = Normalizer::for_embedding(&eq, &[2], 2, &data);
        for x in &data {
            let back = n.denormalize(&n.normalize(x));
            assert!((back - x).amax() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let s = split_trajectories(30, 0.7, 0.15, 9);
        assert_eq!(s.train.len(), 21);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(s, split_trajectories(30, 0.7, 0.15, 9));
    }

    #[test]
    fn zero_pulse_stays_at_equilibrium() {
        let plant = Plant::new(PlantConfig::default()).unwrap();
        let protocol = DecayProtocol { n_traj: 2, pulse_magnitude: 0.0, record_horizon: 0.5, ..DecayProtocol::default() };
        let c = collect_decays(&plant, &protocol).unwrap();
        let eq = plant.equilibrium_observation();
        for t in &c.trajectories {
            for s in &t.samples {
                for (a, b) in s.y.iter().zip(&eq.y) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!(s.u.iter().all(|&u| u == 0.0));
            }
        }
    }

    #[test]
    fn pulse_beyond_bound_is_rejected() {
        let plant = Plant::new(PlantConfig::default()).unwrap();
        let protocol = DecayProtocol { pulse_magnitude: 1.5, ..DecayProtocol::default() };
        assert!(collect_decays(&plant, &protocol).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let traj = Trajectory {
            samples: (0..3).map(|k| obs(k as f64 * 0.02, vec![0.1 * k as f64, -0.3], vec![1.0 / 3.0])).collect(),
            dt: 0.02,
            meta: TrajectoryMeta::default(),
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y1,y2,u1,uref1\n"));
        let back = Trajectory::read_csv(std::io::Cursor::new(buf), TrajectoryMeta::default()).unwrap();
        assert_eq!(back.samples, traj.samples);
    }
}
