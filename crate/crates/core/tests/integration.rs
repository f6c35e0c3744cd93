use std::sync::OnceLock;

use cassm_core::cassm::{fit_cassm, CassmConfig, FeatureConfig, ManifoldModel};
use cassm_core::control::qp::{kkt_residual, solve_box_qp};
use cassm_core::model::{rollout, ReducedModel};
use cassm_core::pipeline::{collect_decays, collect_staircase, DecayProtocol, Normalizer, Trajectory};
use cassm_core::plant::{ObservationMode, Plant, PlantConfig, PlantState};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn linear_plant() -> Plant {
    Plant::new(PlantConfig { linear: true, observation: ObservationMode::FullState, ..PlantConfig::default() }).unwrap()
}

fn linear_model() -> &'static ManifoldModel {
    static MODEL: OnceLock<ManifoldModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let plant = linear_plant();
        let data = collect_decays(&plant, &DecayProtocol { n_traj: 12, ..DecayProtocol::default() }).unwrap();
        let poly = FeatureConfig::Polynomial { degree_lo: 2, degree_hi: 2 };
        let cfg = CassmConfig { n: 6, lags: 1, settle_time: 0.6, ridge: 1e-10, w_features: poly.clone(), r_features: poly, ..CassmConfig::default() };
        fit_cassm(&data.trajectories, &plant.config().obs_groups(), &cfg).unwrap().0
    })
}

#[test]
fn plant_rests_at_equilibrium() {
    let plant = linear_plant();
    let s0 = PlantState::equilibrium(plant.config());
    let mut s = s0.clone();
    for _ in 0..50 {
        s = plant.advance(&s, &[0.0, 0.0], 0.02).unwrap();
    }
    let a = plant.observe(&s0, &[0.0, 0.0]);
    let b = plant.observe(&s, &[0.0, 0.0]);
    let drift = a.y.iter().zip(&b.y).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-9, "drift {drift}");
}

#[test]
fn decay_csv_round_trip() {
    let plant = linear_plant();
    let data = collect_decays(&plant, &DecayProtocol { n_traj: 1, record_horizon: 0.5, ..DecayProtocol::default() }).unwrap();
    let t = &data.trajectories[0];
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let back = Trajectory::read_csv(buf.as_slice(), t.meta.clone()).unwrap();
    assert_eq!(&back, t);
}

#[test]
fn fitted_model_tracks_staircase_response() {
    let plant = linear_plant();
    let m = linear_model();
    let traj = collect_staircase(&plant, 3.0, 0.02, 0.25, 0.15, 7, "test").unwrap();
    let start = 50;
    let commands: Vec<Vec<f64>> = traj.samples[start..start + 25].iter().map(|s| s.u_ref.clone()).collect();
    let pred = rollout(m, &traj.samples[..=start], &commands).unwrap();
    let tip = plant.tip_rows().unwrap();
    let rest = m.decode(&DVector::zeros(m.n));
    let (mut num, mut den) = (0.0, 0.0);
    for (j, y) in pred.iter().enumerate() {
        let truth = &traj.samples[start + 1 + j].y;
        for &r in &tip {
            num += (y[r] - truth[r]).powi(2);
            den += (truth[r] - rest[r]).powi(2);
        }
    }
    // Step edges excite fast modes the six-dimensional model leaves out.
    assert!((num / den).sqrt() < 0.1, "relative tip error {}", (num / den).sqrt());
}

proptest! {
    #[test]
    fn normalizer_round_trip(v in prop::collection::vec(-10.0f64..10.0, 6), s in prop::collection::vec(0.1f64..5.0, 6)) {
        let n = Normalizer { center: DVector::from_vec(v.clone()), scale: DVector::from_vec(s) };
        let x = DVector::from_fn(6, |i, _| v[i] * 0.5 + 1.0);
        let back = n.denormalize(&n.normalize(&x));
        prop_assert!((back - x).amax() < 1e-12);
    }

    #[test]
    fn chart_inverts_parameterization(z in prop::collection::vec(-0.5f64..0.5, 6)) {
        let m = linear_model();
        let z = DVector::from_vec(z);
        let x = m.normalizer.denormalize(&m.parameterization(&z));
        prop_assert!((m.chart(&x) - &z).amax() < 1e-12);
    }

    #[test]
    fn box_qp_reaches_kkt(seed in 0u64..1000, n in 1usize..8) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let lo = DVector::from_element(n, -0.5);
        let hi = DVector::from_element(n, 0.5);
        let sol = solve_box_qp(&p, &q, &lo, &hi, &DVector::zeros(n), 1e-10, 5000);
        prop_assert!(sol.x.iter().all(|x| (-0.5..=0.5).contains(x)));
        prop_assert!(kkt_residual(&p, &q, &lo, &hi, &sol.x) < 1e-8);
    }
}
