use super::*;
use crate::model::{AnalyticGaussianScore, ScoreConfig, ScoreModel, ZeroScore};
use crate::stats;

fn sched() -> DiffusionSchedule {
    DiffusionSchedule::default()
}

fn flat(n: usize) -> SubdivisionSchedule {
    SubdivisionSchedule::new(n, 1, 0, &sched(), 0.0).unwrap()
}

fn small_model(layout: TrajectoryLayout, seed: u64) -> ScoreModel {
    let cfg = ScoreConfig { hidden: 16, depth: 1, time_embed: 8, interaction_hidden: 8, kernel_rank: 2, ..Default::default() };
    ScoreModel::seeded(layout, cfg, seed).unwrap()
}

fn gs_layout() -> TrajectoryLayout {
    TrajectoryLayout { d_s: 1, d_a: 1, horizon: 3 }
}

#[test]
fn zero_dynamics_leave_particles_unchanged() {
    let s = DiffusionSchedule { beta_min: 0.0, beta_max: 0.0, ..sched() };
    let mut ps = ParticleSystem::gaussian(5, 3, 1.0, 4);
    let before = ps.x.clone();
    reverse_step(&ZeroScore { dim: 3 }, &s, &mut ps, s.dt(), None).unwrap();
    assert_eq!(ps.x, before);
}

#[test]
fn stepping_below_t_min_is_rejected() {
    let s = sched();
    let mut ps = ParticleSystem::gaussian(2, 3, s.t_min, 4);
    assert!(reverse_step(&ZeroScore { dim: 3 }, &s, &mut ps, s.dt(), None).is_err());
}

#[test]
fn zero_eta_is_bit_identical_to_unguided() {
    let l = gs_layout();
    let m = small_model(l, 1);
    let vm = ValueModel::new(l, 0.9, 8, 1, 3).unwrap();
    let norm = Normalizer::identity(l.dim());
    let mut a = ParticleSystem::gaussian(6, l.dim(), 0.8, 2);
    let mut b = a.clone();
    let g = Guidance { value: &vm, normalizer: &norm, eta: 0.0 };
    reverse_step(&m, &sched(), &mut a, 0.005, Some(&g)).unwrap();
    reverse_step(&m, &sched(), &mut b, 0.005, None).unwrap();
    assert_eq!(a.x.data, b.x.data);
}

#[test]
fn guidance_shift_matches_explicit_euler_update() {
    let l = gs_layout();
    let m = small_model(l, 1);
    let vm = ValueModel::new(l, 0.9, 8, 1, 3).unwrap();
    let norm = Normalizer { mean: vec![0.1; l.dim()], std: vec![0.5; l.dim()] };
    let s = sched();
    let (t, dt) = (0.6, 0.005);
    for eta in [1e-4, 1e-2] {
        let mut a = ParticleSystem::gaussian(5, l.dim(), t, 2);
        let mut b = a.clone();
        let g = Guidance { value: &vm, normalizer: &norm, eta };
        let grad = g.gradient(&a.x).unwrap();
        reverse_step(&m, &s, &mut a, dt, Some(&g)).unwrap();
        reverse_step(&m, &s, &mut b, dt, None).unwrap();
        let g2 = s.diffusion(t).powi(2);
        for k in 0..a.x.data.len() {
            let want = g2 * eta * grad.data[k] * dt;
            assert!((a.x.data[k] - b.x.data[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn inpaint_properties() {
    let mut ps = ParticleSystem::gaussian(4, 7, 0.5, 1);
    let obs = Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let before = ps.x.clone();
    inpaint(&mut ps, &obs).unwrap();
    let once = ps.x.clone();
    inpaint(&mut ps, &obs).unwrap();
    assert_eq!(ps.x, once);
    for i in 0..4 {
        assert_eq!(ps.x.get(i, 0), obs.get(i, 0));
        assert_eq!(&ps.x.row(i)[1..], &before.row(i)[1..]);
    }
    let mut q = ParticleSystem::gaussian(4, 7, 0.5, 1);
    let same = q.x.cols_range(0, 1);
    inpaint(&mut q, &same).unwrap();
    assert_eq!(q.x, before);
    assert!(inpaint(&mut q, &Mat::zeros(2, 1)).is_err());
}

#[test]
fn branching_copies_and_counts() {
    let quiet = DiffusionSchedule { beta_min: 0.0, beta_max: 0.0, ..sched() };
    let sub = SubdivisionSchedule::new(8, 2, 1, &sched(), 0.1).unwrap();
    let mut ps = ParticleSystem::gaussian(4, 3, 0.5, 1);
    let parents = ps.x.clone();
    branch(&mut ps, &ZeroScore { dim: 3 }, &quiet, &sub, 0.0).unwrap();
    assert_eq!(ps.len(), 8);
    for i in 0..4 {
        assert_eq!(ps.x.row(i), parents.row(i));
        assert_eq!(ps.x.row(4 + i), parents.row(i));
    }
    assert!(branch(&mut ps, &ZeroScore { dim: 3 }, &quiet, &sub, 0.0).is_err());

    let mut noisy = ParticleSystem::gaussian(4, 3, 0.5, 1);
    branch(&mut noisy, &ZeroScore { dim: 3 }, &sched(), &sub, 0.1).unwrap();
    assert_eq!(&noisy.x.data[..12], &parents.data[..]);
    assert_ne!(&noisy.x.data[12..], &parents.data[..]);
}

#[test]
fn default_branching_coefficient() {
    let cfg = PlanConfig::new(flat(4), ActionProjection::Identity);
    assert_eq!(cfg.delta_k, 0.1);
}

fn oracle_planner(dim: usize) -> (AnalyticGaussianScore, Normalizer) {
    (AnalyticGaussianScore { schedule: sched(), dim }, Normalizer::identity(dim))
}

#[test]
fn flat_plan_work_and_inpaint() {
    let l = gs_layout();
    let (src, norm) = oracle_planner(l.dim());
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout: l, value: None };
    let cfg = PlanConfig::new(flat(6), ActionProjection::Identity);
    let obs = Mat::from_vec(6, 1, vec![0.3, -1.1, 2.5, 0.1, 7.0, -0.4]).unwrap();
    let out = p.plan(&cfg, Some(&obs), 3).unwrap();
    assert_eq!(out.work, 200.0 * 6.0);
    for i in 0..6 {
        assert_eq!(out.trajectories.get(i, 0).to_bits(), obs.get(i, 0).to_bits());
    }
}

#[test]
fn hierarchical_work_matches_closed_form() {
    let l = gs_layout();
    let (src, _) = oracle_planner(l.dim());
    let norm = Normalizer { mean: vec![0.2; l.dim()], std: vec![1.5; l.dim()] };
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout: l, value: None };
    let n = 32;
    let sub = SubdivisionSchedule::new(n, 2, 4, &sched(), 0.1).unwrap();
    let cfg = PlanConfig::new(sub.clone(), ActionProjection::Identity);
    let obs = Mat::from_vec(n, 1, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let out = p.plan(&cfg, Some(&obs), 3).unwrap();
    assert_eq!(out.work, sub.work_full(n).unwrap());
    assert_eq!(out.work, 77.59375 * n as f64);
    assert_eq!(out.trajectories.rows, n);
    for i in 0..n {
        assert_eq!(out.trajectories.get(i, 0).to_bits(), obs.get(i, 0).to_bits());
    }
}

#[test]
fn plan_rejects_mismatched_components() {
    let l = gs_layout();
    let (src, norm) = oracle_planner(l.dim() + 1);
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout: l, value: None };
    let cfg = PlanConfig::new(flat(2), ActionProjection::Identity);
    assert!(matches!(p.plan(&cfg, None, 0), Err(Error::Shape(_))));
}

#[test]
fn oracle_sampler_recovers_unit_gaussian() {
    let d = 2;
    let (src, norm) = oracle_planner(d);
    let layout = TrajectoryLayout { d_s: 1, d_a: 0, horizon: 1 };
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout, value: None };
    let n = 5000;
    let out = p.plan(&PlanConfig::new(flat(n), ActionProjection::Identity), None, 11).unwrap();
    let all = &out.trajectories.data;
    assert!(stats::mean(all).abs() < 4.0 / ((n * d) as f64).sqrt());
    for c in 0..d {
        let col: Vec<f64> = (0..n).map(|i| out.trajectories.get(i, c)).collect();
        let v = stats::variance(&col);
        assert!((0.9..=1.1).contains(&v), "var {v}");
        assert!(stats::ks_statistic_std_normal(&col) < stats::ks_critical(n, 0.01));
    }
}

#[test]
fn action_projection() {
    let l = TrajectoryLayout { d_s: 1, d_a: 3, horizon: 1 };
    let row = |a: [f64; 3]| {
        let mut v = vec![0.0; l.dim()];
        v[l.action_offset(0)..l.action_offset(0) + 3].copy_from_slice(&a);
        Mat::from_vec(1, l.dim(), v).unwrap()
    };
    assert_eq!(project_actions(&l, &row([0.0, 0.0, 1.0]), ActionProjection::Argmax).actions, vec![0.0, 0.0, 1.0]);
    assert_eq!(project_actions(&l, &row([0.2, 0.9, -0.1]), ActionProjection::Argmax).actions, vec![0.0, 1.0, 0.0]);
    assert_eq!(project_actions(&l, &row([0.5, 0.5, 0.0]), ActionProjection::Argmax).actions, vec![1.0, 0.0, 0.0]);
    assert_eq!(project_actions(&l, &row([0.5, 0.5, 0.0]), ActionProjection::Identity).actions, vec![0.5, 0.5, 0.0]);
}

#[test]
fn ising_round_is_one_plan_call() {
    let spec = EnvSpec::ising(2, 1.0);
    let (src, norm) = oracle_planner(spec.layout().dim());
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout: spec.layout(), value: None };
    let cfg = PlanConfig::new(flat(4), ActionProjection::for_kind(&spec.action_kind));
    let ex = execute(&spec, &p, &cfg, 0).unwrap();
    assert_eq!(ex.plan_calls, 1);
    assert_eq!(ex.record.actions.len(), 1);
}

#[test]
fn squeeze_episode_replans_every_step() {
    let spec = EnvSpec::gaussian_squeeze(8, 50, 1, 1);
    let (src, norm) = oracle_planner(spec.layout().dim());
    let p = Planner { score: &src, schedule: sched(), normalizer: norm, layout: spec.layout(), value: None };
    let cfg = PlanConfig::new(SubdivisionSchedule::new(8, 2, 3, &sched(), 0.1).unwrap(), ActionProjection::Identity);
    let ex = execute(&spec, &p, &cfg, 5).unwrap();
    assert_eq!(ex.plan_calls, 50);
    assert_eq!(ex.transition_errors.len(), 50);
    assert!(ex.transition_error().is_finite());
}

#[test]
fn transition_error_of_exact_and_shifted_states() {
    let e = [0.5, -1.0, 2.0];
    assert_eq!(step_transition_error(1, &e, &e), 0.0);
    let shifted: Vec<f64> = e.iter().map(|v| v + 0.25).collect();
    assert!((step_transition_error(1, &shifted, &e) - 0.25).abs() < 1e-15);
}

#[test]
fn content_keyed_plans_are_equivariant() {
    let l = gs_layout();
    let m = small_model(l, 5);
    let norm = Normalizer { mean: vec![0.3; l.dim()], std: vec![0.8; l.dim()] };
    let p = Planner { score: &m, schedule: sched(), normalizer: norm, layout: l, value: None };
    let n = 8;
    let mut cfg = PlanConfig::new(SubdivisionSchedule::new(n, 2, 1, &sched(), 0.1).unwrap(), ActionProjection::Identity);
    cfg.keying = RngKeying::Content;
    let obs = Mat::from_vec(n, 1, (0..n).map(|i| (i as f64 * 1.7).cos()).collect()).unwrap();
    let base = p.plan(&cfg, Some(&obs), 9).unwrap().trajectories;
    let perm = [5, 2, 7, 0, 1, 6, 3, 4];
    let out = p.plan(&cfg, Some(&gather_rows(&obs, &perm)), 9).unwrap().trajectories;
    assert_eq!(out, gather_rows(&base, &perm));
}
