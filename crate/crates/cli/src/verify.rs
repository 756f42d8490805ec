//! `verify`: pass/fail property suites over the build and any collected data.

use std::fmt;

use anyhow::Result;
use mfdiff_core::env::{self, EnvSpec, JointAction, MeanFieldState};
use mfdiff_core::eval::{
    exploitability_exact_ising, exploitability_learned, gap_series, horizon_fit, parse_gap_csv, BernoulliPolicy,
    BestResponse,
};
use mfdiff_core::model::gradcheck::{check_params, directional_error};
use mfdiff_core::model::{gather_rows, InteractingGaussianScore, Mat, Normalizer, ScoreConfig, ScoreModel, ValueModel};
use mfdiff_core::plan::{ActionProjection, PlanConfig, Planner, RngKeying};
use mfdiff_core::rng;
use mfdiff_core::schedule::{Ablation, DiffusionSchedule, SubdivisionSchedule};
use mfdiff_core::train::{denoising_target, forward_noise, mfvsm_loss_tape};
use mfdiff_core::TrajectoryLayout;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::collect::{check_entry, Manifest};
use crate::config::RunConfig;
use crate::eval::sampler_oracle;

/// Gap measurements bundled with the crate for the horizon-fit suite.
pub const HORIZON_GAPS: &str = include_str!("../../../data/horizon_gap.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e:#}")))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

const STEPS: usize = 200;

/// Random valid `(S, K, b, N)` with `S (K + 1) = 200`.
pub fn random_schedule(r: &mut impl Rng, max_n: usize) -> Result<SubdivisionSchedule> {
    let divisors: Vec<usize> = (1..=STEPS).filter(|d| STEPS.is_multiple_of(*d)).collect();
    let sched = DiffusionSchedule::default();
    loop {
        let k = divisors[r.random_range(0..divisors.len())] - 1;
        let b = r.random_range(1..=4usize);
        let Some(factor) = b.checked_pow(k as u32).filter(|f| *f <= max_n) else { continue };
        let n = factor * r.random_range(1..=(max_n / factor).max(1));
        let c_psi = r.random_range(0..=20) as f64 / 20.0;
        return Ok(SubdivisionSchedule::new(n, b, k, &sched, c_psi)?);
    }
}

/// Both ablations cost `200 N` exactly, and the reference hierarchy costs
/// `77.59375 N`.
pub fn work_identity(count: usize, seed: u64) -> Result<Check> {
    let mut r = rng::stream(&[seed, 1]);
    for _ in 0..count {
        let s = random_schedule(&mut r, 1 << 16)?;
        let n = s.n_target();
        let want = (STEPS * n) as f64;
        let a = s.work_ablation(n, Ablation::NoBranching)?;
        let b = s.work_ablation(n, Ablation::NoSubdivision)?;
        if a != want || b != want {
            let detail = format!("K={} b={} N={n}: {a} / {b} != {want}", s.k_levels, s.branching);
            return Ok(Check::new("work_identity", false, detail));
        }
    }
    let sched = DiffusionSchedule::default();
    for n in [16usize, 64, 256, 1024] {
        let s = SubdivisionSchedule::new(n, 2, 4, &sched, 0.1)?;
        if s.work_full(n)? != 77.59375 * n as f64 {
            return Ok(Check::new("work_identity", false, format!("full work at N={n} is {}", s.work_full(n)?)));
        }
    }
    Ok(Check::new("work_identity", true, format!("{count} schedules; full (40,4,2,0.1) = 77.59375 N")))
}

/// The sampler's own work counter agrees with the schedule algebra.
pub fn runtime_work(count: usize, max_n: usize, seed: u64) -> Result<Check> {
    let mut r = rng::stream(&[seed, 2]);
    let sched = DiffusionSchedule::default();
    let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 2 };
    let score = InteractingGaussianScore { schedule: sched, dim: layout.dim(), coupling: 0.5 };
    for i in 0..count {
        let s = random_schedule(&mut r, max_n)?;
        let n = s.n_target();
        let planner =
            Planner { score: &score, schedule: sched, normalizer: Normalizer::identity(layout.dim()), layout, value: None };
        let out = planner.plan(&PlanConfig::new(s.clone(), ActionProjection::Identity), None, i as u64)?;
        let want = s.work_full(n)?;
        if out.work != want {
            let detail = format!("K={} b={} N={n}: counted {} != {want}", s.k_levels, s.branching, out.work);
            return Ok(Check::new("runtime_work", false, detail));
        }
    }
    Ok(Check::new("runtime_work", true, format!("{count} schedules at N <= {max_n}")))
}

pub fn oracle_check(samples: usize, dim: usize, seed: u64) -> Result<Check> {
    let r = sampler_oracle(&DiffusionSchedule::default(), dim, samples, seed)?;
    let detail = format!(
        "|mean| {:.4}, var [{:.4}, {:.4}], KS {:.4} < {:.4}",
        r.max_abs_mean, r.var_min, r.var_max, r.ks_max, r.ks_critical
    );
    Ok(Check::new("sampler_oracle", r.passed(), detail))
}

/// Worst relative gradient error for each network the pipeline trains or
/// differentiates, on `layout`.
pub fn gradcheck_suite(
    layout: TrajectoryLayout,
    score_cfg: &ScoreConfig,
    value_hidden: usize,
    value_depth: usize,
    directions: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let h = 1e-5;
    let sched = DiffusionSchedule::default();
    let model = ScoreModel::new(layout, score_cfg.clone(), sched, seed)?;
    let mut out = Vec::new();
    for n in [1usize, 6] {
        let x0 = model.random_particles(n, seed + 1);
        let t = 0.37;
        let (xt, eps) = forward_noise(&sched, &x0, t, &mut rng::stream(&[seed, 3]))?;
        let target = denoising_target(&sched, t, &eps);
        let rg = model.random_particles(n, seed + 2);
        let loss = |tape: &mut mfdiff_core::model::Tape, p: &mfdiff_core::model::BoundParams| {
            let s = model.forward_tape(tape, p, t, &xt)?;
            mfvsm_loss_tape(tape, s, &target, Some(&rg), 1.0, 0.5, 0.8)
        };
        let err = check_params(&model.params, &loss, directions, h, seed)?;
        out.push((format!("score_loss_n{n}"), err));
    }

    let vm = ValueModel::new(layout, 0.9, value_hidden, value_depth, seed)?;
    let f = mfdiff_core::model::value::feature_dim(&layout);
    let mut r = rng::stream(&[seed, 4]);
    let feats = Mat::from_vec(5, f, (0..5 * f).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let ys = Mat::from_vec(5, 1, (0..5).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let loss = |tape: &mut mfdiff_core::model::Tape, p: &mfdiff_core::model::BoundParams| {
        let q = vm.q_tape(tape, p, &feats)?;
        let y = tape.leaf(ys.clone());
        let d = tape.sub(q, y)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    };
    out.push(("value_td_loss".into(), check_params(&vm.params, &loss, directions, h, seed)?));

    let trajs = model.random_particles(3, seed + 5);
    let sd = 2 * layout.d_s + layout.d_a;
    let flow: Vec<Vec<f64>> = (0..layout.horizon).map(|_| (0..sd).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let grad = vm.value_gradient(&trajs, &flow)?;
    let total = |x: &[f64]| -> mfdiff_core::Result<f64> {
        let d = layout.dim();
        (0..x.len() / d).map(|i| vm.value_of(&x[i * d..(i + 1) * d], &flow)).sum()
    };
    out.push(("value_input_grad".into(), directional_error(&total, &trajs.data, &grad.data, directions, h, seed)?));
    Ok(out)
}

pub const GRAD_TOL: f64 = 1e-5;

pub fn gradcheck_check(cfg: &RunConfig, directions: usize) -> Result<Check> {
    let errs = gradcheck_suite(
        cfg.spec().layout(),
        &cfg.model,
        cfg.value.fit.hidden,
        cfg.value.fit.depth,
        directions,
        cfg.primary_seed(),
    )?;
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    Ok(Check::new("gradcheck", worst < GRAD_TOL, detail))
}

fn shuffled(n: usize, r: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// Random symmetry of the periodic `side x side` lattice (translation,
/// optional transpose, optional reflections) as a site map.
pub fn lattice_automorphism(side: usize, r: &mut impl Rng) -> Vec<usize> {
    let (dr, dc) = (r.random_range(0..side), r.random_range(0..side));
    let (tr, fr, fc) = (r.random_bool(0.5), r.random_bool(0.5), r.random_bool(0.5));
    (0..side * side)
        .map(|i| {
            let (mut a, mut b) = (i / side, i % side);
            if tr {
                std::mem::swap(&mut a, &mut b);
            }
            if fr {
                a = (side - a) % side;
            }
            if fc {
                b = (side - b) % side;
            }
            ((a + dr) % side) * side + (b + dc) % side
        })
        .collect()
}

fn permute_agents(v: &[f64], perm: &[usize], width: usize) -> Vec<f64> {
    perm.iter().flat_map(|&p| v[p * width..(p + 1) * width].to_vec()).collect()
}

/// Score field, env rewards and content-keyed plans commute with agent
/// relabelling, bit for bit.
pub fn equivariance_check(perms: usize, seed: u64) -> Result<Check> {
    let mut r = rng::stream(&[seed, 5]);
    let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 4 };
    let cfg = ScoreConfig { hidden: 32, depth: 2, time_embed: 8, interaction_hidden: 16, kernel_rank: 3, ..Default::default() };
    let model = ScoreModel::seeded(layout, cfg, seed)?;
    let n = 8;
    let fail = |what: &str, k: usize| Ok(Check::new("equivariance", false, format!("{what} differs under permutation {k}")));

    let x = model.random_particles(n, seed);
    let s = model.forward(0.42, &x)?;
    for k in 0..perms {
        let p = shuffled(n, &mut r);
        if model.forward(0.42, &gather_rows(&x, &p))? != gather_rows(&s, &p) {
            return fail("score", k);
        }
    }

    let gs = EnvSpec::gaussian_squeeze(12, 3, 2, 2);
    let st = env::reset(&gs, seed)?;
    let act = JointAction { actions: (0..12 * 2).map(|_| r.random_range(0.0..1.0)).collect() };
    let (_, rew) = env::step(&gs, &st, &act, seed)?;
    for k in 0..perms {
        let p = shuffled(12, &mut r);
        let pst = MeanFieldState { states: permute_agents(&st.states, &p, 2), step: st.step };
        let pact = JointAction { actions: permute_agents(&act.actions, &p, 2) };
        let (_, prew) = env::step(&gs, &pst, &pact, seed)?;
        if p.iter().enumerate().any(|(i, &j)| prew[i].to_bits() != rew[j].to_bits()) {
            return fail("gaussian squeeze rewards", k);
        }
    }

    let side = 5;
    let spins: Vec<i8> = (0..side * side).map(|_| if r.random_bool(0.5) { 1 } else { -1 }).collect();
    let rew = env::ising_rewards(side, 1.0, &spins);
    for k in 0..perms {
        let g = lattice_automorphism(side, &mut r);
        let mut moved = vec![0i8; spins.len()];
        for (i, &gi) in g.iter().enumerate() {
            moved[gi] = spins[i];
        }
        let mrew = env::ising_rewards(side, 1.0, &moved);
        if g.iter().enumerate().any(|(i, &gi)| mrew[gi].to_bits() != rew[i].to_bits()) {
            return fail("ising rewards", k);
        }
    }

    let sched = DiffusionSchedule::default();
    let norm = Normalizer { mean: vec![0.2; layout.dim()], std: vec![0.9; layout.dim()] };
    let planner = Planner { score: &model, schedule: sched, normalizer: norm, layout, value: None };
    let mut pc = PlanConfig::new(SubdivisionSchedule::new(n, 2, 1, &sched, 0.1)?, ActionProjection::Identity);
    pc.keying = RngKeying::Content;
    let obs = Mat::from_vec(n, 1, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let base = planner.plan(&pc, Some(&obs), seed)?.trajectories;
    for k in 0..perms {
        let p = shuffled(n, &mut r);
        if planner.plan(&pc, Some(&gather_rows(&obs, &p)), seed)?.trajectories != gather_rows(&base, &p) {
            return fail("planner output", k);
        }
    }
    Ok(Check::new("equivariance", true, format!("{perms} permutations each for score, GS and Ising rewards, planner")))
}

/// Exact exploitability is 0 when aligned and `0.75 lambda` when uniform; the
/// learned estimators sit between `0.9 x` exact and exact plus three MC std.
pub fn exploitability_check(budget: usize, seed: u64) -> Result<Check> {
    let lambda = 1.0;
    let spec = EnvSpec::ising(16, lambda);
    let aligned = exploitability_exact_ising(&spec, BernoulliPolicy { p_up: 1.0 })?;
    let exact = exploitability_exact_ising(&spec, BernoulliPolicy { p_up: 0.5 })?;
    let mut ok = aligned == 0.0 && (exact - 0.75 * lambda).abs() < 1e-12;
    let mut detail = format!("exact aligned {aligned}, uniform {exact:.6}");
    for m in [BestResponse::Greedy, BestResponse::Reinforce] {
        let e = exploitability_learned(&spec, BernoulliPolicy { p_up: 0.5 }, m, budget, seed)?;
        ok &= e.reported() >= 0.9 * exact && e.reported() <= exact + 3.0 * e.std;
        detail.push_str(&format!(", {m:?} {:.4} +- {:.4}", e.reported(), e.std));
    }
    Ok(Check::new("exploitability", ok, detail))
}

/// Pooled horizon exponents of the bundled gap data.
pub fn horizon_check(replicates: usize) -> Result<Check> {
    let rows = parse_gap_csv(HORIZON_GAPS)?;
    let window = [25.0, 50.0, 100.0];
    let battle = horizon_fit(&gap_series(&rows, "battle"), &window, replicates, 0)?;
    let squeeze = horizon_fit(&gap_series(&rows, "gaussian_squeeze"), &window, replicates, 0)?;
    let ok = (1.86..=1.98).contains(&battle.b) && (1.99..=2.11).contains(&squeeze.b);
    Ok(Check::new("horizon_fit", ok, format!("battle b = {:.4}, gaussian_squeeze b = {:.4}", battle.b, squeeze.b)))
}

/// Re-hashes every file in the data manifest, if one exists.
pub fn dataset_checks(cfg: &RunConfig) -> Vec<Check> {
    let dir = cfg.data_dir();
    if !dir.join(crate::collect::MANIFEST).exists() {
        return vec![Check::new("datasets", true, "no manifest; skipped")];
    }
    match Manifest::read(&dir) {
        Err(e) => vec![Check::new("datasets", false, format!("{e:#}"))],
        Ok(m) => m
            .files
            .iter()
            .map(|e| {
                let c = check_entry(&dir, e);
                Check::new(&format!("dataset {}", c.file), c.ok, c.detail)
            })
            .collect(),
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> VerifyReport {
    let seed = cfg.primary_seed();
    let mut checks = vec![
        Check::from_result("work_identity", work_identity(100, seed)),
        Check::from_result("runtime_work", runtime_work(10, 64, seed)),
        Check::from_result("sampler_oracle", oracle_check(cfg.eval.oracle_samples, cfg.eval.oracle_dim, seed)),
        Check::from_result("gradcheck", gradcheck_check(cfg, 100)),
        Check::from_result("equivariance", equivariance_check(50, seed)),
        Check::from_result("exploitability", exploitability_check(cfg.eval.exploit_budget, seed)),
        Check::from_result("horizon_fit", horizon_check(cfg.eval.bootstrap_replicates)),
    ];
    checks.extend(dataset_checks(cfg));
    VerifyReport { checks }
}
