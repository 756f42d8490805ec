//! Reverse-SDE planning over agent trajectories.
//!
//! Particles live in normalised trajectory coordinates. Each level of the
//! subdivision schedule runs `S` Euler-Maruyama steps of the reverse SDE on
//! `N_k` particles, overwriting the observed initial states after every step;
//! at level boundaries every particle spawns `b - 1` perturbed children.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{self, ActionKind, EnvSpec, JointAction, MeanFieldState, TrajectoryLayout};
use crate::error::{Error, Result};
use crate::model::{canonical_order, gather_rows, scatter_rows, Mat, Normalizer, ScoreSource, ValueModel};
use crate::offline::EpisodeRecord;
use crate::rng::{self, tag};
use crate::schedule::{work_units, DiffusionSchedule, SubdivisionSchedule};

/// How per-particle noise streams are keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RngKeying {
    /// By particle index in the order observations were supplied.
    #[default]
    Index,
    /// By position in the canonical (sorted) order of the observations, so
    /// relabelling agents relabels the plan identically.
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionProjection {
    Argmax,
    Identity,
}

impl ActionProjection {
    pub fn for_kind(kind: &ActionKind) -> Self {
        match kind {
            ActionKind::Discrete { .. } => ActionProjection::Argmax,
            ActionKind::Continuous => ActionProjection::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub eta: f64,
    pub delta_k: f64,
    pub subdivision: SubdivisionSchedule,
    pub projection: ActionProjection,
    pub keying: RngKeying,
}

impl PlanConfig {
    pub fn new(subdivision: SubdivisionSchedule, projection: ActionProjection) -> Self {
        PlanConfig { eta: 0.0, delta_k: 0.1, subdivision, projection, keying: RngKeying::Index }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be finite and nonnegative".into()));
        }
        if !(self.delta_k >= 0.0 && self.delta_k.is_finite()) {
            return Err(Error::InvalidArgument("delta_k must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub x: Mat,
    pub t: f64,
    pub level: usize,
    /// One noise key per particle; step noise is drawn from `(key, step)`.
    pub keys: Vec<u64>,
    pub step: u64,
}

impl ParticleSystem {
    /// `n` standard-normal particles at time `t`.
    pub fn gaussian(n: usize, dim: usize, t: f64, seed: u64) -> Self {
        let keys: Vec<u64> = (0..n).map(|i| rng::key(&[seed, tag::PARTICLE, 0, i as u64])).collect();
        let mut x = Mat::zeros(n, dim);
        for (i, &k) in keys.iter().enumerate() {
            let mut r = rng::stream(&[k, u64::MAX]);
            x.row_mut(i).iter_mut().for_each(|v| *v = r.sample(StandardNormal));
        }
        ParticleSystem { x, t, level: 0, keys, step: 0 }
    }

    pub fn len(&self) -> usize {
        self.x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }
}

/// Value guidance: `s + eta * grad V`, with `V` evaluated in raw units.
pub struct Guidance<'a> {
    pub value: &'a ValueModel,
    pub normalizer: &'a Normalizer,
    pub eta: f64,
}

impl Guidance<'_> {
    fn gradient(&self, x: &Mat) -> Result<Mat> {
        let mut raw = x.clone();
        self.normalizer.denormalize(&mut raw);
        let flow = env::mean_field_flow(&self.value.layout, &raw.data, raw.rows);
        let mut g = self.value.value_gradient(&raw, &flow)?;
        self.normalizer.grad_to_normalized(&mut g);
        Ok(g)
    }
}

fn step_noise(key: u64, step: u64, dim: usize) -> impl Iterator<Item = f64> {
    let mut r = rng::stream(&[key, step]);
    (0..dim).map(move |_| r.sample(StandardNormal))
}

/// One Euler-Maruyama step of the reverse SDE from `ps.t` to `ps.t - dt`.
pub fn reverse_step(
    score: &dyn ScoreSource,
    sched: &DiffusionSchedule,
    ps: &mut ParticleSystem,
    dt: f64,
    guidance: Option<&Guidance<'_>>,
) -> Result<()> {
    if ps.t - dt < sched.t_min - 1e-9 {
        return Err(Error::TimeOutOfRange { t: ps.t - dt, lo: sched.t_min, hi: sched.t_max });
    }
    let mut s = score.score(ps.t, &ps.x)?;
    if let Some(g) = guidance {
        if g.eta != 0.0 {
            let gv = g.gradient(&ps.x)?;
            for (a, b) in s.data.iter_mut().zip(&gv.data) {
                *a += g.eta * b;
            }
        }
    }
    let f = sched.drift_coef(ps.t);
    let g = sched.diffusion(ps.t);
    let g2 = g * g;
    let noise = g * dt.sqrt();
    let d = ps.x.cols;
    for i in 0..ps.x.rows {
        let row = ps.x.row_mut(i);
        let si = s.row(i);
        for ((x, sc), z) in row.iter_mut().zip(si).zip(step_noise(ps.keys[i], ps.step, d)) {
            *x = *x - (f * *x - g2 * sc) * dt + noise * z;
        }
    }
    ps.t -= dt;
    ps.step += 1;
    Ok(())
}

/// Overwrites the step-0 state slice of every particle with `observed`.
pub fn inpaint(ps: &mut ParticleSystem, observed: &Mat) -> Result<()> {
    let d_s = observed.cols;
    if observed.rows < ps.x.rows || d_s > ps.x.cols {
        return Err(Error::Shape(format!(
            "inpaint targets are {}x{} for {} particles",
            observed.rows, d_s, ps.x.rows
        )));
    }
    for i in 0..ps.x.rows {
        ps.x.row_mut(i)[..d_s].copy_from_slice(observed.row(i));
    }
    Ok(())
}

/// Spawns `b - 1` children per particle:
/// `child = parent + eta_k * eps + delta_k * B[nu](parent)`.
pub fn branch(
    ps: &mut ParticleSystem,
    score: &dyn ScoreSource,
    sched: &DiffusionSchedule,
    sub: &SubdivisionSchedule,
    delta_k: f64,
) -> Result<()> {
    if ps.level >= sub.k_levels {
        return Err(Error::InvalidArgument("cannot branch at the final level".into()));
    }
    let n = ps.x.rows;
    let d = ps.x.cols;
    let b = sub.branching;
    let eta_k = sched.diffusion(ps.t) * sched.dt().sqrt();
    let push = if delta_k != 0.0 { Some(score.interaction(ps.t, &ps.x)?) } else { None };
    let mut x = Mat::zeros(n * b, d);
    x.data[..n * d].copy_from_slice(&ps.x.data);
    let mut keys = ps.keys.clone();
    for c in 1..b {
        for p in 0..n {
            let key = rng::key(&[ps.keys[p], tag::BRANCH, c as u64]);
            let row = x.row_mut(c * n + p);
            let parent = ps.x.row(p);
            let mut r = rng::stream(&[key, u64::MAX]);
            for (j, o) in row.iter_mut().enumerate() {
                let z: f64 = r.sample(StandardNormal);
                let mut v = parent[j] + eta_k * z;
                if let Some(bm) = &push {
                    v += delta_k * bm.get(p, j);
                }
                *o = v;
            }
            keys.push(key);
        }
    }
    ps.x = x;
    ps.keys = keys;
    ps.level += 1;
    Ok(())
}

/// Everything the planner needs besides its configuration.
pub struct Planner<'a> {
    pub score: &'a dyn ScoreSource,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub layout: TrajectoryLayout,
    pub value: Option<&'a ValueModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    /// `N x D` trajectories in raw units.
    pub trajectories: Mat,
    pub denoise_units: u64,
    pub branched_agents: u64,
    pub work: f64,
}

impl Planner<'_> {
    fn check(&self, cfg: &PlanConfig) -> Result<()> {
        cfg.validate()?;
        let d = self.layout.dim();
        if self.score.dim() != d || self.normalizer.mean.len() != d {
            return Err(Error::Shape("planner components disagree on the trajectory width".into()));
        }
        if let Some(v) = self.value {
            if v.layout != self.layout {
                return Err(Error::Shape("value model layout differs from the planner's".into()));
            }
        }
        if cfg.subdivision.n_steps() != self.schedule.n_steps {
            return Err(Error::InvalidSchedule("subdivision does not tile the diffusion steps".into()));
        }
        Ok(())
    }

    /// Runs the hierarchical sampler. `observed` holds one raw initial state
    /// per agent (`N x d_s`); without it the sampler is unconditional.
    pub fn plan(&self, cfg: &PlanConfig, observed: Option<&Mat>, seed: u64) -> Result<PlanOutput> {
        self.check(cfg)?;
        let sub = &cfg.subdivision;
        let n = sub.n_target();
        let d_s = self.layout.d_s;
        let d = self.layout.dim();
        if let Some(o) = observed {
            if o.rows != n || o.cols != d_s {
                return Err(Error::Shape(format!("observed states are {}x{}, expected {n}x{d_s}", o.rows, o.cols)));
            }
        }
        let order: Option<Vec<usize>> = match (cfg.keying, observed) {
            (RngKeying::Content, Some(o)) => Some(canonical_order(o)),
            _ => None,
        };
        let targets = observed.map(|o| {
            let mut z = match &order {
                Some(ord) => gather_rows(o, ord),
                None => o.clone(),
            };
            for i in 0..z.rows {
                for (c, v) in z.row_mut(i).iter_mut().enumerate() {
                    *v = (*v - self.normalizer.mean[c]) / self.normalizer.std[c];
                }
            }
            z
        });
        let guidance = match self.value {
            Some(v) if cfg.eta != 0.0 => Some(Guidance { value: v, normalizer: &self.normalizer, eta: cfg.eta }),
            _ => None,
        };
        let dt = self.schedule.dt();
        let mut ps = ParticleSystem::gaussian(sub.n_levels[0], d, self.schedule.t_max, seed);
        let mut denoise = 0u64;
        let mut branched = 0u64;
        if let Some(t) = &targets {
            inpaint(&mut ps, t)?;
        }
        for k in 0..=sub.k_levels {
            for _ in 0..sub.steps_per_level {
                denoise += ps.len() as u64;
                reverse_step(self.score, &self.schedule, &mut ps, dt, guidance.as_ref())?;
                if let Some(t) = &targets {
                    inpaint(&mut ps, t)?;
                }
            }
            if k < sub.k_levels {
                branched += ps.len() as u64;
                branch(&mut ps, self.score, &self.schedule, sub, cfg.delta_k)?;
                if let Some(t) = &targets {
                    inpaint(&mut ps, t)?;
                }
            }
        }
        let mut x = ps.x;
        self.normalizer.denormalize(&mut x);
        if let Some(o) = observed {
            let raw = match &order {
                Some(ord) => gather_rows(o, ord),
                None => o.clone(),
            };
            for i in 0..n {
                x.row_mut(i)[..d_s].copy_from_slice(raw.row(i));
            }
        }
        if let Some(ord) = &order {
            x = scatter_rows(&x, ord);
        }
        Ok(PlanOutput {
            trajectories: x,
            denoise_units: denoise,
            branched_agents: branched,
            work: work_units(denoise, branched, sub.c_psi),
        })
    }
}

/// Step-0 joint action read off planned trajectories.
pub fn project_actions(layout: &TrajectoryLayout, trajectories: &Mat, projection: ActionProjection) -> JointAction {
    let o = layout.action_offset(0);
    let d_a = layout.d_a;
    let mut actions = Vec::with_capacity(trajectories.rows * d_a);
    for i in 0..trajectories.rows {
        let a = &trajectories.row(i)[o..o + d_a];
        match projection {
            ActionProjection::Identity => actions.extend_from_slice(a),
            ActionProjection::Argmax => {
                let k = env::argmax(a);
                actions.extend((0..d_a).map(|c| if c == k { 1.0 } else { 0.0 }));
            }
        }
    }
    JointAction { actions }
}

/// Mean over agents of `||s_1^gen - expected next state||`.
pub fn step_transition_error(d_s: usize, generated_next: &[f64], expected: &[f64]) -> f64 {
    let n = expected.len() / d_s.max(1);
    let mut total = 0.0;
    for i in 0..n {
        let sq: f64 = (0..d_s)
            .map(|c| {
                let e = generated_next[i * d_s + c] - expected[i * d_s + c];
                e * e
            })
            .sum();
        total += sq.sqrt();
    }
    total / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub record: EpisodeRecord,
    pub transition_errors: Vec<f64>,
    pub plan_calls: usize,
    pub work: f64,
}

impl Execution {
    pub fn transition_error(&self) -> f64 {
        crate::stats::mean(&self.transition_errors)
    }
}

/// Receding-horizon control: plan from the current state, apply the first
/// action, observe, repeat.
pub fn execute(spec: &EnvSpec, planner: &Planner<'_>, cfg: &PlanConfig, seed: u64) -> Result<Execution> {
    if spec.layout() != planner.layout {
        return Err(Error::Shape("planner layout does not match the environment".into()));
    }
    if cfg.subdivision.n_target() != spec.n_agents {
        return Err(Error::InvalidSchedule("subdivision must target the environment's population".into()));
    }
    let layout = planner.layout;
    let mut state: MeanFieldState = env::reset(spec, seed)?;
    let mut record = EpisodeRecord::new(state.clone());
    let mut errors = Vec::with_capacity(spec.horizon);
    let mut work = 0.0;
    let mut calls = 0;
    while state.step < spec.horizon {
        let observed = Mat::from_vec(spec.n_agents, spec.d_s, state.states.clone())?;
        let out = planner.plan(cfg, Some(&observed), rng::key(&[seed, tag::PARTICLE, state.step as u64]))?;
        calls += 1;
        work += out.work;
        let action = project_actions(&layout, &out.trajectories, cfg.projection);
        let expected = env::expected_next(spec, &state, &action)?;
        let so = layout.state_offset(1);
        let gen: Vec<f64> =
            (0..spec.n_agents).flat_map(|i| out.trajectories.row(i)[so..so + spec.d_s].to_vec()).collect();
        errors.push(step_transition_error(spec.d_s, &gen, &expected));
        let (next, rewards) = env::step(spec, &state, &action, seed)?;
        record.push(action, rewards, next.clone());
        state = next;
    }
    Ok(Execution { record, transition_errors: errors, plan_calls: calls, work })
}

#[cfg(test)]
mod tests;
