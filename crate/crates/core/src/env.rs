//! Mean-field MDP environments.
//!
//! Both environments couple agents only through the empirical distribution of
//! states or actions. The Ising game is a stage game on a periodic square
//! lattice; Gaussian Squeeze is the sequential, continuous-action variant
//! whose shared reward depends on the aggregate action.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::stats::sorted_sum;

/// Number of lattice neighbours of an Ising site.
pub const ISING_NEIGHBOURS: usize = 4;
/// Encoded Ising state width: own spin, neighbour mean, two zero pads.
pub const ISING_STATE_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    Ising {
        side: usize,
        coupling: f64,
    },
    GaussianSqueeze {
        target_mu: f64,
        target_sigma: f64,
        persistence: f64,
        action_gain: f64,
        coupling_gain: f64,
        noise_std: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionKind {
    Discrete { cardinality: usize },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub d_s: usize,
    pub d_a: usize,
    pub action_kind: ActionKind,
    pub horizon: usize,
    pub gamma: f64,
    pub n_agents: usize,
}

impl EnvSpec {
    pub fn ising(side: usize, coupling: f64) -> Self {
        EnvSpec {
            name: "ising".into(),
            kind: EnvKind::Ising { side, coupling },
            d_s: ISING_STATE_DIM,
            d_a: 2,
            action_kind: ActionKind::Discrete { cardinality: 2 },
            horizon: 1,
            gamma: 1.0,
            n_agents: side * side,
        }
    }

    /// Sequential Gaussian Squeeze with the aggregate target scaled to the
    /// population: `mu* = N / 4`, `sigma* = N / 8`.
    pub fn gaussian_squeeze(n_agents: usize, horizon: usize, d_s: usize, d_a: usize) -> Self {
        EnvSpec {
            name: "gaussian_squeeze".into(),
            kind: EnvKind::GaussianSqueeze {
                target_mu: n_agents as f64 / 4.0,
                target_sigma: n_agents as f64 / 8.0,
                persistence: 0.9,
                action_gain: 0.1,
                coupling_gain: 0.05,
                noise_std: 0.01,
            },
            d_s,
            d_a,
            action_kind: ActionKind::Continuous,
            horizon,
            gamma: 0.99,
            n_agents,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEnv(m));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.n_agents < 2 {
            return bad("need at least two agents".into());
        }
        if self.d_s == 0 || self.d_a == 0 {
            return bad("state and action dimensions must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]".into());
        }
        match &self.kind {
            EnvKind::Ising { side, coupling } => {
                if side * side != self.n_agents {
                    return bad(format!("lattice side {side} does not give N = {}", self.n_agents));
                }
                if *side < 2 || !coupling.is_finite() {
                    return bad("Ising needs side >= 2 and a finite coupling".into());
                }
                if self.d_s != ISING_STATE_DIM
                    || self.d_a != 2
                    || self.action_kind != (ActionKind::Discrete { cardinality: 2 })
                {
                    return bad("Ising uses 4-dim states and 2-way one-hot actions".into());
                }
            }
            EnvKind::GaussianSqueeze { target_sigma, .. } => {
                if *target_sigma <= 0.0 {
                    return bad("Gaussian Squeeze needs sigma* > 0".into());
                }
                if self.action_kind != ActionKind::Continuous {
                    return bad("Gaussian Squeeze actions are continuous".into());
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> TrajectoryLayout {
        TrajectoryLayout { d_s: self.d_s, d_a: self.d_a, horizon: self.horizon }
    }

    pub fn is_ising(&self) -> bool {
        matches!(self.kind, EnvKind::Ising { .. })
    }

    /// Width of the per-step mean-field summary: state mean, state second
    /// moment and mean action.
    pub fn summary_dim(&self) -> usize {
        2 * self.d_s + self.d_a
    }
}

/// Flattened trajectory layout `[s_0, a_0, s_1, a_1, ..., a_{H-1}, s_H]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLayout {
    pub d_s: usize,
    pub d_a: usize,
    pub horizon: usize,
}

impl TrajectoryLayout {
    pub fn dim(&self) -> usize {
        (self.d_s + self.d_a) * self.horizon + self.d_s
    }

    pub fn state_offset(&self, h: usize) -> usize {
        h * (self.d_s + self.d_a)
    }

    pub fn action_offset(&self, h: usize) -> usize {
        h * (self.d_s + self.d_a) + self.d_s
    }

    pub fn state<'a>(&self, traj: &'a [f64], h: usize) -> &'a [f64] {
        let o = self.state_offset(h);
        &traj[o..o + self.d_s]
    }

    pub fn action<'a>(&self, traj: &'a [f64], h: usize) -> &'a [f64] {
        let o = self.action_offset(h);
        &traj[o..o + self.d_a]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    /// Row-major `N x d_s`.
    pub states: Vec<f64>,
    pub step: usize,
}

impl MeanFieldState {
    pub fn agent(&self, i: usize, d_s: usize) -> &[f64] {
        &self.states[i * d_s..(i + 1) * d_s]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    /// Row-major `N x d_a`; one-hot rows for discrete environments.
    pub actions: Vec<f64>,
}

impl JointAction {
    pub fn one_hot(indices: &[usize], cardinality: usize) -> Self {
        let mut actions = vec![0.0; indices.len() * cardinality];
        for (i, &a) in indices.iter().enumerate() {
            actions[i * cardinality + a] = 1.0;
        }
        JointAction { actions }
    }

    pub fn from_spins(spins: &[i8]) -> Self {
        let idx: Vec<usize> = spins.iter().map(|&s| usize::from(s > 0)).collect();
        Self::one_hot(&idx, 2)
    }

    pub fn agent(&self, i: usize, d_a: usize) -> &[f64] {
        &self.actions[i * d_a..(i + 1) * d_a]
    }
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetMode {
    #[default]
    Random,
    /// Ising only: every spin starts at +1.
    AllUp,
}

pub fn ising_neighbours(side: usize, i: usize) -> [usize; ISING_NEIGHBOURS] {
    let (r, c) = (i / side, i % side);
    let up = ((r + side - 1) % side) * side + c;
    let down = ((r + 1) % side) * side + c;
    let left = r * side + (c + side - 1) % side;
    let right = r * side + (c + 1) % side;
    [up, down, left, right]
}

fn encode_ising(side: usize, spins: &[i8]) -> Vec<f64> {
    let mut states = Vec::with_capacity(spins.len() * ISING_STATE_DIM);
    for i in 0..spins.len() {
        let nb = ising_neighbours(side, i);
        let m = nb.iter().map(|&k| spins[k] as f64).sum::<f64>() / ISING_NEIGHBOURS as f64;
        states.extend_from_slice(&[spins[i] as f64, m, 0.0, 0.0]);
    }
    states
}

/// Spins read back from the first coordinate of encoded Ising states.
pub fn ising_spins(states: &[f64]) -> Vec<i8> {
    states.chunks(ISING_STATE_DIM).map(|s| if s[0] >= 0.0 { 1 } else { -1 }).collect()
}

pub fn spins_from_action(action: &JointAction) -> Vec<i8> {
    action.actions.chunks(2).map(|a| if argmax(a) == 1 { 1 } else { -1 }).collect()
}

/// Per-agent Ising reward `r_j = (lambda / 2) sum_{k in N(j)} a_j a_k`.
pub fn ising_rewards(side: usize, coupling: f64, spins: &[i8]) -> Vec<f64> {
    (0..spins.len())
        .map(|j| {
            let s: i32 = ising_neighbours(side, j).iter().map(|&k| spins[k] as i32).sum();
            0.5 * coupling * (spins[j] as i32 * s) as f64
        })
        .collect()
}

/// Gaussian Squeeze system objective `G(x) = x exp(-(x - mu)^2 / sigma^2)`.
pub fn squeeze_objective(x: f64, mu: f64, sigma: f64) -> f64 {
    x * (-(x - mu) * (x - mu) / (sigma * sigma)).exp()
}

pub fn squeeze_objective_grad(x: f64, mu: f64, sigma: f64) -> f64 {
    let e = (-(x - mu) * (x - mu) / (sigma * sigma)).exp();
    e * (1.0 - 2.0 * x * (x - mu) / (sigma * sigma))
}

pub fn reset(spec: &EnvSpec, seed: u64) -> Result<MeanFieldState> {
    reset_with(spec, seed, ResetMode::Random)
}

pub fn reset_with(spec: &EnvSpec, seed: u64, mode: ResetMode) -> Result<MeanFieldState> {
    spec.validate()?;
    let mut rng = rng::stream(&[seed, tag::ENV_RESET]);
    let states = match (&spec.kind, mode) {
        (EnvKind::Ising { side, .. }, ResetMode::AllUp) => encode_ising(*side, &vec![1; spec.n_agents]),
        (EnvKind::Ising { side, .. }, ResetMode::Random) => {
            let spins: Vec<i8> =
                (0..spec.n_agents).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            encode_ising(*side, &spins)
        }
        (EnvKind::GaussianSqueeze { .. }, ResetMode::Random) => {
            (0..spec.n_agents * spec.d_s).map(|_| rng.sample(StandardNormal)).collect()
        }
        (EnvKind::GaussianSqueeze { .. }, ResetMode::AllUp) => {
            return Err(Error::UnsupportedEnv { op: "reset(all_up)", env: spec.name.clone() })
        }
    };
    Ok(MeanFieldState { states, step: 0 })
}

fn check_shapes(spec: &EnvSpec, state: &MeanFieldState, action: &JointAction) -> Result<()> {
    if state.states.len() != spec.n_agents * spec.d_s {
        return Err(Error::Shape(format!(
            "state has {} entries, expected {} x {}",
            state.states.len(),
            spec.n_agents,
            spec.d_s
        )));
    }
    if action.actions.len() != spec.n_agents * spec.d_a {
        return Err(Error::Shape(format!(
            "action has {} entries, expected {} x {}",
            action.actions.len(),
            spec.n_agents,
            spec.d_a
        )));
    }
    if state.step >= spec.horizon {
        return Err(Error::EpisodeComplete { step: state.step, horizon: spec.horizon });
    }
    Ok(())
}

/// Per-coordinate population mean of the actions, summed in sorted order so
/// that it is invariant to agent relabelling.
pub fn mean_action(spec: &EnvSpec, action: &JointAction) -> Vec<f64> {
    (0..spec.d_a)
        .map(|c| {
            sorted_sum((0..spec.n_agents).map(|i| action.actions[i * spec.d_a + c]))
                / spec.n_agents as f64
        })
        .collect()
}

/// Aggregate action `x = sum_j a_j[0]`.
pub fn aggregate_action(spec: &EnvSpec, action: &JointAction) -> f64 {
    sorted_sum((0..spec.n_agents).map(|i| action.actions[i * spec.d_a]))
}

/// Noise-free part of the transition.
pub fn expected_next(spec: &EnvSpec, state: &MeanFieldState, action: &JointAction) -> Result<Vec<f64>> {
    check_shapes(spec, state, action)?;
    Ok(match &spec.kind {
        EnvKind::Ising { side, .. } => encode_ising(*side, &spins_from_action(action)),
        EnvKind::GaussianSqueeze { persistence, action_gain, coupling_gain, .. } => {
            let abar = mean_action(spec, action);
            let mut next = vec![0.0; state.states.len()];
            for i in 0..spec.n_agents {
                for c in 0..spec.d_s {
                    let s = state.states[i * spec.d_s + c];
                    let (a, m) = if c < spec.d_a {
                        (action.actions[i * spec.d_a + c], abar[c])
                    } else {
                        (0.0, 0.0)
                    };
                    next[i * spec.d_s + c] =
                        persistence * s + action_gain * a + coupling_gain * (m - a);
                }
            }
            next
        }
    })
}

/// Advances the population by one MDP step and returns per-agent rewards.
pub fn step(
    spec: &EnvSpec,
    state: &MeanFieldState,
    action: &JointAction,
    seed: u64,
) -> Result<(MeanFieldState, Vec<f64>)> {
    let mut next = expected_next(spec, state, action)?;
    let rewards = match &spec.kind {
        EnvKind::Ising { side, coupling } => ising_rewards(*side, *coupling, &spins_from_action(action)),
        EnvKind::GaussianSqueeze { target_mu, target_sigma, noise_std, .. } => {
            let x = aggregate_action(spec, action);
            let g = squeeze_objective(x, *target_mu, *target_sigma);
            if *noise_std > 0.0 {
                let mut rng = rng::stream(&[seed, tag::ENV_STEP, state.step as u64]);
                for v in next.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += noise_std * z;
                }
            }
            vec![g / spec.n_agents as f64; spec.n_agents]
        }
    };
    Ok((MeanFieldState { states: next, step: state.step + 1 }, rewards))
}

/// Order parameter `|N_up - N_down| / N` of an Ising configuration.
pub fn order_parameter(spec: &EnvSpec, state: &MeanFieldState) -> Result<f64> {
    if !spec.is_ising() {
        return Err(Error::UnsupportedEnv { op: "order_parameter", env: spec.name.clone() });
    }
    Ok(order_parameter_spins(&ising_spins(&state.states)))
}

pub fn order_parameter_spins(spins: &[i8]) -> f64 {
    let s: i64 = spins.iter().map(|&x| x as i64).sum();
    s.unsigned_abs() as f64 / spins.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReturn {
    pub per_agent: Vec<f64>,
    /// Social welfare: mean discounted return over agents.
    pub welfare: f64,
}

/// `rewards[h][i]` is agent `i`'s reward at step `h`.
pub fn episode_return(spec: &EnvSpec, rewards: &[Vec<f64>]) -> Result<EpisodeReturn> {
    if rewards.len() != spec.horizon {
        return Err(Error::Shape(format!(
            "expected {} reward rows, got {}",
            spec.horizon,
            rewards.len()
        )));
    }
    let n = rewards.first().map_or(0, Vec::len);
    if rewards.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged reward table".into()));
    }
    let mut per_agent = vec![0.0; n];
    let mut disc = 1.0;
    for row in rewards {
        for (acc, r) in per_agent.iter_mut().zip(row) {
            *acc += disc * r;
        }
        disc *= spec.gamma;
    }
    let welfare = if n == 0 { 0.0 } else { per_agent.iter().sum::<f64>() / n as f64 };
    Ok(EpisodeReturn { per_agent, welfare })
}

/// Mean field seen by one agent, frozen while differentiating its reward.
///
/// Gaussian Squeeze: aggregate action of all *other* agents per step.
/// Ising: neighbour mean spin per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardContext {
    pub per_step: Vec<f64>,
}

impl RewardContext {
    /// Estimates every agent's context from a population of trajectories
    /// (`n x D`, raw units) standing in for the `spec.n_agents` agents.
    pub fn from_population(spec: &EnvSpec, trajs: &[f64], n: usize) -> Vec<RewardContext> {
        let layout = spec.layout();
        let dim = layout.dim();
        let mut first: Vec<Vec<f64>> = vec![Vec::with_capacity(n); spec.horizon];
        for i in 0..n {
            let t = &trajs[i * dim..(i + 1) * dim];
            for (h, col) in first.iter_mut().enumerate() {
                let a = layout.action(t, h);
                col.push(match spec.kind {
                    EnvKind::Ising { .. } => a[1] - a[0],
                    EnvKind::GaussianSqueeze { .. } => a[0],
                });
            }
        }
        let means: Vec<f64> = first.iter().map(|c| sorted_sum(c.iter().copied()) / n as f64).collect();
        (0..n)
            .map(|i| {
                let per_step = (0..spec.horizon)
                    .map(|h| match spec.kind {
                        EnvKind::Ising { .. } => means[h],
                        EnvKind::GaussianSqueeze { .. } => {
                            spec.n_agents as f64 * means[h] - first[h][i]
                        }
                    })
                    .collect();
                RewardContext { per_step }
            })
            .collect()
    }
}

/// Discounted reward of one agent's trajectory with the mean field frozen.
/// Ising actions are relaxed to the spin `a_up - a_down`.
pub fn trajectory_reward(spec: &EnvSpec, traj: &[f64], ctx: &RewardContext) -> f64 {
    let layout = spec.layout();
    let mut disc = 1.0;
    let mut total = 0.0;
    for h in 0..spec.horizon {
        let a = layout.action(traj, h);
        let r = match spec.kind {
            EnvKind::Ising { coupling, .. } => {
                0.5 * coupling * ISING_NEIGHBOURS as f64 * (a[1] - a[0]) * ctx.per_step[h]
            }
            EnvKind::GaussianSqueeze { target_mu, target_sigma, .. } => {
                squeeze_objective(ctx.per_step[h] + a[0], target_mu, target_sigma)
                    / spec.n_agents as f64
            }
        };
        total += disc * r;
        disc *= spec.gamma;
    }
    total
}

/// Analytic gradient of [`trajectory_reward`] with respect to the agent's own
/// trajectory coordinates.
pub fn reward_gradient(spec: &EnvSpec, traj: &[f64], ctx: &RewardContext) -> Vec<f64> {
    let layout = spec.layout();
    let mut grad = vec![0.0; layout.dim()];
    let mut disc = 1.0;
    for h in 0..spec.horizon {
        let o = layout.action_offset(h);
        match spec.kind {
            EnvKind::Ising { coupling, .. } => {
                let g = 0.5 * coupling * ISING_NEIGHBOURS as f64 * ctx.per_step[h];
                grad[o] = -disc * g;
                grad[o + 1] = disc * g;
            }
            EnvKind::GaussianSqueeze { target_mu, target_sigma, .. } => {
                let x = ctx.per_step[h] + traj[o];
                grad[o] =
                    disc * squeeze_objective_grad(x, target_mu, target_sigma) / spec.n_agents as f64;
            }
        }
        disc *= spec.gamma;
    }
    grad
}

/// Per-step mean-field summaries `[mean s_h, mean s_h^2, mean a_h]` of `n`
/// flattened trajectories, summed in sorted order so agent order is irrelevant.
pub fn mean_field_flow(layout: &TrajectoryLayout, trajs: &[f64], n: usize) -> Vec<Vec<f64>> {
    let dim = layout.dim();
    let inv = 1.0 / n.max(1) as f64;
    (0..layout.horizon)
        .map(|h| {
            let so = layout.state_offset(h);
            let ao = layout.action_offset(h);
            let col = |o: usize| (0..n).map(move |i| trajs[i * dim + o]);
            let mut out = Vec::with_capacity(2 * layout.d_s + layout.d_a);
            for c in 0..layout.d_s {
                out.push(sorted_sum(col(so + c)) * inv);
            }
            for c in 0..layout.d_s {
                out.push(sorted_sum(col(so + c).map(|v| v * v)) * inv);
            }
            for c in 0..layout.d_a {
                out.push(sorted_sum(col(ao + c)) * inv);
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand::Rng;

    fn gs(n: usize) -> EnvSpec {
        EnvSpec::gaussian_squeeze(n, 3, 2, 2)
    }

    #[test]
    fn ising_all_up_reset() {
        let spec = EnvSpec::ising(4, 2.0);
        let st = reset_with(&spec, 0, ResetMode::AllUp).unwrap();
        for i in 0..16 {
            assert_eq!(st.agent(i, 4), &[1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gs_reset_deterministic() {
        let spec = gs(10);
        assert_eq!(reset(&spec, 42).unwrap(), reset(&spec, 42).unwrap());
        assert_ne!(reset(&spec, 42).unwrap(), reset(&spec, 43).unwrap());
    }

    #[test]
    fn gs_reset_is_standard_normal() {
        let spec = EnvSpec::gaussian_squeeze(10_000, 1, 2, 1);
        let st = reset(&spec, 7).unwrap();
        for c in 0..2 {
            let m: f64 = (0..10_000).map(|i| st.states[i * 2 + c]).sum::<f64>() / 1e4;
            assert!(m.abs() < 3.0 / 100.0, "coordinate {c} mean {m}");
        }
    }

    #[test]
    fn ising_aligned_reward() {
        let spec = EnvSpec::ising(4, 2.0);
        let st = reset_with(&spec, 0, ResetMode::AllUp).unwrap();
        let (_, r) = step(&spec, &st, &JointAction::from_spins(&[1; 16]), 0).unwrap();
        assert!(r.iter().all(|&x| x == 4.0));
    }

    #[test]
    fn ising_cancelling_neighbours() {
        // Agent 5 on a 4x4 lattice has neighbours 1, 9, 4, 6.
        let mut spins = vec![1i8; 16];
        spins[4] = -1;
        spins[6] = -1;
        let r = ising_rewards(4, 2.0, &spins);
        assert_eq!(r[5], 0.0);
    }

    #[test]
    fn ising_reward_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let spins: Vec<i8> = (0..25).map(|_| if rng.random() { 1 } else { -1 }).collect();
            for r in ising_rewards(5, 1.5, &spins) {
                assert!(r.abs() <= 1.5 * 4.0 / 2.0);
            }
        }
    }

    #[test]
    fn gs_peak_reward() {
        let spec = EnvSpec::gaussian_squeeze(8, 1, 1, 1);
        let st = reset(&spec, 0).unwrap();
        // mu* = 2, so x = 2 with eight actions of 0.25.
        let (_, r) = step(&spec, &st, &JointAction { actions: vec![0.25; 8] }, 0).unwrap();
        assert!(r.iter().all(|&x| (x - 2.0 / 8.0).abs() < 1e-15));
    }

    #[test]
    fn gs_objective_off_peak() {
        assert!((squeeze_objective(6.0, 4.0, 2.0) - 6.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn step_past_horizon_is_error() {
        let spec = EnvSpec::ising(3, 1.0);
        let st = reset(&spec, 0).unwrap();
        let a = JointAction::from_spins(&[1; 9]);
        let (next, _) = step(&spec, &st, &a, 0).unwrap();
        assert!(matches!(step(&spec, &next, &a, 0), Err(Error::EpisodeComplete { .. })));
    }

    #[test]
    fn order_parameter_cases() {
        assert_eq!(order_parameter_spins(&[1, 1, 1, 1]), 1.0);
        assert_eq!(order_parameter_spins(&[1, -1, 1, -1]), 0.0);
        assert_eq!(order_parameter_spins(&[1, 1, 1, -1]), 0.5);
        let spec = gs(4);
        let st = reset(&spec, 0).unwrap();
        assert!(order_parameter(&spec, &st).is_err());
    }

    #[test]
    fn episode_return_cases() {
        let mut spec = gs(2);
        spec.gamma = 1.0;
        let r = episode_return(&spec, &vec![vec![1.0, 1.0]; 3]).unwrap();
        assert_eq!(r.per_agent, vec![3.0, 3.0]);
        spec.gamma = 0.5;
        spec.horizon = 2;
        let r = episode_return(&spec, &vec![vec![1.0, 1.0]; 2]).unwrap();
        assert_eq!(r.welfare, 1.5);
        assert!(episode_return(&spec, &vec![vec![1.0, 1.0]; 3]).is_err());
    }

    #[test]
    fn episode_return_matches_resummation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut spec = gs(5);
        spec.horizon = 6;
        spec.gamma = 0.9;
        let table: Vec<Vec<f64>> =
            (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let got = episode_return(&spec, &table).unwrap();
        let mut welfare = 0.0;
        for i in 0..5 {
            let mut ret = 0.0;
            for h in 0..6 {
                ret += 0.9f64.powi(h as i32) * table[h][i];
            }
            assert!((got.per_agent[i] - ret).abs() < 1e-12);
            welfare += ret / 5.0;
        }
        assert!((got.welfare - welfare).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        assert!((episode_return(&spec, &scaled).unwrap().welfare - 3.0 * got.welfare).abs() < 1e-12);
    }

    #[test]
    fn gs_gradient_at_peak() {
        let spec = EnvSpec::gaussian_squeeze(8, 2, 1, 1);
        let layout = spec.layout();
        let mut traj = vec![0.0; layout.dim()];
        traj[layout.action_offset(0)] = 0.5;
        traj[layout.action_offset(1)] = 0.5;
        let ctx = RewardContext { per_step: vec![1.5, 1.5] };
        let g = reward_gradient(&spec, &traj, &ctx);
        assert!((g[layout.action_offset(0)] - 1.0 / 8.0).abs() < 1e-15);
        assert!((g[layout.action_offset(1)] - spec.gamma / 8.0).abs() < 1e-15);
    }

    #[test]
    fn ising_gradient_zero_mean_field() {
        let spec = EnvSpec::ising(3, 1.0);
        let ctx = RewardContext { per_step: vec![0.0] };
        let g = reward_gradient(&spec, &[0.0; 10], &ctx);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    fn fd_check(spec: &EnvSpec, traj: &[f64], ctx: &RewardContext) {
        let g = reward_gradient(spec, traj, ctx);
        let h = 1e-5;
        for k in 0..traj.len() {
            let mut p = traj.to_vec();
            let mut m = traj.to_vec();
            p[k] += h;
            m[k] -= h;
            let fd = (trajectory_reward(spec, &p, ctx) - trajectory_reward(spec, &m, ctx)) / (2.0 * h);
            let scale = g[k].abs().max(1e-3);
            assert!((fd - g[k]).abs() / scale < 1e-6, "coord {k}: fd {fd} vs {}", g[k]);
        }
    }

    proptest! {
        #[test]
        fn reward_gradient_matches_finite_differences(
            xs in proptest::collection::vec(-1.0f64..1.0, 22),
            others in proptest::collection::vec(0.0f64..8.0, 3),
            nbr in -1.0f64..1.0,
        ) {
            let spec = EnvSpec::gaussian_squeeze(16, 3, 3, 2);
            let traj = &xs[..spec.layout().dim()];
            fd_check(&spec, traj, &RewardContext { per_step: others });
            let ising = EnvSpec::ising(3, 1.3);
            fd_check(&ising, &xs[..10], &RewardContext { per_step: vec![nbr] });
        }

        #[test]
        fn gs_rewards_permutation_equivariant(seed in 0u64..1000) {
            let spec = gs(12);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let st = reset(&spec, seed).unwrap();
            let act = JointAction { actions: (0..24).map(|_| rng.random_range(0.0..1.0)).collect() };
            let (_, r) = step(&spec, &st, &act, 0).unwrap();
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rng);
            let pst = MeanFieldState {
                states: perm.iter().flat_map(|&p| st.agent(p, 2).to_vec()).collect(),
                step: 0,
            };
            let pact = JointAction { actions: perm.iter().flat_map(|&p| act.agent(p, 2).to_vec()).collect() };
            let (_, pr) = step(&spec, &pst, &pact, 0).unwrap();
            for (k, &p) in perm.iter().enumerate() {
                prop_assert_eq!(pr[k].to_bits(), r[p].to_bits());
            }
        }
    }

    #[test]
    fn flow_of_two_agents() {
        let layout = TrajectoryLayout { d_s: 1, d_a: 1, horizon: 1 };
        let trajs = [1.0, 0.5, 0.0, 3.0, 1.5, 0.0];
        let flow = mean_field_flow(&layout, &trajs, 2);
        assert_eq!(flow, vec![vec![2.0, 5.0, 1.0]]);
    }

    #[test]
    fn ising_mean_field_sufficiency() {
        // Two configurations giving agent 0 the same neighbour sum produce the
        // same reward for agent 0.
        let side = 4;
        let nb = ising_neighbours(side, 0);
        let mut a = vec![-1i8; 16];
        let mut b = vec![1i8; 16];
        a[0] = 1;
        b[0] = 1;
        for (j, &k) in nb.iter().enumerate() {
            a[k] = if j < 3 { 1 } else { -1 };
            b[k] = if j == 0 { -1 } else { 1 };
        }
        assert_eq!(ising_rewards(side, 1.0, &a)[0], ising_rewards(side, 1.0, &b)[0]);
    }
}
