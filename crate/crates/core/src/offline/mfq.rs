//! Tabular mean-field Q-learning behaviour policy.
//!
//! `Q[state bucket][action][mean-action grid point]` with Boltzmann
//! exploration. At decision time every agent uses the same mean action: the
//! self-consistent point `m = E_pi[a | m]` of the current policy, found by
//! damped iteration from the last realised population mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvKind, EnvSpec, JointAction, MeanFieldState, ISING_NEIGHBOURS};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::stats::sorted_sum;

use super::{Episode, EpisodeRecord, EpisodeSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfqConfig {
    pub iterations: usize,
    pub temp_start: f64,
    pub temp_end: f64,
    pub lr: f64,
    pub gamma: f64,
    pub mean_buckets: usize,
    /// Quantisation of the first action coordinate for continuous envs.
    pub action_levels: usize,
    /// Buckets over the first state coordinate for continuous envs.
    pub state_buckets: usize,
    pub replay_capacity: usize,
}

impl Default for MfqConfig {
    fn default() -> Self {
        MfqConfig {
            iterations: 400,
            temp_start: 1.0,
            temp_end: 0.05,
            lr: 0.1,
            gamma: 0.0,
            mean_buckets: 21,
            action_levels: 11,
            state_buckets: 5,
            replay_capacity: 100_000,
        }
    }
}

impl MfqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temp_start > 0.0 && self.temp_end > 0.0) {
            return Err(Error::InvalidArgument("MFQ temperatures must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr <= 1.0) || !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument("MFQ needs lr in (0, 1] and gamma in [0, 1)".into()));
        }
        if self.mean_buckets < 2 || self.action_levels < 2 || self.state_buckets < 1 {
            return Err(Error::InvalidArgument("MFQ grids too small".into()));
        }
        Ok(())
    }
}

/// Discrete action set of the behaviour policy and the scalar each action
/// contributes to the mean field.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    /// Ising: spins `[-1, +1]`; Gaussian Squeeze: levels in `[0, 1]`.
    pub values: Vec<f64>,
    pub d_a: usize,
    pub one_hot: bool,
}

impl ActionGrid {
    pub fn for_env(spec: &EnvSpec, levels: usize) -> Self {
        match spec.kind {
            EnvKind::Ising { .. } => ActionGrid { values: vec![-1.0, 1.0], d_a: 2, one_hot: true },
            EnvKind::GaussianSqueeze { .. } => ActionGrid {
                values: (0..levels).map(|k| k as f64 / (levels - 1) as f64).collect(),
                d_a: spec.d_a,
                one_hot: false,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn joint_action(&self, idx: &[usize]) -> JointAction {
        if self.one_hot {
            return JointAction::one_hot(idx, self.d_a);
        }
        let mut actions = vec![0.0; idx.len() * self.d_a];
        for (i, &a) in idx.iter().enumerate() {
            actions[i * self.d_a] = self.values[a];
        }
        JointAction { actions }
    }

    pub fn population_mean(&self, idx: &[usize]) -> f64 {
        sorted_sum(idx.iter().map(|&a| self.values[a])) / idx.len() as f64
    }

    /// Mean action each agent actually faced: neighbour mean spin on the
    /// lattice, mean of the other agents' levels otherwise.
    pub fn realized_means(&self, spec: &EnvSpec, idx: &[usize]) -> Vec<f64> {
        match spec.kind {
            EnvKind::Ising { side, .. } => (0..idx.len())
                .map(|j| {
                    env::ising_neighbours(side, j).iter().map(|&k| self.values[idx[k]]).sum::<f64>()
                        / ISING_NEIGHBOURS as f64
                })
                .collect(),
            EnvKind::GaussianSqueeze { .. } => {
                let total = sorted_sum(idx.iter().map(|&a| self.values[a]));
                let n = idx.len() as f64;
                idx.iter().map(|&a| (total - self.values[a]) / (n - 1.0)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfqPolicy {
    pub grid: ActionGrid,
    pub n_states: usize,
    pub n_means: usize,
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub q: Vec<f64>,
    pub visits: Vec<u64>,
    pub temperature: f64,
    pub lr: f64,
    pub gamma: f64,
    /// Rewards are multiplied by this before learning.
    pub reward_scale: f64,
    /// Last realised population mean action; seeds the fixed-point search.
    pub mean_hint: f64,
    ising: bool,
}

fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - mx) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl MfqPolicy {
    pub fn new(spec: &EnvSpec, cfg: &MfqConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let grid = ActionGrid::for_env(spec, cfg.action_levels);
        let ising = spec.is_ising();
        // Gaussian Squeeze learns on the team objective relative to its peak,
        // G(x) / mu*, over mean levels in [0, 0.5] (the uniform policy sits
        // at 0.5 and the optimum near 0.28).
        let (n_states, mean_lo, mean_hi, reward_scale) = match spec.kind {
            EnvKind::Ising { .. } => (2, -1.0, 1.0, 1.0),
            EnvKind::GaussianSqueeze { target_mu, .. } => {
                (cfg.state_buckets, 0.0, 0.5, spec.n_agents as f64 / target_mu)
            }
        };
        let size = n_states * grid.len() * cfg.mean_buckets;
        Ok(MfqPolicy {
            grid,
            n_states,
            n_means: cfg.mean_buckets,
            mean_lo,
            mean_hi,
            q: vec![0.0; size],
            visits: vec![0; size],
            temperature: cfg.temp_start,
            lr: cfg.lr,
            gamma: cfg.gamma,
            reward_scale,
            mean_hint: 0.0,
            ising,
        })
    }

    fn idx(&self, s: usize, a: usize, m: usize) -> usize {
        (s * self.grid.len() + a) * self.n_means + m
    }

    pub fn mean_grid_point(&self, m: usize) -> f64 {
        self.mean_lo + (self.mean_hi - self.mean_lo) * m as f64 / (self.n_means - 1) as f64
    }

    fn grid_pos(&self, m: f64) -> f64 {
        ((m - self.mean_lo) / (self.mean_hi - self.mean_lo) * (self.n_means - 1) as f64)
            .clamp(0.0, (self.n_means - 1) as f64)
    }

    pub fn nearest_mean(&self, m: f64) -> usize {
        self.grid_pos(m).round() as usize
    }

    pub fn state_bucket(&self, s: &[f64]) -> usize {
        if self.ising {
            return usize::from(s[0] > 0.0);
        }
        // Edges at -0.5, 0, 0.5, 1, ... in steps of 0.5.
        let b = ((s[0] + 0.5) / 0.5).floor() + 1.0;
        b.clamp(0.0, (self.n_states - 1) as f64) as usize
    }

    pub fn q_cell(&self, s: usize, a: usize, m: usize) -> f64 {
        self.q[self.idx(s, a, m)]
    }

    pub fn visits_cell(&self, s: usize, a: usize, m: usize) -> u64 {
        self.visits[self.idx(s, a, m)]
    }

    /// Q interpolated linearly between the nearest visited mean-action grid
    /// points; unvisited cells carry no information and are skipped.
    pub fn q_at(&self, s: usize, a: usize, m: f64) -> f64 {
        let u = self.grid_pos(m);
        let seen = |k: usize| self.visits_cell(s, a, k) > 0;
        let below = (0..=u.floor() as usize).rev().find(|&k| seen(k));
        let above = (u.ceil() as usize..self.n_means).find(|&k| seen(k));
        match (below, above) {
            (Some(lo), Some(hi)) if hi > lo => {
                let w = (u - lo as f64) / (hi - lo) as f64;
                (1.0 - w) * self.q_cell(s, a, lo) + w * self.q_cell(s, a, hi)
            }
            (Some(k), _) | (None, Some(k)) => self.q_cell(s, a, k),
            (None, None) => 0.0,
        }
    }

    pub fn action_probs(&self, s: usize, m: f64, greedy: bool) -> Vec<f64> {
        let qs: Vec<f64> = (0..self.grid.len()).map(|a| self.q_at(s, a, m)).collect();
        if greedy {
            let mut p = vec![0.0; qs.len()];
            p[env::argmax(&qs)] = 1.0;
            return p;
        }
        softmax(&qs, self.temperature)
    }

    fn expected_action(&self, bucket_counts: &[usize], m: f64, greedy: bool) -> f64 {
        let n: usize = bucket_counts.iter().sum();
        let mut e = 0.0;
        for (s, &c) in bucket_counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p = self.action_probs(s, m, greedy);
            e += c as f64 * p.iter().zip(&self.grid.values).map(|(p, v)| p * v).sum::<f64>();
        }
        e / n as f64
    }

    /// Self-consistent mean action for a population with the given state
    /// bucket counts: damped iteration from `hint`, falling back to bisection
    /// on `E[a | m] - m` when the iteration does not settle.
    pub fn fixed_point(&self, bucket_counts: &[usize], hint: f64, greedy: bool) -> f64 {
        let mut m = hint.clamp(self.mean_lo, self.mean_hi);
        for _ in 0..100 {
            let next = 0.5 * m + 0.5 * self.expected_action(bucket_counts, m, greedy);
            if (next - m).abs() < 1e-10 {
                return next;
            }
            m = next;
        }
        let f = |m: f64| self.expected_action(bucket_counts, m, greedy) - m;
        let (mut lo, mut hi) = (self.mean_lo, self.mean_hi);
        let (flo, fhi) = (f(lo), f(hi));
        if flo.signum() == fhi.signum() {
            return m;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid).signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Samples a joint action; returns the action indices as well.
    pub fn act(
        &self,
        state: &MeanFieldState,
        d_s: usize,
        hint: f64,
        greedy: bool,
        rng: &mut impl Rng,
    ) -> (Vec<usize>, f64) {
        let n = state.states.len() / d_s;
        let buckets: Vec<usize> = (0..n).map(|i| self.state_bucket(state.agent(i, d_s))).collect();
        let mut counts = vec![0; self.n_states];
        for &b in &buckets {
            counts[b] += 1;
        }
        let m = self.fixed_point(&counts, hint, greedy);
        let probs: Vec<Vec<f64>> = (0..self.n_states).map(|s| self.action_probs(s, m, greedy)).collect();
        let idx = buckets
            .iter()
            .map(|&b| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let p = &probs[b];
                for (a, &pa) in p.iter().enumerate() {
                    acc += pa;
                    if u < acc {
                        return a;
                    }
                }
                p.len() - 1
            })
            .collect();
        (idx, m)
    }

    /// TD step on the two grid points bracketing `m`, weighted like the
    /// interpolated lookup.
    fn update(&mut self, s: usize, a: usize, m: f64, target: f64) {
        let u = self.grid_pos(m);
        let lo = (u.floor() as usize).min(self.n_means - 2);
        let w = u - lo as f64;
        let pred = (1.0 - w) * self.q_cell(s, a, lo) + w * self.q_cell(s, a, lo + 1);
        for (k, wk) in [(lo, 1.0 - w), (lo + 1, w)] {
            if wk > 0.0 {
                let i = self.idx(s, a, k);
                self.q[i] += self.lr * wk * (target - pred);
                self.visits[i] += 1;
            }
        }
    }
}

/// Episodes kept from training, bounded by the number of stored transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub episodes: std::collections::VecDeque<Episode>,
    transitions: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, episodes: Default::default(), transitions: 0 }
    }

    pub fn transitions(&self) -> usize {
        self.transitions
    }

    pub fn push(&mut self, ep: Episode, per_episode: usize) {
        self.episodes.push_back(ep);
        self.transitions += per_episode;
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            self.episodes.pop_front();
            self.transitions -= per_episode;
        }
    }
}

/// Policy snapshots at 50% and 100% of training plus the replay buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MfqArtifacts {
    pub half: MfqPolicy,
    pub full: MfqPolicy,
    pub replay: ReplayBuffer,
}

/// Runs MFQ for `cfg.iterations` episodes with online TD updates.
pub fn train_mfq(spec: &EnvSpec, cfg: &MfqConfig, seed: u64) -> Result<MfqArtifacts> {
    let mut policy = MfqPolicy::new(spec, cfg)?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut half = policy.clone();
    let per_episode = spec.n_agents * spec.horizon;
    for it in 0..cfg.iterations {
        let frac = if cfg.iterations > 1 { it as f64 / (cfg.iterations - 1) as f64 } else { 1.0 };
        policy.temperature = cfg.temp_start + (cfg.temp_end - cfg.temp_start) * frac;
        let ep_seed = rng::key(&[seed, tag::MFQ, it as u64]);
        let record = run_episode(spec, &mut policy, ep_seed, true)?;
        if policy.q.iter().any(|q| !q.is_finite()) {
            return Err(Error::NonFinite("MFQ q-values"));
        }
        replay.push(Episode::from_record(spec, &record, EpisodeSource::Behavior), per_episode);
        if it + 1 == cfg.iterations.div_ceil(2) {
            half = policy.clone();
        }
    }
    Ok(MfqArtifacts { half, full: policy, replay })
}

/// One episode under `policy`; with `learn` the Q-table is updated online.
pub(crate) fn run_episode(
    spec: &EnvSpec,
    policy: &mut MfqPolicy,
    seed: u64,
    learn: bool,
) -> Result<EpisodeRecord> {
    let mut state = env::reset(spec, seed)?;
    let mut record = EpisodeRecord::new(state.clone());
    let mut hint = policy.mean_hint;
    for h in 0..spec.horizon {
        let mut rng = rng::stream(&[seed, tag::MFQ, h as u64]);
        let (idx, _) = policy.act(&state, spec.d_s, hint, false, &mut rng);
        let action = policy.grid.joint_action(&idx);
        let (next, rewards) = env::step(spec, &state, &action, seed)?;
        if learn {
            let means = policy.grid.realized_means(spec, &idx);
            for j in 0..spec.n_agents {
                let s = policy.state_bucket(state.agent(j, spec.d_s));
                let mut target = policy.reward_scale * rewards[j];
                if policy.gamma > 0.0 && h + 1 < spec.horizon {
                    let s2 = policy.state_bucket(next.agent(j, spec.d_s));
                    let best = (0..policy.grid.len())
                        .map(|a| policy.q_at(s2, a, means[j]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    target += policy.gamma * best;
                }
                policy.update(s, idx[j], means[j], target);
            }
        }
        hint = policy.grid.population_mean(&idx);
        record.push(action, rewards, next.clone());
        state = next;
    }
    policy.mean_hint = hint;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_is_uniform() {
        let spec = EnvSpec::gaussian_squeeze(8, 2, 1, 1);
        let art = train_mfq(&spec, &MfqConfig { iterations: 0, ..Default::default() }, 0).unwrap();
        for s in 0..art.full.n_states {
            let p = art.full.action_probs(s, 0.3, false);
            assert!(p.iter().all(|&x| (x - 1.0 / 11.0).abs() < 1e-15));
        }
    }

    #[test]
    fn interpolation_hits_grid_points() {
        let spec = EnvSpec::ising(3, 1.0);
        let mut p = MfqPolicy::new(&spec, &MfqConfig::default()).unwrap();
        assert_eq!(p.q_at(1, 1, 0.3), 0.0);
        for m in (0..p.n_means).step_by(5) {
            let k = p.idx(1, 1, m);
            p.q[k] = m as f64;
            p.visits[k] = 1;
        }
        assert_eq!(p.q_at(1, 1, 1.0), 20.0);
        assert_eq!(p.q_at(1, 1, -1.0), 0.0);
        assert!((p.q_at(1, 1, 0.05) - 10.5).abs() < 1e-12);
        assert!((p.q_at(1, 1, 0.15) - 11.5).abs() < 1e-12);
        assert_eq!(p.nearest_mean(0.5), 15);
    }

    #[test]
    fn gs_state_buckets() {
        let spec = EnvSpec::gaussian_squeeze(8, 2, 1, 1);
        let p = MfqPolicy::new(&spec, &MfqConfig::default()).unwrap();
        assert_eq!(p.state_bucket(&[-3.0]), 0);
        assert_eq!(p.state_bucket(&[-0.2]), 1);
        assert_eq!(p.state_bucket(&[0.2]), 2);
        assert_eq!(p.state_bucket(&[0.7]), 3);
        assert_eq!(p.state_bucket(&[4.0]), 4);
    }

    #[test]
    fn realized_means_gs_excludes_self() {
        let spec = EnvSpec::gaussian_squeeze(3, 1, 1, 1);
        let grid = ActionGrid::for_env(&spec, 11);
        let m = grid.realized_means(&spec, &[0, 5, 10]);
        assert_eq!(m, vec![0.75, 0.5, 0.25]);
    }

    #[test]
    fn replay_respects_capacity() {
        let mut r = ReplayBuffer::new(10);
        let ep = Episode {
            source: EpisodeSource::Behavior,
            trajectories: vec![],
            rewards: vec![],
            summaries: vec![],
        };
        for _ in 0..7 {
            r.push(ep.clone(), 4);
        }
        assert_eq!(r.episodes.len(), 2);
        assert_eq!(r.transitions(), 8);
    }
}
