//! Behaviour policies, offline dataset splits and dataset statistics.

pub mod format;
pub mod mfq;

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mfq::{train_mfq, ActionGrid, MfqArtifacts, MfqConfig, MfqPolicy, ReplayBuffer};

use crate::env::{self, EnvSpec, JointAction, MeanFieldState, TrajectoryLayout};
use crate::error::{Error, Result};
use crate::model::Mat;
use crate::rng::{self, tag};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub env_name: String,
    pub n_agents: usize,
    pub horizon: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub split: String,
    pub summary_dim: usize,
}

impl DatasetHeader {
    pub fn for_env(spec: &EnvSpec, split: &str) -> Self {
        DatasetHeader {
            env_name: spec.name.clone(),
            n_agents: spec.n_agents,
            horizon: spec.horizon,
            d_s: spec.d_s,
            d_a: spec.d_a,
            split: split.to_string(),
            summary_dim: spec.summary_dim(),
        }
    }

    pub fn layout(&self) -> TrajectoryLayout {
        TrajectoryLayout { d_s: self.d_s, d_a: self.d_a, horizon: self.horizon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EpisodeSource {
    Behavior = 0,
    Random = 1,
}

/// One stored `N`-agent episode, kept in `f32` exactly as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub source: EpisodeSource,
    /// `N x D` flattened per-agent trajectories.
    pub trajectories: Vec<f32>,
    /// `H x N` rewards.
    pub rewards: Vec<f32>,
    /// `H x summary_dim` mean-field summaries.
    pub summaries: Vec<f32>,
}

/// Full-precision record of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub states: Vec<MeanFieldState>,
    pub actions: Vec<JointAction>,
    pub rewards: Vec<Vec<f64>>,
}

impl EpisodeRecord {
    pub fn new(initial: MeanFieldState) -> Self {
        EpisodeRecord { states: vec![initial], actions: Vec::new(), rewards: Vec::new() }
    }

    pub fn push(&mut self, action: JointAction, rewards: Vec<f64>, next: MeanFieldState) {
        self.actions.push(action);
        self.rewards.push(rewards);
        self.states.push(next);
    }

    /// `N x D` flattened trajectories.
    pub fn trajectories(&self, spec: &EnvSpec) -> Vec<f64> {
        let layout = spec.layout();
        let dim = layout.dim();
        let mut out = vec![0.0; spec.n_agents * dim];
        for i in 0..spec.n_agents {
            let row = &mut out[i * dim..(i + 1) * dim];
            for h in 0..=spec.horizon {
                let o = layout.state_offset(h);
                row[o..o + spec.d_s].copy_from_slice(self.states[h].agent(i, spec.d_s));
                if h < spec.horizon {
                    let o = layout.action_offset(h);
                    row[o..o + spec.d_a].copy_from_slice(self.actions[h].agent(i, spec.d_a));
                }
            }
        }
        out
    }
}

impl Episode {
    pub fn from_record(spec: &EnvSpec, record: &EpisodeRecord, source: EpisodeSource) -> Self {
        let trajs = record.trajectories(spec);
        let summaries = env::mean_field_flow(&spec.layout(), &trajs, spec.n_agents);
        Episode {
            source,
            trajectories: trajs.iter().map(|&v| v as f32).collect(),
            rewards: record.rewards.iter().flatten().map(|&v| v as f32).collect(),
            summaries: summaries.iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn trajectory(&self, i: usize, dim: usize) -> Vec<f64> {
        self.trajectories[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect()
    }

    /// All trajectories as an `N x D` matrix.
    pub fn trajectory_mat(&self, n: usize, dim: usize) -> Mat {
        Mat { rows: n, cols: dim, data: self.trajectories.iter().map(|&v| v as f64).collect() }
    }

    /// Rewards as `H` rows of `N`.
    pub fn reward_table(&self, n: usize) -> Vec<Vec<f64>> {
        self.rewards.chunks(n.max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn summary(&self, h: usize, summary_dim: usize) -> Vec<f64> {
        self.summaries[h * summary_dim..(h + 1) * summary_dim].iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl OfflineDataset {
    pub fn empty(spec: &EnvSpec, split: &str) -> Self {
        OfflineDataset { header: DatasetHeader::for_env(spec, split), episodes: Vec::new() }
    }

    pub fn layout(&self) -> TrajectoryLayout {
        self.header.layout()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let dim = h.layout().dim();
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.trajectories.len() != h.n_agents * dim
                || ep.rewards.len() != h.horizon * h.n_agents
                || ep.summaries.len() != h.horizon * h.summary_dim
            {
                return Err(Error::Shape(format!("episode {e} does not match the dataset header")));
            }
        }
        Ok(())
    }

    /// Checks the dataset was recorded on `spec`.
    pub fn check_env(&self, spec: &EnvSpec) -> Result<()> {
        let h = &self.header;
        if h.env_name != spec.name || h.n_agents != spec.n_agents || h.horizon != spec.horizon
            || h.d_s != spec.d_s || h.d_a != spec.d_a
        {
            return Err(Error::InvalidArgument(format!(
                "dataset ({} N={} H={} d_s={} d_a={}) does not match env {} (N={} H={} d_s={} d_a={})",
                h.env_name, h.n_agents, h.horizon, h.d_s, h.d_a,
                spec.name, spec.n_agents, spec.horizon, spec.d_s, spec.d_a
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        format::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::from_bytes(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        format::write(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        format::read(path)
    }

    /// First `k` episodes and the rest.
    pub fn split_at(&self, k: usize) -> (OfflineDataset, OfflineDataset) {
        let k = k.min(self.len());
        let a = OfflineDataset { header: self.header.clone(), episodes: self.episodes[..k].to_vec() };
        let b = OfflineDataset { header: self.header.clone(), episodes: self.episodes[k..].to_vec() };
        (a, b)
    }

    /// Episodes of several datasets recorded on the same environment.
    pub fn concat(parts: &[&OfflineDataset], split: &str) -> Result<OfflineDataset> {
        let first = parts.first().ok_or_else(|| Error::Missing("datasets to concatenate".into()))?;
        let mut header = first.header.clone();
        header.split = split.to_string();
        let mut episodes = Vec::new();
        for p in parts {
            let mut h = p.header.clone();
            h.split = split.to_string();
            if h != header {
                return Err(Error::InvalidArgument("datasets come from different environments".into()));
            }
            episodes.extend(p.episodes.iter().cloned());
        }
        Ok(OfflineDataset { header, episodes })
    }

    /// Discounted social welfare of each episode.
    pub fn episode_returns(&self, gamma: f64) -> Vec<f64> {
        let n = self.header.n_agents;
        self.episodes
            .iter()
            .map(|ep| {
                let table = ep.reward_table(n);
                let mut disc = 1.0;
                let mut total = 0.0;
                for row in &table {
                    total += disc * row.iter().sum::<f64>() / n as f64;
                    disc *= gamma;
                }
                total
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Expert,
    Medium,
    MediumReplay,
    Mixed,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Expert, Split::Medium, Split::MediumReplay, Split::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Split::Expert => "expert",
            Split::Medium => "medium",
            Split::MediumReplay => "medium_replay",
            Split::Mixed => "mixed",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s}")))
    }
}

/// How agents choose actions during data collection.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    /// Boltzmann sampling at the snapshot temperature, or greedy.
    Mfq { policy: &'a MfqPolicy, greedy: bool },
    /// Uniform over the behaviour policy's action grid.
    Uniform { levels: usize },
}

/// Rolls out one episode. The env and action streams derive from `seed`.
pub fn rollout(spec: &EnvSpec, behavior: Behavior<'_>, seed: u64) -> Result<EpisodeRecord> {
    let mut state = env::reset(spec, seed)?;
    let mut record = EpisodeRecord::new(state.clone());
    let mut hint = match behavior {
        Behavior::Mfq { policy, .. } => policy.mean_hint,
        Behavior::Uniform { .. } => 0.0,
    };
    for h in 0..spec.horizon {
        let mut rng = rng::stream(&[seed, tag::COLLECT, h as u64]);
        let action = match behavior {
            Behavior::Mfq { policy, greedy } => {
                let (idx, _) = policy.act(&state, spec.d_s, hint, greedy, &mut rng);
                hint = policy.grid.population_mean(&idx);
                policy.grid.joint_action(&idx)
            }
            Behavior::Uniform { levels } => {
                let grid = ActionGrid::for_env(spec, levels);
                let idx: Vec<usize> = (0..spec.n_agents).map(|_| rng.random_range(0..grid.len())).collect();
                grid.joint_action(&idx)
            }
        };
        let (next, rewards) = env::step(spec, &state, &action, seed)?;
        record.push(action, rewards, next.clone());
        state = next;
    }
    Ok(record)
}

fn split_tag(split: Split) -> u64 {
    split as u64 + 1
}

/// Generates one quality split from the MFQ artefacts.
pub fn collect_split(
    spec: &EnvSpec,
    artifacts: &MfqArtifacts,
    split: Split,
    episodes: usize,
    seed: u64,
    action_levels: usize,
) -> Result<OfflineDataset> {
    let mut ds = OfflineDataset::empty(spec, split.name());
    let ep_seed = |e: usize| rng::key(&[seed, tag::COLLECT, split_tag(split), e as u64]);
    if split == Split::MediumReplay {
        let buf = &artifacts.replay.episodes;
        if buf.is_empty() {
            return Err(Error::Missing("MFQ replay buffer for medium_replay".into()));
        }
        for e in 0..episodes {
            let mut r = rng::stream(&[ep_seed(e)]);
            ds.episodes.push(buf[r.random_range(0..buf.len())].clone());
        }
        return Ok(ds);
    }
    ds.episodes = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let (behavior, source) = match split {
                Split::Expert => (Behavior::Mfq { policy: &artifacts.full, greedy: false }, EpisodeSource::Behavior),
                Split::Medium => (Behavior::Mfq { policy: &artifacts.half, greedy: false }, EpisodeSource::Behavior),
                Split::Mixed if e % 2 == 0 => {
                    (Behavior::Mfq { policy: &artifacts.full, greedy: false }, EpisodeSource::Behavior)
                }
                _ => (Behavior::Uniform { levels: action_levels }, EpisodeSource::Random),
            };
            let rec = rollout(spec, behavior, ep_seed(e))?;
            Ok(Episode::from_record(spec, &rec, source))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub state_mean: Vec<f64>,
    pub state_var: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_var: Vec<f64>,
    /// Mean order parameter of the first executed joint action (Ising only).
    pub order_parameter: Option<f64>,
}

fn moments(cols: usize, rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; cols];
    let mut s2 = vec![0.0; cols];
    let mut n = 0usize;
    for r in rows {
        for c in 0..cols {
            s[c] += r[c];
            s2[c] += r[c] * r[c];
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let var = s2.iter().zip(&mean).map(|(v, m)| (v / n - m * m).max(0.0)).collect();
    (mean, var)
}

pub fn dataset_stats(ds: &OfflineDataset, gamma: f64) -> Result<DatasetStats> {
    if ds.is_empty() {
        return Err(Error::Missing("episodes for dataset statistics".into()));
    }
    let layout = ds.layout();
    let dim = layout.dim();
    let n = ds.header.n_agents;
    let returns = ds.episode_returns(gamma);
    let agents = || ds.episodes.iter().flat_map(move |ep| (0..n).map(move |i| ep.trajectory(i, dim)));
    let (state_mean, state_var) = moments(
        layout.d_s,
        agents().flat_map(|t| (0..=layout.horizon).map(move |h| layout.state(&t, h).to_vec()).collect::<Vec<_>>()),
    );
    let (action_mean, action_var) = moments(
        layout.d_a,
        agents().flat_map(|t| (0..layout.horizon).map(move |h| layout.action(&t, h).to_vec()).collect::<Vec<_>>()),
    );
    let order_parameter = (ds.header.env_name == "ising").then(|| {
        let xi: Vec<f64> = ds
            .episodes
            .iter()
            .map(|ep| {
                let spins: Vec<i8> = (0..n)
                    .map(|i| {
                        let a = layout.action(&ep.trajectory(i, dim), 0).to_vec();
                        if env::argmax(&a) == 1 { 1 } else { -1 }
                    })
                    .collect();
                env::order_parameter_spins(&spins)
            })
            .collect();
        stats::mean(&xi)
    });
    Ok(DatasetStats {
        episodes: ds.len(),
        return_mean: stats::mean(&returns),
        return_std: if returns.len() > 1 { stats::std_dev(&returns) } else { 0.0 },
        state_mean,
        state_var,
        action_mean,
        action_var,
        order_parameter,
    })
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel whose bandwidth
/// is the median pairwise distance of the pooled sample.
pub fn mmd_rbf(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows == 0 || b.rows == 0 || a.cols != b.cols {
        return Err(Error::Shape("MMD needs two nonempty samples of equal width".into()));
    }
    let sq = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum() };
    let pooled: Vec<&[f64]> = (0..a.rows).map(|i| a.row(i)).chain((0..b.rows).map(|i| b.row(i))).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq(pooled[i], pooled[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.is_empty() { 1.0 } else { stats::quantile(&d, 0.5) };
    let bw2 = if med > 0.0 { med } else { 1.0 };
    let k = |x: &[f64], y: &[f64]| (-sq(x, y) / bw2).exp();
    let mean_k = |x: &Mat, y: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..x.rows {
            for j in 0..y.rows {
                s += k(x.row(i), y.row(j));
            }
        }
        s / (x.rows * y.rows) as f64
    };
    Ok((mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)).max(0.0))
}

/// Up to `max_samples` per-agent trajectories drawn uniformly (with
/// replacement) over (episode, agent).
pub fn sample_trajectories(ds: &OfflineDataset, max_samples: usize, seed: u64) -> Result<Mat> {
    if ds.is_empty() {
        return Err(Error::Missing("episodes to sample from".into()));
    }
    let dim = ds.layout().dim();
    let n = ds.header.n_agents;
    let mut r = rng::stream(&[seed, tag::EVAL]);
    let mut out = Mat::zeros(max_samples, dim);
    for k in 0..max_samples {
        let e = r.random_range(0..ds.len());
        let i = r.random_range(0..n);
        out.row_mut(k).copy_from_slice(&ds.episodes[e].trajectory(i, dim));
    }
    Ok(out)
}

/// MMD proxy for the per-agent marginal shift between two datasets.
pub fn offline_shift(a: &OfflineDataset, b: &OfflineDataset, max_samples: usize, seed: u64) -> Result<f64> {
    mmd_rbf(&sample_trajectories(a, max_samples, seed)?, &sample_trajectories(b, max_samples, seed)?)
}
