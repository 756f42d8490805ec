//! Mean-field value estimator `V(tau, mu) = sum_h gamma^h Q(s_h, a_h, mu_h)`.
//!
//! `Q` is an MLP over the agent's state and action plus the step's
//! mean-field summary, fitted by semi-gradient TD(0) with a periodically
//! synchronised target network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Tape, Var};
use super::param::{Adam, BoundParams, ParamVector};
use super::tensor::Mat;
use super::Mlp;
use crate::env::TrajectoryLayout;
use crate::error::{Error, Result};
use crate::offline::OfflineDataset;
use crate::rng::{self, tag};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub target_sync: usize,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        ValueConfig { hidden: 64, depth: 2, lr: 1e-3, steps: 4000, batch: 256, target_sync: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub layout: TrajectoryLayout,
    pub gamma: f64,
    pub hidden: usize,
    pub depth: usize,
    pub params: ParamVector,
    /// Feature standardisation applied before the network.
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    net: Mlp,
}

fn net_for(layout: &TrajectoryLayout, hidden: usize, depth: usize) -> Mlp {
    let f = feature_dim(layout);
    let mut sizes = vec![f];
    sizes.extend(std::iter::repeat_n(hidden, depth));
    sizes.push(1);
    Mlp::new("value", sizes)
}

/// `[s_h, a_h, mean s_h, mean s_h^2, mean a_h, h / H]`. The step fraction
/// keeps the finite-horizon `Q` a function of its inputs.
pub fn feature_dim(layout: &TrajectoryLayout) -> usize {
    2 * layout.d_s + 2 * layout.d_a + layout.d_s + 1
}

pub fn features(layout: &TrajectoryLayout, traj: &[f64], h: usize, summary: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(layout));
    f.extend_from_slice(layout.state(traj, h));
    f.extend_from_slice(layout.action(traj, h));
    f.extend_from_slice(summary);
    f.push(step_fraction(layout, h));
    f
}

fn step_fraction(layout: &TrajectoryLayout, h: usize) -> f64 {
    h as f64 / layout.horizon as f64
}

impl ValueModel {
    pub fn new(layout: TrajectoryLayout, gamma: f64, hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument("value gamma must lie in (0, 1]".into()));
        }
        let net = net_for(&layout, hidden, depth);
        let mut params = ParamVector::new();
        net.init(&mut params, &mut rng::stream(&[seed, tag::VALUE, 0]))?;
        let f = feature_dim(&layout);
        Ok(ValueModel { layout, gamma, hidden, depth, params, in_mean: vec![0.0; f], in_std: vec![1.0; f], net })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_params(
        layout: TrajectoryLayout,
        gamma: f64,
        hidden: usize,
        depth: usize,
        params: ParamVector,
        in_mean: Vec<f64>,
        in_std: Vec<f64>,
    ) -> Result<Self> {
        let fresh = ValueModel::new(layout, gamma, hidden, depth, 0)?;
        if fresh.params.segments() != params.segments() {
            return Err(Error::Format("value parameters do not match the configured architecture".into()));
        }
        let f = feature_dim(&layout);
        if in_mean.len() != f || in_std.len() != f {
            return Err(Error::Format("value feature normaliser has the wrong width".into()));
        }
        params.validate()?;
        Ok(ValueModel { params, in_mean, in_std, ..fresh })
    }

    /// `Q = w . features + b` with no hidden layers.
    pub fn linear(layout: TrajectoryLayout, gamma: f64, w: Vec<f64>, b: f64) -> Result<Self> {
        let mut m = ValueModel::new(layout, gamma, 1, 0, 0)?;
        if w.len() != feature_dim(&layout) {
            return Err(Error::Shape("linear value weights have the wrong width".into()));
        }
        m.params.slice_mut("value.w0")?.copy_from_slice(&w);
        m.params.slice_mut("value.b0")?[0] = b;
        Ok(m)
    }

    /// `Q` frozen at `c`.
    pub fn constant(layout: TrajectoryLayout, gamma: f64, c: f64) -> Result<Self> {
        Self::linear(layout, gamma, vec![0.0; feature_dim(&layout)], c)
    }

    fn standardise(&self, x: &mut Mat) {
        for i in 0..x.rows {
            for ((v, m), s) in x.row_mut(i).iter_mut().zip(&self.in_mean).zip(&self.in_std) {
                *v = (*v - m) / s;
            }
        }
    }

    /// `Q` for raw feature rows, recorded on a tape against bound parameters.
    pub fn q_tape(&self, tape: &mut Tape, p: &BoundParams, feats: &Mat) -> Result<Var> {
        let mut x = feats.clone();
        self.standardise(&mut x);
        let xv = tape.leaf(x);
        self.net.forward_tape(tape, p, xv)
    }

    /// `Q` for each row of raw features.
    pub fn q(&self, feats: &Mat) -> Result<Vec<f64>> {
        let mut x = feats.clone();
        self.standardise(&mut x);
        Ok(self.net.forward(&self.params, &x)?.data)
    }

    pub fn value_of(&self, traj: &[f64], flow: &[Vec<f64>]) -> Result<f64> {
        self.check_flow(flow)?;
        let rows: Vec<f64> =
            (0..self.layout.horizon).flat_map(|h| features(&self.layout, traj, h, &flow[h])).collect();
        let q = self.q(&Mat::from_vec(self.layout.horizon, feature_dim(&self.layout), rows)?)?;
        let mut disc = 1.0;
        let mut v = 0.0;
        for qh in q {
            v += disc * qh;
            disc *= self.gamma;
        }
        Ok(v)
    }

    fn check_flow(&self, flow: &[Vec<f64>]) -> Result<()> {
        let sd = 2 * self.layout.d_s + self.layout.d_a;
        if flow.len() != self.layout.horizon || flow.iter().any(|f| f.len() != sd) {
            return Err(Error::Shape("mean-field flow must hold one summary per step".into()));
        }
        Ok(())
    }

    /// Gradient of `V` for every row of `trajs` with the flow held fixed.
    pub fn value_gradient(&self, trajs: &Mat, flow: &[Vec<f64>]) -> Result<Mat> {
        self.check_flow(flow)?;
        if trajs.cols != self.layout.dim() {
            return Err(Error::Shape("trajectory width does not match the value model".into()));
        }
        let n = trajs.rows;
        let f = feature_dim(&self.layout);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let tau = tape.leaf(trajs.clone());
        let mut diag = Mat::zeros(f, f);
        for k in 0..f {
            diag.data[k * f + k] = 1.0 / self.in_std[k];
        }
        let diag = tape.leaf(diag);
        let shift: Vec<f64> = self.in_mean.iter().zip(&self.in_std).map(|(m, s)| -m / s).collect();
        let shift = tape.leaf(Mat { rows: 1, cols: f, data: shift });
        let mut total: Option<Var> = None;
        let mut disc = 1.0;
        for (h, summary) in flow.iter().enumerate() {
            let so = self.layout.state_offset(h);
            let ao = self.layout.action_offset(h);
            let s = tape.slice_cols(tau, so, so + self.layout.d_s)?;
            let a = tape.slice_cols(tau, ao, ao + self.layout.d_a)?;
            let mut ctx = Mat::zeros(n, summary.len() + 1);
            for i in 0..n {
                let r = ctx.row_mut(i);
                r[..summary.len()].copy_from_slice(summary);
                r[summary.len()] = step_fraction(&self.layout, h);
            }
            let ctx = tape.leaf(ctx);
            let x = tape.concat_cols(&[s, a, ctx])?;
            let x = tape.matmul(x, diag)?;
            let x = tape.add_bias(x, shift)?;
            let q = self.net.forward_tape(&mut tape, &p, x)?;
            let q = tape.scale(q, disc);
            total = Some(match total {
                Some(t) => tape.add(t, q)?,
                None => q,
            });
            disc *= self.gamma;
        }
        let loss = tape.sum(total.expect("horizon >= 1"));
        let grads = tape.backward(loss)?;
        Ok(grads.wrt(&tape, tau))
    }
}

struct Transition {
    episode: usize,
    agent: usize,
    step: usize,
}

fn transition_features(ds: &OfflineDataset, t: &Transition, step: usize) -> Vec<f64> {
    let layout = ds.layout();
    let ep = &ds.episodes[t.episode];
    let traj = ep.trajectory(t.agent, layout.dim());
    features(&layout, &traj, step, &ep.summary(step, ds.header.summary_dim))
}

/// Fits `Q` by TD(0) on transitions sampled uniformly from `ds`.
pub fn train_value(ds: &OfflineDataset, gamma: f64, cfg: &ValueConfig) -> Result<ValueModel> {
    if ds.is_empty() {
        return Err(Error::Missing("episodes to fit the value model".into()));
    }
    let layout = ds.layout();
    let hz = layout.horizon;
    let n = ds.header.n_agents;
    let mut model = ValueModel::new(layout, gamma, cfg.hidden, cfg.depth, cfg.seed)?;
    let mut rng = rng::stream(&[cfg.seed, tag::VALUE, 1]);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| Transition {
        episode: rng.random_range(0..ds.len()),
        agent: rng.random_range(0..n),
        step: rng.random_range(0..hz),
    };

    let f = feature_dim(&layout);
    let probe: Vec<Vec<f64>> = (0..4096)
        .map(|_| {
            let t = draw(&mut rng);
            transition_features(ds, &t, t.step)
        })
        .collect();
    for k in 0..f {
        let col: Vec<f64> = probe.iter().map(|r| r[k]).collect();
        model.in_mean[k] = stats::mean(&col);
        model.in_std[k] = stats::std_dev(&col).max(1e-3);
    }

    let mut target = model.clone();
    let mut opt = Adam::new(model.params.len(), cfg.lr);
    for step in 0..cfg.steps {
        if step % cfg.target_sync.max(1) == 0 {
            target.params = model.params.clone();
        }
        let batch: Vec<Transition> = (0..cfg.batch).map(|_| draw(&mut rng)).collect();
        let mut x = Mat::zeros(cfg.batch, f);
        let mut next = Mat::zeros(cfg.batch, f);
        let mut y = vec![0.0; cfg.batch];
        for (b, t) in batch.iter().enumerate() {
            x.row_mut(b).copy_from_slice(&transition_features(ds, t, t.step));
            y[b] = ds.episodes[t.episode].rewards[t.step * n + t.agent] as f64;
            if t.step + 1 < hz {
                next.row_mut(b).copy_from_slice(&transition_features(ds, t, t.step + 1));
            }
        }
        let qn = target.q(&next)?;
        for (b, t) in batch.iter().enumerate() {
            if t.step + 1 < hz {
                y[b] += gamma * qn[b];
            }
        }
        model.standardise(&mut x);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let xv = tape.leaf(x);
        let q = model.net.forward_tape(&mut tape, &p, xv)?;
        let yv = tape.leaf(Mat { rows: cfg.batch, cols: 1, data: y });
        let r = tape.sub(q, yv)?;
        let sq = tape.square(r);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        let g = p.flat_grad(&tape, &grads);
        opt.step(&mut model.params.data, &g)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite("value loss"));
        }
    }
    model.params.validate()?;
    Ok(model)
}

/// Mean `V` over an episode's agents, using the stored mean-field flow.
pub fn episode_value(vm: &ValueModel, ds: &OfflineDataset, e: usize) -> Result<f64> {
    let layout = ds.layout();
    let ep = &ds.episodes[e];
    let flow: Vec<Vec<f64>> = (0..layout.horizon).map(|h| ep.summary(h, ds.header.summary_dim)).collect();
    let n = ds.header.n_agents;
    let mut total = 0.0;
    for i in 0..n {
        total += vm.value_of(&ep.trajectory(i, layout.dim()), &flow)?;
    }
    Ok(total / n as f64)
}

/// Spearman correlation between per-episode `V` and Monte-Carlo welfare.
pub fn value_rank_correlation(vm: &ValueModel, ds: &OfflineDataset, gamma: f64) -> Result<f64> {
    if ds.len() < 2 {
        return Err(Error::Missing("at least two held-out episodes".into()));
    }
    let v: Vec<f64> = (0..ds.len()).map(|e| episode_value(vm, ds, e)).collect::<Result<_>>()?;
    Ok(stats::spearman(&v, &ds.episode_returns(gamma)))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;
    use crate::offline::{collect_split, train_mfq, MfqConfig, Split};

    fn lay() -> TrajectoryLayout {
        TrajectoryLayout { d_s: 2, d_a: 1, horizon: 3 }
    }

    fn flow(l: &TrajectoryLayout) -> Vec<Vec<f64>> {
        (0..l.horizon).map(|h| vec![0.1 * h as f64; 2 * l.d_s + l.d_a]).collect()
    }

    #[test]
    fn constant_q_values() {
        let l = TrajectoryLayout { horizon: 2, ..lay() };
        let m = ValueModel::constant(l, 1.0, 1.0).unwrap();
        assert_eq!(m.value_of(&vec![0.3; l.dim()], &flow(&l)).unwrap(), 2.0);
        let l = lay();
        let m = ValueModel::constant(l, 0.5, 1.0).unwrap();
        assert_eq!(m.value_of(&vec![0.3; l.dim()], &flow(&l)).unwrap(), 1.75);
        let g = m.value_gradient(&Mat::filled(2, l.dim(), 0.4), &flow(&l)).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_q_gradient_is_discounted_weights() {
        let l = lay();
        let w = vec![1.0, -2.0, 0.5, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let m = ValueModel::linear(l, 0.9, w, 0.2).unwrap();
        let g = m.value_gradient(&Mat::filled(1, l.dim(), 0.7), &flow(&l)).unwrap();
        for h in 0..3 {
            let d = 0.9f64.powi(h as i32);
            let so = l.state_offset(h);
            assert!((g.data[so] - d).abs() < 1e-12);
            assert!((g.data[so + 1] + 2.0 * d).abs() < 1e-12);
            assert!((g.data[l.action_offset(h)] - 0.5 * d).abs() < 1e-12);
        }
        assert!((g.data[l.state_offset(3)]).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let l = lay();
        let mut m = ValueModel::new(l, 0.95, 16, 2, 4).unwrap();
        m.in_mean = vec![0.1; feature_dim(&l)];
        m.in_std = vec![0.7; feature_dim(&l)];
        let fl = flow(&l);
        let traj: Vec<f64> = (0..l.dim()).map(|k| (k as f64 * 0.7).sin()).collect();
        let g = m.value_gradient(&Mat::from_vec(1, l.dim(), traj.clone()).unwrap(), &fl).unwrap();
        let h = 1e-6;
        for k in 0..l.dim() {
            let mut p = traj.clone();
            let mut q = traj.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (m.value_of(&p, &fl).unwrap() - m.value_of(&q, &fl).unwrap()) / (2.0 * h);
            assert!((fd - g.data[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "{k}: {fd} vs {}", g.data[k]);
        }
    }

    #[test]
    fn td_fit_ranks_ising_episodes() {
        let spec = EnvSpec::ising(4, 1.0);
        let art = train_mfq(&spec, &MfqConfig { iterations: 100, ..Default::default() }, 0).unwrap();
        let ds = collect_split(&spec, &art, Split::Mixed, 60, 1, 11).unwrap();
        let (train, held) = ds.split_at(40);
        let cfg = ValueConfig { steps: 600, ..Default::default() };
        let vm = train_value(&train, 1.0, &cfg).unwrap();
        let rho = value_rank_correlation(&vm, &held, 1.0).unwrap();
        assert!(rho > 0.8, "rho {rho}");
    }
}
