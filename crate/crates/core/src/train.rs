//! Mean-field value score matching and the hierarchical training loop.
//!
//! Each sampled episode contributes one term per subdivision level `k`:
//! `N_k` agents are drawn from the episode, noised at a time drawn from the
//! level's window, and scored against the denoising target. Level losses
//! are combined with the configured weights and one optimizer step is taken
//! per batch of episodes.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvSpec, RewardContext};
use crate::error::{Error, Result};
use crate::model::{Adam, Mat, ModelBundle, Normalizer, ScoreModel, ScoreSource, Tape, Var};
use crate::offline::OfflineDataset;
use crate::rng::{self, tag, StreamRng};
use crate::schedule::{DiffusionSchedule, LevelWeighting, SubdivisionSchedule};
use crate::stats;

/// Per-sample scaling of the squared residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Raw squared error.
    Unit,
    /// Multiply by `sigma(t)^2`, the usual noise-prediction scaling.
    #[default]
    NoiseVariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub subdivision: SubdivisionSchedule,
    pub weighting: LevelWeighting,
    pub loss_weighting: LossWeighting,
    pub epochs: usize,
    /// Episodes per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Per-sample gradient, per-level losses and objective contribution.
type SampleGrad = (Vec<f64>, Vec<f64>, f64);

impl TrainConfig {
    pub fn new(subdivision: SubdivisionSchedule) -> Self {
        TrainConfig {
            alpha: 1.0,
            lambda: 0.0,
            subdivision,
            weighting: LevelWeighting::PracticalBPow,
            loss_weighting: LossWeighting::NoiseVariance,
            epochs: 20,
            batch: 32,
            lr: 2e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Closed-form VP marginal: returns `(tau_t, eps)`.
pub fn forward_noise(sched: &DiffusionSchedule, x0: &Mat, t: f64, rng: &mut impl Rng) -> Result<(Mat, Mat)> {
    if !(0.0..=sched.t_max).contains(&t) {
        return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: sched.t_max });
    }
    let a = sched.alpha(t);
    let s = (sched.marginal_var(t) - a * a).max(0.0).sqrt();
    let eps = Mat {
        rows: x0.rows,
        cols: x0.cols,
        data: (0..x0.data.len()).map(|_| StandardNormal.sample(rng)).collect(),
    };
    let xt = x0.zip(&eps, |x, e| a * x + s * e);
    Ok((xt, eps))
}

/// Denoising score target `-eps / std(t)`.
pub fn denoising_target(sched: &DiffusionSchedule, t: f64, eps: &Mat) -> Mat {
    let c = -1.0 / sched.noise_std(t);
    eps.map(|e| c * e)
}

/// `mean ||s - target||^2 + (lambda / alpha) mean ||s - grad R||^2`, where the
/// means run over agents and coordinates.
pub fn mfvsm_loss(s: &Mat, target: &Mat, reward_grad: Option<&Mat>, alpha: f64, lambda: f64) -> Result<f64> {
    let same = |m: &Mat| m.rows == s.rows && m.cols == s.cols;
    if !same(target) || reward_grad.is_some_and(|g| !same(g)) {
        return Err(Error::Shape("loss operands must share the score's shape".into()));
    }
    let n = s.data.len().max(1) as f64;
    let sq = |b: &Mat| s.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let mut loss = sq(target);
    if let Some(g) = reward_grad {
        if lambda > 0.0 {
            loss += lambda / alpha * sq(g);
        }
    }
    Ok(loss)
}

/// The same loss recorded on a tape, scaled by `weight`.
pub fn mfvsm_loss_tape(
    tape: &mut Tape,
    s: Var,
    target: &Mat,
    reward_grad: Option<&Mat>,
    alpha: f64,
    lambda: f64,
    weight: f64,
) -> Result<Var> {
    let tv = tape.leaf(target.clone());
    let r = tape.sub(s, tv)?;
    let sq = tape.square(r);
    let mut loss = tape.mean(sq);
    if let (Some(g), true) = (reward_grad, lambda > 0.0) {
        let gv = tape.leaf(g.clone());
        let r = tape.sub(s, gv)?;
        let sq = tape.square(r);
        let m = tape.mean(sq);
        let m = tape.scale(m, lambda / alpha);
        loss = tape.add(loss, m)?;
    }
    Ok(tape.scale(loss, weight))
}

/// Every episode as a normalised `N x D` population.
pub fn normalized_populations(ds: &OfflineDataset, norm: &Normalizer) -> Vec<Mat> {
    let d = ds.layout().dim();
    let n = ds.header.n_agents;
    ds.episodes
        .iter()
        .map(|ep| {
            let mut m = ep.trajectory_mat(n, d);
            norm.normalize(&mut m);
            m
        })
        .collect()
}

/// Normaliser fitted on every agent trajectory in `ds`.
pub fn fit_normalizer(ds: &OfflineDataset) -> Result<Normalizer> {
    let d = ds.layout().dim();
    let n = ds.header.n_agents;
    let mut rows = Mat::zeros(n * ds.len(), d);
    for (e, ep) in ds.episodes.iter().enumerate() {
        let m = ep.trajectory_mat(n, d);
        rows.data[e * n * d..(e + 1) * n * d].copy_from_slice(&m.data);
    }
    Normalizer::fit(&rows)
}

/// Reward gradient at a normalised noisy population, in normalised units.
pub fn reward_gradient_normalized(spec: &EnvSpec, norm: &Normalizer, x: &Mat) -> Mat {
    let mut raw = x.clone();
    norm.denormalize(&mut raw);
    let ctx = RewardContext::from_population(spec, &raw.data, raw.rows);
    let mut g = Mat::zeros(x.rows, x.cols);
    for (i, c) in ctx.iter().enumerate() {
        g.row_mut(i).copy_from_slice(&env::reward_gradient(spec, raw.row(i), c));
    }
    norm.grad_to_normalized(&mut g);
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean unweighted loss per level.
    pub level_loss: Vec<f64>,
    /// Mean level-weighted objective per episode, the quantity optimised.
    pub objective: f64,
    pub steps: usize,
}

struct LevelSample {
    x: Mat,
    target: Mat,
    reward_grad: Option<Mat>,
    t: f64,
}

fn draw_level(
    model: &ScoreModel,
    pop: &Mat,
    n_k: usize,
    window: (f64, f64),
    rng: &mut StreamRng,
) -> Result<(Mat, Mat, f64)> {
    if n_k > pop.rows {
        return Err(Error::InvalidArgument(format!(
            "level needs {n_k} agents but the episode has {}",
            pop.rows
        )));
    }
    let mut idx = sample_indices(rng, pop.rows, n_k).into_vec();
    idx.sort_unstable();
    let sub = crate::model::gather_rows(pop, &idx);
    let t = if window.1 > window.0 { rng.random_range(window.0..window.1) } else { window.0 };
    let (xt, eps) = forward_noise(&model.schedule, &sub, t, rng)?;
    Ok((xt, eps, t))
}

/// Gradient and per-level losses for one episode.
fn episode_gradient(
    model: &ScoreModel,
    pop: &Mat,
    spec: Option<&EnvSpec>,
    norm: &Normalizer,
    cfg: &TrainConfig,
    weights: &[f64],
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let sub = &cfg.subdivision;
    let mut samples = Vec::with_capacity(sub.k_levels + 1);
    for k in 0..=sub.k_levels {
        let (x, eps, t) = draw_level(model, pop, sub.n_levels[k], sub.window(k), rng)?;
        let target = denoising_target(&model.schedule, t, &eps);
        let reward_grad = match spec {
            Some(s) if cfg.lambda > 0.0 => Some(reward_gradient_normalized(s, norm, &x)),
            _ => None,
        };
        samples.push(LevelSample { x, target, reward_grad, t });
    }
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut total: Option<Var> = None;
    let mut losses = Vec::with_capacity(samples.len());
    for (k, smp) in samples.iter().enumerate() {
        let s = model.forward_tape(&mut tape, &p, smp.t, &smp.x)?;
        let scale = match cfg.loss_weighting {
            LossWeighting::Unit => 1.0,
            LossWeighting::NoiseVariance => model.schedule.noise_std(smp.t).powi(2),
        };
        let l = mfvsm_loss_tape(&mut tape, s, &smp.target, smp.reward_grad.as_ref(), cfg.alpha, cfg.lambda, 1.0)?;
        losses.push(tape.scalar(l));
        let lw = tape.scale(l, weights[k] * scale);
        total = Some(match total {
            Some(acc) => tape.add(acc, lw)?,
            None => lw,
        });
    }
    let loss = total.expect("at least one level");
    let objective = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((p.flat_grad(&tape, &grads), losses, objective))
}

/// One pass over the episodes of `pops` in a seeded random order.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut ScoreModel,
    opt: &mut Adam,
    pops: &[Mat],
    spec: Option<&EnvSpec>,
    norm: &Normalizer,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    cfg.validate()?;
    if pops.is_empty() {
        return Err(Error::Missing("episodes to train on".into()));
    }
    if pops.iter().any(|p| p.cols != model.dim()) {
        return Err(Error::Shape("dataset trajectories do not match the model layout".into()));
    }
    if cfg.lambda > 0.0 && spec.is_none() {
        return Err(Error::InvalidArgument("the reward term needs an environment".into()));
    }
    let weights = cfg.subdivision.level_weights(cfg.weighting);
    let levels = cfg.subdivision.k_levels + 1;
    let mut order: Vec<usize> = (0..pops.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::stream(&[cfg.seed, tag::TRAIN, epoch as u64]));
    let mut level_sum = vec![0.0; levels];
    let mut count = 0usize;
    let mut steps = 0usize;
    let mut objective = 0.0;
    for (b, chunk) in order.chunks(cfg.batch).enumerate() {
        let results: Vec<Result<SampleGrad>> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, &e)| {
                let mut r = rng::stream(&[cfg.seed, tag::TRAIN, epoch as u64, b as u64, j as u64]);
                episode_gradient(model, &pops[e], spec, norm, cfg, &weights, &mut r)
            })
            .collect();
        let mut grad = vec![0.0; model.params.len()];
        for r in results {
            let (g, losses, obj) = r?;
            objective += obj;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
            for (s, l) in level_sum.iter_mut().zip(&losses) {
                *s += l;
            }
            count += 1;
        }
        let inv = 1.0 / chunk.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        opt.step(&mut model.params.data, &grad)?;
        steps += 1;
    }
    model.params.validate()?;
    Ok(EpochReport {
        epoch,
        level_loss: level_sum.iter().map(|s| s / count as f64).collect(),
        objective: objective / count as f64,
        steps,
    })
}

/// What the score is compared against in [`score_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreTarget {
    /// `-eps / std(t)`; unbiased but noisy.
    Denoising,
    /// Exact score `-x / marginal_var(t)` of unit-Gaussian data.
    AnalyticGaussian,
}

/// Root-mean-square per-agent score error over `t ~ U[window]`.
pub fn score_error(
    model: &dyn ScoreSource,
    heldout: &[Mat],
    sched: &DiffusionSchedule,
    window: (f64, f64),
    target: ScoreTarget,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if heldout.is_empty() || draws == 0 {
        return Err(Error::Missing("held-out populations".into()));
    }
    let per: Vec<Result<(f64, usize)>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut r = rng::stream(&[seed, tag::EVAL, d as u64]);
            let pop = &heldout[d % heldout.len()];
            let t = if window.1 > window.0 { r.random_range(window.0..window.1) } else { window.0 };
            let (xt, eps) = forward_noise(sched, pop, t, &mut r)?;
            let s = model.score(t, &xt)?;
            let tgt = match target {
                ScoreTarget::Denoising => denoising_target(sched, t, &eps),
                ScoreTarget::AnalyticGaussian => {
                    let mv = sched.marginal_var(t);
                    xt.map(|v| -v / mv)
                }
            };
            let sq: f64 = s.data.iter().zip(&tgt.data).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((sq, s.rows))
        })
        .collect();
    let mut sq = 0.0;
    let mut n = 0usize;
    for r in per {
        let (a, b) = r?;
        sq += a;
        n += b;
    }
    Ok((sq / n as f64).sqrt())
}

/// One row of the training CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub level: usize,
    pub loss: f64,
    pub eps: f64,
}

pub const LOG_HEADER: &str = "epoch,level,loss,eps_k";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.level, stats::fmt9(r.loss), stats::fmt9(r.eps)));
    }
    s
}

/// Wall-clock seconds per epoch, kept apart from the deterministic log.
pub fn format_timing(times: &[(usize, f64)]) -> String {
    let mut s = String::from("epoch,wall_time_s\n");
    for (e, t) in times {
        s.push_str(&format!("{e},{t:.3}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub timing: Vec<(usize, f64)>,
}

/// Number of held-out draws used for the per-level error column.
pub const LOG_EVAL_DRAWS: usize = 8;

/// Runs `cfg.epochs` further epochs on `bundle`, continuing its epoch counter
/// and optimizer state.
pub fn fit(
    bundle: &mut ModelBundle,
    train: &OfflineDataset,
    heldout: &OfflineDataset,
    spec: Option<&EnvSpec>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.layout() != bundle.score.layout {
        return Err(Error::Shape("dataset layout does not match the model".into()));
    }
    let pops = normalized_populations(train, &bundle.normalizer);
    let held = if heldout.is_empty() { pops.clone() } else { normalized_populations(heldout, &bundle.normalizer) };
    let mut opt = match bundle.optimizer.take() {
        Some(o) if o.m.len() == bundle.score.params.len() => o,
        _ => Adam::new(bundle.score.params.len(), cfg.lr),
    };
    opt.lr = cfg.lr;
    let mut out = TrainOutcome::default();
    for _ in 0..cfg.epochs {
        let epoch = bundle.epoch;
        let start = Instant::now();
        let rep = train_epoch(&mut bundle.score, &mut opt, &pops, spec, &bundle.normalizer, cfg, epoch)?;
        for (k, &loss) in rep.level_loss.iter().enumerate() {
            let eps = score_error(
                &bundle.score,
                &held,
                &bundle.score.schedule,
                cfg.subdivision.window(k),
                ScoreTarget::Denoising,
                LOG_EVAL_DRAWS,
                rng::key(&[cfg.seed, tag::EVAL, epoch as u64, k as u64]),
            )?;
            out.log.push(LogRow { epoch, level: k, loss, eps });
        }
        out.timing.push((epoch, start.elapsed().as_secs_f64()));
        bundle.epoch += 1;
    }
    bundle.optimizer = Some(opt);
    Ok(out)
}

#[cfg(test)]
mod tests;
