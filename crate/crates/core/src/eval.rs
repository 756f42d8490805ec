//! Evaluation metrics.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvKind, EnvSpec, ISING_NEIGHBOURS};
use crate::error::{Error, Result};
use crate::model::{Mat, ScoreSource};
use crate::plan::Execution;
use crate::rng::{self, tag};
use crate::schedule::DiffusionSchedule;
use crate::stats;

/// `100 (J - J_rand) / (J_expert - J_rand)`.
pub fn normalized_return(j: f64, j_rand: f64, j_expert: f64) -> Result<f64> {
    let den = j_expert - j_rand;
    if !(den.abs() > 1e-12) {
        return Err(Error::InvalidArgument("expert and random returns coincide".into()));
    }
    Ok(100.0 * (j - j_rand) / den)
}

/// Symmetric Ising stage-game policy: every agent plays up with `p_up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliPolicy {
    pub p_up: f64,
}

fn ising_coupling(spec: &EnvSpec) -> Result<(usize, f64)> {
    match spec.kind {
        EnvKind::Ising { side, coupling } => Ok((side, coupling)),
        _ => Err(Error::UnsupportedEnv { op: "ising exploitability", env: spec.name.clone() }),
    }
}

/// Exact exploitability by enumerating the `2^4` neighbour configurations;
/// the deviator best-responds to each configuration.
pub fn exploitability_exact_ising(spec: &EnvSpec, policy: BernoulliPolicy) -> Result<f64> {
    let (side, lambda) = ising_coupling(spec)?;
    if side < 3 {
        return Err(Error::InvalidEnv("exact enumeration needs four distinct neighbours (side >= 3)".into()));
    }
    let p = policy.p_up;
    let mut total = 0.0;
    for mask in 0u32..(1 << ISING_NEIGHBOURS) {
        let ups = mask.count_ones() as i32;
        let sum = 2 * ups - ISING_NEIGHBOURS as i32;
        let w = p.powi(ups) * (1.0 - p).powi(ISING_NEIGHBOURS as i32 - ups);
        let r_up = 0.5 * lambda * sum as f64;
        let r_down = -r_up;
        total += w * (r_up.max(r_down) - (p * r_up + (1.0 - p) * r_down));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestResponse {
    Greedy,
    Reinforce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploitEstimate {
    pub method: BestResponse,
    /// Mean deviation gain; may be negative.
    pub raw: f64,
    pub std: f64,
}

impl ExploitEstimate {
    pub fn reported(&self) -> f64 {
        self.raw.max(0.0)
    }
}

/// One stage-game round: conforming spins for everyone, and the deviator's
/// neighbour sum.
fn ising_round(side: usize, p: f64, r: &mut impl Rng) -> (Vec<i8>, i32) {
    let spins: Vec<i8> = (0..side * side).map(|_| if r.random::<f64>() < p { 1 } else { -1 }).collect();
    let s = env::ising_neighbours(side, 0).iter().map(|&k| spins[k] as i32).sum();
    (spins, s)
}

fn deviator_reward(side: usize, lambda: f64, spins: &mut [i8], a: i8) -> f64 {
    spins[0] = a;
    env::ising_rewards(side, lambda, spins)[0]
}

fn bucket(s: i32) -> usize {
    ((s + ISING_NEIGHBOURS as i32) / 2) as usize
}

/// Best response learned from `budget` rounds, then evaluated on `budget`
/// fresh paired rounds.
pub fn exploitability_learned(
    spec: &EnvSpec,
    policy: BernoulliPolicy,
    method: BestResponse,
    budget: usize,
    seed: u64,
) -> Result<ExploitEstimate> {
    let (side, lambda) = ising_coupling(spec)?;
    if budget == 0 {
        return Err(Error::InvalidArgument("best-response budget must be positive".into()));
    }
    let p = policy.p_up;
    let mut r = rng::stream(&[seed, tag::EVAL, method as u64]);
    let buckets = ISING_NEIGHBOURS + 1;
    let br: Vec<f64> = match method {
        BestResponse::Greedy => {
            let mut q = vec![[0.0f64; 2]; buckets];
            let mut c = vec![[0usize; 2]; buckets];
            for _ in 0..budget {
                let (mut spins, s) = ising_round(side, p, &mut r);
                let a = r.random_range(0..2usize);
                let rew = deviator_reward(side, lambda, &mut spins, if a == 1 { 1 } else { -1 });
                let b = bucket(s);
                c[b][a] += 1;
                q[b][a] += (rew - q[b][a]) / c[b][a] as f64;
            }
            q.iter().map(|qa| if qa[1] > qa[0] { 1.0 } else { 0.0 }).collect()
        }
        BestResponse::Reinforce => {
            let (mut th0, mut th1) = (0.0f64, 0.0f64);
            let batch = 64usize;
            let lr = 0.5;
            let mut history: Vec<f64> = Vec::new();
            let mut used = 0;
            while used < budget {
                let (mut g0, mut g1, mut mean_r) = (0.0, 0.0, 0.0);
                let mut samples = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let (mut spins, s) = ising_round(side, p, &mut r);
                    let m = s as f64 / ISING_NEIGHBOURS as f64;
                    let pu = crate::model::tensor::sigmoid(th0 + th1 * m);
                    let up = r.random::<f64>() < pu;
                    let rew = deviator_reward(side, lambda, &mut spins, if up { 1 } else { -1 });
                    mean_r += rew;
                    samples.push((m, pu, up, rew));
                }
                mean_r /= batch as f64;
                for (m, pu, up, rew) in samples {
                    let d = if up { 1.0 - pu } else { -pu };
                    g0 += d * (rew - mean_r);
                    g1 += d * m * (rew - mean_r);
                }
                th0 += lr * g0 / batch as f64;
                th1 += lr * g1 / batch as f64;
                used += batch;
                history.push(mean_r);
                let k = history.len();
                if k > 100 {
                    let recent = stats::mean(&history[k - 50..]);
                    let before = stats::mean(&history[k - 100..k - 50]);
                    if (recent - before).abs() <= 0.01 * before.abs().max(1e-12) {
                        break;
                    }
                }
            }
            (0..buckets)
                .map(|b| {
                    let m = (2.0 * b as f64 - ISING_NEIGHBOURS as f64) / ISING_NEIGHBOURS as f64;
                    crate::model::tensor::sigmoid(th0 + th1 * m)
                })
                .collect()
        }
    };
    let mut diffs = Vec::with_capacity(budget);
    for _ in 0..budget {
        let (mut spins, s) = ising_round(side, p, &mut r);
        let u: f64 = r.random();
        let dev = if u < br[bucket(s)] { 1 } else { -1 };
        let conf = if u < p { 1 } else { -1 };
        let a = deviator_reward(side, lambda, &mut spins, dev);
        let b = deviator_reward(side, lambda, &mut spins, conf);
        diffs.push(a - b);
    }
    Ok(ExploitEstimate {
        method,
        raw: stats::mean(&diffs),
        std: stats::std_dev(&diffs) / (budget as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum W2Method {
    ExactAssignment,
    Sliced { projections: usize, seed: u64 },
    Sinkhorn { iters: usize, epsilon_scale: f64 },
}

impl W2Method {
    pub fn sliced() -> Self {
        W2Method::Sliced { projections: 128, seed: 0 }
    }

    pub fn sinkhorn() -> Self {
        W2Method::Sinkhorn { iters: 10, epsilon_scale: 0.05 }
    }
}

pub const EXACT_CAP: usize = 512;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cost_matrix(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            c.data[i * b.rows + j] = sq_dist(a.row(i), b.row(j));
        }
    }
    c
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assignment[row] = col`.
pub fn assignment(cost: &Mat) -> Result<Vec<usize>> {
    let n = cost.rows;
    if cost.cols != n {
        return Err(Error::Shape("assignment needs a square cost matrix".into()));
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.data[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

fn sorted_w2(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Squared 2-Wasserstein distance between two empirical measures with
/// uniform weights.
pub fn w2_squared(a: &Mat, b: &Mat, method: W2Method) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!("samples have dimensions {} and {}", a.cols, b.cols)));
    }
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::Missing("samples to compare".into()));
    }
    match method {
        W2Method::ExactAssignment => {
            if a.rows != b.rows {
                return Err(Error::InvalidArgument("exact assignment needs equal sample sizes".into()));
            }
            if a.rows > EXACT_CAP {
                return Err(Error::InvalidArgument(format!("exact assignment is capped at {EXACT_CAP} points")));
            }
            let c = cost_matrix(a, b);
            let perm = assignment(&c)?;
            Ok(perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / a.rows as f64)
        }
        W2Method::Sliced { projections, seed } => {
            if a.rows != b.rows {
                return Err(Error::InvalidArgument("sliced matching needs equal sample sizes".into()));
            }
            let mut r = rng::stream(&[seed, tag::EVAL]);
            let d = a.cols;
            let mut total = 0.0;
            for _ in 0..projections {
                let mut dir: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|v| *v /= norm);
                let proj = |m: &Mat| -> Vec<f64> {
                    (0..m.rows).map(|i| m.row(i).iter().zip(&dir).map(|(x, w)| x * w).sum()).collect()
                };
                total += sorted_w2(proj(a), proj(b));
            }
            Ok(total / projections as f64)
        }
        W2Method::Sinkhorn { iters, epsilon_scale } => {
            let c = cost_matrix(a, b);
            let mean_c = c.data.iter().sum::<f64>() / c.data.len() as f64;
            let eps = (epsilon_scale * mean_c).max(1e-12);
            let (n, m) = (a.rows, b.rows);
            let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
            let mut f = vec![0.0; n];
            let mut g = vec![0.0; m];
            for _ in 0..iters.max(1) {
                for i in 0..n {
                    f[i] = eps * la - eps * log_sum_exp((0..m).map(|j| (g[j] - c.data[i * m + j]) / eps));
                }
                for j in 0..m {
                    g[j] = eps * lb - eps * log_sum_exp((0..n).map(|i| (f[i] - c.data[i * m + j]) / eps));
                }
            }
            let mut cost = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let cij = c.data[i * m + j];
                    cost += ((f[i] + g[j] - cij) / eps).exp() * cij;
                }
            }
            Ok(cost)
        }
    }
}

/// Least-squares `log y = a + b log x`; returns `(a, b)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("a log-log fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fits need positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    Ok(stats::linear_fit(&lx, &ly))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PocPoint {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PocCurve {
    pub points: Vec<PocPoint>,
    pub intercept: f64,
    pub slope: f64,
    /// Slopes fitted seed by seed, and a normal-approximation 95% interval.
    pub seed_slopes: Vec<f64>,
    pub slope_ci: (f64, f64),
    /// Every distance was exactly zero: the marginals already coincide.
    pub degenerate: bool,
}

/// Propagation-of-chaos curve. `sample(n, seed)` must return `n` particles
/// whose initial draws and noise are keyed by particle index, so the first
/// `m` particles of the `n`-run and the `n_ref`-run are synchronously
/// coupled; the distance between them measures how far the `m`-marginal is
/// from the large-population limit.
pub fn poc_curve(
    sample: &(dyn Fn(usize, u64) -> Result<Mat> + Sync),
    ns: &[usize],
    n_ref: usize,
    m: usize,
    seeds: &[u64],
) -> Result<PocCurve> {
    if seeds.len() < 3 {
        return Err(Error::InvalidArgument("the curve needs at least three seeds".into()));
    }
    let max_n = *ns.iter().max().ok_or_else(|| Error::Missing("population sizes".into()))?;
    let min_n = *ns.iter().min().expect("nonempty");
    if m == 0 || m > min_n {
        return Err(Error::InvalidArgument(format!("marginal size {m} must lie in 1..={min_n}")));
    }
    if n_ref < 4 * max_n {
        return Err(Error::InvalidArgument("the reference population must be at least 4x the largest N".into()));
    }
    let idx: Vec<usize> = (0..m).collect();
    let mut per_n: Vec<Vec<f64>> = vec![Vec::with_capacity(seeds.len()); ns.len()];
    for &s in seeds {
        let reference = crate::model::gather_rows(&sample(n_ref, s)?, &idx);
        for (k, &n) in ns.iter().enumerate() {
            let x = crate::model::gather_rows(&sample(n, s)?, &idx);
            per_n[k].push(w2_squared(&x, &reference, W2Method::ExactAssignment)?);
        }
    }
    let points: Vec<PocPoint> = ns
        .iter()
        .zip(&per_n)
        .map(|(&n, v)| PocPoint { n, mean: stats::mean(v), std: stats::std_dev(v), per_seed: v.clone() })
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    if points.iter().all(|p| p.mean == 0.0) {
        return Ok(PocCurve {
            points,
            intercept: f64::NEG_INFINITY,
            slope: 0.0,
            seed_slopes: vec![0.0; seeds.len()],
            slope_ci: (0.0, 0.0),
            degenerate: true,
        });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let (intercept, slope) = fit_loglog(&xs, &means)?;
    let seed_slopes: Vec<f64> = (0..seeds.len())
        .filter_map(|s| {
            let ys: Vec<f64> = per_n.iter().map(|v| v[s]).collect();
            fit_loglog(&xs, &ys).ok().map(|f| f.1)
        })
        .collect();
    let half = 1.96 * stats::std_dev(&seed_slopes) / (seed_slopes.len().max(1) as f64).sqrt();
    let mid = stats::mean(&seed_slopes);
    Ok(PocCurve { points, intercept, slope, seed_slopes, slope_ci: (mid - half, mid + half), degenerate: false })
}

/// Largest singular value of the Jacobian of `map` at `x`. Columns of the
/// Jacobian are central-difference JVPs; the norm comes from power iteration
/// on `J^T J`. The flag reports convergence within 100 iterations.
pub fn spectral_norm_fd(map: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<(f64, bool)> {
    let n = x.len();
    let base = map(x)?;
    let m = base.len();
    let mut jac = Mat::zeros(m, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = map(&xp)?;
        xp[k] = orig - h;
        let fm = map(&xp)?;
        xp[k] = orig;
        for i in 0..m {
            jac.data[i * n + k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut v: Vec<f64> = (0..n).map(|k| 1.0 + 0.1 * ((k as f64) * 0.618).sin()).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let mut lambda = 0.0;
    for _ in 0..100 {
        let jv: Vec<f64> = (0..m).map(|i| jac.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut w = vec![0.0; n];
        for i in 0..m {
            for (wk, a) in w.iter_mut().zip(jac.row(i)) {
                *wk += a * jv[i];
            }
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok((0.0, true));
        }
        let next = nw;
        v = w.iter().map(|a| a / nw).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            return Ok((next.sqrt(), true));
        }
        lambda = next;
    }
    Ok((lambda.sqrt(), false))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub l_eff: f64,
    pub l_eff_h: f64,
    /// `(t, sup over probes)` on the time grid.
    pub per_time: Vec<(f64, f64)>,
    pub converged: bool,
}

/// Which deterministic reverse-step map is linearised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMap {
    /// `x - [f x - g^2 s(x)] dt`, the map the sampler applies.
    Full,
    /// `x + g^2 s(x) dt`, the score contribution alone.
    ScoreOnly,
}

pub fn reverse_step_map(
    score: &dyn ScoreSource,
    sched: &DiffusionSchedule,
    map: StepMap,
    t: f64,
    dt: f64,
    rows: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    let cols = x.len() / rows.max(1);
    let m = Mat::from_vec(rows, cols, x.to_vec())?;
    let s = score.score(t, &m)?;
    let f = match map {
        StepMap::Full => sched.drift_coef(t),
        StepMap::ScoreOnly => 0.0,
    };
    let g2 = sched.diffusion(t).powi(2);
    Ok(x.iter().zip(&s.data).map(|(v, sc)| v - (f * v - g2 * sc) * dt).collect())
}

pub fn effective_lipschitz(
    score: &dyn ScoreSource,
    sched: &DiffusionSchedule,
    map: StepMap,
    probes: &[Mat],
    times: &[f64],
    dt: f64,
    horizon: usize,
) -> Result<LipschitzReport> {
    if probes.is_empty() || times.is_empty() {
        return Err(Error::Missing("probe trajectories".into()));
    }
    let mut per_time = Vec::with_capacity(times.len());
    let mut converged = true;
    for &t in times {
        let mut best: f64 = 0.0;
        for p in probes {
            let rows = p.rows;
            let f = |x: &[f64]| reverse_step_map(score, sched, map, t, dt, rows, x);
            let (l, ok) = spectral_norm_fd(&f, &p.data, 1e-5)?;
            converged &= ok;
            best = best.max(l);
        }
        per_time.push((t, best));
    }
    let l_eff = per_time.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(LipschitzReport { l_eff, l_eff_h: l_eff * horizon as f64, per_time, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonFit {
    /// Pooled fit over every seed's window points.
    pub a: f64,
    pub b: f64,
    pub per_seed: Vec<(f64, f64)>,
    pub ci: (f64, f64),
}

pub const BOOTSTRAP_REPLICATES: usize = 10_000;

fn pooled(seeds: &[&[(f64, f64)]]) -> Result<(f64, f64)> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = seeds.iter().flat_map(|s| s.iter().copied()).unzip();
    fit_loglog(&xs, &ys)
}

/// Fits `log gap = a + b log H` on the window, per seed and pooled, with a
/// bootstrap interval over seeds.
pub fn horizon_fit(points: &[Vec<(f64, f64)>], window: &[f64], replicates: usize, seed: u64) -> Result<HorizonFit> {
    if points.is_empty() {
        return Err(Error::Missing("horizon points".into()));
    }
    if points.iter().flatten().any(|p| !(p.1 > 0.0)) {
        return Err(Error::InvalidArgument("gaps must be positive".into()));
    }
    let in_window: Vec<Vec<(f64, f64)>> =
        points.iter().map(|s| s.iter().copied().filter(|p| window.contains(&p.0)).collect()).collect();
    if in_window.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidArgument("every seed needs two window points".into()));
    }
    let per_seed: Vec<(f64, f64)> = in_window
        .iter()
        .map(|s| {
            let (x, y): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
            fit_loglog(&x, &y)
        })
        .collect::<Result<_>>()?;
    let all: Vec<&[(f64, f64)]> = in_window.iter().map(|s| s.as_slice()).collect();
    let (a, b) = pooled(&all)?;
    let mut r = rng::stream(&[seed, tag::BOOTSTRAP]);
    let mut bs = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let pick: Vec<&[(f64, f64)]> = (0..all.len()).map(|_| *all.choose(&mut r).expect("nonempty")).collect();
        if let Ok((_, bb)) = pooled(&pick) {
            bs.push(bb);
        }
    }
    bs.sort_by(f64::total_cmp);
    let ci = if bs.is_empty() { (b, b) } else { (stats::quantile(&bs, 0.025), stats::quantile(&bs, 0.975)) };
    Ok(HorizonFit { a, b, per_seed, ci })
}

/// One `(env, H, seed, gap)` row of a horizon-scaling CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub env: String,
    pub h: f64,
    pub seed: u64,
    pub gap: f64,
}

/// Parses `env,h,seed,gap` rows; the header line is required.
pub fn parse_gap_csv(text: &str) -> Result<Vec<GapRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("env,h,seed,gap") {
        return Err(Error::Format("gap CSV must start with env,h,seed,gap".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.trim().split(',').collect();
            let bad = || Error::Format(format!("bad gap row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(GapRow {
                env: f[0].to_string(),
                h: f[1].parse().map_err(|_| bad())?,
                seed: f[2].parse().map_err(|_| bad())?,
                gap: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Groups one environment's rows into per-seed `(H, gap)` series, seeds
/// in ascending order.
pub fn gap_series(rows: &[GapRow], env: &str) -> Vec<Vec<(f64, f64)>> {
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.env == env).map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .iter()
        .map(|&s| rows.iter().filter(|r| r.env == env && r.seed == s).map(|r| (r.h, r.gap)).collect())
        .collect()
}

/// Mean per-step dynamics residual recorded during execution.
pub fn transition_error(ex: &Execution) -> Result<f64> {
    if ex.transition_errors.is_empty() {
        return Err(Error::Missing("per-step transition diagnostics".into()));
    }
    Ok(stats::mean(&ex.transition_errors))
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub env: String,
    pub n: usize,
    pub h: usize,
    pub seed: u64,
    pub split: String,
    pub value: f64,
    pub std: f64,
    pub slope: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

pub const METRIC_HEADER: &str = "name,env,n,h,seed,split,value,std,slope,ci_lo,ci_hi";

impl MetricRecord {
    pub fn new(name: &str, env: &str, value: f64) -> Self {
        MetricRecord { name: name.into(), env: env.into(), value, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::NonFinite("metric value"));
        }
        if let (Some(lo), Some(hi)) = (self.ci_lo, self.ci_hi) {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("{}: CI lower bound exceeds upper", self.name)));
            }
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(stats::fmt9).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.env,
            self.n,
            self.h,
            self.seed,
            self.split,
            stats::fmt9(self.value),
            stats::fmt9(self.std),
            opt(self.slope),
            opt(self.ci_lo),
            opt(self.ci_hi)
        )
    }
}

pub fn format_metrics(rows: &[MetricRecord]) -> Result<String> {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        r.validate()?;
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    Ok(s)
}

/// Parses a metrics CSV written by [`format_metrics`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRIC_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 11 {
                return Err(Error::Format(format!("expected 11 fields, got {}", f.len())));
            }
            Ok(MetricRecord {
                name: f[0].into(),
                env: f[1].into(),
                n: f[2].parse().map_err(|_| Error::Format("bad n".into()))?,
                h: f[3].parse().map_err(|_| Error::Format("bad h".into()))?,
                seed: f[4].parse().map_err(|_| Error::Format("bad seed".into()))?,
                split: f[5].into(),
                value: num(f[6])?,
                std: num(f[7])?,
                slope: opt(f[8])?,
                ci_lo: opt(f[9])?,
                ci_hi: opt(f[10])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
