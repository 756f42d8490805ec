//! Mean-field score network `s = A(tau^i, t) + B[nu](tau^i, t)`.
//!
//! The interaction is `B_i = 1/(N-1) sum_{j != i} K_ij (g(tau^j, t) - g(tau^i, t))`
//! with the kernel averaged over MDP steps,
//! `K_ij = 1/H sum_h exp(-|W1 s_h^i - W1 s_h^j|^2 / bw^2) * sigmoid(w2 . c_h + b2)`,
//! where `c_h` holds the population mean and second moment of `s_h`.
//! Both parts are divided by `-sigma(t)`, so the networks predict noise, and
//! the individual part is a residual around the unit-Gaussian score
//! `-x / marginal_var(t)`: `A = -x / v(t) - a_net(x, t) / sigma(t)`.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Tape, Var};
use super::param::{BoundParams, ParamVector};
use super::tensor::{self, Mat};
use super::{canonical_order, gather_rows, scatter_rows, time_embedding, Mlp, ScoreSource};
use crate::env::TrajectoryLayout;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_embed: usize,
    pub interaction_hidden: usize,
    pub kernel_rank: usize,
    /// Neighbours per particle once the population exceeds `knn_threshold`.
    pub knn: usize,
    pub knn_threshold: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            hidden: 256,
            depth: 2,
            time_embed: 32,
            interaction_hidden: 64,
            kernel_rank: 4,
            knn: 16,
            knn_threshold: 512,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.interaction_hidden == 0 || self.kernel_rank == 0 {
            return Err(Error::InvalidArgument("network widths must be >= 1".into()));
        }
        if !self.time_embed.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time embedding width must be even".into()));
        }
        if self.knn == 0 {
            return Err(Error::InvalidArgument("knn must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub layout: TrajectoryLayout,
    pub config: ScoreConfig,
    pub schedule: DiffusionSchedule,
    pub params: ParamVector,
    a_net: Mlp,
    g_net: Mlp,
}

const W1: &str = "score.k.w1";
const LOG_BW: &str = "score.k.log_bw";
const W2: &str = "score.k.w2";
const B2: &str = "score.k.b2";

fn nets(layout: &TrajectoryLayout, config: &ScoreConfig) -> (Mlp, Mlp) {
    let d = layout.dim();
    let input = d + config.time_embed;
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(config.hidden, config.depth));
    sizes.push(d);
    let a = Mlp::new("score.a", sizes);
    let g = Mlp::new("score.g", vec![input, config.interaction_hidden, d]);
    (a, g)
}

/// Per-step context `[mean(s_h), mean(s_h^2)]` of the population in `x`.
pub fn step_context(layout: &TrajectoryLayout, x: &Mat) -> Vec<Vec<f64>> {
    let n = x.rows.max(1) as f64;
    (0..layout.horizon)
        .map(|h| {
            let o = layout.state_offset(h);
            let mut ctx = vec![0.0; 2 * layout.d_s];
            for i in 0..x.rows {
                for c in 0..layout.d_s {
                    let v = x.get(i, o + c);
                    ctx[c] += v;
                    ctx[layout.d_s + c] += v * v;
                }
            }
            ctx.iter_mut().for_each(|v| *v /= n);
            ctx
        })
        .collect()
}

fn with_time(x: &Mat, emb: &[f64]) -> Mat {
    let cols = x.cols + emb.len();
    let mut out = Mat::zeros(x.rows, cols);
    for i in 0..x.rows {
        let r = out.row_mut(i);
        r[..x.cols].copy_from_slice(x.row(i));
        r[x.cols..].copy_from_slice(emb);
    }
    out
}

impl ScoreModel {
    pub fn new(
        layout: TrajectoryLayout,
        config: ScoreConfig,
        schedule: DiffusionSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let (a_net, g_net) = nets(&layout, &config);
        let mut rng = rng::stream(&[seed, tag::INIT]);
        let mut params = ParamVector::new();
        a_net.init(&mut params, &mut rng)?;
        g_net.init(&mut params, &mut rng)?;
        params.push_glorot(W1, layout.d_s, config.kernel_rank, &mut rng)?;
        params.push(LOG_BW, 1, 1, vec![0.0])?;
        params.push_glorot(W2, 2 * layout.d_s, 1, &mut rng)?;
        params.push(B2, 1, 1, vec![0.0])?;
        Ok(ScoreModel { layout, config, schedule, params, a_net, g_net })
    }

    /// Rebuilds a model around stored parameters, checking every segment.
    pub fn from_params(
        layout: TrajectoryLayout,
        config: ScoreConfig,
        schedule: DiffusionSchedule,
        params: ParamVector,
    ) -> Result<Self> {
        let fresh = ScoreModel::new(layout, config, schedule, 0)?;
        if fresh.params.segments() != params.segments() {
            return Err(Error::Format("score parameters do not match the configured architecture".into()));
        }
        params.validate()?;
        Ok(ScoreModel { params, ..fresh })
    }

    /// Deterministic fresh model, convenient in tests.
    pub fn seeded(layout: TrajectoryLayout, config: ScoreConfig, seed: u64) -> Result<Self> {
        Self::new(layout, config, DiffusionSchedule::default(), seed)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Zeroes the head of the interaction message network, so `B` vanishes.
    pub fn disable_interaction(&mut self) -> Result<()> {
        let last = self.g_net.sizes.len() - 2;
        self.params.slice_mut(&format!("score.g.w{last}"))?.fill(0.0);
        self.params.slice_mut(&format!("score.g.b{last}"))?.fill(0.0);
        Ok(())
    }

    fn check(&self, t: f64, x: &Mat) -> Result<()> {
        let (lo, hi) = (self.schedule.t_min, self.schedule.t_max);
        if !(lo - 1e-12..=hi + 1e-12).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo, hi });
        }
        if x.cols != self.dim() {
            return Err(Error::Shape(format!("particles have width {}, model expects {}", x.cols, self.dim())));
        }
        Ok(())
    }

    /// Full score field, exactly equivariant under particle permutations.
    pub fn forward(&self, t: f64, x: &Mat) -> Result<Mat> {
        self.check(t, x)?;
        let order = canonical_order(x);
        let xs = gather_rows(x, &order);
        let inp = with_time(&xs, &time_embedding(t, self.config.time_embed));
        let mut out = self.a_net.forward(&self.params, &inp)?;
        let c = -1.0 / self.schedule.noise_std(t);
        let prior = -1.0 / self.schedule.marginal_var(t);
        out.data.iter_mut().zip(&xs.data).for_each(|(v, x)| *v = *v * c + prior * x);
        if xs.rows >= 2 {
            let b = self.interaction_sorted(t, &xs, &inp)?;
            out.add_assign(&b);
        }
        Ok(scatter_rows(&out, &order))
    }

    /// Interaction term alone.
    pub fn interaction_term(&self, t: f64, x: &Mat) -> Result<Mat> {
        self.check(t, x)?;
        if x.rows < 2 {
            return Ok(Mat::zeros(x.rows, x.cols));
        }
        let order = canonical_order(x);
        let xs = gather_rows(x, &order);
        let inp = with_time(&xs, &time_embedding(t, self.config.time_embed));
        Ok(scatter_rows(&self.interaction_sorted(t, &xs, &inp)?, &order))
    }

    fn gates(&self, x: &Mat) -> Result<Vec<f64>> {
        let w2 = self.params.slice(W2)?;
        let b2 = self.params.slice(B2)?[0];
        Ok(step_context(&self.layout, x)
            .iter()
            .map(|ctx| tensor::sigmoid(ctx.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + b2))
            .collect())
    }

    fn projections(&self, x: &Mat) -> Result<Vec<Mat>> {
        let w1 = self.params.mat(W1)?;
        Ok((0..self.layout.horizon)
            .map(|h| {
                let o = self.layout.state_offset(h);
                tensor::matmul(&x.cols_range(o, o + self.layout.d_s), &w1)
            })
            .collect())
    }

    fn interaction_sorted(&self, t: f64, x: &Mat, inp: &Mat) -> Result<Mat> {
        let n = x.rows;
        let d = x.cols;
        let g = self.g_net.forward(&self.params, inp)?;
        let gates = self.gates(x)?;
        let proj = self.projections(x)?;
        let inv_bw2 = (-2.0 * self.params.slice(LOG_BW)?[0]).exp();
        let inv_h = 1.0 / self.layout.horizon as f64;
        let kernel = |i: usize, j: usize| -> f64 {
            let mut k = 0.0;
            for (p, gate) in proj.iter().zip(&gates) {
                let dist: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                k += gate * (-dist * inv_bw2).exp();
            }
            k * inv_h
        };
        let scale = -1.0 / self.schedule.noise_std(t);
        let mut out = Mat::zeros(n, d);
        if n > self.config.knn_threshold {
            let k = self.config.knn.min(n - 1);
            let s0 = x.cols_range(0, self.layout.d_s);
            for i in 0..n {
                let mut cand: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let dist: f64 =
                            s0.row(i).iter().zip(s0.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        (dist, j)
                    })
                    .collect();
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let row = out.row_mut(i);
                let mut ksum = 0.0;
                for &(_, j) in &cand[..k] {
                    let kij = kernel(i, j);
                    ksum += kij;
                    for (o, gj) in row.iter_mut().zip(g.row(j)) {
                        *o += kij * gj;
                    }
                }
                let c = scale / k as f64;
                for (o, gi) in row.iter_mut().zip(g.row(i)) {
                    *o = c * (*o - ksum * gi);
                }
            }
            return Ok(out);
        }
        let mut kmat = Mat::zeros(n, n);
        for i in 0..n {
            kmat.data[i * n + i] = kernel(i, i);
            for j in i + 1..n {
                let v = kernel(i, j);
                kmat.data[i * n + j] = v;
                kmat.data[j * n + i] = v;
            }
        }
        let kg = tensor::matmul(&kmat, &g);
        let c = scale / (n - 1) as f64;
        for i in 0..n {
            let ksum: f64 = kmat.row(i).iter().sum();
            let row = out.row_mut(i);
            for ((o, kgi), gi) in row.iter_mut().zip(kg.row(i)).zip(g.row(i)) {
                *o = c * (kgi - ksum * gi);
            }
        }
        Ok(out)
    }

    /// The same field recorded on a tape for training. `x` is a constant
    /// input; gradients flow to the bound parameters.
    pub fn forward_tape(&self, tape: &mut Tape, p: &BoundParams, t: f64, x: &Mat) -> Result<Var> {
        self.check(t, x)?;
        let n = x.rows;
        let emb = time_embedding(t, self.config.time_embed);
        let inp = tape.leaf(with_time(x, &emb));
        let a = self.a_net.forward_tape(tape, p, inp)?;
        let sigma = self.schedule.noise_std(t);
        let a = tape.scale(a, -1.0 / sigma);
        let inv_mv = -1.0 / self.schedule.marginal_var(t);
        let prior = tape.leaf(x.map(|v| v * inv_mv));
        let a = tape.add(a, prior)?;
        if n < 2 {
            return Ok(a);
        }
        let g = self.g_net.forward_tape(tape, p, inp)?;
        let xv = tape.leaf(x.clone());
        let lb = tape.scale(p.get(LOG_BW)?, -2.0);
        let inv_bw2 = tape.exp(lb);
        let neg = tape.scale(inv_bw2, -1.0);
        let mut ksum: Option<Var> = None;
        for (h, ctx) in step_context(&self.layout, x).into_iter().enumerate() {
            let o = self.layout.state_offset(h);
            let s = tape.slice_cols(xv, o, o + self.layout.d_s)?;
            let proj = tape.matmul(s, p.get(W1)?)?;
            let dist = tape.pairwise_sq_dist(proj);
            let arg = tape.mul_scalar(dist, neg)?;
            let e = tape.exp(arg);
            let c = tape.leaf(Mat { rows: 1, cols: ctx.len(), data: ctx });
            let z = tape.matmul(c, p.get(W2)?)?;
            let z = tape.add_bias(z, p.get(B2)?)?;
            let gate = tape.sigmoid(z);
            let kh = tape.mul_scalar(e, gate)?;
            ksum = Some(match ksum {
                Some(acc) => tape.add(acc, kh)?,
                None => kh,
            });
        }
        let k = tape.scale(ksum.expect("horizon >= 1"), 1.0 / self.layout.horizon as f64);
        let kg = tape.matmul(k, g)?;
        let rs = tape.row_sum(k);
        let self_term = tape.mul_col(g, rs)?;
        let diff = tape.sub(kg, self_term)?;
        let b = tape.scale(diff, -1.0 / (sigma * (n - 1) as f64));
        tape.add(a, b)
    }

    /// `n` standard-normal particles of the model width.
    pub fn random_particles(&self, n: usize, seed: u64) -> Mat {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        Mat { rows: n, cols: d, data: (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect() }
    }
}

impl ScoreSource for ScoreModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn score(&self, t: f64, x: &Mat) -> Result<Mat> {
        self.forward(t, x)
    }

    fn interaction(&self, t: f64, x: &Mat) -> Result<Mat> {
        self.interaction_term(t, x)
    }
}
