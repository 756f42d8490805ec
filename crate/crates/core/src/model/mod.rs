//! Networks and score sources.
//!
//! The score network is `s(t, tau^N) = A(tau^i, t) + B[nu](tau^i)`: a
//! per-agent MLP plus a mean-field interaction whose kernel factorises over
//! MDP steps. Everything is differentiated with the small tape in
//! [`autodiff`]; inference uses direct matrix code.

pub mod autodiff;
pub mod checkpoint;
pub mod gradcheck;
pub mod param;
pub mod score;
pub mod tensor;
pub mod value;

use rand::Rng;

pub use crate::env::TrajectoryLayout;
pub use autodiff::{Grads, Tape, Var};
pub use checkpoint::{Checkpoint, ModelBundle};
pub use param::{Adam, BoundParams, ParamVector, Segment};
pub use score::{ScoreConfig, ScoreModel};
pub use tensor::Mat;
pub use value::{ValueConfig, ValueModel};


use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;

/// Anything that can produce a score field for a particle population.
pub trait ScoreSource: Sync {
    /// Trajectory dimension the source expects.
    fn dim(&self) -> usize;

    /// Score of every particle (rows of `x`) at diffusion time `t`.
    fn score(&self, t: f64, x: &Mat) -> Result<Mat>;

    /// The mean-field interaction part `B[nu]` alone, used by branching.
    fn interaction(&self, t: f64, x: &Mat) -> Result<Mat> {
        let _ = t;
        Ok(Mat::zeros(x.rows, x.cols))
    }
}

/// Sinusoidal embedding of diffusion time.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out.push((1000.0 * t * w).sin());
    }
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out.push((1000.0 * t * w).cos());
    }
    out.resize(width, 0.0);
    out
}

/// Fully connected network with SiLU between layers and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: Vec<usize>) -> Self {
        Mlp { prefix: prefix.to_string(), sizes }
    }

    fn w(&self, l: usize) -> String {
        format!("{}.w{l}", self.prefix)
    }

    fn b(&self, l: usize) -> String {
        format!("{}.b{l}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamVector, rng: &mut impl Rng) -> Result<()> {
        for l in 0..self.sizes.len() - 1 {
            params.push_glorot(&self.w(l), self.sizes[l], self.sizes[l + 1], rng)?;
            params.push(&self.b(l), 1, self.sizes[l + 1], vec![0.0; self.sizes[l + 1]])?;
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, x: &Mat) -> Result<Mat> {
        let layers = self.sizes.len() - 1;
        let mut h = x.clone();
        for l in 0..layers {
            let w = params.mat(&self.w(l))?;
            if h.cols != w.rows {
                return Err(Error::Shape(format!("{}: input width {} vs {}", self.prefix, h.cols, w.rows)));
            }
            let mut z = tensor::matmul(&h, &w);
            z.add_row(params.slice(&self.b(l))?);
            if l + 1 < layers {
                z.data.iter_mut().for_each(|v| *v = tensor::silu(*v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, p.get(&self.w(l))?)?;
            let z = tape.add_bias(z, p.get(&self.b(l))?)?;
            h = if l + 1 < layers { tape.silu(z) } else { z };
        }
        Ok(h)
    }
}

/// Per-coordinate affine normalisation of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Smallest per-coordinate scale; constant coordinates keep a usable unit.
    pub const MIN_STD: f64 = 1e-2;

    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(rows: &Mat) -> Result<Self> {
        if rows.rows == 0 {
            return Err(Error::Missing("rows to fit a normaliser".into()));
        }
        let n = rows.rows as f64;
        let mut mean = vec![0.0; rows.cols];
        for i in 0..rows.rows {
            for (m, x) in mean.iter_mut().zip(rows.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; rows.cols];
        for i in 0..rows.rows {
            for ((v, x), m) in var.iter_mut().zip(rows.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(Self::MIN_STD)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, x: &mut Mat) {
        for i in 0..x.rows {
            for ((v, m), s) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn denormalize(&self, x: &mut Mat) {
        for i in 0..x.rows {
            for ((v, m), s) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }

    /// Maps a gradient taken in raw units to normalised coordinates.
    pub fn grad_to_normalized(&self, g: &mut Mat) {
        for i in 0..g.rows {
            for (v, s) in g.row_mut(i).iter_mut().zip(&self.std) {
                *v *= s;
            }
        }
    }
}

/// Closed-form score of unit-isotropic Gaussian data under the VP forward
/// process: `-x / marginal_var(t)`.
pub fn analytic_score(sched: &DiffusionSchedule, t: f64, x: &[f64]) -> Vec<f64> {
    let mv = sched.marginal_var(t);
    x.iter().map(|v| -v / mv).collect()
}

#[derive(Debug, Clone)]
pub struct AnalyticGaussianScore {
    pub schedule: DiffusionSchedule,
    pub dim: usize,
}

impl ScoreSource for AnalyticGaussianScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, t: f64, x: &Mat) -> Result<Mat> {
        let mv = self.schedule.marginal_var(t);
        Ok(x.map(|v| -v / mv))
    }
}

/// Gaussian score plus a linear mean-field pull towards the other particles:
/// `s_i = -x_i / marginal_var(t) + c (mean_{j != i} x_j - x_i)`.
///
/// A minimal exchangeable interacting system for propagation-of-chaos
/// measurements; `coupling = 0` gives independent particles.
#[derive(Debug, Clone)]
pub struct InteractingGaussianScore {
    pub schedule: DiffusionSchedule,
    pub dim: usize,
    pub coupling: f64,
}

impl ScoreSource for InteractingGaussianScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, t: f64, x: &Mat) -> Result<Mat> {
        let mut s = self.interaction(t, x)?;
        let mv = self.schedule.marginal_var(t);
        for (o, v) in s.data.iter_mut().zip(&x.data) {
            *o -= v / mv;
        }
        Ok(s)
    }

    fn interaction(&self, _t: f64, x: &Mat) -> Result<Mat> {
        let n = x.rows;
        let mut out = Mat::zeros(n, x.cols);
        if n < 2 || self.coupling == 0.0 {
            return Ok(out);
        }
        for c in 0..x.cols {
            let total = crate::stats::sorted_sum((0..n).map(|i| x.get(i, c)));
            for i in 0..n {
                let xi = x.get(i, c);
                let others = (total - xi) / (n - 1) as f64;
                out.data[i * x.cols + c] = self.coupling * (others - xi);
            }
        }
        Ok(out)
    }
}

/// The score that is zero everywhere.
#[derive(Debug, Clone)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreSource for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, _t: f64, x: &Mat) -> Result<Mat> {
        Ok(Mat::zeros(x.rows, x.cols))
    }
}

/// Permutation sorting rows lexicographically (stable), so computations on
/// the sorted rows do not depend on the order agents were supplied in.
pub fn canonical_order(x: &Mat) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows).collect();
    idx.sort_by(|&a, &b| {
        for (p, q) in x.row(a).iter().zip(x.row(b)) {
            match p.total_cmp(q) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

pub fn gather_rows(x: &Mat, order: &[usize]) -> Mat {
    let mut out = Mat::zeros(order.len(), x.cols);
    for (k, &i) in order.iter().enumerate() {
        out.row_mut(k).copy_from_slice(x.row(i));
    }
    out
}

pub fn scatter_rows(x: &Mat, order: &[usize]) -> Mat {
    let mut out = Mat::zeros(order.len(), x.cols);
    for (k, &i) in order.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_density(sched: &DiffusionSchedule, t: f64, x: &[f64]) -> f64 {
        let mv = sched.marginal_var(t);
        x.iter().map(|v| -0.5 * v * v / mv - 0.5 * (2.0 * std::f64::consts::PI * mv).ln()).sum()
    }

    #[test]
    fn analytic_score_cases() {
        let s = DiffusionSchedule::default();
        assert_eq!(analytic_score(&s, 0.5, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(analytic_score(&s, 0.0, &[1.5, -2.0]), vec![-1.5, 2.0]);
    }

    proptest! {
        #[test]
        fn analytic_score_matches_log_density_gradient(
            t in 0.001f64..1.0,
            x in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let s = DiffusionSchedule::default();
            let an = analytic_score(&s, t, &x);
            let h = 1e-5;
            for k in 0..x.len() {
                let mut p = x.clone();
                let mut m = x.clone();
                p[k] += h;
                m[k] -= h;
                let fd = (log_density(&s, t, &p) - log_density(&s, t, &m)) / (2.0 * h);
                prop_assert!((fd - an[k]).abs() < 1e-8, "{} vs {}", fd, an[k]);
            }
        }
    }

    #[test]
    fn canonical_order_round_trip() {
        let x = Mat::from_vec(3, 2, vec![2.0, 0.0, 1.0, 5.0, 1.0, -1.0]).unwrap();
        let o = canonical_order(&x);
        assert_eq!(o, vec![2, 1, 0]);
        assert_eq!(scatter_rows(&gather_rows(&x, &o), &o), x);
    }

    #[test]
    fn normalizer_round_trip() {
        let x = Mat::from_vec(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let n = Normalizer::fit(&x).unwrap();
        assert_eq!(n.std[1], Normalizer::MIN_STD);
        let mut y = x.clone();
        n.normalize(&mut y);
        assert!(y.data.iter().skip(1).step_by(2).all(|&v| v == 0.0));
        n.denormalize(&mut y);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interacting_score_without_coupling_is_gaussian() {
        let sched = DiffusionSchedule::default();
        let x = Mat::from_vec(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let a = AnalyticGaussianScore { schedule: sched, dim: 1 };
        let b = InteractingGaussianScore { schedule: sched, dim: 1, coupling: 0.0 };
        assert_eq!(a.score(0.3, &x).unwrap(), b.score(0.3, &x).unwrap());
    }
}
