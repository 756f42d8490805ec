//! Noise schedules, coarse-to-fine subdivision schedules and the exact
//! score-network work accounting for hierarchical inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving diffusion schedule with linear `beta(t)`.
///
/// Data are assumed standardised to unit variance, so the marginal variance
/// `alpha(t)^2 + noise_std(t)^2` stays at one along the forward process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Terminal diffusion time `T`.
    pub t_max: f64,
    /// Smallest diffusion time reached by the sampler.
    pub t_min: f64,
    /// Total number of denoising steps.
    pub n_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule { beta_min: 0.1, beta_max: 20.0, t_max: 1.0, t_min: 1e-3, n_steps: 200 }
    }
}

impl DiffusionSchedule {
    pub fn vp(beta_min: f64, beta_max: f64, t_max: f64, t_min: f64, n_steps: usize) -> Result<Self> {
        let s = DiffusionSchedule { beta_min, beta_max, t_max, t_min, n_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSchedule(m.to_string()));
        if !(self.beta_min > 0.0 && self.beta_min.is_finite()) {
            return bad("beta_min must be positive");
        }
        if !(self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return bad("beta_max must be >= beta_min");
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad("T must be positive");
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return bad("t_min must lie in (0, T)");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        Ok(())
    }

    /// `beta(t) = beta_min + (beta_max - beta_min) t / T`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.t_max
    }

    /// `int_0^t beta(s) ds`.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.t_max
    }

    /// Signal scale `exp(-1/2 int_0^t beta)`.
    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.beta_integral(t)).exp()
    }

    /// Marginal noise standard deviation of the forward process.
    pub fn noise_std(&self, t: f64) -> f64 {
        (-(-self.beta_integral(t)).exp_m1()).max(0.0).sqrt()
    }

    pub fn marginal_var(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        let s = self.noise_std(t);
        a * a + s * s
    }

    /// Forward drift coefficient: `f(t, x) = drift_coef(t) * x`.
    pub fn drift_coef(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Diffusion coefficient `g(t) = sqrt(beta(t))`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.beta(t).sqrt()
    }

    /// Uniform reverse-step size.
    pub fn dt(&self) -> f64 {
        (self.t_max - self.t_min) / self.n_steps as f64
    }

    /// Diffusion time after `i` reverse steps from `T`; the last step lands on
    /// `t_min` exactly.
    pub fn time_at_step(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_min
        } else {
            self.t_max - i as f64 * self.dt()
        }
    }
}

/// How the per-level losses are combined during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LevelWeighting {
    /// `b^{-k}`.
    #[default]
    PracticalBPow,
    /// `(b * sqrt(N_{k+1}))^{-k}`, with `N_{K+1} := N_K`.
    Theoretical,
    /// All ones; used to compare the two paths.
    Uniform,
}

/// Coarse-to-fine population schedule.
///
/// Level `k` runs from diffusion time `t_cuts[k]` down to `t_cuts[k + 1]` with
/// `n_levels[k]` particles; `t_cuts` has `K + 2` entries from `T` to `t_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdivisionSchedule {
    pub k_levels: usize,
    pub branching: usize,
    pub n_levels: Vec<usize>,
    pub t_cuts: Vec<f64>,
    pub steps_per_level: usize,
    /// Cost of one branching event, in score-network units per parent agent.
    pub c_psi: f64,
}

impl SubdivisionSchedule {
    pub fn new(
        n: usize,
        branching: usize,
        k_levels: usize,
        diffusion: &DiffusionSchedule,
        c_psi: f64,
    ) -> Result<Self> {
        diffusion.validate()?;
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if branching == 0 {
            return bad("branching ratio must be >= 1".into());
        }
        if !(c_psi >= 0.0 && c_psi.is_finite()) {
            return bad("c_psi must be finite and nonnegative".into());
        }
        let n_steps = diffusion.n_steps;
        if !n_steps.is_multiple_of(k_levels + 1) {
            return bad(format!("{} levels do not divide {} steps", k_levels + 1, n_steps));
        }
        let factor = checked_pow(branching, k_levels)
            .ok_or_else(|| Error::InvalidSchedule("b^K overflows".into()))?;
        if n == 0 || !n.is_multiple_of(factor) {
            return bad(format!("N = {n} is not divisible by b^K = {factor}"));
        }
        let n0 = n / factor;
        let mut n_levels = Vec::with_capacity(k_levels + 1);
        let mut cur = n0;
        for _ in 0..=k_levels {
            n_levels.push(cur);
            cur = cur.saturating_mul(branching);
        }
        let width = (diffusion.t_max - diffusion.t_min) / (k_levels + 1) as f64;
        let mut t_cuts: Vec<f64> =
            (0..=k_levels + 1).map(|i| diffusion.t_max - i as f64 * width).collect();
        t_cuts[k_levels + 1] = diffusion.t_min;
        Ok(SubdivisionSchedule {
            k_levels,
            branching,
            n_levels,
            t_cuts,
            steps_per_level: n_steps / (k_levels + 1),
            c_psi,
        })
    }

    pub fn n_target(&self) -> usize {
        *self.n_levels.last().expect("at least one level")
    }

    pub fn n_steps(&self) -> usize {
        self.steps_per_level * (self.k_levels + 1)
    }

    /// Diffusion-time window `(lo, hi)` of level `k`.
    pub fn window(&self, k: usize) -> (f64, f64) {
        (self.t_cuts[k + 1], self.t_cuts[k])
    }

    pub fn level_weights(&self, weighting: LevelWeighting) -> Vec<f64> {
        let b = self.branching as f64;
        (0..=self.k_levels)
            .map(|k| match weighting {
                LevelWeighting::PracticalBPow => b.powi(-(k as i32)),
                LevelWeighting::Theoretical => {
                    let next = self.n_levels[(k + 1).min(self.k_levels)] as f64;
                    (b * next.sqrt()).powi(-(k as i32))
                }
                LevelWeighting::Uniform => 1.0,
            })
            .collect()
    }

    fn check_population(&self, n: usize) -> Result<()> {
        if n != self.n_target() {
            return Err(Error::InvalidSchedule(format!(
                "schedule targets N = {}, got {n}",
                self.n_target()
            )));
        }
        Ok(())
    }

    /// Score-net units spent by the full hierarchical sampler:
    /// `S * sum_k N_k + c_psi * sum_{k<K} N_k`.
    pub fn work_full(&self, n: usize) -> Result<f64> {
        self.check_population(n)?;
        let denoise: u64 = self.n_levels.iter().map(|&nk| nk as u64).sum::<u64>()
            * self.steps_per_level as u64;
        let branched: u64 = self.n_levels[..self.k_levels].iter().map(|&nk| nk as u64).sum();
        Ok(work_units(denoise, branched, self.c_psi))
    }

    pub fn work_ablation(&self, n: usize, mode: Ablation) -> Result<f64> {
        self.check_population(n)?;
        let s = self.steps_per_level as u128;
        let units: u128 = match mode {
            Ablation::NoSubdivision => self.n_steps() as u128 * n as u128,
            Ablation::NoBranching => {
                let denoise: u128 = self.n_levels.iter().map(|&nk| nk as u128).sum::<u128>() * s;
                let fresh: u128 = self.n_levels[..self.k_levels]
                    .iter()
                    .enumerate()
                    .map(|(k, &nk)| nk as u128 * (k as u128 + 1))
                    .sum();
                denoise + s * (self.branching as u128 - 1) * fresh
            }
        };
        Ok(units as f64)
    }
}

/// Hierarchy ablations whose work the coupling identity equates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSubdivision,
    NoBranching,
}

/// Shared by the schedule algebra and the sampler's runtime counter so the
/// two agree bit-for-bit.
pub fn work_units(denoise_units: u64, branched_agents: u64, c_psi: f64) -> f64 {
    denoise_units as f64 + c_psi * branched_agents as f64
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base)?;
    }
    Some(acc)
}
