//! `eval` and `fit`: metric suites written as one metrics CSV.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mfdiff_core::env::TrajectoryLayout;
use mfdiff_core::eval::{
    effective_lipschitz, exploitability_exact_ising, exploitability_learned, format_metrics, gap_series,
    horizon_fit, parse_gap_csv, poc_curve, BernoulliPolicy, BestResponse, MetricRecord, StepMap,
};
use mfdiff_core::model::value::value_rank_correlation;
use mfdiff_core::model::{AnalyticGaussianScore, InteractingGaussianScore, Mat, Normalizer, ScoreSource};
use mfdiff_core::plan::{ActionProjection, PlanConfig, Planner};
use mfdiff_core::schedule::{DiffusionSchedule, SubdivisionSchedule};
use mfdiff_core::stats;

use crate::config::{Metric, RunConfig};
use crate::plan::{load_bundle, run_episodes};
use crate::train::value_data;

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Run only the analytic-oracle sampler suite; no data or model needed.
    pub oracle: bool,
    /// Gap CSV for a horizon-exponent fit.
    pub fit_horizon: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub samples: usize,
    pub dim: usize,
    pub max_abs_mean: f64,
    pub var_min: f64,
    pub var_max: f64,
    pub ks_max: f64,
    pub ks_critical: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_mean <= 0.04 && self.var_min >= 0.9 && self.var_max <= 1.1 && self.ks_max < self.ks_critical
    }
}

fn flat(n: usize, sched: &DiffusionSchedule) -> mfdiff_core::Result<SubdivisionSchedule> {
    SubdivisionSchedule::new(n, 1, 0, sched, 0.0)
}

/// Unconditional samples of `score` with a flat schedule; particle noise is
/// keyed by index so prefixes of different-size runs are coupled.
pub fn sample_flat(
    score: &dyn ScoreSource,
    sched: &DiffusionSchedule,
    n: usize,
    seed: u64,
) -> mfdiff_core::Result<Mat> {
    let dim = score.dim();
    let planner = Planner {
        score,
        schedule: *sched,
        normalizer: Normalizer::identity(dim),
        layout: TrajectoryLayout { d_s: 1, d_a: 0, horizon: dim - 1 },
        value: None,
    };
    let cfg = PlanConfig::new(flat(n, sched)?, ActionProjection::Identity);
    Ok(planner.plan(&cfg, None, seed)?.trajectories)
}

/// Reverse SDE driven by the exact Gaussian score must return unit-Gaussian samples.
pub fn sampler_oracle(sched: &DiffusionSchedule, dim: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    if dim == 0 || samples < 2 {
        bail!("oracle suite needs dim >= 1 and at least two samples");
    }
    let x = sample_flat(&AnalyticGaussianScore { schedule: *sched, dim }, sched, samples, seed)?;
    let mut rep = OracleReport {
        samples,
        dim,
        max_abs_mean: 0.0,
        var_min: f64::INFINITY,
        var_max: 0.0,
        ks_max: 0.0,
        ks_critical: stats::ks_critical(samples, 0.01),
    };
    for c in 0..dim {
        let col: Vec<f64> = (0..samples).map(|i| x.get(i, c)).collect();
        let v = stats::variance(&col);
        rep.max_abs_mean = rep.max_abs_mean.max(stats::mean(&col).abs());
        rep.var_min = rep.var_min.min(v);
        rep.var_max = rep.var_max.max(v);
        rep.ks_max = rep.ks_max.max(stats::ks_statistic_std_normal(&col));
    }
    Ok(rep)
}

fn oracle_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    let sched = cfg.schedule.build()?;
    for &seed in &cfg.seeds {
        let r = sampler_oracle(&sched, cfg.eval.oracle_dim, cfg.eval.oracle_samples, seed)?;
        for (name, v) in [
            ("oracle_max_abs_mean", r.max_abs_mean),
            ("oracle_var_min", r.var_min),
            ("oracle_var_max", r.var_max),
            ("oracle_ks_max", r.ks_max),
            ("oracle_pass", if r.passed() { 1.0 } else { 0.0 }),
        ] {
            out.push(MetricRecord { n: r.samples, seed, ..MetricRecord::new(name, "analytic_gaussian", v) });
        }
    }
    Ok(())
}

fn return_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    let spec = cfg.spec();
    let bundle = load_bundle(cfg, false)?;
    let summary = run_episodes(cfg, &bundle)?;
    for &seed in &cfg.seeds {
        let rows: Vec<_> = summary.rows.iter().filter(|r| r.seed == seed).collect();
        let norm: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
        let terr: Vec<f64> = rows.iter().map(|r| r.transition_error).collect();
        let base = MetricRecord { n: spec.n_agents, h: spec.horizon, seed, ..Default::default() };
        let sd = |v: &[f64]| if v.len() > 1 { stats::std_dev(v) } else { 0.0 };
        out.push(MetricRecord { value: stats::mean(&norm), std: sd(&norm), ..MetricRecord::new("normalized_return", &spec.name, 0.0) }.with(&base));
        out.push(MetricRecord { value: stats::mean(&terr), std: sd(&terr), ..MetricRecord::new("transition_error", &spec.name, 0.0) }.with(&base));
    }
    Ok(())
}

fn value_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    let spec = cfg.spec();
    let bundle = load_bundle(cfg, false)?;
    let vm = bundle.value.as_ref().context("checkpoint has no value model; train with value.enabled")?;
    let (_, held) = value_data(cfg)?;
    let rho = value_rank_correlation(vm, &held, spec.gamma)?;
    out.push(MetricRecord {
        n: spec.n_agents,
        h: spec.horizon,
        seed: cfg.primary_seed(),
        split: "heldout".into(),
        ..MetricRecord::new("value_spearman", &spec.name, rho)
    });
    Ok(())
}

fn poc_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    let spec = cfg.spec();
    let sched = cfg.schedule.build()?;
    let score = InteractingGaussianScore { schedule: sched, dim: spec.layout().dim(), coupling: cfg.eval.poc_coupling };
    let n_ref = cfg.eval.poc_ref_factor * cfg.eval.n_list.iter().copied().max().unwrap_or(1);
    let sample = |n: usize, seed: u64| sample_flat(&score, &sched, n, seed);
    let curve = poc_curve(&sample, &cfg.eval.n_list, n_ref, cfg.eval.poc_m, &cfg.seeds)?;
    for p in &curve.points {
        for (&seed, &v) in cfg.seeds.iter().zip(&p.per_seed) {
            out.push(MetricRecord { n: p.n, h: spec.horizon, seed, ..MetricRecord::new("poc_w2sq", &spec.name, v) });
        }
    }
    out.push(MetricRecord {
        h: spec.horizon,
        slope: Some(curve.slope),
        ci_lo: Some(curve.slope_ci.0),
        ci_hi: Some(curve.slope_ci.1),
        std: stats::std_dev(&curve.seed_slopes),
        ..MetricRecord::new("poc_slope", &spec.name, curve.slope)
    });
    Ok(())
}

fn lipschitz_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    let spec = cfg.spec();
    let sched = cfg.schedule.build()?;
    let trained = load_bundle(cfg, false).ok();
    let analytic = AnalyticGaussianScore { schedule: sched, dim: spec.layout().dim() };
    let (score, label): (&dyn ScoreSource, &str) = match &trained {
        Some(b) => (&b.score, "trained"),
        None => (&analytic, "analytic"),
    };
    for &seed in &cfg.seeds {
        let probes: Vec<Mat> = (0..cfg.eval.lipschitz_probes)
            .map(|k| sample_probe(score.dim(), cfg.eval.poc_m, mfdiff_core::rng::key(&[seed, k as u64])))
            .collect();
        let rep = effective_lipschitz(score, &sched, StepMap::Full, &probes, &cfg.eval.lipschitz_times, sched.dt(), spec.horizon)?;
        let base = MetricRecord { n: cfg.eval.poc_m, h: spec.horizon, seed, split: label.into(), ..Default::default() };
        out.push(MetricRecord::new("l_eff", &spec.name, rep.l_eff).with(&base));
        out.push(MetricRecord::new("l_eff_h", &spec.name, rep.l_eff_h).with(&base));
    }
    Ok(())
}

fn sample_probe(dim: usize, rows: usize, seed: u64) -> Mat {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = mfdiff_core::rng::stream(&[seed]);
    let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut r)).collect();
    Mat::from_vec(rows, dim, data).expect("shape")
}

fn exploit_rows(cfg: &RunConfig, out: &mut Vec<MetricRecord>) -> Result<()> {
    if !cfg.spec().is_ising() {
        bail!("exploitability is defined for the Ising environment only");
    }
    for &n in &cfg.eval.n_list {
        let spec = cfg.env.with_agents(n)?;
        for &p in &cfg.eval.exploit_policies {
            let policy = BernoulliPolicy { p_up: p };
            let exact = exploitability_exact_ising(&spec, policy)?;
            let split = format!("p_up={p}");
            for &seed in &cfg.seeds {
                let base = MetricRecord { n, h: 1, seed, split: split.clone(), ..Default::default() };
                out.push(MetricRecord::new("exploit_exact", &spec.name, exact).with(&base));
                for (name, m) in [("exploit_greedy", BestResponse::Greedy), ("exploit_reinforce", BestResponse::Reinforce)] {
                    let est = exploitability_learned(&spec, policy, m, cfg.eval.exploit_budget, seed)?;
                    out.push(MetricRecord { std: est.std, ..MetricRecord::new(name, &spec.name, est.reported()) }.with(&base));
                }
            }
        }
    }
    Ok(())
}

/// Horizon-exponent rows for every environment in a gap CSV.
pub fn horizon_rows(path: &Path, window: &[f64], replicates: usize, seed: u64) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_gap_csv(&text)?;
    let mut envs: Vec<String> = rows.iter().map(|r| r.env.clone()).collect();
    envs.sort();
    envs.dedup();
    let mut out = Vec::new();
    for env in envs {
        let fit = horizon_fit(&gap_series(&rows, &env), window, replicates, seed)?;
        for (k, (_, b)) in fit.per_seed.iter().enumerate() {
            out.push(MetricRecord { seed: k as u64, split: "per_seed".into(), ..MetricRecord::new("horizon_b", &env, *b) });
        }
        out.push(MetricRecord {
            split: "pooled".into(),
            slope: Some(fit.b),
            ci_lo: Some(fit.ci.0),
            ci_hi: Some(fit.ci.1),
            ..MetricRecord::new("horizon_b", &env, fit.b)
        });
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<Vec<MetricRecord>> {
    let mut rows = Vec::new();
    let metrics: Vec<Metric> = if opts.oracle { vec![Metric::Oracle] } else { cfg.eval.metrics.clone() };
    for m in metrics {
        let r = match m {
            Metric::Oracle => oracle_rows(cfg, &mut rows),
            Metric::Return => return_rows(cfg, &mut rows),
            Metric::ValueRank => value_rows(cfg, &mut rows),
            Metric::Poc => poc_rows(cfg, &mut rows),
            Metric::Lipschitz => lipschitz_rows(cfg, &mut rows),
            Metric::Exploitability => exploit_rows(cfg, &mut rows),
        };
        r.with_context(|| format!("metric {m:?}"))?;
    }
    let gap = opts.fit_horizon.as_ref().or(cfg.eval.gap_csv.as_ref());
    if let Some(p) = gap {
        rows.extend(horizon_rows(p, &cfg.eval.horizon_window, cfg.eval.bootstrap_replicates, cfg.primary_seed())?);
    }
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(METRICS_FILE), format_metrics(&rows)?)?;
    Ok(rows)
}

trait WithBase {
    fn with(self, base: &MetricRecord) -> MetricRecord;
}

impl WithBase for MetricRecord {
    /// Copies the key columns of `base`.
    fn with(self, base: &MetricRecord) -> MetricRecord {
        MetricRecord { n: base.n, h: base.h, seed: base.seed, split: base.split.clone(), ..self }
    }
}
