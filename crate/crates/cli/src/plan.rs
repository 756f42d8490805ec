//! `plan`: receding-horizon execution of the trained (or untrained) model.

use anyhow::{Context, Result};
use mfdiff_core::env;
use mfdiff_core::eval::normalized_return;
use mfdiff_core::model::ModelBundle;
use mfdiff_core::plan::{execute, Planner};
use mfdiff_core::rng;
use mfdiff_core::stats::{self, fmt9};

use crate::collect::Manifest;
use crate::config::RunConfig;
use crate::train::{initial_bundle, training_data};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub seed: u64,
    pub episode: usize,
    pub welfare: f64,
    pub normalized: f64,
    pub transition_error: f64,
    pub plan_calls: usize,
    pub work: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSummary {
    pub rows: Vec<EpisodeRow>,
    pub mean_welfare: f64,
    pub mean_normalized: f64,
    pub j_expert: f64,
    pub j_random: f64,
}

pub const EPISODE_HEADER: &str = "seed,episode,welfare,normalized,transition_error,plan_calls,work";

pub fn format_episodes(rows: &[EpisodeRow]) -> String {
    let mut s = format!("{EPISODE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.seed,
            r.episode,
            fmt9(r.welfare),
            fmt9(r.normalized),
            fmt9(r.transition_error),
            r.plan_calls,
            fmt9(r.work)
        ));
    }
    s
}

/// The trained checkpoint, or the identical model before any update.
pub fn load_bundle(cfg: &RunConfig, untrained: bool) -> Result<ModelBundle> {
    if untrained {
        let (train_ds, _) = training_data(cfg)?;
        initial_bundle(cfg, &train_ds)
    } else {
        let ck = cfg.checkpoint_path();
        ModelBundle::load(&ck).with_context(|| format!("loading {}", ck.display()))
    }
}

/// Executes `plan.episodes` episodes per configured seed.
pub fn run_episodes(cfg: &RunConfig, bundle: &ModelBundle) -> Result<PlanSummary> {
    let spec = cfg.spec();
    let manifest = Manifest::read(&cfg.data_dir())?;
    let pc = cfg.plan_config()?;
    let planner = Planner {
        score: &bundle.score,
        schedule: cfg.schedule.build()?,
        normalizer: bundle.normalizer.clone(),
        layout: spec.layout(),
        value: if pc.eta > 0.0 { bundle.value.as_ref() } else { None },
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for e in 0..cfg.plan.episodes {
            let ex = execute(&spec, &planner, &pc, rng::key(&[seed, e as u64]))?;
            let welfare = env::episode_return(&spec, &ex.record.rewards)?.welfare;
            rows.push(EpisodeRow {
                seed,
                episode: e,
                welfare,
                normalized: normalized_return(welfare, manifest.j_random, manifest.j_expert)?,
                transition_error: ex.transition_error(),
                plan_calls: ex.plan_calls,
                work: ex.work,
            });
        }
    }
    let w: Vec<f64> = rows.iter().map(|r| r.welfare).collect();
    let mean_welfare = stats::mean(&w);
    Ok(PlanSummary {
        mean_normalized: normalized_return(mean_welfare, manifest.j_random, manifest.j_expert)?,
        mean_welfare,
        rows,
        j_expert: manifest.j_expert,
        j_random: manifest.j_random,
    })
}

pub fn cmd_plan(cfg: &RunConfig, untrained: bool) -> Result<PlanSummary> {
    let bundle = load_bundle(cfg, untrained)?;
    let summary = run_episodes(cfg, &bundle)?;
    let dir = cfg.out_dir.join("plan");
    std::fs::create_dir_all(&dir)?;
    let name = if untrained { "episodes_untrained.csv" } else { "episodes.csv" };
    std::fs::write(dir.join(name), format_episodes(&summary.rows))?;
    Ok(summary)
}
