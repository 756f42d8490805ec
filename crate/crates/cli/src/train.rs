//! `train`: score model over subdivision levels plus the value estimator.

use std::io::Write;

use anyhow::{bail, Context, Result};
use mfdiff_core::model::value::{train_value, value_rank_correlation};
use mfdiff_core::model::{ModelBundle, ScoreModel};
use mfdiff_core::offline::OfflineDataset;
use mfdiff_core::stats::fmt9;
use mfdiff_core::train::{self, format_log, format_timing, TrainOutcome};

use crate::collect::{load_split, Manifest};
use crate::config::RunConfig;

pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "train_timing.csv";
pub const VALUE_FILE: &str = "value_fit.csv";

/// Training episodes of the configured split and the held-out tail.
pub fn training_data(cfg: &RunConfig) -> Result<(OfflineDataset, OfflineDataset)> {
    let dir = cfg.data_dir();
    let manifest = Manifest::read(&dir)?;
    let ds = load_split(&dir, &manifest, cfg.train.split)?;
    ds.check_env(&cfg.spec())?;
    if ds.len() <= cfg.train.heldout {
        bail!("split {} has {} episodes, fewer than heldout + 1", cfg.train.split.name(), ds.len());
    }
    Ok(ds.split_at(ds.len() - cfg.train.heldout))
}

/// The model before its first update: seeded weights and a normaliser fitted
/// on the training episodes.
pub fn initial_bundle(cfg: &RunConfig, train_ds: &OfflineDataset) -> Result<ModelBundle> {
    let score = ScoreModel::new(cfg.spec().layout(), cfg.model.clone(), cfg.schedule.build()?, cfg.primary_seed())?;
    Ok(ModelBundle::new(score, train::fit_normalizer(train_ds)?))
}

/// Value-estimator data: the configured splits with every
/// `holdout_every`-th episode held out.
pub fn value_data(cfg: &RunConfig) -> Result<(OfflineDataset, OfflineDataset)> {
    let dir = cfg.data_dir();
    let manifest = Manifest::read(&dir)?;
    let parts = cfg.value.splits.iter().map(|&s| load_split(&dir, &manifest, s)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&OfflineDataset> = parts.iter().collect();
    let all = OfflineDataset::concat(&refs, "value")?;
    let k = cfg.value.holdout_every;
    let (mut fit, mut held) = (all.clone(), all.clone());
    fit.episodes.clear();
    held.episodes.clear();
    for (e, ep) in all.episodes.into_iter().enumerate() {
        if e % k == k - 1 { held.episodes.push(ep) } else { fit.episodes.push(ep) }
    }
    Ok((fit, held))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub outcome: TrainOutcome,
    pub value_rho: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutput> {
    let spec = cfg.spec();
    let (train_ds, held) = training_data(cfg)?;
    let ck = cfg.checkpoint_path();
    let mut bundle = if resume {
        ModelBundle::load(&ck).with_context(|| format!("resuming from {}", ck.display()))?
    } else {
        initial_bundle(cfg, &train_ds)?
    };
    let outcome = train::fit(&mut bundle, &train_ds, &held, Some(&spec), &cfg.train_config()?)?;

    let mut value_rho = None;
    let mut value_csv = String::from("train_episodes,heldout_episodes,spearman_rho\n");
    if cfg.value.enabled {
        let (fit, vheld) = value_data(cfg)?;
        let vm = train_value(&fit, spec.gamma, &cfg.value_config())?;
        let rho = value_rank_correlation(&vm, &vheld, spec.gamma)?;
        value_csv.push_str(&format!("{},{},{}\n", fit.len(), vheld.len(), fmt9(rho)));
        value_rho = Some(rho);
        bundle.value = Some(vm);
    }

    let dir = cfg.model_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    bundle.save(&ck).with_context(|| format!("writing {}", ck.display()))?;
    write_log(&dir.join(LOG_FILE), &format_log(&outcome.log), resume)?;
    write_log(&dir.join(TIMING_FILE), &format_timing(&outcome.timing), resume)?;
    if cfg.value.enabled {
        std::fs::write(dir.join(VALUE_FILE), value_csv)?;
    }
    Ok(TrainOutput { bundle, outcome, value_rho })
}

/// Writes a CSV, or appends its body when resuming onto an existing file.
fn write_log(path: &std::path::Path, csv: &str, append: bool) -> Result<()> {
    if append && path.exists() {
        let body = csv.split_once('\n').map_or("", |x| x.1);
        let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
        f.write_all(body.as_bytes())?;
    } else {
        std::fs::write(path, csv)?;
    }
    Ok(())
}
