//! `collect`: MFQ behaviour policy, quality splits and a checksummed manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mfdiff_core::env;
use mfdiff_core::offline::{collect_split, dataset_stats, rollout, train_mfq, Behavior, OfflineDataset, Split};
use mfdiff_core::rng::{self, tag};
use mfdiff_core::stats::{self, fmt9};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub env: String,
    pub n_agents: usize,
    pub horizon: usize,
    pub seed: u64,
    pub episodes: usize,
    /// Mean discounted welfare of the expert split and of uniform rollouts.
    pub j_expert: f64,
    pub j_random: f64,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub file: String,
    pub bytes: u64,
    pub crc32: u32,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn entry(&self, split: Split) -> Result<&ManifestEntry> {
        self.files
            .iter()
            .find(|e| e.split == split)
            .with_context(|| format!("split {} was not collected", split.name()))
    }
}

/// Result of re-hashing one manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FileCheck {
    pub file: String,
    pub ok: bool,
    pub detail: String,
}

pub fn check_entry(dir: &Path, e: &ManifestEntry) -> FileCheck {
    let detail = match std::fs::read(dir.join(&e.file)) {
        Err(err) => Some(format!("unreadable: {err}")),
        Ok(bytes) if bytes.len() as u64 != e.bytes => Some(format!("size {} != {}", bytes.len(), e.bytes)),
        Ok(bytes) => {
            let c = crc32fast::hash(&bytes);
            (c != e.crc32).then(|| format!("crc32 {c:08x} != {:08x}", e.crc32))
        }
    };
    FileCheck { file: e.file.clone(), ok: detail.is_none(), detail: detail.unwrap_or_else(|| "ok".into()) }
}

/// Reads one split after checking it against the manifest.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<OfflineDataset> {
    let e = manifest.entry(split)?;
    let check = check_entry(dir, e);
    if !check.ok {
        bail!("{}: {}", check.file, check.detail);
    }
    Ok(OfflineDataset::read(&dir.join(&e.file))?)
}

pub fn split_file(split: Split) -> String {
    format!("{}.mfdd", split.name())
}

pub struct CollectOutput {
    pub manifest: Manifest,
    pub dir: PathBuf,
}

pub fn cmd_collect(cfg: &RunConfig) -> Result<CollectOutput> {
    let spec = cfg.spec();
    let seed = cfg.primary_seed();
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let c = &cfg.collect;
    let art = train_mfq(&spec, &c.mfq, seed).context("training the behaviour policy")?;
    let mut splits = c.splits.clone();
    if !splits.contains(&Split::Expert) {
        // The expert return anchors normalisation even when the split is not requested.
        splits.insert(0, Split::Expert);
    }
    let mut files = Vec::new();
    let mut stats_csv = String::from("split,episodes,return_mean,return_std,order_parameter\n");
    let mut j_expert = f64::NAN;
    for split in splits {
        let ds = collect_split(&spec, &art, split, c.episodes, seed, c.mfq.action_levels)
            .with_context(|| format!("collecting {}", split.name()))?;
        let st = dataset_stats(&ds, spec.gamma)?;
        if split == Split::Expert {
            j_expert = st.return_mean;
        }
        stats_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            split.name(),
            st.episodes,
            fmt9(st.return_mean),
            fmt9(st.return_std),
            st.order_parameter.map(fmt9).unwrap_or_default()
        ));
        let bytes = ds.to_bytes()?;
        let file = split_file(split);
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        files.push(ManifestEntry { split, file, bytes: bytes.len() as u64, crc32: crc32fast::hash(&bytes) });
    }
    let random: Vec<f64> = (0..c.random_episodes.max(1))
        .map(|e| {
            let rec = rollout(&spec, Behavior::Uniform { levels: c.mfq.action_levels }, rng::key(&[seed, tag::EVAL, e as u64]))?;
            Ok(env::episode_return(&spec, &rec.rewards)?.welfare)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        env: spec.name.clone(),
        n_agents: spec.n_agents,
        horizon: spec.horizon,
        seed,
        episodes: c.episodes,
        j_expert,
        j_random: stats::mean(&random),
        files,
    };
    std::fs::write(dir.join(MANIFEST), toml::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("collect_stats.csv"), stats_csv)?;
    Ok(CollectOutput { manifest, dir })
}
