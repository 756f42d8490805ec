//! Versioned TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mfdiff_core::env::EnvSpec;
use mfdiff_core::model::{ScoreConfig, ValueConfig};
use mfdiff_core::offline::{MfqConfig, Split};
use mfdiff_core::plan::{ActionProjection, PlanConfig, RngKeying};
use mfdiff_core::schedule::{DiffusionSchedule, LevelWeighting, SubdivisionSchedule};
use mfdiff_core::train::{LossWeighting, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "MFD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 means the available parallelism.
    #[serde(default)]
    pub workers: usize,
    pub env: EnvConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub subdivision: SubdivisionConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub model: ScoreConfig,
    #[serde(default)]
    pub value: ValueSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Ising { side: usize, coupling: f64 },
    GaussianSqueeze { n_agents: usize, horizon: usize, d_s: usize, d_a: usize },
}

impl EnvConfig {
    pub fn spec(&self) -> EnvSpec {
        match *self {
            EnvConfig::Ising { side, coupling } => EnvSpec::ising(side, coupling),
            EnvConfig::GaussianSqueeze { n_agents, horizon, d_s, d_a } => {
                EnvSpec::gaussian_squeeze(n_agents, horizon, d_s, d_a)
            }
        }
    }

    /// The same environment with `n` agents.
    pub fn with_agents(&self, n: usize) -> Result<EnvSpec> {
        Ok(match *self {
            EnvConfig::Ising { coupling, .. } => {
                let side = (n as f64).sqrt().round() as usize;
                ensure!(side * side == n, "Ising populations must be square, got {n}");
                EnvSpec::ising(side, coupling)
            }
            EnvConfig::GaussianSqueeze { horizon, d_s, d_a, .. } => EnvSpec::gaussian_squeeze(n, horizon, d_s, d_a),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    pub t_min: f64,
    pub n_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = DiffusionSchedule::default();
        ScheduleConfig { beta_min: d.beta_min, beta_max: d.beta_max, t_max: d.t_max, t_min: d.t_min, n_steps: d.n_steps }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::vp(self.beta_min, self.beta_max, self.t_max, self.t_min, self.n_steps)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubdivisionConfig {
    pub branching: usize,
    pub levels: usize,
    pub c_psi: f64,
}

impl Default for SubdivisionConfig {
    fn default() -> Self {
        SubdivisionConfig { branching: 2, levels: 4, c_psi: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
    pub splits: Vec<Split>,
    /// Uniform-policy rollouts used for the random reference return.
    pub random_episodes: usize,
    pub mfq: MfqConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 200,
            splits: Split::ALL.to_vec(),
            random_episodes: 20,
            mfq: MfqConfig { iterations: 300, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueSection {
    pub enabled: bool,
    pub splits: Vec<Split>,
    /// Every `holdout_every`-th episode is held out for the rank check.
    pub holdout_every: usize,
    #[serde(flatten)]
    pub fit: ValueConfig,
}

impl Default for ValueSection {
    fn default() -> Self {
        ValueSection {
            enabled: true,
            splits: vec![Split::Expert, Split::Mixed],
            holdout_every: 5,
            fit: ValueConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub split: Split,
    /// Trailing episodes of the split kept out of training for score-error logging.
    pub heldout: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub weighting: LevelWeighting,
    pub loss_weighting: LossWeighting,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            split: Split::Expert,
            heldout: 10,
            alpha: 1.0,
            lambda: 0.0,
            weighting: LevelWeighting::PracticalBPow,
            loss_weighting: LossWeighting::NoiseVariance,
            epochs: 20,
            batch: 4,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub episodes: usize,
    pub eta: f64,
    pub delta_k: f64,
    pub keying: RngKeying,
    /// Defaults to argmax for discrete actions and identity otherwise.
    pub projection: Option<ActionProjection>,
    /// Subdivision levels used at planning time; defaults to the training value.
    pub levels: Option<usize>,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection { episodes: 20, eta: 0.0, delta_k: 0.1, keying: RngKeying::Index, projection: None, levels: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Oracle,
    Return,
    ValueRank,
    Poc,
    Lipschitz,
    Exploitability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: Vec<Metric>,
    pub n_list: Vec<usize>,
    /// Marginal size compared against the reference run.
    pub poc_m: usize,
    /// Reference population as a multiple of the largest `n`.
    pub poc_ref_factor: usize,
    pub poc_coupling: f64,
    pub oracle_samples: usize,
    pub oracle_dim: usize,
    pub exploit_policies: Vec<f64>,
    pub exploit_budget: usize,
    pub lipschitz_probes: usize,
    pub lipschitz_times: Vec<f64>,
    pub gap_csv: Option<PathBuf>,
    pub horizon_window: Vec<f64>,
    pub bootstrap_replicates: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metrics: vec![Metric::Oracle],
            n_list: vec![16, 64, 256],
            poc_m: 8,
            poc_ref_factor: 16,
            poc_coupling: 1.0,
            oracle_samples: 10_000,
            oracle_dim: 2,
            exploit_policies: vec![0.5, 0.9, 1.0],
            exploit_budget: 20_000,
            lipschitz_probes: 2,
            lipschitz_times: vec![0.01, 0.1, 0.5, 1.0],
            gap_csv: None,
            horizon_window: vec![25.0, 50.0, 100.0],
            bootstrap_replicates: 10_000,
        }
    }
}

impl RunConfig {
    /// A small Gaussian Squeeze configuration writing into `out_dir`.
    pub fn example(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            out_dir: out_dir.into(),
            seeds: vec![0],
            workers: 0,
            env: EnvConfig::GaussianSqueeze { n_agents: 64, horizon: 50, d_s: 1, d_a: 1 },
            schedule: ScheduleConfig::default(),
            subdivision: SubdivisionConfig::default(),
            collect: CollectConfig::default(),
            model: ScoreConfig { hidden: 128, interaction_hidden: 32, ..Default::default() },
            value: ValueSection::default(),
            train: TrainSection::default(),
            plan: PlanSection { levels: Some(0), ..Default::default() },
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory, `MFD_SEED` replaces the seed list, and referenced
    /// files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out_dir = resolve(base, &cfg.out_dir);
        if let Some(p) = &cfg.eval.gap_csv {
            cfg.eval.gap_csv = Some(resolve(base, p));
        }
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        if let Some(p) = &self.eval.gap_csv {
            ensure!(p.is_file(), "gap CSV {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        ensure!(!self.seeds.is_empty(), "at least one seed is required");
        self.spec().validate()?;
        self.schedule.build()?;
        self.subdivision()?;
        self.model.validate()?;
        self.collect.mfq.validate()?;
        ensure!(self.value.holdout_every >= 2, "value.holdout_every must be >= 2");
                self.train_config()?.validate()?;
        self.plan_config()?.validate()?;
        ensure!(self.eval.poc_m >= 1 && self.eval.poc_ref_factor >= 4, "PoC needs m >= 1 and a reference factor >= 4");
        Ok(())
    }

    pub fn spec(&self) -> EnvSpec {
        self.env.spec()
    }

    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn subdivision_for(&self, n: usize, levels: usize) -> Result<SubdivisionSchedule> {
        let s = &self.subdivision;
        Ok(SubdivisionSchedule::new(n, s.branching, levels, &self.schedule.build()?, s.c_psi)?)
    }

    pub fn subdivision(&self) -> Result<SubdivisionSchedule> {
        self.subdivision_for(self.spec().n_agents, self.subdivision.levels)
    }

    pub fn plan_levels(&self) -> usize {
        self.plan.levels.unwrap_or(self.subdivision.levels)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mut c = TrainConfig::new(self.subdivision()?);
        c.alpha = t.alpha;
        c.lambda = t.lambda;
        c.weighting = t.weighting;
        c.loss_weighting = t.loss_weighting;
        c.epochs = t.epochs;
        c.batch = t.batch;
        c.lr = t.lr;
        c.seed = self.primary_seed();
        Ok(c)
    }

    pub fn plan_config(&self) -> Result<PlanConfig> {
        let spec = self.spec();
        let projection = self.plan.projection.unwrap_or_else(|| ActionProjection::for_kind(&spec.action_kind));
        let sub = self.subdivision_for(spec.n_agents, self.plan_levels())?;
        let mut c = PlanConfig::new(sub, projection);
        c.eta = self.plan.eta;
        c.delta_k = self.plan.delta_k;
        c.keying = self.plan.keying;
        Ok(c)
    }

    pub fn value_config(&self) -> ValueConfig {
        ValueConfig { seed: self.primary_seed(), ..self.value.fit.clone() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("model")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.model_dir().join("checkpoint.mfck")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_identity() {
        let cfg = RunConfig::example("runs/gs");
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml(
            "schema_version = 1\nout_dir = \"o\"\nseeds = [3]\n[env]\nkind = \"ising\"\nside = 4\ncoupling = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.spec().n_agents, 16);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.primary_seed(), 3);
    }

    #[test]
    fn schema_version_is_checked() {
        let mut cfg = RunConfig::example("o");
        cfg.schema_version = 2;
        let text = toml::to_string(&cfg).unwrap();
        assert!(RunConfig::from_toml(&text).is_err());
        let missing = RunConfig::example("o").to_toml().unwrap().replace("schema_version = 1\n", "");
        assert!(RunConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = RunConfig::example("o").to_toml().unwrap().replace("[train]\n", "[train]\nepoch = 3\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = RunConfig::example("o");
        cfg.seeds = vec![1, 2];
        cfg.apply_seed_override(Some("9")).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
    }

    #[test]
    fn load_resolves_paths_and_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::example("out");
        cfg.eval.gap_csv = Some("gaps.csv".into());
        cfg.save(&path).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(dir.path().join("gaps.csv"), "env,h,seed,gap\n").unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.out_dir, dir.path().join("out"));
        loaded.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), loaded);
    }

    #[test]
    fn invalid_subdivision_is_rejected() {
        let mut cfg = RunConfig::example("o");
        cfg.subdivision.levels = 6;
        assert!(cfg.validate().is_err());
    }
}
