//! Run configuration.
//!
//! A run is described by one TOML file. Relative paths are resolved against
//! the directory containing that file. Secrets are read from environment
//! variables named in the file, never stored in it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::agent::AgentConfig;
use crate::bank::{Group, Level};
use crate::difficulty::{EmbedConfig, ForestConfig};
use crate::estimator::{McmcConfig, MonteCarloConfig, PriorSpec, SeKind};

fn default_seed() -> u64 {
    20_240_601
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub agent: AgentSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub difficulty: DifficultySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub bank: PathBuf,
    pub cohort: PathBuf,
    pub pre_table: PathBuf,
    pub post_table: PathBuf,
    pub concordance: PathBuf,
    pub output_dir: PathBuf,
    /// Precomputed agent scaled scores (`year,exam_id,scaled`). When set, the
    /// estimate stage reads these instead of graded agent runs.
    #[serde(default)]
    pub agent_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentSection {
    #[serde(default)]
    pub mode: AgentMode,
    /// `year,accuracy` CSV driving the mock agent.
    #[serde(default)]
    pub mock_accuracy: Option<PathBuf>,
    #[serde(flatten)]
    pub client: AgentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub count: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { count: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub baseline_year: u16,
    pub exclude_years: Vec<u16>,
    /// Restrict estimation to these levels; empty means every level in the cohort file.
    pub levels: Vec<Level>,
    /// Restrict estimation to these groups; empty means every group in the cohort file.
    pub groups: Vec<Group>,
    pub se_kind: SeKind,
    pub bayes: bool,
    pub prior: PriorSpec,
    pub mcmc: McmcConfig,
    pub monte_carlo: MonteCarloConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            baseline_year: crate::FIRST_YEAR,
            exclude_years: Vec::new(),
            levels: Vec::new(),
            groups: Vec::new(),
            se_kind: SeKind::Homoskedastic,
            bayes: true,
            prior: PriorSpec::default(),
            mcmc: McmcConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultySection {
    pub enabled: bool,
    pub embedder: EmbedderKind,
    pub mock_dim: usize,
    pub train_fraction: f64,
    pub forest: ForestConfig,
    pub embed: EmbedConfig,
}

impl Default for DifficultySection {
    fn default() -> Self {
        DifficultySection {
            enabled: true,
            embedder: EmbedderKind::Mock,
            mock_dim: 256,
            train_fraction: 0.8,
            forest: ForestConfig::default(),
            embed: EmbedConfig::default(),
        }
    }
}

/// A parsed config together with the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base_dir)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, PipelineError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(format!("invalid config: {e}")))?;
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Input files named by the config, with the key that names them.
    pub fn input_files(&self) -> Vec<(&'static str, PathBuf)> {
        let p = &self.config.paths;
        let mut files = vec![
            ("paths.bank", self.resolve(&p.bank)),
            ("paths.cohort", self.resolve(&p.cohort)),
            ("paths.pre_table", self.resolve(&p.pre_table)),
            ("paths.post_table", self.resolve(&p.post_table)),
            ("paths.concordance", self.resolve(&p.concordance)),
        ];
        if let Some(a) = &p.agent_scores {
            files.push(("paths.agent_scores", self.resolve(a)));
        }
        if let Some(m) = &self.config.agent.mock_accuracy {
            files.push(("agent.mock_accuracy", self.resolve(m)));
        }
        files
    }

    /// Checks that referenced files exist and that settings are coherent.
    pub fn check(&self) -> Result<(), PipelineError> {
        for (key, path) in self.input_files() {
            if !path.is_file() {
                return Err(PipelineError::Config(format!("{key}: file {} not found", path.display())));
            }
        }
        let c = &self.config;
        if c.agent.mode == AgentMode::Mock && c.agent.mock_accuracy.is_none() {
            return Err(PipelineError::Config("agent.mock_accuracy is required in mock mode".into()));
        }
        if c.sampler.count == 0 {
            return Err(PipelineError::Config("sampler.count must be positive".into()));
        }
        if c.agent.client.concurrency == 0 {
            return Err(PipelineError::Config("agent.concurrency must be positive".into()));
        }
        let m = &c.estimator.mcmc;
        if m.chains < 2 || m.draws < 4 {
            return Err(PipelineError::Config("estimator.mcmc needs at least 2 chains and 4 draws".into()));
        }
        let pr = &c.estimator.prior;
        if !(pr.mu_lo < pr.mu_hi && 0.0 < pr.sigma_lo && pr.sigma_lo < pr.sigma_hi) {
            return Err(PipelineError::Config("estimator.prior bounds are inconsistent".into()));
        }
        if c.estimator.exclude_years.contains(&c.estimator.baseline_year) {
            return Err(PipelineError::Config("the baseline year cannot be excluded".into()));
        }
        if !(0.0 < c.difficulty.train_fraction && c.difficulty.train_fraction < 1.0) {
            return Err(PipelineError::Config("difficulty.train_fraction must lie in (0, 1)".into()));
        }
        if let Some(id) = &c.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(PipelineError::Config(format!("run_id {id:?} is not a plain directory name")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the config (without the run id) and the bytes of every input file.
    pub fn hash(&self) -> Result<String, PipelineError> {
        let mut keyed = self.config.clone();
        keyed.run_id = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&keyed).expect("config serializes"));
        for (key, path) in self.input_files() {
            let bytes = std::fs::read(&path)
                .map_err(|e| PipelineError::Config(format!("{key}: cannot read {}: {e}", path.display())))?;
            h.update(key.as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(h.finalize()))
    }
}
