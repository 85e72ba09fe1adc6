//! End-to-end orchestration.
//!
//! A run lives in `<output_dir>/<run_id>/`:
//!
//! ```text
//! manifest.json
//! exams/<year>.jsonl                 sample
//! responses/<year>/<exam_id>.jsonl   run-agent
//! scores/                            grade
//! estimates/                         estimate
//! embeddings/<model>/<hash>.vec      classify (cache)
//! difficulty/                        classify
//! report/                            report
//! ```
//!
//! Each stage directory holds a `_stage.json` marker with the config hash, the
//! digests of the upstream markers it consumed and the SHA-256 of each
//! artifact it wrote. A stage whose marker is current is skipped.
//!
//! Stage seeds are `derive(root_seed, "<stage>")`.

mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    AgentMode, AgentSection, DifficultySection, EmbedderKind, EstimatorSection, LoadedConfig, Paths, RunConfig,
    SamplerSection,
};

use crate::agent::{self, Agent, AgentError, HttpTransport, MockTransport, ResponseStore, Transport};
use crate::bank::{self, BankError, CohortStats, Group, Level, QuestionBank};
use crate::difficulty::{self, DifficultyClass, DifficultyError, EmbeddingCache, Embedder, HttpEmbedder, MockEmbedder};
use crate::estimator::{self, AdsEstimate, AgentScore, Diagnostics, EstimatorError, Method, PosteriorDraws, Role};
use crate::judge::{self, ExamScore, GradedItem, JudgeError};
use crate::sampler::{self, ExamSet, SampleError};
use crate::scale::{self, ConversionTable, ScaleError, ScoreScale};
use crate::{seeds, Era};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {needed_by} needs {missing} to have completed first")]
    MissingStage { missing: &'static str, needed_by: &'static str },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{failed} of {exams} exams incomplete; first failure: {first}")]
    AgentRun { failed: usize, exams: usize, first: String },
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("every estimate cell failed; first: {0}")]
    AllCellsFailed(String),
    #[error(transparent)]
    Difficulty(#[from] DifficultyError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// 2 for configuration and credential problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Agent(AgentError::MissingCredential(_))
            | PipelineError::Difficulty(DifficultyError::MissingCredential(_)) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sample,
    RunAgent,
    Grade,
    Estimate,
    Classify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Sample,
        Stage::RunAgent,
        Stage::Grade,
        Stage::Estimate,
        Stage::Classify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::RunAgent => "run-agent",
            Stage::Grade => "grade",
            Stage::Estimate => "estimate",
            Stage::Classify => "classify",
            Stage::Report => "report",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Sample => "exams",
            Stage::RunAgent => "responses",
            Stage::Grade => "scores",
            Stage::Estimate => "estimates",
            Stage::Classify => "difficulty",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub config_hash: String,
    pub upstream: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactRecord>,
    /// SHA-256 over the artifact records; what downstream stages pin.
    pub digest: String,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub digest: String,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub created_at: String,
    pub updated_at: String,
    pub stages: BTreeMap<String, StageEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Completed,
    /// Marker was current; nothing was recomputed.
    UpToDate,
}

/// Optional command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub seed: Option<u64>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Switches the agent to mock mode driven by this accuracy file.
    pub mock_accuracy: Option<PathBuf>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellEstimate {
    level: Level,
    group: Group,
    estimate: AdsEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GradedRecord {
    year: u16,
    exam_id: String,
    item: GradedItem,
}

#[derive(Debug, Deserialize)]
struct AgentScoreRow {
    year: u16,
    exam_id: String,
    scaled: f64,
}

/// Reads `year,exam_id,scaled` rows; extra columns are ignored.
pub fn load_agent_scores(path: &Path) -> Result<Vec<AgentScore>, PipelineError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: AgentScoreRow = row?;
        out.push(AgentScore {
            year: row.year,
            exam_id: row.exam_id,
            scaled: row.scaled,
        });
    }
    Ok(out)
}

pub struct Pipeline {
    pub loaded: LoadedConfig,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    /// When false, responses left by an interrupted run-agent are discarded
    /// instead of resumed.
    pub resume: bool,
}

impl Pipeline {
    /// Validates the config and claims the run directory.
    pub fn open(mut loaded: LoadedConfig, overrides: Overrides) -> Result<Self, PipelineError> {
        if let Some(seed) = overrides.seed {
            loaded.config.seed = seed;
        }
        if let Some(id) = overrides.run_id {
            loaded.config.run_id = Some(id);
        }
        let agent = &mut loaded.config.agent;
        if let Some(url) = overrides.endpoint {
            agent.client.endpoint_url = url;
            agent.mode = AgentMode::Live;
        }
        if let Some(model) = overrides.model {
            agent.client.model_name = model;
        }
        if let Some(path) = overrides.mock_accuracy {
            agent.mode = AgentMode::Mock;
            agent.mock_accuracy = Some(std::path::absolute(&path).unwrap_or(path));
        }
        if let Some(n) = overrides.concurrency {
            agent.client.concurrency = n;
        }
        loaded.check()?;
        let config_hash = loaded.hash()?;
        let run_id = loaded.config.run_id.clone().unwrap_or_else(|| "default".into());
        let run_dir = loaded.resolve(&loaded.config.paths.output_dir).join(&run_id);
        let manifest_path = run_dir.join("manifest.json");
        if manifest_path.is_file() {
            let existing: RunManifest = read_json(&manifest_path)?;
            if existing.config_hash != config_hash {
                return Err(PipelineError::Config(format!(
                    "run id {run_id:?} already holds a run with a different config; choose another run id"
                )));
            }
        }
        Ok(Pipeline {
            resume: true,
            seed: loaded.config.seed,
            loaded,
            run_id,
            run_dir,
            config_hash,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn input(&self, p: &Path) -> PathBuf {
        self.loaded.resolve(p)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir())
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("_stage.json")
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        seeds::derive(self.seed, stage.name())
    }

    pub fn load_bank(&self) -> Result<QuestionBank, PipelineError> {
        Ok(bank::load_question_bank(self.input(&self.config().paths.bank))?)
    }

    pub fn load_scale(&self) -> Result<ScoreScale, PipelineError> {
        let p = &self.config().paths;
        let pre = ConversionTable::load(Era::Pre, self.input(&p.pre_table))?;
        let post = ConversionTable::load(Era::Post, self.input(&p.post_table))?;
        let pairs = scale::load_concordance_pairs(self.input(&p.concordance))?;
        let concordance = scale::fit_concordance(&pairs)?;
        Ok(ScoreScale { pre, post, concordance })
    }

    fn upstream(&self, stage: Stage) -> Vec<Stage> {
        let c = self.config();
        match stage {
            Stage::Sample => vec![],
            Stage::RunAgent => vec![Stage::Sample],
            Stage::Grade => vec![Stage::Sample, Stage::RunAgent],
            Stage::Estimate if c.paths.agent_scores.is_some() => vec![],
            Stage::Estimate => vec![Stage::Grade],
            Stage::Classify => vec![Stage::Grade],
            Stage::Report => {
                let mut v = Vec::new();
                if c.paths.agent_scores.is_none() {
                    v.extend([Stage::Sample, Stage::RunAgent, Stage::Grade]);
                }
                v.push(Stage::Estimate);
                if c.difficulty.enabled {
                    v.push(Stage::Classify);
                }
                v
            }
        }
    }

    pub fn marker(&self, stage: Stage) -> Result<Option<StageMarker>, PipelineError> {
        let path = self.marker_path(stage);
        if !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    fn upstream_digests(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for up in self.upstream(stage) {
            let marker = self.marker(up)?.ok_or(PipelineError::MissingStage {
                missing: up.name(),
                needed_by: stage.name(),
            })?;
            out.insert(up.name().to_string(), marker.digest);
        }
        Ok(out)
    }

    fn is_current(&self, stage: Stage, upstream: &BTreeMap<String, String>) -> Result<bool, PipelineError> {
        let Some(marker) = self.marker(stage)? else {
            return Ok(false);
        };
        if marker.config_hash != self.config_hash || &marker.upstream != upstream {
            return Ok(false);
        }
        for a in &marker.artifacts {
            let path = self.run_dir.join(&a.path);
            if !path.is_file() || sha256_file(&path)? != a.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Runs one stage unless its marker is current.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let upstream = self.upstream_digests(stage)?;
        if self.is_current(stage, &upstream)? {
            log::info!("{}: up to date, skipping", stage.name());
            return Ok(StageOutcome::UpToDate);
        }
        log::info!("{}: running", stage.name());
        let dir = self.stage_dir(stage);
        let marker_path = self.marker_path(stage);
        if marker_path.exists() {
            fs::remove_file(&marker_path).map_err(io_err(&marker_path))?;
        }
        if stage != Stage::RunAgent && dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        self.touch_manifest(None)?;

        let artifacts = match stage {
            Stage::Sample => self.do_sample()?,
            Stage::RunAgent => self.do_run_agent(&upstream)?,
            Stage::Grade => self.do_grade()?,
            Stage::Estimate => self.do_estimate()?,
            Stage::Classify => self.do_classify()?,
            Stage::Report => self.do_report()?,
        };

        let mut records = Vec::with_capacity(artifacts.len());
        for path in artifacts {
            let rel = path
                .strip_prefix(&self.run_dir)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            records.push(ArtifactRecord {
                sha256: sha256_file(&path)?,
                path: rel,
            });
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for r in &records {
            h.update(r.path.as_bytes());
            h.update(b"\0");
            h.update(r.sha256.as_bytes());
            h.update(b"\n");
        }
        let marker = StageMarker {
            stage,
            config_hash: self.config_hash.clone(),
            upstream,
            artifacts: records,
            digest: hex::encode(h.finalize()),
            completed_at: now(),
        };
        write_json(&marker_path, &marker)?;
        self.touch_manifest(Some(&marker))?;
        log::info!("{}: done ({} artifacts)", stage.name(), marker.artifacts.len());
        Ok(StageOutcome::Completed)
    }

    /// Every stage in order; agent stages are skipped when precomputed agent
    /// scores are configured, and classification when it is disabled.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            let precomputed = self.config().paths.agent_scores.is_some();
            if precomputed && matches!(stage, Stage::Sample | Stage::RunAgent | Stage::Grade | Stage::Classify) {
                continue;
            }
            if stage == Stage::Classify && !self.config().difficulty.enabled {
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn touch_manifest(&self, completed: Option<&StageMarker>) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.run_dir).map_err(io_err(&self.run_dir))?;
        let path = self.run_dir.join("manifest.json");
        let mut manifest = if path.is_file() {
            read_json::<RunManifest>(&path)?
        } else {
            let mut seeds = BTreeMap::from([("root".to_string(), self.seed)]);
            for s in Stage::ALL {
                seeds.insert(s.name().to_string(), self.stage_seed(s));
            }
            let mut notes = vec!["unparseable agent answers are graded incorrect; per-exam counts in scores/exams.csv".to_string()];
            for d in self.config().agent.client.protocol_deviations() {
                notes.push(format!("agent protocol deviation: {d}"));
            }
            RunManifest {
                run_id: self.run_id.clone(),
                config_hash: self.config_hash.clone(),
                versions: BTreeMap::from([(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string())]),
                seeds,
                created_at: now(),
                updated_at: now(),
                stages: BTreeMap::new(),
                notes,
            }
        };
        manifest.updated_at = now();
        if let Some(m) = completed {
            manifest.stages.insert(
                m.stage.name().to_string(),
                StageEntry {
                    digest: m.digest.clone(),
                    completed_at: m.completed_at.clone(),
                },
            );
        }
        write_json(&path, &manifest)
    }

    /// Loads every input and reports what was found.
    pub fn validate(&self) -> Result<Vec<String>, PipelineError> {
        let as_config = |e: PipelineError| PipelineError::Config(e.to_string());
        let bank = self.load_bank().map_err(as_config)?;
        let scale = self.load_scale().map_err(as_config)?;
        let cohort = bank::load_cohort_stats(self.input(&self.config().paths.cohort)).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut lines = vec![
            format!("bank: {} questions over {} years, digest {}", bank.len(), bank.years().count(), bank.digest()),
            format!(
                "scale: pre 0..={} post 0..={}, concordance slope {:.4} intercept {:.2} max residual {:.2}",
                scale.pre.max_raw(),
                scale.post.max_raw(),
                scale.concordance.slope,
                scale.concordance.intercept,
                scale.concordance.max_abs_residual
            ),
            format!("cohort: {} rows", cohort.len()),
        ];
        for year in bank.years() {
            let format = bank.format(year)?;
            let (mcq, numeric) = bank.counts(year);
            if mcq < format.mcq_count || numeric < format.numeric_count {
                return Err(PipelineError::Config(format!(
                    "bank year {year} has {mcq}/{numeric} questions, exams need {}/{}",
                    format.mcq_count, format.numeric_count
                )));
            }
        }
        if let Some(p) = &self.config().agent.mock_accuracy {
            let acc = agent::load_accuracy_file(&self.input(p)).map_err(|e| PipelineError::Config(e.to_string()))?;
            if let Some(y) = bank.years().find(|y| !acc.contains_key(y)) {
                return Err(PipelineError::Config(format!("agent.mock_accuracy has no entry for {y}")));
            }
            lines.push(format!("mock accuracy: {} years", acc.len()));
        }
        if let Some(p) = &self.config().paths.agent_scores {
            let scores = load_agent_scores(&self.input(p)).map_err(as_config)?;
            lines.push(format!("precomputed agent scores: {} exams", scores.len()));
        }
        lines.push(format!("config hash {}", self.config_hash));
        Ok(lines)
    }

    fn exam_sets(&self) -> Result<Vec<ExamSet>, PipelineError> {
        let marker = self.marker(Stage::Sample)?.ok_or(PipelineError::MissingStage {
            missing: Stage::Sample.name(),
            needed_by: "exam loading",
        })?;
        marker
            .artifacts
            .iter()
            .map(|a| Ok(ExamSet::read_jsonl(&self.run_dir.join(&a.path))?))
            .collect()
    }

    fn do_sample(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let bank = self.load_bank()?;
        let dir = self.stage_dir(Stage::Sample);
        let seed = self.stage_seed(Stage::Sample);
        let mut out = Vec::new();
        for year in bank.years() {
            let set = sampler::sample_exam_set(&bank, year, self.config().sampler.count, seed)?;
            let path = dir.join(format!("{year}.jsonl"));
            set.write_jsonl(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    fn transport(&self, bank: &QuestionBank) -> Result<Box<dyn Transport>, PipelineError> {
        let a = &self.config().agent;
        Ok(match a.mode {
            AgentMode::Mock => {
                let path = a
                    .mock_accuracy
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("agent.mock_accuracy is required in mock mode".into()))?;
                let accuracy = agent::load_accuracy_file(&self.input(path))?;
                Box::new(MockTransport::with_year_accuracy(bank, self.stage_seed(Stage::RunAgent), &accuracy)?)
            }
            AgentMode::Live => Box::new(HttpTransport::new(&a.client)?),
        })
    }

    fn do_run_agent(&self, upstream: &BTreeMap<String, String>) -> Result<Vec<PathBuf>, PipelineError> {
        let bank = self.load_bank()?;
        let dir = self.stage_dir(Stage::RunAgent);
        // Responses from a different exam draw are useless; start over in that case.
        let pin = dir.join("_exams.json");
        let stale = pin.is_file() && read_json::<BTreeMap<String, String>>(&pin)? != *upstream;
        if stale || (!self.resume && dir.read_dir().map_err(io_err(&dir))?.next().is_some()) {
            log::warn!("discarding stored responses");
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        write_json(&pin, upstream)?;

        let transport = self.transport(&bank)?;
        let agent = Agent::new(self.config().agent.client.clone(), transport);
        let store = ResponseStore::new(&dir);
        let mut out = Vec::new();
        let mut failures = Vec::new();
        let mut exams = 0;
        for set in self.exam_sets()? {
            for exam in &set.exams {
                exams += 1;
                match agent.run_exam(exam, &bank, &store) {
                    Ok(_) => out.push(store.path(exam.year, &exam.exam_id)),
                    Err(e) => {
                        log::error!("{e}");
                        failures.push(e.to_string());
                    }
                }
            }
            log::info!("run-agent: year {} done", set.year);
        }
        if let Some(first) = failures.first() {
            return Err(PipelineError::AgentRun {
                failed: failures.len(),
                exams,
                first: first.clone(),
            });
        }
        Ok(out)
    }

    fn do_grade(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let bank = self.load_bank()?;
        let scale = self.load_scale()?;
        let store = ResponseStore::new(self.stage_dir(Stage::RunAgent));
        let dir = self.stage_dir(Stage::Grade);

        let mut all_scores: Vec<(ExamScore, f64, usize)> = Vec::new();
        let mut summaries = Vec::new();
        let graded_path = dir.join("graded.jsonl");
        let mut graded = fs::File::create(&graded_path).map_err(io_err(&graded_path))?;
        for set in self.exam_sets()? {
            let mut year_scores = Vec::new();
            for exam in &set.exams {
                let mut seen = BTreeSet::new();
                let responses: Vec<_> = store
                    .load(exam.year, &exam.exam_id)?
                    .into_iter()
                    .filter(|r| exam.question_ids.contains(&r.question_id) && seen.insert(r.question_id.clone()))
                    .collect();
                let items = judge::grade_exam(exam, &responses, &bank)?;
                for item in &items {
                    let rec = GradedRecord {
                        year: exam.year,
                        exam_id: exam.exam_id.clone(),
                        item: item.clone(),
                    };
                    writeln!(graded, "{}", serde_json::to_string(&rec).expect("record serializes"))
                        .map_err(io_err(&graded_path))?;
                }
                let unparseable = items.iter().filter(|i| i.parsed == judge::ParsedAnswer::Unparseable).count();
                let score = judge::score_items(&exam.exam_id, exam.year, &items);
                let scaled = scale.common_scale(exam.year, score.n_correct as i64)?;
                year_scores.push(score.clone());
                all_scores.push((score, scaled, unparseable));
            }
            summaries.push(judge::aggregate_year(&year_scores)?);
        }
        drop(graded);

        let exams_path = dir.join("exams.csv");
        let mut w = csv::Writer::from_path(&exams_path)?;
        w.write_record([
            "year",
            "exam_id",
            "n_correct",
            "total",
            "proportion",
            "mcq_correct",
            "numeric_correct",
            "scaled",
            "unparseable",
        ])?;
        for (s, scaled, unparseable) in &all_scores {
            w.write_record([
                s.year.to_string(),
                s.exam_id.clone(),
                s.n_correct.to_string(),
                s.total.to_string(),
                format!("{:.6}", s.proportion),
                s.mcq_correct.to_string(),
                s.numeric_correct.to_string(),
                format!("{scaled:.4}"),
                unparseable.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(&exams_path))?;
        let unparseable: usize = all_scores.iter().map(|s| s.2).sum();
        if unparseable > 0 {
            log::warn!("{unparseable} agent answers could not be parsed and were graded incorrect");
        }
        let summary_path = dir.join("summary.csv");
        judge::write_summary(&summary_path, &summaries)?;
        Ok(vec![exams_path, summary_path, graded_path])
    }

    fn agent_scores(&self) -> Result<Vec<AgentScore>, PipelineError> {
        match &self.config().paths.agent_scores {
            Some(p) => load_agent_scores(&self.input(p)),
            None => load_agent_scores(&self.stage_dir(Stage::Grade).join("exams.csv")),
        }
    }

    fn do_estimate(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let cfg = &self.config().estimator;
        let dir = self.stage_dir(Stage::Estimate);
        let scale = self.load_scale()?;
        let cohort = scale.map_cohort(&bank::load_cohort_stats(self.input(&self.config().paths.cohort))?)?;
        let exclude: BTreeSet<u16> = cfg.exclude_years.iter().copied().collect();
        let agent_scores: Vec<AgentScore> = self
            .agent_scores()?
            .into_iter()
            .filter(|a| !exclude.contains(&a.year))
            .collect();
        let agent_years: BTreeSet<u16> = agent_scores.iter().map(|a| a.year).collect();
        let seed = self.stage_seed(Stage::Estimate);

        let mut cells: BTreeMap<(Level, Group), Vec<CohortStats>> = BTreeMap::new();
        for row in cohort {
            if (cfg.levels.is_empty() || cfg.levels.contains(&row.level))
                && (cfg.groups.is_empty() || cfg.groups.contains(&row.group))
                && !exclude.contains(&row.year)
            {
                cells.entry((row.level, row.group)).or_default().push(row);
            }
        }

        let agent_posterior = if cfg.bayes {
            let mut samples: BTreeMap<(u16, Role), Vec<f64>> = BTreeMap::new();
            for a in &agent_scores {
                samples.entry((a.year, Role::Agent)).or_default().push(a.scaled);
            }
            let fit = estimator::fit_posterior(&samples, &cfg.prior, &cfg.mcmc, seeds::derive(seed, "agent"));
            if let Err(e) = &fit {
                log::warn!("agent posterior: {e}; Bayesian estimates skipped");
            }
            Some(fit.map_err(|e| format!("agent posterior: {e}")))
        } else {
            None
        };

        let mut results: Vec<CellEstimate> = Vec::new();
        let mut cell_reports = Vec::new();
        let mut gaps = Vec::new();
        let mut first_error = None;
        for ((level, group), rows) in &cells {
            let student_years: BTreeSet<u16> = rows.iter().map(|r| r.year).collect();
            for y in student_years.difference(&agent_years) {
                log::warn!("{level}/{group}: no agent scores for {y}; year dropped");
                gaps.push(serde_json::json!({"level": level, "group": group, "year": y, "reason": "no agent scores"}));
            }
            let rows: Vec<CohortStats> = rows.iter().filter(|r| agent_years.contains(&r.year)).cloned().collect();
            let agents: Vec<AgentScore> = agent_scores
                .iter()
                .filter(|a| student_years.contains(&a.year))
                .cloned()
                .collect();

            let mut report = serde_json::Map::new();
            report.insert("level".into(), serde_json::json!(level));
            report.insert("group".into(), serde_json::json!(group));
            let mut outcomes: Vec<(&str, Result<AdsEstimate, String>)> = Vec::new();
            match estimator::build_deltas(&rows, &agents, cfg.baseline_year, &exclude) {
                Ok(deltas) => {
                    outcomes.push(("ols", estimator::ads_ols_with(&deltas, cfg.se_kind).map_err(|e| e.to_string())));
                    outcomes.push(("meandiff", estimator::ads_mean_diff(&deltas).map_err(|e| e.to_string())));
                }
                Err(e) => {
                    report.insert("meandiff".into(), serde_json::json!({"status": "error", "error": e.to_string()}));
                    outcomes.push(("ols", Err(e.to_string())));
                }
            }

            if let Some(Err(msg)) = &agent_posterior {
                outcomes.push(("bayes", Err(msg.clone())));
            }
            if let Some(Ok(agent_post)) = &agent_posterior {
                let cell_seed = seeds::derive(seed, &format!("{level}/{group}"));
                let student_post = if *level == Level::National {
                    estimator::fit_posterior_population(&rows, &cfg.monte_carlo, cell_seed)
                } else {
                    let mut samples: BTreeMap<(u16, Role), Vec<f64>> = BTreeMap::new();
                    for r in &rows {
                        samples.entry((r.year, Role::Student)).or_default().push(r.mean_score);
                    }
                    estimator::fit_posterior(&samples, &cfg.prior, &cfg.mcmc, cell_seed)
                };
                let bayes = student_post.and_then(|sp| {
                    report.insert("student_posterior".into(), serde_json::json!(diagnostics_of(&sp)));
                    estimator::ads_bayes(&sp, agent_post, cfg.baseline_year).map(|(e, _)| e)
                });
                let bayes = bayes.map_err(|e| e.to_string());
                outcomes.push(("bayes", bayes));
            }

            for (method, outcome) in outcomes {
                match outcome {
                    Ok(mut est) => {
                        est.excluded_years = cfg.exclude_years.clone();
                        report.insert(
                            method.into(),
                            serde_json::json!({"status": "ok", "residual_df": est.residual_df, "residual_sigma": est.residual_sigma}),
                        );
                        results.push(CellEstimate {
                            level: *level,
                            group: *group,
                            estimate: est,
                        });
                    }
                    Err(e) => {
                        log::warn!("{level}/{group} {method}: {e}");
                        report.insert(method.into(), serde_json::json!({"status": "error", "error": e.to_string()}));
                        first_error.get_or_insert_with(|| format!("{level}/{group} {method}: {e}"));
                    }
                }
            }
            cell_reports.push(serde_json::Value::Object(report));
        }

        if results.is_empty() {
            return Err(PipelineError::AllCellsFailed(first_error.unwrap_or_else(|| "no cohort cells".into())));
        }

        let mut out = Vec::new();
        let mut by_method: BTreeMap<&str, Vec<(String, &AdsEstimate)>> = BTreeMap::new();
        for c in &results {
            let method = c.estimate.method.tag();
            let path = dir.join(format!("{method}_{}_{}.csv", c.level, c.group));
            c.estimate.write_csv(&path)?;
            out.push(path);
            by_method
                .entry(method)
                .or_default()
                .push((format!("{}_{}", c.level, c.group), &c.estimate));
        }
        for (method, columns) in &by_method {
            let path = dir.join(format!("table_{method}.csv"));
            estimator::write_wide_table(&path, columns)?;
            out.push(path);
        }
        let all_path = dir.join("estimates.json");
        write_json(&all_path, &results)?;
        out.push(all_path);

        let diag_path = dir.join("diagnostics.json");
        write_json(
            &diag_path,
            &serde_json::json!({
                "config_hash": self.config_hash,
                "seed": seed,
                "baseline_year": cfg.baseline_year,
                "exclude_years": cfg.exclude_years,
                "agent_posterior": match &agent_posterior {
                    Some(Ok(p)) => serde_json::json!(diagnostics_of(p)),
                    Some(Err(e)) => serde_json::json!({"status": "error", "error": e}),
                    None => serde_json::Value::Null,
                },
                "cells": cell_reports,
                "gaps": gaps,
            }),
        )?;
        out.push(diag_path);
        Ok(out)
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>, PipelineError> {
        let d = &self.config().difficulty;
        Ok(match d.embedder {
            EmbedderKind::Mock => Box::new(MockEmbedder::new(d.mock_dim, seeds::derive(self.seed, "embed"))),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(d.embed.clone())?),
        })
    }

    fn do_classify(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let d = &self.config().difficulty;
        let dir = self.stage_dir(Stage::Classify);
        let bank = self.load_bank()?;
        let seed = self.stage_seed(Stage::Classify);
        let embedder = self.embedder()?;
        let cache = EmbeddingCache::new(self.run_dir.join("embeddings"));
        let questions: Vec<_> = bank.iter().collect();
        let vectors = difficulty::embed_questions(&questions, embedder.as_ref(), Some(&cache))?;
        let features: HashMap<String, Vec<f64>> = questions
            .iter()
            .map(|q| {
                let f = difficulty::features(q, vectors[&q.id].clone());
                (q.id.clone(), f.values())
            })
            .collect();
        let labeled: Vec<difficulty::LabeledRow> = questions
            .iter()
            .filter_map(|q| {
                q.difficulty_rating
                    .and_then(DifficultyClass::from_rating)
                    .map(|class| difficulty::LabeledRow {
                        question_id: q.id.clone(),
                        features: features[&q.id].clone(),
                        class,
                    })
            })
            .collect();
        let (train, test) = difficulty::split_balanced(&labeled, d.train_fraction, seeds::derive(seed, "split"))?;
        let forest = difficulty::train_forest(&train, &d.forest, seeds::derive(seed, "forest"))?;
        let eval = difficulty::evaluate(&forest, &test);
        let labels = difficulty::label_questions(&bank, &forest, &features)?;

        let graded_path = self.stage_dir(Stage::Grade).join("graded.jsonl");
        let file = fs::File::open(&graded_path).map_err(io_err(&graded_path))?;
        let mut graded = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&graded_path))?;
            let rec: GradedRecord = serde_json::from_str(&line).map_err(|source| PipelineError::Json {
                path: graded_path.display().to_string(),
                source,
            })?;
            graded.push((rec.year, rec.item));
        }
        let trends = difficulty::class_trends(&labels, &graded);

        let counts = difficulty::rated_class_counts(&bank);
        let rated: usize = counts.iter().sum();
        let predictions = dir.join("predictions.csv");
        difficulty::write_predictions(&predictions, &labels)?;
        let trends_path = dir.join("trends.csv");
        difficulty::write_trends(&trends_path, &trends)?;
        let eval_path = dir.join("evaluation.json");
        write_json(
            &eval_path,
            &serde_json::json!({
                "embedding_model": embedder.model(),
                "confusion_predicted_by_truth": eval.confusion,
                "accuracy": eval.accuracy,
                "test_size": eval.total,
                "train_size": train.len(),
                "oob_accuracy": forest.oob_accuracy,
                "rated_counts": {"easy": counts[0], "medium": counts[1], "hard": counts[2]},
                "rated_shares": counts.iter().map(|&c| c as f64 / rated.max(1) as f64).collect::<Vec<_>>(),
                "forest": d.forest,
            }),
        )?;
        Ok(vec![predictions, trends_path, eval_path])
    }

    fn do_report(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self.stage_dir(Stage::Report);
        let mut stages = serde_json::Map::new();
        for up in self.upstream(Stage::Report) {
            let m = self.marker(up)?.ok_or(PipelineError::MissingStage {
                missing: up.name(),
                needed_by: Stage::Report.name(),
            })?;
            stages.insert(
                up.name().into(),
                serde_json::json!({
                    "artifacts": m.artifacts.iter().map(|a| a.path.clone()).collect::<Vec<_>>(),
                }),
            );
        }
        let results: Vec<CellEstimate> = read_json(&self.stage_dir(Stage::Estimate).join("estimates.json"))?;

        let series_path = dir.join("series.csv");
        let mut w = csv::Writer::from_path(&series_path)?;
        w.write_record(["method", "level", "group", "year", "estimate", "se", "ci_lo", "ci_hi"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut tables: BTreeMap<String, serde_json::Value> = BTreeMap::new();
        for c in &results {
            for y in &c.estimate.years {
                w.write_record([
                    c.estimate.method.tag().to_string(),
                    c.level.to_string(),
                    c.group.to_string(),
                    y.year.to_string(),
                    format!("{:.6}", y.beta),
                    opt(y.se),
                    opt(y.ci_lo),
                    opt(y.ci_hi),
                ])?;
            }
            tables.insert(
                format!("{}_{}_{}", c.estimate.method.tag(), c.level, c.group),
                serde_json::json!(c.estimate.years),
            );
        }
        w.flush().map_err(io_err(&series_path))?;

        let mut report = serde_json::json!({
            "config_hash": self.config_hash,
            "stages": stages,
            "estimates": tables,
        });
        let summary = self.stage_dir(Stage::Grade).join("summary.csv");
        if summary.is_file() && self.config().paths.agent_scores.is_none() {
            let mut reader = csv::Reader::from_path(&summary)?;
            let rows: Vec<BTreeMap<String, String>> = reader.deserialize().collect::<Result<_, _>>()?;
            report["agent_summary"] = serde_json::json!(rows);
        }
        if self.config().difficulty.enabled && stages.contains_key(Stage::Classify.name()) {
            let eval: serde_json::Value = read_json(&self.stage_dir(Stage::Classify).join("evaluation.json"))?;
            report["difficulty"] = eval;
        }
        let report_path = dir.join("report.json");
        write_json(&report_path, &report)?;
        Ok(vec![report_path, series_path])
    }
}

fn diagnostics_of(post: &PosteriorDraws) -> Vec<serde_json::Value> {
    post.groups
        .iter()
        .map(|g| {
            let d: Option<&Diagnostics> = g.diagnostics.as_ref();
            serde_json::json!({
                "year": g.year,
                "role": g.role,
                "source": g.source,
                "draws": g.mu.len(),
                "seed": g.seed,
                "rhat_mu": d.map(|d| d.rhat_mu),
                "rhat_sigma": d.map(|d| d.rhat_sigma),
                "ess_mu": d.map(|d| d.ess_mu),
                "ess_sigma": d.map(|d| d.ess_sigma),
                "extensions": d.map(|d| d.extensions),
                "acceptance_rate": d.map(|d| d.acceptance_rate),
            })
        })
        .collect()
}

/// True when an estimate of `method` exists for the cell.
pub fn has_method(results: &[AdsEstimate], method: Method) -> bool {
    results.iter().any(|e| e.method == method)
}
