//! Question difficulty classification.
//!
//! Questions are embedded, a section-progress scalar is appended, and a
//! random forest trained on rated questions predicts Easy / Medium / Hard for
//! unrated ones. Per-class agent correct rates are then tracked by year.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{post_json, RetryPolicy};
use crate::bank::{Question, QuestionBank};
use crate::judge::GradedItem;
use crate::seeds;

#[derive(Debug, Error)]
pub enum DifficultyError {
    #[error("embedding transport failed: {0}")]
    Transport(String),
    #[error("embedding dimension {got} differs from {expected} used earlier in this run")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class {0} has no labelled examples")]
    ClassMissing(DifficultyClass),
    #[error("training set is empty")]
    EmptyTraining,
    #[error("environment variable {0} with the API key is not set")]
    MissingCredential(String),
    #[error("feature length {got} differs from {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DifficultyError + '_ {
    move |source| DifficultyError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DifficultyClass {
    Easy,
    Medium,
    Hard,
}

impl DifficultyClass {
    pub const ALL: [DifficultyClass; 3] = [DifficultyClass::Easy, DifficultyClass::Medium, DifficultyClass::Hard];

    /// Ratings 1-2 are Easy, 3 is Medium and 4-5 are Hard.
    pub fn from_rating(rating: u8) -> Option<Self> {
        match rating {
            1 | 2 => Some(DifficultyClass::Easy),
            3 => Some(DifficultyClass::Medium),
            4 | 5 => Some(DifficultyClass::Hard),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl fmt::Display for DifficultyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyClass::Easy => "easy",
            DifficultyClass::Medium => "medium",
            DifficultyClass::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub question_id: String,
    pub embedding: Vec<f32>,
    pub progress: f64,
}

impl FeatureVector {
    /// Embedding followed by the progress scalar.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.embedding.iter().map(|&x| x as f64).collect();
        v.push(self.progress);
        v
    }
}

pub trait Embedder: Send + Sync {
    fn model(&self) -> &str;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, DifficultyError>;
}

/// Offline embedder: every lowercase alphanumeric token gets a seeded
/// pseudo-random direction; a text is the normalized sum of its tokens.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
    model: String,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEmbedder {
            dim,
            seed,
            model: format!("mock-bow-{dim}-{seed:016x}"),
        }
    }

    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, token));
        for v in out.iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            self.token_vector(token, &mut acc);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        acc.into_iter().map(|x| x as f32).collect()
    }
}

impl Embedder for MockEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, DifficultyError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub endpoint_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub batch_size: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            endpoint_url: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-large".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            batch_size: 64,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

/// Embeddings endpoint client: `{"model", "input": [...]}` in, `data[i].embedding` out.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    config: EmbedConfig,
    api_key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(config: EmbedConfig) -> Result<Self, DifficultyError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .ok()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| DifficultyError::MissingCredential(var.clone()))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpEmbedder { agent, config, api_key })
    }

    fn request(&self, batch: &[&str]) -> Result<Vec<Vec<f32>>, DifficultyError> {
        let body = serde_json::json!({ "model": self.config.model, "input": batch });
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match post_json(&self.agent, &self.config.endpoint_url, self.api_key.as_deref(), &body) {
                Ok(reply) if (200..300).contains(&reply.status) => return parse_embeddings(&reply.body, batch.len()),
                Ok(reply) if reply.status == 429 || reply.status >= 500 => last = format!("status {}", reply.status),
                Ok(reply) => return Err(DifficultyError::Transport(format!("status {}: {}", reply.status, reply.body))),
                Err(e) => last = e,
            }
            if attempt < attempts {
                let wait = self.config.retry.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait.min(self.config.retry.max_backoff_ms)));
            }
        }
        Err(DifficultyError::Transport(last))
    }
}

fn parse_embeddings(body: &str, expected: usize) -> Result<Vec<Vec<f32>>, DifficultyError> {
    #[derive(Deserialize)]
    struct Item {
        index: usize,
        embedding: Vec<f32>,
    }
    #[derive(Deserialize)]
    struct Body {
        data: Vec<Item>,
    }
    let mut parsed: Body = serde_json::from_str(body).map_err(|e| DifficultyError::Transport(e.to_string()))?;
    if parsed.data.len() != expected {
        return Err(DifficultyError::Transport(format!(
            "expected {expected} embeddings, got {}",
            parsed.data.len()
        )));
    }
    parsed.data.sort_by_key(|i| i.index);
    Ok(parsed.data.into_iter().map(|i| i.embedding).collect())
}

impl Embedder for HttpEmbedder {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, DifficultyError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}

/// Vectors stored as `<root>/<model>/<sha256(text)>.vec`: a little-endian
/// `u32` length followed by that many little-endian `f32` values.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        EmbeddingCache { root: root.into() }
    }

    pub fn path(&self, model: &str, text: &str) -> PathBuf {
        let hash = hex::encode(Sha256::digest(text.as_bytes()));
        self.root.join(model).join(format!("{hash}.vec"))
    }

    pub fn get(&self, model: &str, text: &str) -> Result<Option<Vec<f32>>, DifficultyError> {
        let path = self.path(model, text);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        if bytes.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 4 + 4 * len {
            log::warn!("{}: truncated cache entry ignored", path.display());
            return Ok(None);
        }
        Ok(Some(
            bytes[4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ))
    }

    pub fn put(&self, model: &str, text: &str, vector: &[f32]) -> Result<(), DifficultyError> {
        let path = self.path(model, text);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut bytes = Vec::with_capacity(4 + 4 * vector.len());
        bytes.extend_from_slice(&(vector.len() as u32).to_le_bytes());
        for v in vector {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("vec.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

/// One vector per question, served from the cache where possible.
pub fn embed_questions(
    questions: &[&Question],
    embedder: &dyn Embedder,
    cache: Option<&EmbeddingCache>,
) -> Result<BTreeMap<String, Vec<f32>>, DifficultyError> {
    let mut out = BTreeMap::new();
    let mut missing: Vec<&Question> = Vec::new();
    for q in questions {
        match cache.map(|c| c.get(embedder.model(), &q.text)).transpose()?.flatten() {
            Some(v) => {
                out.insert(q.id.clone(), v);
            }
            None => missing.push(q),
        }
    }
    if !missing.is_empty() {
        let texts: Vec<&str> = missing.iter().map(|q| q.text.as_str()).collect();
        let vectors = embedder.embed(&texts)?;
        for (q, v) in missing.iter().zip(vectors) {
            if let Some(c) = cache {
                c.put(embedder.model(), &q.text, &v)?;
            }
            out.insert(q.id.clone(), v);
        }
    }
    let mut dim = None;
    for v in out.values() {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(DifficultyError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn features(question: &Question, embedding: Vec<f32>) -> FeatureVector {
    FeatureVector {
        question_id: question.id.clone(),
        embedding,
        progress: question.progress(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub question_id: String,
    pub features: Vec<f64>,
    pub class: DifficultyClass,
}

/// Every class contributes `floor(train_fraction * smallest class size)` rows
/// to training, chosen by a seeded shuffle; all remaining rows form the test set.
pub fn split_balanced(
    labeled: &[LabeledRow],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledRow>, Vec<LabeledRow>), DifficultyError> {
    let mut by_class: [Vec<&LabeledRow>; 3] = Default::default();
    for row in labeled {
        by_class[row.class.index()].push(row);
    }
    for class in DifficultyClass::ALL {
        if by_class[class.index()].is_empty() {
            return Err(DifficultyError::ClassMissing(class));
        }
    }
    let smallest = by_class.iter().map(Vec::len).min().expect("three classes");
    let per_class = (train_fraction.clamp(0.0, 1.0) * smallest as f64).floor() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in DifficultyClass::ALL {
        let rows = &mut by_class[class.index()];
        rows.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("split/{class}")));
        let chosen = sample_indices(&mut rng, rows.len(), rows.len()).into_vec();
        for (rank, i) in chosen.into_iter().enumerate() {
            if rank < per_class {
                train.push(rows[i].clone());
            } else {
                test.push(rows[i].clone());
            }
        }
    }
    train.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    test.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means the square root of the dimension.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 200,
            max_depth: 12,
            min_leaf: 3,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        votes: [u32; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

/// Index of the largest count; ties go to the lowest index.
fn plurality(votes: &[u32; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    best
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> DifficultyClass {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { votes } => return DifficultyClass::from_index(plurality(votes)),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

fn gini(counts: &[u32; 3], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    config: &'a ForestConfig,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn counts(&self, rows: &[usize]) -> [u32; 3] {
        let mut c = [0u32; 3];
        for &r in rows {
            c[self.y[r]] += 1;
        }
        c
    }

    fn build(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let counts = self.counts(rows);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { votes: counts });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.config.max_depth || rows.len() < 2 * self.config.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows, &counts) else {
            return id;
        };
        rows.sort_by(|&a, &b| {
            let la = self.x[a][feature] <= threshold;
            let lb = self.x[b][feature] <= threshold;
            lb.cmp(&la).then(a.cmp(&b))
        });
        let n_left = rows.iter().filter(|&&r| self.x[r][feature] <= threshold).count();
        let (left_rows, right_rows) = rows.split_at_mut(n_left);
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize], counts: &[u32; 3]) -> Option<(usize, f64)> {
        let n = rows.len() as u32;
        let parent = gini(counts, n);
        let dim = self.x[0].len();
        let min_leaf = self.config.min_leaf.max(1);
        let mut best: Option<(f64, usize, f64)> = None;
        let candidates = sample_indices(&mut self.rng, dim, self.mtry.min(dim)).into_vec();
        let mut order: Vec<usize> = rows.to_vec();
        for feature in candidates {
            order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]).then(a.cmp(&b)));
            let mut left = [0u32; 3];
            for k in 0..order.len() - 1 {
                left[self.y[order[k]]] += 1;
                let n_left = k + 1;
                let n_right = order.len() - n_left;
                let v = self.x[order[k]][feature];
                let next = self.x[order[k + 1]][feature];
                if v == next || n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let right = [counts[0] - left[0], counts[1] - left[1], counts[2] - left[2]];
                let weighted = (n_left as f64 * gini(&left, n_left as u32)
                    + n_right as f64 * gini(&right, n_right as u32))
                    / n as f64;
                let gain = parent - weighted;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, feature, v + (next - v) / 2.0));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub config: ForestConfig,
    pub seed: u64,
    pub dim: usize,
    /// Accuracy on rows left out of each tree's bootstrap sample.
    pub oob_accuracy: Option<f64>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> DifficultyClass {
        let mut votes = [0u32; 3];
        for t in &self.trees {
            votes[t.predict(x).index()] += 1;
        }
        DifficultyClass::from_index(plurality(&votes))
    }
}

/// Trains on rows sorted by question id, so the input order does not matter.
/// Tree `t` draws its bootstrap sample and feature subsets from
/// `derive(seed, "tree/t")`.
pub fn train_forest(train: &[LabeledRow], config: &ForestConfig, seed: u64) -> Result<Forest, DifficultyError> {
    if train.is_empty() {
        return Err(DifficultyError::EmptyTraining);
    }
    let mut rows: Vec<&LabeledRow> = train.iter().collect();
    rows.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let dim = rows[0].features.len();
    if let Some(bad) = rows.iter().find(|r| r.features.len() != dim) {
        return Err(DifficultyError::FeatureLength {
            expected: dim,
            got: bad.features.len(),
        });
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
    let y: Vec<usize> = rows.iter().map(|r| r.class.index()).collect();
    let n = x.len();
    let mtry = config
        .max_features
        .unwrap_or_else(|| (dim as f64).sqrt().round() as usize)
        .clamp(1, dim.max(1));

    let grown: Vec<(Tree, Vec<bool>)> = (0..config.trees.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("tree/{t}")));
            let mut in_bag = vec![false; n];
            let mut sample: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut builder = TreeBuilder {
                x: &x,
                y: &y,
                config,
                mtry,
                rng,
                nodes: Vec::new(),
            };
            builder.build(&mut sample, 0);
            (Tree { nodes: builder.nodes }, in_bag)
        })
        .collect();

    let mut oob_votes = vec![[0u32; 3]; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_votes[i][tree.predict(&x[i]).index()] += 1;
        }
    }
    let scored: Vec<bool> = oob_votes
        .iter()
        .zip(&y)
        .filter(|(v, _)| v.iter().sum::<u32>() > 0)
        .map(|(v, &truth)| plurality(v) == truth)
        .collect();
    let oob_accuracy = (!scored.is_empty()).then(|| scored.iter().filter(|&&c| c).count() as f64 / scored.len() as f64);

    Ok(Forest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        config: config.clone(),
        seed,
        dim,
        oob_accuracy,
    })
}

/// `confusion[predicted][truth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: [[u32; 3]; 3],
    pub accuracy: f64,
    pub total: u32,
}

impl Evaluation {
    pub fn from_confusion(confusion: [[u32; 3]; 3]) -> Self {
        let total: u32 = confusion.iter().flatten().sum();
        let trace: u32 = (0..3).map(|i| confusion[i][i]).sum();
        Evaluation {
            confusion,
            accuracy: if total == 0 { f64::NAN } else { trace as f64 / total as f64 },
            total,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (DifficultyClass, DifficultyClass)>) -> Self {
        let mut confusion = [[0u32; 3]; 3];
        for (predicted, truth) in pairs {
            confusion[predicted.index()][truth.index()] += 1;
        }
        Self::from_confusion(confusion)
    }
}

pub fn evaluate(forest: &Forest, test: &[LabeledRow]) -> Evaluation {
    Evaluation::from_pairs(test.iter().map(|r| (forest.predict(&r.features), r.class)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Rated,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionLabel {
    pub question_id: String,
    pub year: u16,
    pub class: DifficultyClass,
    pub source: LabelSource,
}

/// Rated questions keep their rating class; the rest are predicted.
pub fn label_questions(
    bank: &QuestionBank,
    forest: &Forest,
    features: &HashMap<String, Vec<f64>>,
) -> Result<Vec<QuestionLabel>, DifficultyError> {
    let mut out = Vec::with_capacity(bank.len());
    for q in bank.iter() {
        let (class, source) = match q.difficulty_rating.and_then(DifficultyClass::from_rating) {
            Some(c) => (c, LabelSource::Rated),
            None => {
                let x = features.get(&q.id).ok_or_else(|| DifficultyError::FeatureLength {
                    expected: forest.dim,
                    got: 0,
                })?;
                if x.len() != forest.dim {
                    return Err(DifficultyError::FeatureLength {
                        expected: forest.dim,
                        got: x.len(),
                    });
                }
                (forest.predict(x), LabelSource::Predicted)
            }
        };
        out.push(QuestionLabel {
            question_id: q.id.clone(),
            year: q.year,
            class,
            source,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTrend {
    pub year: u16,
    pub class: DifficultyClass,
    pub correct: usize,
    pub total: usize,
    /// Absent when the year has no graded items of this class.
    pub rate: Option<f64>,
    pub se: Option<f64>,
    /// Share of the year's bank questions in this class.
    pub question_share: Option<f64>,
}

/// Per-year, per-class correct rate over graded items with a binomial SE, and
/// the class composition of each year's questions.
pub fn class_trends(labels: &[QuestionLabel], graded: &[(u16, GradedItem)]) -> Vec<ClassTrend> {
    let by_id: HashMap<&str, &QuestionLabel> = labels.iter().map(|l| (l.question_id.as_str(), l)).collect();
    let mut tally: BTreeMap<u16, [(usize, usize); 3]> = BTreeMap::new();
    let mut share: BTreeMap<u16, [usize; 3]> = BTreeMap::new();
    for l in labels {
        share.entry(l.year).or_default()[l.class.index()] += 1;
    }
    for (year, item) in graded {
        let Some(label) = by_id.get(item.question_id.as_str()) else {
            log::warn!("graded item {} has no difficulty label", item.question_id);
            continue;
        };
        let cell = &mut tally.entry(*year).or_default()[label.class.index()];
        cell.1 += 1;
        if item.correct {
            cell.0 += 1;
        }
    }
    let years: std::collections::BTreeSet<u16> = tally.keys().chain(share.keys()).copied().collect();
    let mut out = Vec::new();
    for year in years {
        let cells = tally.get(&year).copied().unwrap_or_default();
        let counts = share.get(&year).copied().unwrap_or_default();
        let year_total: usize = counts.iter().sum();
        for class in DifficultyClass::ALL {
            let (correct, total) = cells[class.index()];
            let rate = (total > 0).then(|| correct as f64 / total as f64);
            out.push(ClassTrend {
                year,
                class,
                correct,
                total,
                rate,
                se: rate.map(|p| (p * (1.0 - p) / total as f64).sqrt()),
                question_share: (year_total > 0).then(|| counts[class.index()] as f64 / year_total as f64),
            });
        }
    }
    out
}

/// Class shares among rated questions, in Easy, Medium, Hard order.
pub fn rated_class_counts(bank: &QuestionBank) -> [usize; 3] {
    let mut counts = [0; 3];
    for q in bank.iter() {
        if let Some(c) = q.difficulty_rating.and_then(DifficultyClass::from_rating) {
            counts[c.index()] += 1;
        }
    }
    counts
}

pub fn write_predictions(path: &Path, labels: &[QuestionLabel]) -> Result<(), DifficultyError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["question_id", "class", "source"])?;
    for l in labels {
        let source = match l.source {
            LabelSource::Rated => "rated",
            LabelSource::Predicted => "predicted",
        };
        w.write_record([l.question_id.as_str(), &l.class.to_string(), source])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_trends(path: &Path, trends: &[ClassTrend]) -> Result<(), DifficultyError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["year", "class", "correct", "total", "rate", "se", "question_share"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for t in trends {
        w.write_record([
            t.year.to_string(),
            t.class.to_string(),
            t.correct.to_string(),
            t.total.to_string(),
            opt(t.rate),
            opt(t.se),
            opt(t.question_share),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Gaussian clusters around well separated random centroids, for testing.
pub fn synthetic_clusters(per_class: usize, dim: usize, separation: f64, noise: f64, seed: u64) -> Vec<LabeledRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let centroids: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(3 * per_class);
    for (c, centre) in centroids.iter().enumerate() {
        for i in 0..per_class {
            out.push(LabeledRow {
                question_id: format!("c{c}-{i:05}"),
                features: centre.iter().map(|m| m + noise * unit.sample(&mut rng)).collect(),
                class: DifficultyClass::from_index(c),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::QuestionType;

    #[test]
    fn rating_mapping_is_total_and_onto() {
        let mapped: Vec<_> = (1..=5).map(|r| DifficultyClass::from_rating(r).unwrap()).collect();
        assert_eq!(
            mapped,
            vec![
                DifficultyClass::Easy,
                DifficultyClass::Easy,
                DifficultyClass::Medium,
                DifficultyClass::Hard,
                DifficultyClass::Hard
            ]
        );
        assert!(DifficultyClass::from_rating(0).is_none());
        assert!(DifficultyClass::from_rating(6).is_none());
    }

    fn rows(counts: [usize; 3]) -> Vec<LabeledRow> {
        let mut out = Vec::new();
        for (c, &k) in counts.iter().enumerate() {
            for i in 0..k {
                out.push(LabeledRow {
                    question_id: format!("{c}-{i:04}"),
                    features: vec![c as f64, i as f64],
                    class: DifficultyClass::from_index(c),
                });
            }
        }
        out
    }

    #[test]
    fn balanced_split_counts() {
        let data = rows([310, 265, 205]);
        let (train, test) = split_balanced(&data, 0.8, 7).unwrap();
        for class in DifficultyClass::ALL {
            assert_eq!(train.iter().filter(|r| r.class == class).count(), 164);
        }
        assert_eq!(test.len(), 780 - 3 * 164);
        let (train2, test2) = split_balanced(&data, 0.8, 7).unwrap();
        assert_eq!((train, test), (train2, test2));
        assert!(matches!(
            split_balanced(&rows([3, 0, 2]), 0.8, 1),
            Err(DifficultyError::ClassMissing(DifficultyClass::Medium))
        ));
    }

    #[test]
    fn confusion_accuracy() {
        let e = Evaluation::from_confusion([[130, 15, 1], [17, 61, 23], [1, 4, 36]]);
        assert_eq!(e.total, 288);
        assert!((e.accuracy - 227.0 / 288.0).abs() < 1e-12);
        let perfect = Evaluation::from_pairs((0..10).map(|i| {
            let c = DifficultyClass::from_index(i % 3);
            (c, c)
        }));
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.confusion[0][1], 0);
        let lopsided = Evaluation::from_confusion([[0, 0, 0], [2, 3, 0], [0, 0, 5]]);
        assert_eq!(lopsided.accuracy, 0.8);
    }

    #[test]
    fn forest_separates_clusters() {
        let data = synthetic_clusters(120, 16, 4.0, 1.0, 3);
        let (train, test) = split_balanced(&data, 0.8, 3).unwrap();
        let cfg = ForestConfig { trees: 40, ..ForestConfig::default() };
        let forest = train_forest(&train, &cfg, 11).unwrap();
        let eval = evaluate(&forest, &test);
        assert!(eval.accuracy >= 0.95, "accuracy {}", eval.accuracy);
        assert!(forest.oob_accuracy.unwrap() > 0.9);
        assert!(forest.trees.iter().all(|t| t.depth() <= cfg.max_depth));
    }

    #[test]
    fn single_class_training() {
        let data: Vec<_> = rows([0, 12, 0]);
        let forest = train_forest(&data, &ForestConfig { trees: 5, ..ForestConfig::default() }, 1).unwrap();
        assert_eq!(forest.predict(&[0.0, 100.0]), DifficultyClass::Medium);
        assert!(matches!(
            train_forest(&[], &ForestConfig::default(), 1),
            Err(DifficultyError::EmptyTraining)
        ));
    }

    #[test]
    fn ties_go_to_the_easier_class() {
        assert_eq!(plurality(&[2, 2, 2]), 0);
        assert_eq!(plurality(&[0, 3, 3]), 1);
        assert_eq!(plurality(&[1, 0, 4]), 2);
    }

    #[test]
    fn training_order_does_not_matter() {
        let data = synthetic_clusters(30, 6, 1.0, 1.0, 9);
        let cfg = ForestConfig { trees: 15, ..ForestConfig::default() };
        let a = train_forest(&data, &cfg, 2).unwrap();
        let mut shuffled = data.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let b = train_forest(&shuffled, &cfg, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mock_embedder_and_cache() {
        let e = MockEmbedder::new(32, 5);
        let v = e.embed_one("Solve for x in 2x + 3 = 7");
        assert_eq!(v.len(), 32);
        assert_eq!(v, e.embed_one("solve for X in 2x + 3 = 7"));
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        assert!(cache.get("m", "t").unwrap().is_none());
        cache.put("m", "t", &v).unwrap();
        assert_eq!(cache.get("m", "t").unwrap().unwrap(), v);
        let bytes = std::fs::read(cache.path("m", "t")).unwrap();
        assert_eq!(&bytes[..4], &32u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 32 * 4);
    }

    struct Counting(std::sync::atomic::AtomicUsize, MockEmbedder);

    impl Embedder for Counting {
        fn model(&self) -> &str {
            self.1.model()
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, DifficultyError> {
            self.0.fetch_add(texts.len(), std::sync::atomic::Ordering::SeqCst);
            self.1.embed(texts)
        }
    }

    #[test]
    fn cached_questions_are_not_re_embedded() {
        let q = Question {
            id: "q1".into(),
            year: 2009,
            source_doc: "d".into(),
            section_index: 1,
            question_index: 4,
            section_length: 8,
            qtype: QuestionType::Numeric,
            calculator: crate::bank::Calculator::Allowed,
            text: "what is 2 plus 2".into(),
            options: vec![],
            answers: vec![crate::bank::Answer::Value(crate::bank::Number::Integer(4))],
            difficulty_rating: Some(1),
        };
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let emb = Counting(Default::default(), MockEmbedder::new(8, 1));
        let first = embed_questions(&[&q], &emb, Some(&cache)).unwrap();
        let second = embed_questions(&[&q], &emb, Some(&cache)).unwrap();
        assert_eq!(first, second);
        assert_eq!(emb.0.load(std::sync::atomic::Ordering::SeqCst), 1);
        let f = features(&q, first["q1"].clone());
        assert_eq!(f.values().len(), 9);
        assert_eq!(f.progress, 0.5);
    }

    #[test]
    fn trends_by_class() {
        let labels = vec![
            QuestionLabel { question_id: "a".into(), year: 2020, class: DifficultyClass::Easy, source: LabelSource::Predicted },
            QuestionLabel { question_id: "b".into(), year: 2020, class: DifficultyClass::Hard, source: LabelSource::Predicted },
        ];
        let item = |id: &str, correct| GradedItem {
            question_id: id.into(),
            qtype: crate::bank::QuestionType::Mcq,
            parsed: crate::judge::ParsedAnswer::Letter('A'),
            correct,
        };
        let graded = vec![(2020, item("a", true)), (2020, item("a", true)), (2020, item("b", false))];
        let t = class_trends(&labels, &graded);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].rate, Some(1.0));
        assert_eq!(t[1].rate, None);
        assert_eq!(t[2].rate, Some(0.0));
        assert_eq!(t[0].question_share, Some(0.5));
    }
}
