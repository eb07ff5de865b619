//! Experiment orchestration behind the `pico-icl` command line.
//!
//! Every command reads one TOML [`ExperimentConfig`]. Relative paths in the
//! config are resolved against the config file's directory. Outputs land in
//! `output_dir`:
//!
//! | command   | writes                                                        |
//! |-----------|---------------------------------------------------------------|
//! | `convert` | `instruct_train.jsonl`, `corpus_<split>.jsonl`, `convert_stats.json` |
//! | `index`   | `index.json`, `index_stats.json` (and embedding files when fetched) |
//! | `extract` | `predictions.jsonl`, `manifest.json`, `report.json`, `report.txt`, `gateway_stats.json` |
//! | `eval`    | `report.json`, `report.txt`                                   |
//! | `ablate`  | one `extract` directory per cell under `ablate/`, plus `ablation.csv` |

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, map_fine_to_coarse, BioTag, CorpusError, LabelScheme, LabeledSentence, Split};
use crate::demoindex::{
    align_embeddings, load_embeddings, random_select, write_embeddings, DemoEntry, EmbeddingVector, HnswIndex,
    HnswParams, IndexError, IndexStats,
};
use crate::evalkit::{count_sentence, macro_metrics, CountTable, EvalError, MatchMode, MetricsReport};
use crate::extractparse::{
    audit_sentence, parse_extractions, predict_from_text, AlignedPrediction, AuditFinding, Extraction,
};
use crate::instructgen::{sentence_to_record, write_dataset, DatasetError, InstructRecord, DEFAULT_TASK_DESCRIPTION};
use crate::llmgateway::{
    Backend, CachedGateway, EmbeddingClient, EndpointConfig, GatewayError, GatewayStats, GenerationRequest,
    HttpBackend, MockOracle,
};
use crate::promptkit::{assemble_prompt_checked, PromptError, PromptSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl RunError {
    /// Process exit status: 1 for usage and configuration problems, 2 for
    /// data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Published dataset settings: default shot count and label granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetPreset {
    EbmNlp,
    EbmNlpH,
    EbmNlpRev,
    EbmComet,
}

impl DatasetPreset {
    pub fn default_k(self) -> usize {
        match self {
            DatasetPreset::EbmNlp => 3,
            DatasetPreset::EbmNlpH => 4,
            DatasetPreset::EbmNlpRev | DatasetPreset::EbmComet => 9,
        }
    }

    pub fn default_scheme(self) -> SchemeChoice {
        match self {
            DatasetPreset::EbmNlpH | DatasetPreset::EbmNlpRev => SchemeChoice::Fine,
            DatasetPreset::EbmNlp | DatasetPreset::EbmComet => SchemeChoice::Coarse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    /// Only `Participants`, `Interventions`, `Outcomes`.
    #[default]
    Coarse,
    /// Fine sub-types in the corpus, mapped to coarse for evaluation.
    Fine,
}

impl SchemeChoice {
    pub fn scheme(self) -> LabelScheme {
        match self {
            SchemeChoice::Coarse => LabelScheme::coarse_only(),
            SchemeChoice::Fine => LabelScheme::pico(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoLabels {
    #[default]
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// `.jsonl` files are record files, anything else CoNLL.
    #[default]
    Auto,
    Conll,
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeChoice>,
    #[serde(default)]
    pub demo_labels: DemoLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Knn,
    Random,
    ZeroShot,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Knn => "knn",
            Strategy::Random => "random",
            Strategy::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knn" => Ok(Strategy::Knn),
            "random" => Ok(Strategy::Random),
            "zero_shot" | "zero-shot" => Ok(Strategy::ZeroShot),
            other => Err(format!("unknown strategy `{other}` (expected knn, random or zero_shot)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { strategy: Strategy::Knn, k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    /// When set, `index` fills missing embedding files from this endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<EmbeddingEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEndpoint {
    pub model: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    /// Answers with the gold annotation of the test sentence.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    /// Serve only from the cache; misses become error rows.
    pub offline: bool,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Http,
            model: "xz97/AlpaCare-llama2-7b".into(),
            temperature: 0.0,
            max_tokens: 256,
            seed: None,
            cache_dir: None,
            max_in_flight: 4,
            offline: false,
            endpoint: EndpointConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetPreset>,
    pub corpus: CorpusConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_description_file: Option<PathBuf>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingsConfig>,
    #[serde(default)]
    pub hnsw: HnswParams,
    #[serde(default)]
    pub gateway: GatewayConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
    #[serde(default)]
    pub match_mode: MatchMode,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| RunError::Usage(format!("invalid config: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(|e| RunError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.train);
        fix(&mut self.corpus.test);
        if let Some(v) = &mut self.corpus.validation {
            fix(v);
        }
        if let Some(e) = &mut self.embeddings {
            fix(&mut e.train);
            fix(&mut e.test);
        }
        if let Some(t) = &mut self.task_description_file {
            fix(t);
        }
        if let Some(c) = &mut self.gateway.cache_dir {
            fix(c);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let k = self.selection.k;
        match self.selection.strategy {
            Strategy::ZeroShot if k.is_some_and(|k| k != 0) => {
                return Err(RunError::Usage("zero_shot selection requires k = 0".into()));
            }
            Strategy::Knn if self.embeddings.is_none() && self.k() != 0 => {
                return Err(RunError::Usage("knn selection requires an [embeddings] section".into()));
            }
            Strategy::Knn | Strategy::Random if k.is_none() && self.dataset.is_none() => {
                return Err(RunError::Usage("selection.k is required when no dataset preset is given".into()));
            }
            _ => {}
        }
        if self.task_description.is_some() && self.task_description_file.is_some() {
            return Err(RunError::Usage("give task_description or task_description_file, not both".into()));
        }
        if self.gateway.max_in_flight == 0 {
            return Err(RunError::Usage("gateway.max_in_flight must be at least 1".into()));
        }
        if self.gateway.temperature.is_nan() || self.gateway.temperature < 0.0 {
            return Err(RunError::Usage("gateway.temperature must be non-negative".into()));
        }
        self.hnsw.validate().map_err(|e| RunError::Usage(e.to_string()))
    }

    /// Shot count after applying the dataset preset.
    pub fn k(&self) -> usize {
        match self.selection.strategy {
            Strategy::ZeroShot => 0,
            _ => self.selection.k.or(self.dataset.map(DatasetPreset::default_k)).unwrap_or(0),
        }
    }

    pub fn scheme_choice(&self) -> SchemeChoice {
        self.corpus.scheme.or(self.dataset.map(DatasetPreset::default_scheme)).unwrap_or_default()
    }

    pub fn task_description(&self) -> Result<String, RunError> {
        if let Some(path) = &self.task_description_file {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            return Ok(text.trim_end().to_string());
        }
        Ok(self.task_description.clone().unwrap_or_else(|| DEFAULT_TASK_DESCRIPTION.to_string()))
    }

    fn cache_dir(&self) -> PathBuf {
        self.gateway.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

fn is_records(path: &Path, format: CorpusFormat) -> bool {
    match format {
        CorpusFormat::Records => true,
        CorpusFormat::Conll => false,
        CorpusFormat::Auto => path.extension().is_some_and(|e| e == "jsonl"),
    }
}

/// Read one corpus split, validating labels against `scheme`.
pub fn load_split(
    path: &Path,
    format: CorpusFormat,
    scheme: &LabelScheme,
    split: Split,
) -> Result<corpus::ParsedCorpus, RunError> {
    if is_records(path, format) {
        let sentences = corpus::read_records(path)?;
        for s in &sentences {
            for tag in s.tags() {
                if let Some(l) = tag.label() {
                    scheme.coarse_of(l)?;
                }
            }
        }
        Ok(corpus::ParsedCorpus { sentences, repairs: 0, repaired_sentences: Vec::new() })
    } else {
        Ok(corpus::read_conll(path, scheme, split)?)
    }
}

/// Everything an extraction run needs, loaded once.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scheme: LabelScheme,
    pub task_description: String,
    pub train: Vec<LabeledSentence>,
    /// Test sentences with coarse labels.
    pub test_gold: Vec<LabeledSentence>,
    /// One record per training sentence, labeled per `demo_labels`.
    pub demo_records: Vec<InstructRecord>,
    pub repairs: usize,
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self, RunError> {
        let scheme = config.scheme_choice().scheme();
        let task_description = config.task_description()?;
        let train = load_split(&config.corpus.train, config.corpus.format, &scheme, Split::Train)?;
        // Evaluating on the training file keeps training ids so leave-one-out
        // retrieval can exclude the query sentence.
        let test_split = if config.corpus.test == config.corpus.train { Split::Train } else { Split::Test };
        let test = load_split(&config.corpus.test, config.corpus.format, &scheme, test_split)?;
        let test_gold = test.sentences.iter().map(|s| map_fine_to_coarse(s, &scheme)).collect::<Result<Vec<_>, _>>()?;
        let demo_records = train
            .sentences
            .iter()
            .map(|s| {
                let s = match config.corpus.demo_labels {
                    DemoLabels::Coarse => map_fine_to_coarse(s, &scheme)?,
                    DemoLabels::Fine => s.clone(),
                };
                Ok(sentence_to_record(&s, &task_description))
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        Ok(Experiment {
            repairs: train.repairs + test.repairs,
            config,
            scheme,
            task_description,
            train: train.sentences,
            test_gold,
            demo_records,
        })
    }

    fn train_ids(&self) -> Vec<&str> {
        self.train.iter().map(|s| s.id()).collect()
    }

    fn demo_entries(&self, embeddings: Vec<EmbeddingVector>) -> Vec<DemoEntry> {
        self.train
            .iter()
            .zip(embeddings)
            .zip(&self.demo_records)
            .map(|((s, embedding), record)| DemoEntry {
                sentence_id: s.id().to_string(),
                embedding,
                record: record.clone(),
            })
            .collect()
    }

    fn embeddings_config(&self) -> Result<&EmbeddingsConfig, RunError> {
        self.config
            .embeddings
            .as_ref()
            .ok_or_else(|| RunError::Usage("knn selection requires an [embeddings] section".into()))
    }

    fn build_index(&self) -> Result<HnswIndex, RunError> {
        let cfg = self.embeddings_config()?;
        let embs = align_embeddings(load_embeddings(&cfg.train)?, &self.train_ids())?;
        Ok(HnswIndex::build(self.demo_entries(embs), self.config.hnsw)?)
    }

    /// Load `index.json` if present and consistent with the current corpus,
    /// otherwise build the index in memory.
    fn index(&self) -> Result<HnswIndex, RunError> {
        let path = self.config.output_dir.join("index.json");
        if !path.exists() {
            log::info!("no {} found, building the index in memory", path.display());
            return self.build_index();
        }
        let mut index = HnswIndex::load(&path)?;
        let same_entries = index.len() == self.train.len()
            && index
                .entries()
                .iter()
                .zip(self.train.iter().zip(&self.demo_records))
                .all(|(e, (s, r))| e.sentence_id == s.id() && e.record == *r);
        let stored = index.params();
        let same_graph = stored.m == self.config.hnsw.m
            && stored.ef_construction == self.config.hnsw.ef_construction
            && stored.seed == self.config.hnsw.seed
            && stored.level_lambda == self.config.hnsw.level_lambda;
        if !same_entries || !same_graph {
            return Err(RunError::Data(format!("{} is stale for this configuration; rerun `index`", path.display())));
        }
        index.set_ef_search(self.config.hnsw.ef_search);
        Ok(index)
    }
}

fn sha256_file(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path)(e.into()))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertSummary {
    pub dataset_path: PathBuf,
    pub records: usize,
    /// Spans per label as annotated in the corpus.
    pub corpus_spans: BTreeMap<String, usize>,
    /// Extraction lines per coarse class in the written records.
    pub record_spans: BTreeMap<String, usize>,
    pub repairs: usize,
    pub audit_findings: Vec<AuditFinding>,
}

/// Write the instruction-tuning dataset for the training split, plus the
/// canonical record files of every split.
pub fn cmd_convert(config: &ExperimentConfig) -> Result<ConvertSummary, RunError> {
    let exp = Experiment::load(config.clone())?;
    ensure_dir(&config.output_dir)?;
    let dataset_path = config.output_dir.join("instruct_train.jsonl");
    let records = write_dataset(&exp.demo_records, &dataset_path)?;

    corpus::write_records(&config.output_dir.join("corpus_train.jsonl"), &exp.train)?;
    corpus::write_records(&config.output_dir.join("corpus_test.jsonl"), &exp.test_gold)?;
    if let Some(v) = &config.corpus.validation {
        let val = load_split(v, config.corpus.format, &exp.scheme, Split::Validation)?;
        corpus::write_records(&config.output_dir.join("corpus_validation.jsonl"), &val.sentences)?;
    }

    let corpus_spans = corpus::span_counts(&exp.train);
    let mut coarse_totals: BTreeMap<String, usize> = BTreeMap::new();
    for (label, n) in &corpus_spans {
        let parent = label.split('.').next().unwrap_or(label).to_string();
        *coarse_totals.entry(parent).or_insert(0) += n;
    }
    let mut record_spans: BTreeMap<String, usize> = BTreeMap::new();
    for r in &exp.demo_records {
        let parsed = parse_extractions(&r.output, &LabelScheme::pico());
        if parsed.warnings > 0 {
            return Err(RunError::Data(format!("record for input `{}` does not parse back cleanly", r.input)));
        }
        for e in parsed.extractions {
            *record_spans.entry(e.label.name().to_string()).or_insert(0) += 1;
        }
    }
    if record_spans != coarse_totals {
        return Err(RunError::Data(format!(
            "span counts do not reconcile: corpus {coarse_totals:?}, records {record_spans:?}"
        )));
    }
    let coarse_train: Vec<LabeledSentence> =
        exp.train.iter().map(|s| map_fine_to_coarse(s, &exp.scheme)).collect::<Result<_, _>>()?;
    let audit_findings = coarse_train.iter().filter_map(|s| audit_sentence(s, &exp.scheme)).collect();
    let summary =
        ConvertSummary { dataset_path, records, corpus_spans, record_spans, repairs: exp.repairs, audit_findings };
    write_json(&config.output_dir.join("convert_stats.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub index_path: PathBuf,
    pub stats: IndexStats,
    pub fetched_embeddings: usize,
}

fn fetch_embeddings(
    endpoint: &EmbeddingEndpoint,
    sentences: &[LabeledSentence],
    path: &Path,
) -> Result<usize, RunError> {
    let client = EmbeddingClient::new(with_base_url_override(&endpoint.endpoint), endpoint.model.clone())?;
    let mut items = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(endpoint.batch_size.max(1)) {
        let texts: Vec<String> = chunk.iter().map(|s| s.text()).collect();
        for (s, v) in chunk.iter().zip(client.embed(&texts)?) {
            items.push((s.id().to_string(), EmbeddingVector::new(v)?));
        }
    }
    write_embeddings(path, &items)?;
    Ok(items.len())
}

/// Build the demonstration index over the training split and save it.
pub fn cmd_index(config: &ExperimentConfig) -> Result<IndexSummary, RunError> {
    let exp = Experiment::load(config.clone())?;
    ensure_dir(&config.output_dir)?;
    let emb = exp.embeddings_config()?;
    let mut fetched = 0;
    if let Some(endpoint) = &emb.endpoint {
        if !emb.train.exists() {
            fetched += fetch_embeddings(endpoint, &exp.train, &emb.train)?;
        }
        if !emb.test.exists() {
            fetched += fetch_embeddings(endpoint, &exp.test_gold, &emb.test)?;
        }
    }
    let index = exp.build_index()?;
    let index_path = config.output_dir.join("index.json");
    index.save(&index_path)?;
    let summary = IndexSummary { index_path, stats: index.stats(), fetched_embeddings: fetched };
    write_json(&config.output_dir.join("index_stats.json"), &summary)?;
    Ok(summary)
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sentence_id: String,
    pub tags: Vec<BioTag>,
    pub unmatched: Vec<Extraction>,
    pub warnings: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRow {
    fn aligned(&self) -> AlignedPrediction {
        AlignedPrediction {
            sentence_id: self.sentence_id.clone(),
            tags: self.tags.clone(),
            unmatched: self.unmatched.clone(),
            parse_warnings: self.warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSentence {
    pub sentence_id: String,
    pub demonstrations: Vec<String>,
    pub cache_key: String,
    pub warnings: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub k: usize,
    /// SHA-256 of every input file and of the task description text.
    pub digests: BTreeMap<String, String>,
    pub sentences: Vec<ManifestSentence>,
    pub predictions: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub predictions_path: PathBuf,
    pub manifest_path: PathBuf,
    pub report: MetricsReport,
    pub error_rows: usize,
    pub gateway: GatewayStats,
}

/// Environment variable that replaces every configured endpoint `base_url`,
/// so a shipped config can be pointed at another server without editing it.
pub const BASE_URL_ENV: &str = "PICO_ICL_BASE_URL";

fn with_base_url_override(endpoint: &EndpointConfig) -> EndpointConfig {
    let mut endpoint = endpoint.clone();
    if let Some(url) = std::env::var(BASE_URL_ENV).ok().filter(|u| !u.is_empty()) {
        endpoint.base_url = url;
    }
    endpoint
}

/// Backend named by the config: the HTTP endpoint, or the gold-echoing mock.
pub fn make_backend(exp: &Experiment) -> Result<Arc<dyn Backend>, RunError> {
    Ok(match exp.config.gateway.backend {
        BackendKind::Http => Arc::new(HttpBackend::new(with_base_url_override(&exp.config.gateway.endpoint))?),
        BackendKind::Mock => Arc::new(MockOracle::from_sentences(&exp.test_gold)),
    })
}

/// Per-sentence seed for random selection, independent of run order.
fn sentence_seed(seed: u64, sentence_id: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(sentence_id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

enum Selector {
    None,
    Knn { index: HnswIndex, queries: Vec<EmbeddingVector> },
    Random { entries: Vec<DemoEntry> },
}

/// Run extraction with the backend named in the config.
pub fn cmd_extract(config: &ExperimentConfig) -> Result<ExtractSummary, RunError> {
    let exp = Experiment::load(config.clone())?;
    let backend = make_backend(&exp)?;
    run_extract(&exp, backend)
}

/// Select demonstrations, prompt, generate, parse and align every test
/// sentence, then score the predictions.
pub fn run_extract(exp: &Experiment, backend: Arc<dyn Backend>) -> Result<ExtractSummary, RunError> {
    let config = &exp.config;
    ensure_dir(&config.output_dir)?;
    let k = config.k();
    let strategy = if k == 0 { Strategy::ZeroShot } else { config.selection.strategy };
    let selector = match strategy {
        Strategy::ZeroShot => Selector::None,
        Strategy::Knn => {
            let index = exp.index()?;
            let emb = exp.embeddings_config()?;
            let test_ids: Vec<&str> = exp.test_gold.iter().map(|s| s.id()).collect();
            let queries = align_embeddings(load_embeddings(&emb.test)?, &test_ids)?;
            Selector::Knn { index, queries }
        }
        Strategy::Random => Selector::Random {
            entries: exp.demo_entries(vec![EmbeddingVector::new(vec![]).expect("empty"); exp.train.len()]),
        },
    };

    let gateway = CachedGateway::new(backend, Some(config.cache_dir()))?.offline(config.gateway.offline);
    let n = exp.test_gold.len();
    let results: Mutex<Vec<Option<(PredictionRow, ManifestSentence)>>> = Mutex::new(vec![None; n]);
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<RunError>> = Mutex::new(None);

    let work = |i: usize| -> Result<(PredictionRow, ManifestSentence), RunError> {
        let sentence = &exp.test_gold[i];
        let demos: Vec<(&str, &InstructRecord)> = match &selector {
            Selector::None => Vec::new(),
            Selector::Knn { index, queries } => index
                .query_knn(&queries[i], k, Some(sentence.id()))?
                .into_iter()
                .map(|h| (h.entry.sentence_id.as_str(), &h.entry.record))
                .collect(),
            Selector::Random { entries } => {
                random_select(entries, k, sentence_seed(config.seed, sentence.id()), Some(sentence.id()))
                    .into_iter()
                    .map(|e| (e.sentence_id.as_str(), &e.record))
                    .collect()
            }
        };
        let spec = PromptSpec::new(
            exp.task_description.clone(),
            demos.iter().map(|(_, r)| (*r).clone()).collect(),
            sentence.text(),
        )?;
        let prompt = assemble_prompt_checked(&spec, config.max_prompt_chars)?;
        let req = GenerationRequest {
            prompt,
            model: config.gateway.model.clone(),
            temperature: config.gateway.temperature,
            max_tokens: config.gateway.max_tokens,
            seed: config.gateway.seed,
        };
        let resp = gateway.cached_complete(&req);
        let (aligned, error) = if resp.is_error() {
            (AlignedPrediction::all_outside(sentence), resp.error.clone().or(Some("generation failed".into())))
        } else {
            (predict_from_text(&resp.text, sentence, &LabelScheme::pico()), None)
        };
        let row = PredictionRow {
            sentence_id: sentence.id().to_string(),
            tags: aligned.tags,
            unmatched: aligned.unmatched,
            warnings: aligned.parse_warnings,
            error: error.clone(),
        };
        let manifest = ManifestSentence {
            sentence_id: sentence.id().to_string(),
            demonstrations: demos.iter().map(|(id, _)| id.to_string()).collect(),
            cache_key: req.cache_key().to_string(),
            warnings: row.warnings,
            error,
        };
        Ok((row, manifest))
    };

    let workers = config.gateway.max_in_flight.min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    return;
                }
                match work(i) {
                    Ok(r) => results.lock().expect("lock")[i] = Some(r),
                    Err(e) => {
                        failure.lock().expect("lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let (rows, manifest_rows): (Vec<_>, Vec<_>) =
        results.into_inner().expect("lock").into_iter().map(|r| r.expect("every sentence processed")).unzip();

    let predictions_path = config.output_dir.join("predictions.jsonl");
    write_predictions(&predictions_path, &rows)?;
    let error_rows = rows.iter().filter(|r| r.error.is_some()).count();

    let report = evaluate(&rows, &exp.test_gold, config.match_mode)?;
    write_report(&config.output_dir, &report)?;

    let mut digests = BTreeMap::new();
    digests.insert("corpus.train".into(), sha256_file(&config.corpus.train)?);
    digests.insert("corpus.test".into(), sha256_file(&config.corpus.test)?);
    if strategy == Strategy::Knn {
        let emb = exp.embeddings_config()?;
        digests.insert("embeddings.train".into(), sha256_file(&emb.train)?);
        digests.insert("embeddings.test".into(), sha256_file(&emb.test)?);
    }
    digests.insert("task_description".into(), hex::encode(Sha256::digest(exp.task_description.as_bytes())));
    let manifest = RunManifest {
        config: config.clone(),
        k,
        digests,
        sentences: manifest_rows,
        predictions: "predictions.jsonl".into(),
        report: "report.json".into(),
    };
    let manifest_path = config.output_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    let stats = gateway.stats();
    write_json(&config.output_dir.join("gateway_stats.json"), &stats)?;
    Ok(ExtractSummary { predictions_path, manifest_path, report, error_rows, gateway: stats })
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| RunError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(rows)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), RunError> {
    write_json(&dir.join("report.json"), report)?;
    let path = dir.join("report.txt");
    fs::write(&path, report.to_table()).map_err(io_err(&path))
}

/// Score prediction rows against coarse gold sentences. Gold sentences
/// without a row are scored as all-O and counted; rows for unknown ids are
/// an error.
pub fn evaluate(rows: &[PredictionRow], gold: &[LabeledSentence], mode: MatchMode) -> Result<MetricsReport, RunError> {
    let gold_ids: HashSet<&str> = gold.iter().map(|s| s.id()).collect();
    let unknown: Vec<&str> = rows.iter().map(|r| r.sentence_id.as_str()).filter(|id| !gold_ids.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(RunError::Data(format!("predictions for ids not in the gold corpus: {unknown:?}")));
    }
    let by_id: HashMap<&str, &PredictionRow> = rows.iter().map(|r| (r.sentence_id.as_str(), r)).collect();
    let mut table = CountTable::default();
    let mut missing = 0;
    let mut warnings = 0;
    let mut unmatched = 0;
    let mut errors = 0;
    for s in gold {
        let pred = match by_id.get(s.id()) {
            Some(row) => {
                warnings += row.warnings;
                unmatched += row.unmatched.len();
                if row.error.is_some() {
                    errors += 1;
                    AlignedPrediction::all_outside(s)
                } else {
                    row.aligned()
                }
            }
            None => {
                missing += 1;
                AlignedPrediction::all_outside(s)
            }
        };
        table.merge(&count_sentence(s, &pred, mode)?);
    }
    let mut report = macro_metrics(&table);
    report.sentences = gold.len();
    report.parse_warnings = warnings;
    report.unmatched_extractions = unmatched;
    report.missing_predictions = missing;
    report.error_rows = errors;
    Ok(report)
}

/// Score a predictions file against the config's test split and write the
/// report into `out_dir`.
pub fn cmd_eval(config: &ExperimentConfig, predictions: &Path, out_dir: &Path) -> Result<MetricsReport, RunError> {
    let scheme = config.scheme_choice().scheme();
    let test_split = if config.corpus.test == config.corpus.train { Split::Train } else { Split::Test };
    let gold = load_split(&config.corpus.test, config.corpus.format, &scheme, test_split)?
        .sentences
        .iter()
        .map(|s| map_fine_to_coarse(s, &scheme))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = read_predictions(predictions)?;
    let report = evaluate(&rows, &gold, config.match_mode)?;
    ensure_dir(out_dir)?;
    write_report(out_dir, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub k: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub error_rows: usize,
}

/// One extraction and evaluation per `(strategy, k)` cell, sharing one
/// response cache. `k = 0` always runs zero-shot.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    k_values: &[usize],
    strategies: &[Strategy],
    backend: Option<Arc<dyn Backend>>,
) -> Result<Vec<AblationRow>, RunError> {
    if k_values.is_empty() {
        return Err(RunError::Usage("ablation needs at least one k value".into()));
    }
    if strategies.is_empty() || strategies.contains(&Strategy::ZeroShot) {
        return Err(RunError::Usage("ablation strategies must be a non-empty subset of {knn, random}".into()));
    }
    let base = Experiment::load(config.clone())?;
    let backend = match backend {
        Some(b) => b,
        None => make_backend(&base)?,
    };
    let shared_cache = config.cache_dir();
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &k in k_values {
            let mut cell = config.clone();
            cell.selection = if k == 0 {
                SelectionConfig { strategy: Strategy::ZeroShot, k: Some(0) }
            } else {
                SelectionConfig { strategy, k: Some(k) }
            };
            cell.gateway.cache_dir = Some(shared_cache.clone());
            cell.output_dir = config.output_dir.join("ablate").join(format!("{}-k{k}", strategy.name()));
            cell.validate()?;
            let exp = Experiment { config: cell, ..base.clone() };
            let summary = run_extract(&exp, backend.clone())?;
            rows.push(AblationRow {
                strategy,
                k,
                macro_precision: summary.report.macro_avg.precision,
                macro_recall: summary.report.macro_avg.recall,
                macro_f1: summary.report.macro_avg.f1,
                error_rows: summary.error_rows,
            });
        }
    }
    ensure_dir(&config.output_dir)?;
    let csv_path = config.output_dir.join("ablation.csv");
    let mut csv = String::from("strategy,k,macro_precision,macro_recall,macro_f1,error_rows\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.strategy.name(),
            r.k,
            r.macro_precision,
            r.macro_recall,
            r.macro_f1,
            r.error_rows
        ));
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    write_json(&config.output_dir.join("ablation.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml(extra: &str) -> String {
        format!("output_dir = \"out\"\n{extra}\n[corpus]\ntrain = \"train.conll\"\ntest = \"test.conll\"\n")
    }

    #[test]
    fn config_paths_resolve_against_base() {
        let toml = base_toml("") + "[selection]\nstrategy = \"zero_shot\"\n";
        let cfg = ExperimentConfig::from_toml(&toml, Path::new("/data/run")).unwrap();
        assert_eq!(cfg.corpus.train, Path::new("/data/run/train.conll"));
        assert_eq!(cfg.output_dir, Path::new("/data/run/out"));
        assert_eq!(cfg.k(), 0);
    }

    #[test]
    fn zero_shot_rejects_nonzero_k() {
        let toml = base_toml("") + "[selection]\nstrategy = \"zero_shot\"\nk = 2\n";
        assert!(matches!(ExperimentConfig::from_toml(&toml, Path::new(".")), Err(RunError::Usage(_))));
    }

    #[test]
    fn knn_requires_embeddings() {
        let toml = base_toml("") + "[selection]\nstrategy = \"knn\"\nk = 3\n";
        let err = ExperimentConfig::from_toml(&toml, Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("embeddings"));
    }

    #[test]
    fn presets_supply_k_and_scheme() {
        let cases = [
            ("ebm-nlp", 3, SchemeChoice::Coarse),
            ("ebm-nlp-h", 4, SchemeChoice::Fine),
            ("ebm-nlp-rev", 9, SchemeChoice::Fine),
            ("ebm-comet", 9, SchemeChoice::Coarse),
        ];
        for (name, k, scheme) in cases {
            let toml = base_toml(&format!("dataset = \"{name}\"")) + "[selection]\nstrategy = \"random\"\n";
            let cfg = ExperimentConfig::from_toml(&toml, Path::new(".")).unwrap();
            assert_eq!(cfg.k(), k, "{name}");
            assert_eq!(cfg.scheme_choice(), scheme, "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let toml = base_toml("bogus = 1");
        assert!(ExperimentConfig::from_toml(&toml, Path::new(".")).is_err());
    }

    #[test]
    fn sentence_seeds_differ_per_sentence() {
        assert_ne!(sentence_seed(1, "a"), sentence_seed(1, "b"));
        assert_ne!(sentence_seed(1, "a"), sentence_seed(2, "a"));
        assert_eq!(sentence_seed(3, "x"), sentence_seed(3, "x"));
    }
}
