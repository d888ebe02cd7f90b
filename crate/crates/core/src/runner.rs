//! Experiment grid execution.
//!
//! A run directory contains:
//!
//! - `manifest.json`: config hash, template digests, dataset digests and counts.
//! - `records.jsonl`: one [`RunRecord`] per (dataset, model, strategy, example),
//!   in grid order. Contains no timing, so warm re-runs are byte-identical.
//! - `telemetry.jsonl`: latency, cache and retry information per executed call.
//! - `raw/<cache key>.txt`: raw model responses referenced by records.
//!
//! While a run is in progress, finished records are appended to
//! `records.partial.jsonl`; an interrupted run can be resumed by running the
//! same config against the same directory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DatasetConfig, ProviderKind, RunConfig, TranslatorKind};
use crate::dataset::{
    self, ClassificationExample, DatasetError, DatasetSchema, GenerationExample, LabelSet, LoadOptions, SkippedRow,
};
use crate::gateway::{
    cache_key, ChatBackend, ChatRequest, ChatResponse, FinishReason, Gateway, Limiter, MockBackend,
    OpenAiCompatibleBackend, ResponseCache,
};
use crate::metrics::{rouge_l_text, ParseFailurePolicy, RougeScore};
use crate::mt::{HttpTranslator, MockTranslator, TranslationProvider, Translator};
use crate::parser::{
    extract_headlines, parse_classification, parse_expected, parse_sections, FailureReason, ParseFailure, ParseMode,
    ParsedOutput,
};
use crate::prompt::{PromptEngine, PromptError, PromptSpec, Section, Strategy, TaskKind, TemplateSet};
use crate::store::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const PARTIAL_FILE: &str = "records.partial.jsonl";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const RAW_DIR: &str = "raw";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{dir} holds a run with a different configuration (hash {found}, expected {expected}); use a fresh output directory")]
    ManifestMismatch {
        dir: PathBuf,
        found: String,
        expected: String,
    },
    #[error("backend setup failed: {0}")]
    Backend(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStage {
    Translation,
    Prompt,
    Completion,
    BackTranslation,
}

/// What happened to one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Parsed { parsed: ParsedOutput },
    ParseFailed { failure: ParseFailure },
    /// A provider or translation call failed permanently; the example is
    /// excluded from scoring.
    CallFailed { stage: CallStage, error: String },
}

impl Outcome {
    pub fn is_call_failure(&self) -> bool {
        matches!(self, Outcome::CallFailed { .. })
    }

    pub fn parsed(&self) -> Option<&ParsedOutput> {
        match self {
            Outcome::Parsed { parsed } => Some(parsed),
            _ => None,
        }
    }
}

/// Result for one (dataset, model, strategy, example). Scored records carry
/// `correct` (classification) or `rouge` (generation), never both; call
/// failures carry neither.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub task: TaskKind,
    pub model: String,
    pub model_id: String,
    pub strategy: Strategy,
    pub example_id: String,
    /// Cache key of the first chat request.
    pub prompt_digest: Option<String>,
    /// Run-relative paths of stored raw responses, in call order.
    pub raw_response_refs: Vec<String>,
    pub finish_reason: Option<FinishReason>,
    /// MT output for the translate-and-test strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated_input: Option<String>,
    pub outcome: Outcome,
    /// Canonical gold label or reference headline.
    pub gold: String,
    pub correct: Option<bool>,
    pub rouge: Option<RougeScore>,
    /// English intermediate headline against the English reference, when both exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub english_rouge: Option<RougeScore>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl RunRecord {
    pub fn key(&self) -> JobKey {
        JobKey {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            strategy: self.strategy,
            example_id: self.example_id.clone(),
        }
    }

    pub fn predicted_label(&self) -> Option<&str> {
        self.outcome.parsed().and_then(|p| p.predicted_label.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JobKey {
    pub dataset: String,
    pub model: String,
    pub strategy: Strategy,
    pub example_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub dataset: String,
    pub model: String,
    pub strategy: Strategy,
    pub example_id: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mt_from_cache: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    /// Finished, but some calls failed permanently.
    Partial,
    /// Stopped early because the failure fraction exceeded the threshold.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    pub file_digest: String,
    pub schema: DatasetSchema,
    pub labels: Vec<String>,
    pub source_lang: String,
    pub n_loaded: usize,
    pub skipped: Vec<SkippedRow>,
    pub n_sampled: usize,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub model_id: String,
    pub backend: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub planned: usize,
    pub records: usize,
    pub scored: usize,
    pub parse_failures: usize,
    pub call_failures: usize,
    pub resumed: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub mt_provider_calls: usize,
    /// Parsed responses whose Translation section is blank. Diagnostic only;
    /// these are scored like any other response.
    #[serde(default)]
    pub empty_translations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub templates: BTreeMap<String, String>,
    pub seed: u64,
    pub parse_mode: ParseMode,
    pub parse_failures: ParseFailurePolicy,
    pub two_call_mode: bool,
    pub datasets: Vec<DatasetManifest>,
    pub models: Vec<ModelManifest>,
    pub strategies: Vec<Strategy>,
    pub translator: Option<String>,
    pub status: RunStatus,
    pub counts: Counts,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    fn save(&self, dir: &Path) -> Result<(), RunError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetManifest> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

/// Read `records.jsonl` (or, for an unfinished run, the partial file).
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, RunError> {
    let path = dir.join(RECORDS_FILE);
    if path.exists() {
        return read_jsonl(&path, false);
    }
    let partial = dir.join(PARTIAL_FILE);
    if partial.exists() {
        return read_jsonl(&partial, true);
    }
    Err(RunError::Io {
        path,
        source: io::Error::new(io::ErrorKind::NotFound, "no records in run directory"),
    })
}

/// Parse JSON lines. With `tolerate_tail`, a malformed final line (an
/// interrupted append) is dropped.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, tolerate_tail: bool) -> Result<Vec<T>, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if tolerate_tail && i == last => {
                log::warn!("{}: dropping truncated final line", path.display());
            }
            Err(e) => {
                return Err(RunError::Corrupt {
                    path: path.to_owned(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

pub enum Examples {
    Classification(Vec<ClassificationExample>),
    Generation(Vec<GenerationExample>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Classification(v) => v.len(),
            Examples::Generation(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, i: usize) -> &str {
        match self {
            Examples::Classification(v) => &v[i].id,
            Examples::Generation(v) => &v[i].id,
        }
    }
}

/// A loaded and subsampled dataset.
pub struct PreparedDataset {
    pub config: DatasetConfig,
    pub labels: Option<LabelSet>,
    pub examples: Examples,
    pub manifest: DatasetManifest,
}

fn file_digest(path: &Path) -> Result<String, RunError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::File {
        path: path.to_owned(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Load every configured dataset and draw its seeded sample.
pub fn prepare_datasets(config: &RunConfig) -> Result<Vec<PreparedDataset>, RunError> {
    let options = LoadOptions {
        skip_invalid: config.skip_invalid,
    };
    config
        .datasets
        .iter()
        .map(|d| {
            let schema = d.schema();
            let seed = d.seed.unwrap_or(config.seed);
            let n = config.sample_size(d);
            let take = |len: usize| n.unwrap_or(len);
            let digest = file_digest(&d.path)?;
            let (labels, examples, n_loaded, skipped) = match d.task {
                TaskKind::Classification => {
                    let labels = d.label_set()?;
                    let loaded = dataset::load_classification_dataset_with(&d.path, &schema, &labels, options)?;
                    let n_loaded = loaded.examples.len();
                    let sample = dataset::sample_examples(&loaded.examples, take(n_loaded), seed);
                    (Some(labels), Examples::Classification(sample), n_loaded, loaded.skipped)
                }
                TaskKind::Generation => {
                    let loaded = dataset::load_generation_dataset_with(&d.path, &schema, options)?;
                    let n_loaded = loaded.examples.len();
                    let sample = dataset::sample_examples(&loaded.examples, take(n_loaded), seed);
                    (None, Examples::Generation(sample), n_loaded, loaded.skipped)
                }
            };
            for s in &skipped {
                log::warn!("{}: skipped row {}: {}", d.name, s.row, s.reason);
            }
            let manifest = DatasetManifest {
                name: d.name.clone(),
                task: d.task,
                file_digest: digest,
                schema,
                labels: labels.as_ref().map(|l| l.labels().to_vec()).unwrap_or_default(),
                source_lang: d.source_lang.clone(),
                n_loaded,
                skipped,
                n_sampled: examples.len(),
                sample_seed: seed,
            };
            Ok(PreparedDataset {
                config: d.clone(),
                labels,
                examples,
                manifest,
            })
        })
        .collect()
}

pub fn load_templates(config: &RunConfig) -> Result<TemplateSet, RunError> {
    Ok(match &config.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    })
}

fn api_key(env: &Option<String>) -> Result<Option<String>, RunError> {
    match env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| RunError::Backend(format!("environment variable {var} is not set"))),
    }
}

/// Chat backends by model name, plus the MT provider.
pub struct Backends {
    pub chat: HashMap<String, Arc<dyn ChatBackend>>,
    pub translator: Option<Arc<dyn TranslationProvider>>,
}

impl Backends {
    pub fn from_config(config: &RunConfig) -> Result<Self, RunError> {
        let mut mock: Option<Arc<MockBackend>> = None;
        let mut chat: HashMap<String, Arc<dyn ChatBackend>> = HashMap::new();
        for m in &config.models {
            let backend: Arc<dyn ChatBackend> = if config.use_mock || m.provider == ProviderKind::Mock {
                if mock.is_none() {
                    let path = config
                        .mock
                        .llm_fixture
                        .as_ref()
                        .ok_or_else(|| RunError::Backend("mock.llm_fixture is unset".into()))?;
                    mock = Some(Arc::new(MockBackend::load(path).map_err(RunError::Backend)?));
                }
                mock.clone().expect("set above")
            } else {
                let url = m
                    .endpoint_url
                    .clone()
                    .ok_or_else(|| RunError::Backend(format!("model {} has no endpoint_url", m.name)))?;
                Arc::new(OpenAiCompatibleBackend::new(
                    m.name.clone(),
                    url,
                    api_key(&m.api_key_env)?,
                    Duration::from_secs(m.timeout_secs),
                ))
            };
            chat.insert(m.name.clone(), backend);
        }
        let translator: Option<Arc<dyn TranslationProvider>> = match &config.translator {
            None => None,
            Some(t) if config.use_mock || t.provider == TranslatorKind::Mock => {
                let path = config
                    .mock
                    .mt_fixture
                    .as_ref()
                    .ok_or_else(|| RunError::Backend("mock.mt_fixture is unset".into()))?;
                Some(Arc::new(MockTranslator::load(path).map_err(RunError::Backend)?))
            }
            Some(t) => {
                let url = t
                    .endpoint_url
                    .clone()
                    .ok_or_else(|| RunError::Backend("translator has no endpoint_url".into()))?;
                Some(Arc::new(HttpTranslator::new(
                    t.name.clone(),
                    url,
                    api_key(&t.api_key_env)?,
                    Duration::from_secs(t.timeout_secs),
                )))
            }
        };
        Ok(Self { chat, translator })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub status: RunStatus,
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    dataset: usize,
    model: usize,
    strategy: Strategy,
    example: usize,
}

/// Per-call bookkeeping gathered while executing a job.
#[derive(Default)]
struct CallLog {
    raw_refs: Vec<String>,
    prompt_digest: Option<String>,
    finish_reason: Option<FinishReason>,
    prompt_tokens: u64,
    completion_tokens: u64,
    latency_ms: u64,
    all_cached: bool,
    attempts: u32,
}

struct Context<'a> {
    config: &'a RunConfig,
    datasets: &'a [PreparedDataset],
    engine: PromptEngine,
    gateways: Vec<Gateway>,
    translator: Option<Translator>,
    out_dir: &'a Path,
}

impl Context<'_> {
    fn complete(&self, job: &Job, spec: &PromptSpec, tag: String, log: &mut CallLog) -> Result<ChatResponse, String> {
        let model = &self.config.models[job.model];
        let req = ChatRequest::from_prompt(spec, &model.model_id, &self.config.decoding, tag);
        let key = cache_key(&req);
        log.prompt_digest.get_or_insert_with(|| key.hex());
        let resp = self.gateways[job.model]
            .complete(&req, &self.config.retry)
            .map_err(|e| e.to_string())?;
        if let Some(text) = &resp.raw_text {
            let rel = format!("{RAW_DIR}/{}.txt", key.hex());
            let path = self.out_dir.join(&rel);
            if !path.exists() {
                write_atomic(&path, text.as_bytes()).map_err(|e| format!("cannot store raw response: {e}"))?;
            }
            log.raw_refs.push(rel);
        }
        log.finish_reason = Some(resp.finish_reason);
        log.prompt_tokens += resp.prompt_tokens;
        log.completion_tokens += resp.completion_tokens;
        log.latency_ms += resp.latency_ms;
        log.all_cached &= resp.from_cache;
        log.attempts += resp.attempts;
        Ok(resp)
    }

    fn execute(&self, job: &Job) -> (RunRecord, Telemetry) {
        let ds = &self.datasets[job.dataset];
        let model = &self.config.models[job.model];
        let example_id = ds.examples.id(job.example).to_owned();
        let tag = format!("{}/{}/{}", ds.config.name, example_id, job.strategy.name());
        let mut log = CallLog {
            all_cached: true,
            ..CallLog::default()
        };
        let mut mt_from_cache = None;
        let mut translated_input = None;

        let (gold, outcome, correct, rouge, english_rouge) = match &ds.examples {
            Examples::Classification(v) => {
                let ex = &v[job.example];
                let outcome = self.classify(job, ds, ex, &tag, &mut log, &mut translated_input, &mut mt_from_cache);
                let correct = match &outcome {
                    Outcome::CallFailed { .. } => None,
                    Outcome::ParseFailed { .. } => Some(false),
                    Outcome::Parsed { parsed } => Some(parsed.predicted_label.as_deref() == Some(ex.gold.as_str())),
                };
                (ex.gold.clone(), outcome, correct, None, None)
            }
            Examples::Generation(v) => {
                let ex = &v[job.example];
                let outcome = self.generate(job, ex, &tag, &mut log);
                let (rouge, english_rouge) = match &outcome {
                    Outcome::CallFailed { .. } => (None, None),
                    Outcome::ParseFailed { .. } => (Some(RougeScore::ZERO), None),
                    Outcome::Parsed { parsed } => {
                        let marathi = parsed.sections.get(&Section::MarathiHeadline).map_or("", String::as_str);
                        let english = match (parsed.sections.get(&Section::EnglishHeadline), &ex.english_reference) {
                            (Some(h), Some(r)) => Some(rouge_l_text(h, r)),
                            _ => None,
                        };
                        (Some(rouge_l_text(marathi, &ex.reference_headline)), english)
                    }
                };
                (ex.reference_headline.clone(), outcome, None, rouge, english_rouge)
            }
        };

        let record = RunRecord {
            dataset: ds.config.name.clone(),
            task: ds.config.task,
            model: model.name.clone(),
            model_id: model.model_id.clone(),
            strategy: job.strategy,
            example_id: example_id.clone(),
            prompt_digest: log.prompt_digest,
            raw_response_refs: log.raw_refs,
            finish_reason: log.finish_reason,
            translated_input,
            outcome,
            gold,
            correct,
            rouge,
            english_rouge,
            prompt_tokens: log.prompt_tokens,
            completion_tokens: log.completion_tokens,
        };
        let telemetry = Telemetry {
            dataset: record.dataset.clone(),
            model: record.model.clone(),
            strategy: record.strategy,
            example_id,
            latency_ms: log.latency_ms,
            from_cache: log.all_cached && log.finish_reason.is_some(),
            attempts: log.attempts,
            mt_from_cache,
        };
        (record, telemetry)
    }

    #[allow(clippy::too_many_arguments)]
    fn classify(
        &self,
        job: &Job,
        ds: &PreparedDataset,
        ex: &ClassificationExample,
        tag: &str,
        log: &mut CallLog,
        translated_input: &mut Option<String>,
        mt_from_cache: &mut Option<bool>,
    ) -> Outcome {
        let labels = ds.labels.as_ref().expect("classification datasets have labels");
        let task = ds.config.task_description.as_deref().unwrap_or_default();
        if job.strategy == Strategy::Pretranslated {
            let Some(translator) = &self.translator else {
                return call_failed(CallStage::Translation, "no translator configured");
            };
            let target = self.config.translator.as_ref().map_or("en", |t| t.target_lang.as_str());
            match translator.translate(&ex.text, &ds.config.source_lang, target) {
                Ok(t) => {
                    *mt_from_cache = Some(t.from_cache);
                    *translated_input = Some(t.translated_text);
                }
                Err(e) => return call_failed(CallStage::Translation, e),
            }
        }
        let spec = match self.engine.build_classification_prompt(
            job.strategy,
            ex,
            labels,
            task,
            translated_input.as_deref(),
        ) {
            Ok(s) => s,
            Err(e) => return call_failed(CallStage::Prompt, e),
        };
        let resp = match self.complete(job, &spec, tag.to_owned(), log) {
            Ok(r) => r,
            Err(e) => return call_failed(CallStage::Completion, e),
        };
        let result = response_text(&resp).and_then(|raw| parse_classification(raw, &spec, labels, self.config.parse_mode));
        parse_outcome(result)
    }

    fn generate(&self, job: &Job, ex: &GenerationExample, tag: &str, log: &mut CallLog) -> Outcome {
        let mode = self.config.parse_mode;
        let two_call = self.config.two_call_mode && job.strategy != Strategy::Direct;
        if !two_call {
            let spec = match self.engine.build_generation_prompt(ex, job.strategy) {
                Ok(s) => s,
                Err(e) => return call_failed(CallStage::Prompt, e),
            };
            let resp = match self.complete(job, &spec, tag.to_owned(), log) {
                Ok(r) => r,
                Err(e) => return call_failed(CallStage::Completion, e),
            };
            let result = response_text(&resp).and_then(|raw| {
                let parsed = parse_sections(raw, &spec, mode)?;
                extract_headlines(&parsed, job.strategy)?;
                Ok(parsed)
            });
            return parse_outcome(result);
        }

        let first = match self.engine.build_generation_first_call(ex, job.strategy) {
            Ok(s) => s,
            Err(e) => return call_failed(CallStage::Prompt, e),
        };
        let resp = match self.complete(job, &first, tag.to_owned(), log) {
            Ok(r) => r,
            Err(e) => return call_failed(CallStage::Completion, e),
        };
        let mut parsed = match response_text(&resp).and_then(|raw| parse_sections(raw, &first, mode)) {
            Ok(p) => p,
            Err(f) => return Outcome::ParseFailed { failure: f },
        };
        let Some(english) = parsed.sections.get(&Section::EnglishHeadline).filter(|h| !h.trim().is_empty()).cloned()
        else {
            return Outcome::ParseFailed {
                failure: ParseFailure::new(FailureReason::MissingSection, "no English Headline section"),
            };
        };
        let back = match self.engine.build_back_translation_prompt(&ex.id, &english, job.strategy) {
            Ok(s) => s,
            Err(e) => return call_failed(CallStage::Prompt, e),
        };
        let resp = match self.complete(job, &back, format!("{tag}#back"), log) {
            Ok(r) => r,
            Err(e) => return call_failed(CallStage::BackTranslation, e),
        };
        let second = match response_text(&resp).and_then(|raw| parse_expected(raw, &back.expected_sections, mode)) {
            Ok(p) => p,
            Err(f) => return Outcome::ParseFailed { failure: f },
        };
        if second.parse_mode_used == ParseMode::Lenient {
            parsed.parse_mode_used = ParseMode::Lenient;
        }
        parsed.sections.extend(second.sections);
        parse_outcome(extract_headlines(&parsed, job.strategy).map(|_| parsed))
    }
}

fn call_failed(stage: CallStage, e: impl ToString) -> Outcome {
    Outcome::CallFailed {
        stage,
        error: e.to_string(),
    }
}

fn parse_outcome(result: Result<ParsedOutput, ParseFailure>) -> Outcome {
    match result {
        Ok(parsed) => Outcome::Parsed { parsed },
        Err(failure) => Outcome::ParseFailed { failure },
    }
}

fn response_text(resp: &ChatResponse) -> Result<&str, ParseFailure> {
    match (resp.finish_reason, resp.raw_text.as_deref()) {
        (FinishReason::Refused, _) => Err(ParseFailure::new(FailureReason::Refused, "")),
        (_, Some(t)) if !t.trim().is_empty() => Ok(t),
        (_, t) => Err(ParseFailure::new(FailureReason::EmptyResponse, t.unwrap_or_default())),
    }
}

/// Grid order: datasets, then models, then strategies (config order), then
/// examples in sample order.
fn plan(config: &RunConfig, datasets: &[PreparedDataset]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        for (mi, m) in config.models.iter().enumerate() {
            if !m.runs_on(&ds.config.name) {
                continue;
            }
            for strategy in config.strategies_for(&ds.config) {
                for example in 0..ds.examples.len() {
                    jobs.push(Job {
                        dataset: di,
                        model: mi,
                        strategy,
                        example,
                    });
                }
            }
        }
    }
    jobs
}

fn job_key(config: &RunConfig, datasets: &[PreparedDataset], job: &Job) -> JobKey {
    let ds = &datasets[job.dataset];
    JobKey {
        dataset: ds.config.name.clone(),
        model: config.models[job.model].name.clone(),
        strategy: job.strategy,
        example_id: ds.examples.id(job.example).to_owned(),
    }
}

fn to_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("record serializes");
    s.push('\n');
    s
}

/// Records from an earlier invocation against the same directory that can be
/// reused. Call failures are retried.
fn resumable(out_dir: &Path, expected_hash: &str) -> Result<HashMap<JobKey, RunRecord>, RunError> {
    if !out_dir.join(MANIFEST_FILE).exists() {
        return Ok(HashMap::new());
    }
    let manifest = Manifest::load(out_dir)?;
    if manifest.config_hash != expected_hash {
        return Err(RunError::ManifestMismatch {
            dir: out_dir.to_owned(),
            found: manifest.config_hash,
            expected: expected_hash.to_owned(),
        });
    }
    let mut out = HashMap::new();
    for (file, tolerate) in [(RECORDS_FILE, false), (PARTIAL_FILE, true)] {
        let path = out_dir.join(file);
        if path.exists() {
            for r in read_jsonl::<RunRecord>(&path, tolerate)? {
                if !r.outcome.is_call_failure() {
                    out.insert(r.key(), r);
                }
            }
        }
    }
    Ok(out)
}

pub fn run_experiment(config: &RunConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let backends = Backends::from_config(config)?;
    run_experiment_with(config, backends)
}

/// Execute the grid with the given backends.
pub fn run_experiment_with(config: &RunConfig, backends: Backends) -> Result<RunSummary, RunError> {
    config.validate()?;
    let templates = load_templates(config)?;
    let template_digests = templates.digests();
    let datasets = prepare_datasets(config)?;
    let dataset_digests: BTreeMap<String, String> = datasets
        .iter()
        .map(|d| (d.config.name.clone(), d.manifest.file_digest.clone()))
        .collect();
    let config_hash = config.fingerprint(&dataset_digests, &template_digests);
    let out_dir = config.output_dir.as_path();
    fs::create_dir_all(out_dir.join(RAW_DIR)).map_err(io_err(out_dir))?;

    let mut previous = resumable(out_dir, &config_hash)?;
    let jobs = plan(config, &datasets);
    let keys: Vec<JobKey> = jobs.iter().map(|j| job_key(config, &datasets, j)).collect();
    let mut results: Vec<Option<RunRecord>> = keys.iter().map(|k| previous.remove(k)).collect();
    let resumed = results.iter().filter(|r| r.is_some()).count();
    let pending: Vec<usize> = (0..jobs.len()).filter(|&i| results[i].is_none()).collect();

    let mut manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config_hash,
        templates: template_digests,
        seed: config.seed,
        parse_mode: config.parse_mode,
        parse_failures: config.parse_failures,
        two_call_mode: config.two_call_mode,
        datasets: datasets.iter().map(|d| d.manifest.clone()).collect(),
        models: config
            .models
            .iter()
            .map(|m| ModelManifest {
                name: m.name.clone(),
                model_id: m.model_id.clone(),
                backend: backends.chat.get(&m.name).map_or("none", |b| b.name()).to_owned(),
            })
            .collect(),
        strategies: config.strategies.clone(),
        translator: backends.translator.as_ref().map(|t| t.name().to_owned()),
        status: RunStatus::Running,
        counts: Counts {
            planned: jobs.len(),
            resumed,
            ..Counts::default()
        },
    };
    manifest.save(out_dir)?;

    // Rewrite the partial file with the records being kept, then append.
    let partial_path = out_dir.join(PARTIAL_FILE);
    let mut partial = File::create(&partial_path).map_err(io_err(&partial_path))?;
    for r in results.iter().flatten() {
        partial.write_all(to_line(r).as_bytes()).map_err(io_err(&partial_path))?;
    }
    let partial = Mutex::new(partial);

    let limiter = Arc::new(Limiter::new(config.parallelism));
    let cache = ResponseCache::new(&config.cache_dir);
    let gateways = config
        .models
        .iter()
        .map(|m| {
            let backend = backends
                .chat
                .get(&m.name)
                .cloned()
                .ok_or_else(|| RunError::Backend(format!("no backend for model {}", m.name)))?;
            Ok(Gateway::with_limiter(backend, Some(cache.clone()), limiter.clone()))
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let translator = backends
        .translator
        .clone()
        .map(|p| Translator::new(p, Some(&config.cache_dir), config.retry));
    let ctx = Context {
        config,
        datasets: &datasets,
        engine: PromptEngine::new(templates),
        gateways,
        translator,
        out_dir,
    };

    log::info!(
        "{} planned, {} resumed, {} to execute",
        jobs.len(),
        resumed,
        pending.len()
    );
    let failure_budget = config.max_failure_fraction * jobs.len() as f64;
    let next = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let finished: Mutex<Vec<(usize, RunRecord, Telemetry)>> = Mutex::new(Vec::with_capacity(pending.len()));
    let append_error: Mutex<Option<RunError>> = Mutex::new(None);
    let workers = config.parallelism.min(pending.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&job_index) = pending.get(i) else { break };
                let (record, telemetry) = ctx.execute(&jobs[job_index]);
                if let Outcome::CallFailed { stage, error } = &record.outcome {
                    log::warn!("{}: {stage:?} failed: {error}", keys[job_index].example_id);
                    let n = failures.fetch_add(1, Ordering::SeqCst) + 1;
                    if n as f64 > failure_budget {
                        log::error!("{n} failed calls exceed the failure threshold; aborting");
                        abort.store(true, Ordering::SeqCst);
                    }
                }
                {
                    let mut f = partial.lock().unwrap();
                    if let Err(e) = f.write_all(to_line(&record).as_bytes()) {
                        append_error.lock().unwrap().get_or_insert(RunError::Io {
                            path: partial_path.clone(),
                            source: e,
                        });
                    }
                }
                finished.lock().unwrap().push((job_index, record, telemetry));
                let d = done.fetch_add(1, Ordering::SeqCst) + 1;
                if d.is_multiple_of(50) || d == pending.len() {
                    log::info!("{d}/{} executed", pending.len());
                }
            });
        }
    });
    if let Some(e) = append_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut telemetry: Vec<(usize, Telemetry)> = Vec::new();
    for (i, record, t) in finished.into_inner().unwrap() {
        results[i] = Some(record);
        telemetry.push((i, t));
    }
    telemetry.sort_by_key(|(i, _)| *i);
    let records: Vec<RunRecord> = results.into_iter().flatten().collect();

    let records_path = out_dir.join(RECORDS_FILE);
    let body: String = records.iter().map(to_line).collect();
    write_atomic(&records_path, body.as_bytes()).map_err(io_err(&records_path))?;
    let telemetry_path = out_dir.join(TELEMETRY_FILE);
    let body: String = telemetry.iter().map(|(_, t)| to_line(t)).collect();
    write_atomic(&telemetry_path, body.as_bytes()).map_err(io_err(&telemetry_path))?;
    drop(partial);
    fs::remove_file(&partial_path).map_err(io_err(&partial_path))?;

    let counts = &mut manifest.counts;
    counts.records = records.len();
    counts.call_failures = records.iter().filter(|r| r.outcome.is_call_failure()).count();
    counts.parse_failures = records
        .iter()
        .filter(|r| matches!(r.outcome, Outcome::ParseFailed { .. }))
        .count();
    counts.scored = counts.records - counts.call_failures;
    counts.empty_translations = records
        .iter()
        .filter_map(|r| r.outcome.parsed())
        .filter(|p| p.sections.get(&Section::Translation).is_some_and(|t| t.trim().is_empty()))
        .count();
    counts.backend_calls = ctx.gateways.iter().map(|g| g.stats().backend_calls()).sum();
    counts.cache_hits = ctx.gateways.iter().map(|g| g.stats().cache_hits()).sum();
    counts.mt_provider_calls = ctx.translator.as_ref().map_or(0, Translator::provider_calls);
    manifest.status = if abort.load(Ordering::SeqCst) {
        RunStatus::Aborted
    } else if counts.call_failures > 0 {
        RunStatus::Partial
    } else {
        RunStatus::Complete
    };
    manifest.save(out_dir)?;
    Ok(RunSummary {
        out_dir: out_dir.to_owned(),
        status: manifest.status,
        counts: manifest.counts,
    })
}

/// Translate every sampled classification example into the MT cache.
/// Returns (translated, failed).
pub fn warm_translation_cache(config: &RunConfig) -> Result<(usize, usize), RunError> {
    let backends = Backends::from_config(config)?;
    let provider = backends
        .translator
        .ok_or_else(|| RunError::Backend("no [translator] configured".into()))?;
    let target = config.translator.as_ref().map_or("en", |t| t.target_lang.as_str()).to_owned();
    let translator = Translator::new(provider, Some(&config.cache_dir), config.retry);
    let datasets = prepare_datasets(config)?;
    let (mut ok, mut failed) = (0, 0);
    for ds in &datasets {
        if let Examples::Classification(examples) = &ds.examples {
            for ex in examples {
                match translator.translate(&ex.text, &ds.config.source_lang, &target) {
                    Ok(_) => ok += 1,
                    Err(e) => {
                        log::warn!("{}/{}: {e}", ds.config.name, ex.id);
                        failed += 1;
                    }
                }
            }
        }
    }
    Ok((ok, failed))
}

pub fn load_telemetry(dir: &Path) -> Result<Vec<Telemetry>, RunError> {
    read_jsonl(&dir.join(TELEMETRY_FILE), false)
}
