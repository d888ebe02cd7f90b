//! Declarative run configuration (TOML).
//!
//! Relative paths are resolved against the directory of the config file.
//! See `configs/full_grid.toml` at the workspace root for a full grid and
//! `testdata/mock/config.toml` for an offline example.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetFormat, DatasetSchema, LabelSet};
use crate::gateway::Decoding;
use crate::metrics::ParseFailurePolicy;
use crate::parser::ParseMode;
use crate::prompt::{Strategy, TaskKind};
use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKind {
    #[default]
    Delimited,
    RecordStream,
}

fn default_delimiter() -> char {
    ','
}

fn default_source_lang() -> String {
    "mr".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub task: TaskKind,
    pub path: PathBuf,
    #[serde(default)]
    pub format: FormatKind,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub id_field: Option<String>,
    pub text_field: String,
    /// Gold label field (classification).
    #[serde(default)]
    pub label_field: Option<String>,
    /// Reference headline field (generation).
    #[serde(default)]
    pub reference_field: Option<String>,
    #[serde(default)]
    pub english_reference_field: Option<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub label_map: BTreeMap<String, String>,
    #[serde(default)]
    pub task_description: Option<String>,
    /// Examples to evaluate; all when absent.
    #[serde(default)]
    pub sample_n: Option<usize>,
    /// Overrides the run seed for this dataset.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_source_lang")]
    pub source_lang: String,
}

impl DatasetConfig {
    pub fn schema(&self) -> DatasetSchema {
        let target = match self.task {
            TaskKind::Classification => self.label_field.clone(),
            TaskKind::Generation => self.reference_field.clone(),
        };
        DatasetSchema {
            format: match self.format {
                FormatKind::Delimited => DatasetFormat::Delimited {
                    delimiter: self.delimiter,
                },
                FormatKind::RecordStream => DatasetFormat::RecordStream,
            },
            id_field: self.id_field.clone(),
            text_field: self.text_field.clone(),
            target_field: target.unwrap_or_default(),
            english_reference_field: self.english_reference_field.clone(),
            label_map: self.label_map.clone(),
        }
    }

    pub fn label_set(&self) -> Result<LabelSet, ConfigError> {
        LabelSet::new(self.name.clone(), self.labels.iter().cloned())
            .map_err(|e| ConfigError::Invalid(format!("dataset {}: {e}", self.name)))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(format!("dataset {}: {m}", self.name)));
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be non-empty and contain no path separators".into());
        }
        match self.task {
            TaskKind::Classification => {
                if self.label_field.is_none() {
                    return bad("classification datasets need label_field".into());
                }
                self.label_set()?;
                if self.task_description.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return bad("classification datasets need a task_description".into());
                }
                self.schema()
                    .check_label_map(&self.label_set()?)
                    .map_err(|e| ConfigError::Invalid(format!("dataset {}: {e}", self.name)))?;
            }
            TaskKind::Generation => {
                if self.reference_field.is_none() {
                    return bad("generation datasets need reference_field".into());
                }
                if !self.labels.is_empty() || !self.label_map.is_empty() {
                    return bad("generation datasets take no labels".into());
                }
            }
        }
        if !crate::mt::is_well_formed_lang(&self.source_lang) {
            return bad(format!("malformed source_lang {:?}", self.source_lang));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    OpenaiCompatible,
    Mock,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Short name used in reports and CLI filters.
    pub name: String,
    pub model_id: String,
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Restrict this model to the named datasets.
    #[serde(default)]
    pub datasets: Option<Vec<String>>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl ModelConfig {
    pub fn runs_on(&self, dataset: &str) -> bool {
        self.datasets.as_ref().is_none_or(|d| d.iter().any(|n| n == dataset))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorConfig {
    #[serde(default)]
    pub provider: TranslatorKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_target_lang")]
    pub target_lang: String,
    /// Provider stamp recorded with translations.
    #[serde(default = "default_mt_name")]
    pub name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_target_lang() -> String {
    "en".into()
}

fn default_mt_name() -> String {
    "http-mt".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    #[serde(default)]
    pub llm_fixture: Option<PathBuf>,
    #[serde(default)]
    pub mt_fixture: Option<PathBuf>,
}

fn default_seed() -> u64 {
    7
}

fn default_parallelism() -> usize {
    4
}

fn default_failure_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub parse_mode: ParseMode,
    #[serde(default)]
    pub parse_failures: ParseFailurePolicy,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Abort when more than this fraction of calls fail permanently.
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    /// Issue half/full translation generation as two calls (headline, then
    /// back-translation) instead of one prompt.
    #[serde(default)]
    pub two_call_mode: bool,
    #[serde(default)]
    pub skip_invalid: bool,
    /// Caps every dataset's sample size.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub strategies: Vec<Strategy>,
    pub datasets: Vec<DatasetConfig>,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub translator: Option<TranslatorConfig>,
    #[serde(default)]
    pub mock: MockConfig,
    /// Replace every provider with the mock fixtures.
    #[serde(default)]
    pub use_mock: bool,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        config.resolve_paths(&base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.cache_dir = resolve(base, &self.cache_dir);
        self.output_dir = resolve(base, &self.output_dir);
        if let Some(t) = &self.template_dir {
            self.template_dir = Some(resolve(base, t));
        }
        for d in &mut self.datasets {
            d.path = resolve(base, &d.path);
        }
        for p in [&mut self.mock.llm_fixture, &mut self.mock.mt_fixture].into_iter().flatten() {
            *p = resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.datasets.is_empty() {
            return invalid("no datasets configured");
        }
        if self.models.is_empty() {
            return invalid("no models configured");
        }
        if self.strategies.is_empty() {
            return invalid("no strategies configured");
        }
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return invalid("max_failure_fraction must be within [0, 1]");
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 || self.decoding.max_tokens == 0 {
            return invalid("decoding needs temperature >= 0 and max_tokens > 0");
        }
        let mut names = std::collections::HashSet::new();
        for d in &self.datasets {
            d.validate()?;
            if !names.insert(&d.name) {
                return Err(ConfigError::Invalid(format!("duplicate dataset name {}", d.name)));
            }
            if self.strategies_for(d).is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "dataset {} ({}) has no compatible strategy among [{}]",
                    d.name,
                    d.task,
                    self.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let mut model_names = std::collections::HashSet::new();
        for m in &self.models {
            if m.name.trim().is_empty() || m.model_id.trim().is_empty() {
                return invalid("models need a name and a model_id");
            }
            if !model_names.insert(&m.name) {
                return Err(ConfigError::Invalid(format!("duplicate model name {}", m.name)));
            }
            if let Some(ds) = &m.datasets {
                for n in ds {
                    if !self.datasets.iter().any(|d| &d.name == n) {
                        return Err(ConfigError::Invalid(format!("model {} lists unknown dataset {n}", m.name)));
                    }
                }
            }
            let mock = self.use_mock || m.provider == ProviderKind::Mock;
            if mock && self.mock.llm_fixture.is_none() {
                return Err(ConfigError::Invalid(format!("model {} uses the mock but mock.llm_fixture is unset", m.name)));
            }
            if !mock && m.endpoint_url.is_none() {
                return Err(ConfigError::Invalid(format!("model {} needs endpoint_url", m.name)));
            }
        }
        if self.strategies.contains(&Strategy::Pretranslated) {
            let Some(t) = &self.translator else {
                return invalid("strategy pretranslated needs a [translator] section");
            };
            if !crate::mt::is_well_formed_lang(&t.target_lang) {
                return invalid("translator.target_lang is malformed");
            }
            let mock = self.use_mock || t.provider == TranslatorKind::Mock;
            if mock && self.mock.mt_fixture.is_none() {
                return invalid("translator uses the mock but mock.mt_fixture is unset");
            }
            if !mock && t.endpoint_url.is_none() {
                return invalid("translator needs endpoint_url");
            }
        }
        Ok(())
    }

    /// Configured strategies compatible with a dataset's task, in config order.
    pub fn strategies_for(&self, dataset: &DatasetConfig) -> Vec<Strategy> {
        let mut out: Vec<Strategy> = Vec::new();
        for s in &self.strategies {
            if s.task() == dataset.task && !out.contains(s) {
                out.push(*s);
            }
        }
        out
    }

    /// Effective sample size for a dataset.
    pub fn sample_size(&self, dataset: &DatasetConfig) -> Option<usize> {
        match (dataset.sample_n, self.limit) {
            (Some(n), Some(l)) => Some(n.min(l)),
            (n, l) => n.or(l),
        }
    }

    /// Hash of every setting that affects records. Output and cache
    /// locations are excluded; dataset files enter by content digest.
    pub fn fingerprint(&self, dataset_digests: &BTreeMap<String, String>, template_digests: &BTreeMap<String, String>) -> String {
        let mut view = self.clone();
        view.output_dir = PathBuf::new();
        view.cache_dir = PathBuf::new();
        view.template_dir = None;
        view.mock = MockConfig::default();
        view.retry = RetryPolicy::default();
        view.parallelism = 1;
        for d in &mut view.datasets {
            d.path = PathBuf::new();
        }
        let payload = serde_json::json!({
            "config": view,
            "datasets": dataset_digests,
            "templates": template_digests,
        });
        hex::encode(Sha256::digest(payload.to_string().as_bytes()))
    }
}
