//! Dataset loading, validation and deterministic subsampling.
//!
//! Two on-disk layouts are accepted: a delimited file with a header row, and a
//! record stream with one JSON object per line. Which fields hold the text,
//! the gold label or the reference headline is declared by a
//! [`DatasetSchema`].

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: row {row}: label {label:?} is not in the label set for {task}")]
    Label {
        path: PathBuf,
        row: usize,
        label: String,
        task: String,
    },
    #[error("{path}: row {row}: {message}")]
    Invalid {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("invalid label set: {0}")]
    LabelSet(String),
}

impl DatasetError {
    fn row(&self) -> Option<usize> {
        match self {
            DatasetError::Schema { row, .. }
            | DatasetError::Label { row, .. }
            | DatasetError::Invalid { row, .. } => Some(*row),
            _ => None,
        }
    }
}

/// Ordered set of canonical labels for one classification task.
///
/// The order is significant: it fixes the order labels are listed in prompts
/// and in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    task_name: String,
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(
        task_name: impl Into<String>,
        labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, DatasetError> {
        let task_name = task_name.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(DatasetError::LabelSet(format!("{task_name}: no labels")));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() || label.trim() != label {
                return Err(DatasetError::LabelSet(format!(
                    "{task_name}: label {label:?} is empty or has surrounding whitespace"
                )));
            }
            if !seen.insert(label.to_lowercase()) {
                return Err(DatasetError::LabelSet(format!(
                    "{task_name}: duplicate label {label:?}"
                )));
            }
        }
        Ok(Self { task_name, labels })
    }

    pub fn task_name(&self) -> &str {
        &self.task_name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Case-insensitive lookup of a canonical label.
    pub fn find(&self, raw: &str) -> Option<&str> {
        let folded = raw.trim().to_lowercase();
        self.labels
            .iter()
            .find(|l| l.to_lowercase() == folded)
            .map(String::as_str)
    }

    /// Map a raw dataset label to its canonical form.
    ///
    /// An exact `label_map` key wins; otherwise the raw value is matched
    /// case-insensitively against the canonical labels. Canonical labels map
    /// to themselves, so the operation is idempotent.
    pub fn canonicalize(&self, raw: &str, label_map: &BTreeMap<String, String>) -> Option<String> {
        let raw = raw.trim();
        if let Some(mapped) = label_map.get(raw) {
            return self.find(mapped).map(str::to_owned);
        }
        self.find(raw).map(str::to_owned)
    }

    /// Labels joined for display in prompts, e.g. `Hate, Non-hate`.
    pub fn joined(&self) -> String {
        self.labels.join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub id: String,
    pub text: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationExample {
    pub id: String,
    pub article: String,
    pub reference_headline: String,
    /// Optional English reference, used to score the English intermediate
    /// headline when a dataset provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub english_reference: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetFormat {
    Delimited { delimiter: char },
    RecordStream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub format: DatasetFormat,
    /// Column holding a stable example id; row numbers are used when absent.
    pub id_field: Option<String>,
    pub text_field: String,
    /// Gold label column for classification, reference headline for generation.
    pub target_field: String,
    pub english_reference_field: Option<String>,
    #[serde(default)]
    pub label_map: BTreeMap<String, String>,
}

impl DatasetSchema {
    pub fn delimited(delimiter: char, text_field: &str, target_field: &str) -> Self {
        Self {
            format: DatasetFormat::Delimited { delimiter },
            id_field: None,
            text_field: text_field.to_owned(),
            target_field: target_field.to_owned(),
            english_reference_field: None,
            label_map: BTreeMap::new(),
        }
    }

    pub fn record_stream(text_field: &str, target_field: &str) -> Self {
        Self {
            format: DatasetFormat::RecordStream,
            ..Self::delimited(',', text_field, target_field)
        }
    }

    pub fn with_label_map<K: Into<String>, V: Into<String>>(
        mut self,
        map: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        self.label_map = map.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
        self
    }

    pub fn with_id_field(mut self, field: &str) -> Self {
        self.id_field = Some(field.to_owned());
        self
    }

    /// Checks that every label_map value is a canonical label, and that no
    /// key spelled like a canonical label is redirected elsewhere.
    pub fn check_label_map(&self, labels: &LabelSet) -> Result<(), DatasetError> {
        for (raw, mapped) in &self.label_map {
            let Some(target) = labels.find(mapped) else {
                return Err(DatasetError::LabelSet(format!(
                    "label_map value {mapped:?} is not one of [{}]",
                    labels.joined()
                )));
            };
            if let Some(own) = labels.find(raw) {
                if own != target {
                    return Err(DatasetError::LabelSet(format!(
                        "label_map redirects canonical label {own:?} to {target:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip rows that fail validation instead of aborting the load.
    pub skip_invalid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub examples: Vec<T>,
    pub skipped: Vec<SkippedRow>,
}

/// A raw row: 1-based data row number and field lookup.
struct RawRow {
    row: usize,
    fields: BTreeMap<String, String>,
}

impl RawRow {
    fn get(&self, path: &Path, field: &str) -> Result<&str, DatasetError> {
        self.fields
            .get(field)
            .map(String::as_str)
            .ok_or_else(|| DatasetError::Schema {
                path: path.to_owned(),
                row: self.row,
                message: format!("missing field {field:?}"),
            })
    }
}

fn read_rows(path: &Path, schema: &DatasetSchema) -> Result<Vec<RawRow>, DatasetError> {
    let content = fs::read_to_string(path).map_err(|source| DatasetError::File {
        path: path.to_owned(),
        source,
    })?;
    let content = content.strip_prefix('\u{feff}').unwrap_or(&content);
    if content.trim().is_empty() {
        return Ok(Vec::new());
    }
    match schema.format {
        DatasetFormat::Delimited { delimiter } => read_delimited(path, content, delimiter),
        DatasetFormat::RecordStream => read_record_stream(path, content),
    }
}

fn read_delimited(path: &Path, content: &str, delimiter: char) -> Result<Vec<RawRow>, DatasetError> {
    if !delimiter.is_ascii() {
        return Err(DatasetError::Schema {
            path: path.to_owned(),
            row: 0,
            message: format!("delimiter {delimiter:?} must be a single ASCII character"),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(true)
        .from_reader(content.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Schema {
            path: path.to_owned(),
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DatasetError::Schema {
            path: path.to_owned(),
            row,
            message: e.to_string(),
        })?;
        let fields = header
            .iter()
            .cloned()
            .zip(record.iter().map(str::to_owned))
            .collect();
        rows.push(RawRow { row, fields });
    }
    Ok(rows)
}

fn read_record_stream(path: &Path, content: &str) -> Result<Vec<RawRow>, DatasetError> {
    let mut rows = Vec::new();
    for line in content.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row = rows.len() + 1;
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DatasetError::Schema {
                path: path.to_owned(),
                row,
                message: format!("malformed record: {e}"),
            })?;
        let serde_json::Value::Object(map) = value else {
            return Err(DatasetError::Schema {
                path: path.to_owned(),
                row,
                message: "record is not an object".into(),
            });
        };
        let fields = map
            .into_iter()
            .filter_map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    _ => return None,
                };
                Some((k, v))
            })
            .collect();
        rows.push(RawRow { row, fields });
    }
    Ok(rows)
}

fn example_id(row: &RawRow, path: &Path, schema: &DatasetSchema) -> Result<String, DatasetError> {
    match &schema.id_field {
        Some(field) => Ok(row.get(path, field)?.trim().to_owned()),
        None => Ok(row.row.to_string()),
    }
}

fn collect<T>(
    rows: Vec<RawRow>,
    options: LoadOptions,
    mut convert: impl FnMut(&RawRow) -> Result<T, DatasetError>,
) -> Result<Loaded<T>, DatasetError> {
    let mut examples = Vec::with_capacity(rows.len());
    let mut skipped = Vec::new();
    for row in &rows {
        match convert(row) {
            Ok(ex) => examples.push(ex),
            Err(err) if options.skip_invalid && err.row().is_some() => {
                log::warn!("skipping invalid row: {err}");
                skipped.push(SkippedRow {
                    row: row.row,
                    reason: err.to_string(),
                });
            }
            Err(err) => return Err(err),
        }
    }
    Ok(Loaded { examples, skipped })
}

pub fn load_classification_dataset(
    path: &Path,
    schema: &DatasetSchema,
    labels: &LabelSet,
) -> Result<Vec<ClassificationExample>, DatasetError> {
    load_classification_dataset_with(path, schema, labels, LoadOptions::default()).map(|l| l.examples)
}

pub fn load_classification_dataset_with(
    path: &Path,
    schema: &DatasetSchema,
    labels: &LabelSet,
    options: LoadOptions,
) -> Result<Loaded<ClassificationExample>, DatasetError> {
    schema.check_label_map(labels)?;
    let rows = read_rows(path, schema)?;
    collect(rows, options, |row| {
        let id = example_id(row, path, schema)?;
        let text = row.get(path, &schema.text_field)?;
        let raw_label = row.get(path, &schema.target_field)?;
        if text.trim().is_empty() {
            return Err(DatasetError::Invalid {
                path: path.to_owned(),
                row: row.row,
                message: "empty text".into(),
            });
        }
        let gold = labels
            .canonicalize(raw_label, &schema.label_map)
            .ok_or_else(|| DatasetError::Label {
                path: path.to_owned(),
                row: row.row,
                label: raw_label.to_owned(),
                task: labels.task_name().to_owned(),
            })?;
        Ok(ClassificationExample {
            id,
            text: text.to_owned(),
            gold,
        })
    })
}

pub fn load_generation_dataset(
    path: &Path,
    schema: &DatasetSchema,
) -> Result<Vec<GenerationExample>, DatasetError> {
    load_generation_dataset_with(path, schema, LoadOptions::default()).map(|l| l.examples)
}

pub fn load_generation_dataset_with(
    path: &Path,
    schema: &DatasetSchema,
    options: LoadOptions,
) -> Result<Loaded<GenerationExample>, DatasetError> {
    let rows = read_rows(path, schema)?;
    collect(rows, options, |row| {
        let id = example_id(row, path, schema)?;
        let article = row.get(path, &schema.text_field)?;
        let reference = row.get(path, &schema.target_field)?;
        let english_reference = match &schema.english_reference_field {
            Some(field) => Some(row.get(path, field)?.to_owned()),
            None => None,
        };
        if article.trim().is_empty() || reference.trim().is_empty() {
            return Err(DatasetError::Invalid {
                path: path.to_owned(),
                row: row.row,
                message: "empty article or reference headline".into(),
            });
        }
        Ok(GenerationExample {
            id,
            article: article.to_owned(),
            reference_headline: reference.to_owned(),
            english_reference,
        })
    })
}

/// Serialize classification examples in `schema`'s layout, with canonical
/// labels. Loading the output with the same schema yields the same examples.
pub fn write_classification_dataset(
    path: &Path,
    schema: &DatasetSchema,
    examples: &[ClassificationExample],
) -> Result<(), DatasetError> {
    let id_field = schema.id_field.as_deref().unwrap_or("id");
    let rows = examples.iter().map(|ex| {
        vec![
            (id_field, ex.id.as_str()),
            (schema.text_field.as_str(), ex.text.as_str()),
            (schema.target_field.as_str(), ex.gold.as_str()),
        ]
    });
    write_rows(path, schema, rows)
}

pub fn write_generation_dataset(
    path: &Path,
    schema: &DatasetSchema,
    examples: &[GenerationExample],
) -> Result<(), DatasetError> {
    let id_field = schema.id_field.as_deref().unwrap_or("id");
    let rows = examples.iter().map(|ex| {
        let mut row = vec![
            (id_field, ex.id.as_str()),
            (schema.text_field.as_str(), ex.article.as_str()),
            (schema.target_field.as_str(), ex.reference_headline.as_str()),
        ];
        if let (Some(field), Some(value)) = (&schema.english_reference_field, &ex.english_reference) {
            row.push((field.as_str(), value.as_str()));
        }
        row
    });
    write_rows(path, schema, rows)
}

fn write_rows<'a>(
    path: &Path,
    schema: &DatasetSchema,
    rows: impl Iterator<Item = Vec<(&'a str, &'a str)>>,
) -> Result<(), DatasetError> {
    let file_err = |source| DatasetError::File {
        path: path.to_owned(),
        source,
    };
    let mut out = String::new();
    match schema.format {
        DatasetFormat::Delimited { delimiter } => {
            let mut writer = csv::WriterBuilder::new()
                .delimiter(delimiter as u8)
                .from_writer(Vec::new());
            let mut header_written = false;
            for row in rows {
                if !header_written {
                    writer
                        .write_record(row.iter().map(|(k, _)| *k))
                        .map_err(|e| file_err(e.into()))?;
                    header_written = true;
                }
                writer
                    .write_record(row.iter().map(|(_, v)| *v))
                    .map_err(|e| file_err(e.into()))?;
            }
            let bytes = writer.into_inner().map_err(|e| file_err(e.into_error()))?;
            out = String::from_utf8(bytes).expect("csv writer emits the UTF-8 it was given");
        }
        DatasetFormat::RecordStream => {
            for row in rows {
                let map: serde_json::Map<String, serde_json::Value> = row
                    .into_iter()
                    .map(|(k, v)| (k.to_owned(), serde_json::Value::String(v.to_owned())))
                    .collect();
                let _ = writeln!(out, "{}", serde_json::Value::Object(map));
            }
        }
    }
    fs::write(path, out).map_err(file_err)
}

/// SplitMix64: a 64-bit counter-based generator. The state advances by a fixed
/// odd increment and each output is a bijective mix of the counter, so the
/// stream for a seed is identical on every platform.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform-ish value in `0..bound` by widening multiply.
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// Choose `n` examples with a seeded partial Fisher-Yates shuffle.
///
/// The chosen examples are returned in their original input order. When
/// `n >= examples.len()` the input is returned unchanged.
pub fn sample_examples<T: Clone>(examples: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= examples.len() {
        return examples.to_vec();
    }
    let mut indices: Vec<usize> = (0..examples.len()).collect();
    let mut rng = SplitMix64::new(seed);
    for i in 0..n {
        let j = i + rng.below((indices.len() - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut chosen = indices[..n].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| examples[i].clone()).collect()
}
