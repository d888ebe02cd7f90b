//! Aggregation of run records into error-rate and ROUGE-L tables.
//!
//! Every number is recomputed from [`RunRecord`]s: cells through
//! [`error_rate_with`] and [`mean_f1_pct`], per-model averages through
//! [`weighted_average`] over the cells' evaluated counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{error_rate_with, format_pct, mean_f1_pct, weighted_average, ErrorStats, ParseFailurePolicy};
use crate::parser::ParseMode;
use crate::prompt::{Strategy, TaskKind};
use crate::runner::{load_records, Manifest, Outcome, RunError, RunRecord};
use crate::store::write_atomic;

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("incompatible runs: {0}")]
    IncompatibleRuns(String),
    #[error("nothing to report: no records")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A run directory's manifest and records.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<RunRecord>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self, ReportError> {
        Ok(Self {
            dir: dir.to_owned(),
            manifest: Manifest::load(dir)?,
            records: load_records(dir)?,
        })
    }
}

/// Per-cell bookkeeping shared by both tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub records: usize,
    pub parse_failures: usize,
    pub call_failures: usize,
    /// Parsed only under the lenient rules.
    pub lenient_recoveries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationCell {
    pub model: String,
    pub dataset: String,
    pub strategy: Strategy,
    /// `None` when no record could be scored.
    pub stats: Option<ErrorStats>,
    pub counts: CellCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageCell {
    pub model: String,
    pub strategy: Strategy,
    pub error_pct: f64,
    /// Total evaluated examples across the averaged datasets.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCell {
    pub model: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub rouge_l_pct: Option<f64>,
    pub english_rouge_l_pct: Option<f64>,
    /// Scored examples.
    pub n: usize,
    pub counts: CellCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub policy: ParseFailurePolicy,
    pub models: Vec<String>,
    pub classification_datasets: Vec<String>,
    pub generation_datasets: Vec<String>,
    pub classification_strategies: Vec<Strategy>,
    pub generation_strategies: Vec<Strategy>,
    pub classification: Vec<ClassificationCell>,
    pub averages: Vec<AverageCell>,
    pub generation: Vec<GenerationCell>,
}

/// One number of the report, as written to the CSV and compared by diffs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellValue {
    pub table: &'static str,
    pub model: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub metric: &'static str,
    pub value: Option<f64>,
    pub n: usize,
    pub parse_failures: usize,
    pub call_failures: usize,
}

const AVERAGE: &str = "Average";

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_owned());
    }
}

fn check_compatible(runs: &[RunData], policy_override: Option<ParseFailurePolicy>) -> Result<ParseFailurePolicy, ReportError> {
    let first = &runs[0];
    let policy = policy_override.unwrap_or(first.manifest.parse_failures);
    let mut seen: HashMap<&str, (&Path, &crate::runner::DatasetManifest)> = HashMap::new();
    for run in runs {
        if policy_override.is_none() && run.manifest.parse_failures != policy {
            return Err(ReportError::IncompatibleRuns(format!(
                "{} and {} use different parse-failure policies",
                first.dir.display(),
                run.dir.display()
            )));
        }
        for d in &run.manifest.datasets {
            match seen.get(d.name.as_str()) {
                None => {
                    seen.insert(&d.name, (&run.dir, d));
                }
                Some((dir, other)) => {
                    let what = if other.task != d.task {
                        Some("task")
                    } else if other.labels != d.labels {
                        Some("label set")
                    } else if other.schema != d.schema {
                        Some("schema")
                    } else {
                        None
                    };
                    if let Some(what) = what {
                        return Err(ReportError::IncompatibleRuns(format!(
                            "dataset {} has a different {what} in {} and {}",
                            d.name,
                            dir.display(),
                            run.dir.display()
                        )));
                    }
                }
            }
        }
    }
    let mut keys = HashSet::new();
    for run in runs {
        for r in &run.records {
            if !keys.insert(r.key()) {
                return Err(ReportError::IncompatibleRuns(format!(
                    "record {}/{}/{}/{} appears in more than one run",
                    r.dataset,
                    r.model,
                    r.strategy.name(),
                    r.example_id
                )));
            }
        }
    }
    Ok(policy)
}

fn counts_of(records: &[&RunRecord]) -> CellCounts {
    let mut c = CellCounts {
        records: records.len(),
        ..CellCounts::default()
    };
    for r in records {
        match &r.outcome {
            Outcome::Parsed { parsed } => {
                if parsed.parse_mode_used == ParseMode::Lenient {
                    c.lenient_recoveries += 1;
                }
            }
            Outcome::ParseFailed { .. } => c.parse_failures += 1,
            Outcome::CallFailed { .. } => c.call_failures += 1,
        }
    }
    c
}

/// Build the report tables from one or more runs. Runs may be combined when
/// they agree on every shared dataset's task, schema and label set.
pub fn build_report(runs: &[RunData], policy_override: Option<ParseFailurePolicy>) -> Result<ReportTable, ReportError> {
    if runs.iter().all(|r| r.records.is_empty()) {
        return Err(ReportError::Empty);
    }
    let policy = check_compatible(runs, policy_override)?;

    let mut models = Vec::new();
    let mut classification_datasets = Vec::new();
    let mut generation_datasets = Vec::new();
    let mut groups: BTreeMap<(usize, usize, Strategy), Vec<&RunRecord>> = BTreeMap::new();
    let mut present: HashSet<Strategy> = HashSet::new();
    // Manifest order first, so tables follow the config rather than record order.
    for run in runs {
        for m in &run.manifest.models {
            if run.records.iter().any(|r| r.model == m.name) {
                push_unique(&mut models, &m.name);
            }
        }
        for d in &run.manifest.datasets {
            if run.records.iter().any(|r| r.dataset == d.name) {
                match d.task {
                    TaskKind::Classification => push_unique(&mut classification_datasets, &d.name),
                    TaskKind::Generation => push_unique(&mut generation_datasets, &d.name),
                }
            }
        }
    }
    for run in runs {
        for r in &run.records {
            push_unique(&mut models, &r.model);
            match r.task {
                TaskKind::Classification => push_unique(&mut classification_datasets, &r.dataset),
                TaskKind::Generation => push_unique(&mut generation_datasets, &r.dataset),
            }
        }
    }
    let dataset_index = |name: &str| {
        classification_datasets
            .iter()
            .chain(&generation_datasets)
            .position(|d| d == name)
            .expect("collected above")
    };
    for run in runs {
        for r in &run.records {
            let m = models.iter().position(|x| x == &r.model).expect("collected above");
            groups.entry((m, dataset_index(&r.dataset), r.strategy)).or_default().push(r);
            present.insert(r.strategy);
        }
    }
    let strategies_of = |task: TaskKind| -> Vec<Strategy> {
        Strategy::ALL
            .into_iter()
            .filter(|s| s.task() == task && present.contains(s))
            .collect()
    };

    let mut classification = Vec::new();
    let mut generation = Vec::new();
    for ((m, d, strategy), records) in &groups {
        let model = models[*m].clone();
        let counts = counts_of(records);
        let scored: Vec<&RunRecord> = records.iter().copied().filter(|r| !r.outcome.is_call_failure()).collect();
        match strategy.task() {
            TaskKind::Classification => {
                let predictions: Vec<Option<&str>> = scored.iter().map(|r| r.predicted_label()).collect();
                let golds: Vec<&str> = scored.iter().map(|r| r.gold.as_str()).collect();
                classification.push(ClassificationCell {
                    model,
                    dataset: classification_datasets[*d].clone(),
                    strategy: *strategy,
                    stats: error_rate_with(&predictions, &golds, policy).ok(),
                    counts,
                });
            }
            TaskKind::Generation => {
                let f1s: Vec<f64> = scored.iter().filter_map(|r| r.rouge.map(|s| s.f1)).collect();
                let english: Vec<f64> = scored.iter().filter_map(|r| r.english_rouge.map(|s| s.f1)).collect();
                generation.push(GenerationCell {
                    model,
                    dataset: generation_datasets[*d - classification_datasets.len()].clone(),
                    strategy: *strategy,
                    rouge_l_pct: mean_f1_pct(&f1s).ok(),
                    english_rouge_l_pct: mean_f1_pct(&english).ok(),
                    n: f1s.len(),
                    counts,
                });
            }
        }
    }

    let classification_strategies = strategies_of(TaskKind::Classification);
    let mut averages = Vec::new();
    for model in &models {
        for &strategy in &classification_strategies {
            let parts: Vec<(f64, usize)> = classification
                .iter()
                .filter(|c| &c.model == model && c.strategy == strategy)
                .filter_map(|c| c.stats.map(|s| (s.error_pct, s.n_total)))
                .collect();
            if let Ok(error_pct) = weighted_average(&parts) {
                averages.push(AverageCell {
                    model: model.clone(),
                    strategy,
                    error_pct,
                    n: parts.iter().map(|&(_, n)| n).sum(),
                });
            }
        }
    }

    Ok(ReportTable {
        policy,
        generation_strategies: strategies_of(TaskKind::Generation),
        classification_strategies,
        models,
        classification_datasets,
        generation_datasets,
        classification,
        averages,
        generation,
    })
}

impl ReportTable {
    pub fn classification_cell(&self, model: &str, dataset: &str, strategy: Strategy) -> Option<&ClassificationCell> {
        self.classification
            .iter()
            .find(|c| c.model == model && c.dataset == dataset && c.strategy == strategy)
    }

    pub fn average(&self, model: &str, strategy: Strategy) -> Option<&AverageCell> {
        self.averages.iter().find(|a| a.model == model && a.strategy == strategy)
    }

    pub fn generation_cell(&self, model: &str, dataset: &str, strategy: Strategy) -> Option<&GenerationCell> {
        self.generation
            .iter()
            .find(|c| c.model == model && c.dataset == dataset && c.strategy == strategy)
    }

    /// Every reported number in table order.
    pub fn cells(&self) -> Vec<CellValue> {
        let mut out = Vec::new();
        for model in &self.models {
            for dataset in &self.classification_datasets {
                for &strategy in &self.classification_strategies {
                    if let Some(c) = self.classification_cell(model, dataset, strategy) {
                        out.push(CellValue {
                            table: "classification",
                            model: model.clone(),
                            dataset: dataset.clone(),
                            strategy,
                            metric: "error_pct",
                            value: c.stats.map(|s| s.error_pct),
                            n: c.stats.map_or(0, |s| s.n_total),
                            parse_failures: c.counts.parse_failures,
                            call_failures: c.counts.call_failures,
                        });
                    }
                }
            }
            for &strategy in &self.classification_strategies {
                if let Some(a) = self.average(model, strategy) {
                    out.push(CellValue {
                        table: "classification",
                        model: model.clone(),
                        dataset: AVERAGE.into(),
                        strategy,
                        metric: "weighted_error_pct",
                        value: Some(a.error_pct),
                        n: a.n,
                        parse_failures: 0,
                        call_failures: 0,
                    });
                }
            }
        }
        for model in &self.models {
            for dataset in &self.generation_datasets {
                for &strategy in &self.generation_strategies {
                    if let Some(c) = self.generation_cell(model, dataset, strategy) {
                        let base = CellValue {
                            table: "generation",
                            model: model.clone(),
                            dataset: dataset.clone(),
                            strategy,
                            metric: "rouge_l_f1_pct",
                            value: c.rouge_l_pct,
                            n: c.n,
                            parse_failures: c.counts.parse_failures,
                            call_failures: c.counts.call_failures,
                        };
                        if c.english_rouge_l_pct.is_some() {
                            out.push(CellValue {
                                metric: "english_rouge_l_f1_pct",
                                value: c.english_rouge_l_pct,
                                ..base.clone()
                            });
                        }
                        out.push(base);
                    }
                }
            }
        }
        out
    }

    /// Fixed-width plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if !self.classification.is_empty() {
            let policy = match self.policy {
                ParseFailurePolicy::CountWrong => "parse failures counted as errors",
                ParseFailurePolicy::Exclude => "parse failures excluded",
            };
            let _ = writeln!(out, "Classification error rate (%), {policy}");
            let mut header = vec!["model".to_owned(), "dataset".to_owned()];
            header.extend(self.classification_strategies.iter().map(|s| s.display_name().to_owned()));
            let mut rows = vec![header];
            for model in &self.models {
                let mut any = false;
                for dataset in &self.classification_datasets {
                    let cells: Vec<Option<&ClassificationCell>> = self
                        .classification_strategies
                        .iter()
                        .map(|&s| self.classification_cell(model, dataset, s))
                        .collect();
                    if cells.iter().all(Option::is_none) {
                        continue;
                    }
                    any = true;
                    let mut row = vec![model.clone(), dataset.clone()];
                    row.extend(cells.iter().map(|c| match c.and_then(|c| c.stats) {
                        Some(s) => format_pct(s.error_pct),
                        None => "-".into(),
                    }));
                    rows.push(row);
                }
                if any {
                    let mut row = vec![model.clone(), AVERAGE.to_owned()];
                    row.extend(self.classification_strategies.iter().map(|&s| match self.average(model, s) {
                        Some(a) => format_pct(a.error_pct),
                        None => "-".into(),
                    }));
                    rows.push(row);
                }
            }
            render_grid(&mut out, &rows, 2);
        }
        if !self.generation.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "Headline generation ROUGE-L F1 (%)");
            let mut header = vec!["model".to_owned(), "dataset".to_owned()];
            header.extend(self.generation_strategies.iter().map(|s| s.display_name().to_owned()));
            let mut rows = vec![header];
            let mut english_rows = Vec::new();
            for model in &self.models {
                for dataset in &self.generation_datasets {
                    let cells: Vec<Option<&GenerationCell>> = self
                        .generation_strategies
                        .iter()
                        .map(|&s| self.generation_cell(model, dataset, s))
                        .collect();
                    if cells.iter().all(Option::is_none) {
                        continue;
                    }
                    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), format_pct);
                    let mut row = vec![model.clone(), dataset.clone()];
                    row.extend(cells.iter().map(|c| fmt(c.and_then(|c| c.rouge_l_pct))));
                    rows.push(row);
                    if cells.iter().flatten().any(|c| c.english_rouge_l_pct.is_some()) {
                        let mut row = vec![model.clone(), dataset.clone()];
                        row.extend(cells.iter().map(|c| fmt(c.and_then(|c| c.english_rouge_l_pct))));
                        english_rows.push(row);
                    }
                }
            }
            render_grid(&mut out, &rows, 2);
            if !english_rows.is_empty() {
                let _ = writeln!(out, "\nEnglish intermediate headline ROUGE-L F1 (%)");
                let mut header = vec!["model".to_owned(), "dataset".to_owned()];
                header.extend(self.generation_strategies.iter().map(|s| s.display_name().to_owned()));
                english_rows.insert(0, header);
                render_grid(&mut out, &english_rows, 2);
            }
        }

        let _ = writeln!(out, "\nDiagnostics");
        let mut rows = vec![[
            "model",
            "dataset",
            "strategy",
            "records",
            "scored",
            "parse_failures",
            "lenient",
            "call_failures",
        ]
        .map(str::to_owned)
        .to_vec()];
        let diag = self
            .classification
            .iter()
            .map(|c| (&c.model, &c.dataset, c.strategy, c.counts))
            .chain(self.generation.iter().map(|c| (&c.model, &c.dataset, c.strategy, c.counts)));
        for (model, dataset, strategy, c) in diag {
            rows.push(vec![
                model.clone(),
                dataset.clone(),
                strategy.display_name().to_owned(),
                c.records.to_string(),
                (c.records - c.call_failures).to_string(),
                c.parse_failures.to_string(),
                c.lenient_recoveries.to_string(),
                c.call_failures.to_string(),
            ]);
        }
        render_grid(&mut out, &rows, 3);
        out
    }

    /// Machine-readable table with full-precision values.
    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "table",
            "model",
            "dataset",
            "strategy",
            "metric",
            "value",
            "n",
            "parse_failures",
            "call_failures",
        ])
        .expect("in-memory write");
        for c in self.cells() {
            w.write_record([
                c.table.to_owned(),
                c.model,
                c.dataset,
                c.strategy.name().to_owned(),
                c.metric.to_owned(),
                c.value.map(|v| v.to_string()).unwrap_or_default(),
                c.n.to_string(),
                c.parse_failures.to_string(),
                c.call_failures.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Write `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        for (name, body) in [(REPORT_TEXT, self.render_text()), (REPORT_CSV, self.render_csv())] {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes()).map_err(|source| ReportError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Left-align the first `label_cols` columns, right-align the rest.
fn render_grid(out: &mut String, rows: &[Vec<String>], label_cols: usize) {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().filter_map(|r| r.get(i)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i < label_cols {
                line.push_str(cell);
                line.extend(std::iter::repeat_n(' ', pad));
            } else {
                line.extend(std::iter::repeat_n(' ', pad));
                line.push_str(cell);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub table: &'static str,
    pub model: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl DiffRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.b? - self.a?)
    }
}

/// Cell-by-cell comparison; cells present in either report are listed.
pub fn diff_reports(a: &ReportTable, b: &ReportTable) -> Vec<DiffRow> {
    type Key = (&'static str, String, String, Strategy, &'static str);
    let key = |c: &CellValue| -> Key { (c.table, c.model.clone(), c.dataset.clone(), c.strategy, c.metric) };
    let a_cells = a.cells();
    let b_cells = b.cells();
    let b_map: HashMap<Key, Option<f64>> = b_cells.iter().map(|c| (key(c), c.value)).collect();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for c in &a_cells {
        let k = key(c);
        rows.push(DiffRow {
            table: c.table,
            model: c.model.clone(),
            dataset: c.dataset.clone(),
            strategy: c.strategy,
            metric: c.metric,
            a: c.value,
            b: b_map.get(&k).copied().flatten(),
        });
        seen.insert(k);
    }
    for c in &b_cells {
        if !seen.contains(&key(c)) {
            rows.push(DiffRow {
                table: c.table,
                model: c.model.clone(),
                dataset: c.dataset.clone(),
                strategy: c.strategy,
                metric: c.metric,
                a: None,
                b: c.value,
            });
        }
    }
    rows
}

pub fn render_diff(rows: &[DiffRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), format_pct);
    let mut grid = vec![["table", "model", "dataset", "strategy", "metric", "a", "b", "delta"]
        .map(str::to_owned)
        .to_vec()];
    for r in rows {
        grid.push(vec![
            r.table.to_owned(),
            r.model.clone(),
            r.dataset.clone(),
            r.strategy.display_name().to_owned(),
            r.metric.to_owned(),
            fmt(r.a),
            fmt(r.b),
            r.delta().map_or("-".to_owned(), |d| format!("{}{}", if d >= 0.0 { "+" } else { "" }, format_pct(d))),
        ]);
    }
    let mut out = String::new();
    render_grid(&mut out, &grid, 5);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RougeScore;
    use crate::parser::ParsedOutput;
    use crate::runner::{Counts, DatasetManifest, ModelManifest, RunStatus};
    use crate::dataset::DatasetSchema;

    fn manifest(datasets: &[(&str, TaskKind, &[&str])]) -> Manifest {
        Manifest {
            format_version: 1,
            config_hash: "h".into(),
            templates: BTreeMap::new(),
            seed: 0,
            parse_mode: ParseMode::Strict,
            parse_failures: ParseFailurePolicy::CountWrong,
            two_call_mode: false,
            datasets: datasets
                .iter()
                .map(|(name, task, labels)| DatasetManifest {
                    name: (*name).into(),
                    task: *task,
                    file_digest: "d".into(),
                    schema: DatasetSchema::delimited(',', "text", "label"),
                    labels: labels.iter().map(|s| s.to_string()).collect(),
                    source_lang: "mr".into(),
                    n_loaded: 0,
                    skipped: vec![],
                    n_sampled: 0,
                    sample_seed: 0,
                })
                .collect(),
            models: vec![ModelManifest {
                name: "m".into(),
                model_id: "m-1".into(),
                backend: "mock".into(),
            }],
            strategies: vec![],
            translator: None,
            status: RunStatus::Complete,
            counts: Counts::default(),
        }
    }

    fn class_record(dataset: &str, strategy: Strategy, i: usize, outcome: Option<bool>) -> RunRecord {
        let (outcome, correct) = match outcome {
            Some(ok) => (
                Outcome::Parsed {
                    parsed: ParsedOutput {
                        sections: BTreeMap::new(),
                        predicted_label: Some(if ok { "A" } else { "B" }.into()),
                        parse_mode_used: ParseMode::Strict,
                    },
                },
                Some(ok),
            ),
            None => (
                Outcome::ParseFailed {
                    failure: crate::parser::ParseFailure::new(crate::parser::FailureReason::MissingSection, ""),
                },
                Some(false),
            ),
        };
        RunRecord {
            dataset: dataset.into(),
            task: TaskKind::Classification,
            model: "m".into(),
            model_id: "m-1".into(),
            strategy,
            example_id: i.to_string(),
            prompt_digest: None,
            raw_response_refs: vec![],
            finish_reason: None,
            translated_input: None,
            outcome,
            gold: "A".into(),
            correct,
            rouge: None,
            english_rouge: None,
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }

    fn run_with(records: Vec<RunRecord>, datasets: &[(&str, TaskKind, &[&str])]) -> RunData {
        RunData {
            dir: PathBuf::from("run"),
            manifest: manifest(datasets),
            records,
        }
    }

    /// `k` wrong answers out of `n` for one dataset.
    fn dataset_records(dataset: &str, strategy: Strategy, k: usize, n: usize) -> Vec<RunRecord> {
        (0..n).map(|i| class_record(dataset, strategy, i, Some(i >= k))).collect()
    }

    #[test]
    fn weighted_average_column_matches_published_average() {
        let mut records = dataset_records("sent", Strategy::Standard, 21, 103);
        records.extend(dataset_records("news", Strategy::Standard, 3, 98));
        records.extend(dataset_records("hate", Strategy::Standard, 17, 101));
        let ab: &[&str] = &["A", "B"];
        let run = run_with(
            records,
            &[
                ("sent", TaskKind::Classification, ab),
                ("news", TaskKind::Classification, ab),
                ("hate", TaskKind::Classification, ab),
            ],
        );
        let table = build_report(&[run], None).unwrap();
        let avg = table.average("m", Strategy::Standard).unwrap();
        assert!((avg.error_pct - 13.57).abs() <= 0.01, "{}", avg.error_pct);
        assert_eq!(avg.n, 302);
        assert_eq!(
            format_pct(table.classification_cell("m", "sent", Strategy::Standard).unwrap().stats.unwrap().error_pct),
            "20.39"
        );
    }

    #[test]
    fn single_dataset_average_equals_cell_and_all_correct_is_zero() {
        let run = run_with(
            dataset_records("sent", Strategy::Cotr, 0, 5),
            &[("sent", TaskKind::Classification, &["A", "B"])],
        );
        let table = build_report(&[run], None).unwrap();
        let cell = table.classification_cell("m", "sent", Strategy::Cotr).unwrap();
        assert_eq!(cell.stats.unwrap().error_pct, 0.0);
        assert_eq!(table.average("m", Strategy::Cotr).unwrap().error_pct, 0.0);
        let text = table.render_text();
        assert!(text.contains("sent     0.00"), "{text}");
        assert!(text.contains("Average  0.00"), "{text}");
    }

    #[test]
    fn parse_failure_policy_changes_denominator() {
        let mut records = dataset_records("sent", Strategy::Standard, 1, 4);
        records.push(class_record("sent", Strategy::Standard, 99, None));
        let ab: &[&str] = &["A", "B"];
        let run = run_with(records, &[("sent", TaskKind::Classification, ab)]);
        let counted = build_report(std::slice::from_ref(&run), None).unwrap();
        let stats = counted.classification_cell("m", "sent", Strategy::Standard).unwrap().stats.unwrap();
        assert_eq!((stats.n_wrong, stats.n_total), (2, 5));
        let excluded = build_report(&[run], Some(ParseFailurePolicy::Exclude)).unwrap();
        let stats = excluded.classification_cell("m", "sent", Strategy::Standard).unwrap().stats.unwrap();
        assert_eq!((stats.n_wrong, stats.n_total), (1, 4));
    }

    #[test]
    fn incompatible_label_sets_are_rejected() {
        let a = run_with(
            dataset_records("sent", Strategy::Standard, 0, 2),
            &[("sent", TaskKind::Classification, &["A", "B"])],
        );
        let mut b = run_with(
            dataset_records("sent", Strategy::Cotr, 0, 2),
            &[("sent", TaskKind::Classification, &["A", "B", "C"])],
        );
        assert!(matches!(build_report(&[a.clone(), b.clone()], None), Err(ReportError::IncompatibleRuns(_))));
        b.manifest.datasets[0].labels = vec!["A".into(), "B".into()];
        let merged = build_report(&[a.clone(), b], None).unwrap();
        assert_eq!(merged.classification_strategies, vec![Strategy::Standard, Strategy::Cotr]);
        assert!(matches!(build_report(&[a.clone(), a], None), Err(ReportError::IncompatibleRuns(_))));
    }

    #[test]
    fn generation_cells_and_diff() {
        let rec = |strategy: Strategy, i: usize, f1: f64| RunRecord {
            task: TaskKind::Generation,
            rouge: Some(RougeScore { precision: f1, recall: f1, f1 }),
            correct: None,
            ..class_record("news", strategy, i, Some(true))
        };
        let records = vec![
            rec(Strategy::Direct, 0, 1.0),
            rec(Strategy::Direct, 1, 0.0),
            rec(Strategy::Full, 0, 4.0 / 7.0),
            rec(Strategy::Full, 1, 1.0),
            rec(Strategy::Full, 2, 0.0),
        ];
        let run = run_with(records, &[("news", TaskKind::Generation, &[])]);
        let table = build_report(std::slice::from_ref(&run), None).unwrap();
        assert_eq!(table.generation_cell("m", "news", Strategy::Direct).unwrap().rouge_l_pct, Some(50.0));
        let full = table.generation_cell("m", "news", Strategy::Full).unwrap().rouge_l_pct.unwrap();
        assert!((full - 52.38).abs() < 0.01);
        assert_eq!(table.generation_strategies, vec![Strategy::Direct, Strategy::Full]);
        let text = table.render_text();
        assert!(text.contains("Without   Full"), "{text}");

        let rows = diff_reports(&table, &table);
        assert!(rows.iter().all(|r| r.delta() == Some(0.0)));
        assert!(render_diff(&rows).contains("+0.00"));
        let csv = table.render_csv();
        assert!(csv.starts_with("table,model,dataset,strategy,metric,value"));
        assert!(csv.contains("generation,m,news,direct,rouge_l_f1_pct,50,2,0,0"), "{csv}");
    }
}
