mod common;

use std::fs;
use std::path::Path;

use cotr_harness::config::RunConfig;
use cotr_harness::metrics::weighted_average;
use cotr_harness::parser::ParseMode;
use cotr_harness::report::{build_report, RunData};
use cotr_harness::runner::{
    load_records, run_experiment, Examples, CallStage, Manifest, Outcome, RunError, RunStatus, PARTIAL_FILE, RECORDS_FILE,
};
use cotr_harness::{Strategy, TaskKind};
use serde_json::{json, Value};
use tempfile::TempDir;

fn setup() -> (TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    common::copy_mock_corpus(dir.path());
    let mut config = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    config.output_dir = dir.path().join("run");
    config.cache_dir = dir.path().join("cache");
    (dir, config)
}

fn only(config: &mut RunConfig, dataset: &str, strategies: &[Strategy]) {
    config.datasets.retain(|d| d.name == dataset);
    config.strategies = strategies.to_vec();
}

fn edit_fixture(dir: &Path, f: impl FnOnce(&mut Vec<Value>)) {
    let path = dir.join("llm_fixture.json");
    let mut fixture: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(fixture["entries"].as_array_mut().unwrap());
    fs::write(&path, fixture.to_string()).unwrap();
}

fn sampled_ids(config: &RunConfig, dataset: &str) -> Vec<String> {
    let datasets = cotr_harness::runner::prepare_datasets(config).unwrap();
    let d = datasets.iter().find(|d| d.config.name == dataset).unwrap();
    match &d.examples {
        Examples::Classification(v) => v.iter().map(|e| e.id.clone()).collect(),
        Examples::Generation(v) => v.iter().map(|e| e.id.clone()).collect(),
    }
}

fn set_script(entries: &mut Vec<Value>, tag: &str, script: Value) {
    entries.retain(|e| e["tag"] != tag);
    entries.push(json!({"tag": tag, "script": script}));
}

#[test]
fn four_examples_two_strategies_yield_eight_deterministic_records() {
    let (dir, mut config) = setup();
    only(&mut config, "sentiment", &[Strategy::Standard, Strategy::Cotr]);
    config.limit = Some(4);
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.status, RunStatus::Complete);
    assert_eq!(summary.counts.records, 8);
    assert_eq!(summary.counts.planned, 8);
    let first = fs::read(config.output_dir.join(RECORDS_FILE)).unwrap();

    let records = load_records(&config.output_dir).unwrap();
    let order: Vec<(Strategy, &str)> = records.iter().map(|r| (r.strategy, r.example_id.as_str())).collect();
    let ids: Vec<&str> = records[..4].iter().map(|r| r.example_id.as_str()).collect();
    assert!(order[..4].iter().all(|(s, _)| *s == Strategy::Standard));
    assert!(order[4..].iter().all(|(s, _)| *s == Strategy::Cotr));
    assert_eq!(ids, records[4..].iter().map(|r| r.example_id.as_str()).collect::<Vec<_>>());
    for r in &records {
        assert_eq!(r.task, TaskKind::Classification);
        assert!(r.correct.is_some() && r.rouge.is_none());
        for raw in &r.raw_response_refs {
            assert!(config.output_dir.join(raw).is_file());
        }
    }

    // Cold caches, new directory: same bytes.
    config.output_dir = dir.path().join("run2");
    config.cache_dir = dir.path().join("cache2");
    run_experiment(&config).unwrap();
    assert_eq!(fs::read(config.output_dir.join(RECORDS_FILE)).unwrap(), first);
}

#[test]
fn one_permanent_failure_gives_partial_status() {
    let (dir, mut config) = setup();
    only(&mut config, "sentiment", &[Strategy::Standard, Strategy::Cotr]);
    config.limit = Some(4);
    let ids = sampled_ids(&config, "sentiment");
    let failing_id = ids[1].clone();
    edit_fixture(dir.path(), |e| {
        set_script(e, &format!("sentiment/{failing_id}/cotr"), json!([{"fail": "provider", "status": 503, "message": "down"}]))
    });
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.status, RunStatus::Partial);
    assert_eq!(summary.counts.records, 8);
    assert_eq!(summary.counts.call_failures, 1);
    assert_eq!(summary.counts.scored, 7);
    // Three attempts for the failing call, one for each of the others, plus
    // the scripted transient failure on s01/standard when it is sampled.
    let flaky = u64::from(ids.iter().any(|i| i == "s01"));
    assert_eq!(summary.counts.backend_calls, 7 + 3 + flaky);
    let records = load_records(&config.output_dir).unwrap();
    let failed: Vec<_> = records.iter().filter(|r| r.outcome.is_call_failure()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].example_id, failing_id);
    assert!(matches!(failed[0].outcome, Outcome::CallFailed { stage: CallStage::Completion, .. }));
    assert_eq!((failed[0].correct, failed[0].rouge), (None, None));
    let table = build_report(&[RunData::load(&config.output_dir).unwrap()], None).unwrap();
    let cell = table.classification_cell("mock-gpt", "sentiment", Strategy::Cotr).unwrap();
    assert_eq!(cell.stats.unwrap().n_total, 3);
    assert_eq!(cell.counts.call_failures, 1);

    // Resuming retries only the failed call; the fixture now answers.
    edit_fixture(dir.path(), |e| {
        set_script(e, &format!("sentiment/{failing_id}/cotr"), json!([{"reply": "Translation: x\nLabel: Negative"}]))
    });
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.status, RunStatus::Complete);
    assert_eq!(summary.counts.resumed, 7);
    assert_eq!(summary.counts.backend_calls, 1);
}

#[test]
fn too_many_failures_abort_the_run() {
    let (dir, mut config) = setup();
    only(&mut config, "hate", &[Strategy::Standard]);
    config.max_failure_fraction = 0.3;
    config.parallelism = 1;
    edit_fixture(dir.path(), |e| {
        for i in 1..=6 {
            set_script(e, &format!("hate/h0{i}/standard"), json!([{"fail": "auth", "message": "revoked"}]));
        }
    });
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.status, RunStatus::Aborted);
    // 0.3 * 6 = 1.8 failures allowed; the second failure stops the run.
    assert_eq!(summary.counts.records, 2);
    assert_eq!(summary.counts.planned, 6);
    assert_eq!(Manifest::load(&config.output_dir).unwrap().status, RunStatus::Aborted);
}

#[test]
fn interrupted_run_resumes_from_partial_records() {
    let (dir, mut config) = setup();
    only(&mut config, "hate", &[Strategy::Standard, Strategy::Cotr, Strategy::Pretranslated]);
    run_experiment(&config).unwrap();
    let out = &config.output_dir;
    let full = fs::read_to_string(out.join(RECORDS_FILE)).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    assert_eq!(lines.len(), 18);

    // Simulate a crash: half the records appended, the last one cut short.
    let mut partial: String = lines[..9].iter().map(|l| format!("{l}\n")).collect();
    partial.push_str(&lines[9][..20]);
    fs::write(out.join(PARTIAL_FILE), partial).unwrap();
    fs::remove_file(out.join(RECORDS_FILE)).unwrap();
    config.cache_dir = dir.path().join("fresh-cache");

    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.counts.resumed, 9);
    assert_eq!(summary.counts.backend_calls, 9);
    assert_eq!(fs::read_to_string(out.join(RECORDS_FILE)).unwrap(), full);
    assert!(!out.join(PARTIAL_FILE).exists());
}

#[test]
fn changed_config_refuses_to_reuse_directory() {
    let (_dir, mut config) = setup();
    only(&mut config, "hate", &[Strategy::Standard]);
    run_experiment(&config).unwrap();
    config.decoding.max_tokens = 10;
    assert!(matches!(run_experiment(&config), Err(RunError::ManifestMismatch { .. })));
}

#[test]
fn grid_is_complete_with_per_model_dataset_filters() {
    let (_dir, mut config) = setup();
    let mut second = config.models[0].clone();
    second.name = "mock-small".into();
    second.model_id = "mock-small-1".into();
    second.datasets = Some(vec!["news".into()]);
    config.models.push(second);
    let summary = run_experiment(&config).unwrap();
    // mock-gpt: (8 + 6) * 3 + 4 * 3; mock-small: 4 * 3.
    assert_eq!(summary.counts.planned, 54 + 12);
    assert_eq!(summary.counts.records, 66);
    let records = load_records(&config.output_dir).unwrap();
    assert!(records
        .iter()
        .filter(|r| r.model == "mock-small")
        .all(|r| r.dataset == "news" && r.model_id == "mock-small-1"));
    for r in &records {
        let scored = !r.outcome.is_call_failure();
        match r.task {
            TaskKind::Classification => assert_eq!((r.correct.is_some(), r.rouge.is_some()), (scored, false)),
            TaskKind::Generation => assert_eq!((r.correct.is_some(), r.rouge.is_some()), (false, scored)),
        }
        assert_eq!(r.strategy.task(), r.task);
    }
}

#[test]
fn two_call_generation_issues_back_translation() {
    let (dir, mut config) = setup();
    only(&mut config, "news", &[Strategy::Direct, Strategy::Half]);
    config.two_call_mode = true;
    config.limit = Some(1);
    let id = sampled_ids(&config, "news").remove(0);
    edit_fixture(dir.path(), |e| {
        set_script(e, &format!("news/{id}/half"), json!([{"reply": "English Headline: Heavy rain in Pune"}]));
        set_script(e, &format!("news/{id}/half#back"), json!([{"reply": "Marathi Headline: पुण्यात मुसळधार पाऊस"}]));
    });
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.counts.backend_calls, 3);
    let records = load_records(&config.output_dir).unwrap();
    let half = records.iter().find(|r| r.strategy == Strategy::Half).unwrap();
    assert_eq!(half.raw_response_refs.len(), 2);
    let parsed = half.outcome.parsed().unwrap();
    assert_eq!(parsed.sections[&cotr_harness::Section::MarathiHeadline], "पुण्यात मुसळधार पाऊस");
    assert_eq!(parsed.sections[&cotr_harness::Section::EnglishHeadline], "Heavy rain in Pune");
    let gold = half.gold.clone();
    let expected = cotr_harness::metrics::rouge_l_text("पुण्यात मुसळधार पाऊस", &gold).f1;
    assert_eq!(half.rouge.unwrap().f1, expected);
}

#[test]
fn missing_translation_is_a_translation_stage_failure() {
    let (dir, mut config) = setup();
    only(&mut config, "hate", &[Strategy::Pretranslated]);
    let path = dir.path().join("mt_fixture.json");
    let mut mt: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let key = mt["translations"].as_object().unwrap().keys().find(|k| k.contains("ग्रंथालय")).unwrap().clone();
    mt["translations"].as_object_mut().unwrap().remove(&key);
    fs::write(&path, mt.to_string()).unwrap();
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.status, RunStatus::Partial);
    let records = load_records(&config.output_dir).unwrap();
    let failed = records.iter().find(|r| r.example_id == "h04").unwrap();
    assert!(matches!(failed.outcome, Outcome::CallFailed { stage: CallStage::Translation, .. }));
    assert!(failed.prompt_digest.is_none());
    let ok = records.iter().find(|r| r.example_id == "h01").unwrap();
    assert!(ok.translated_input.as_deref().unwrap().starts_with("Those people"));
}

#[test]
fn blank_translations_are_counted_but_still_scored() {
    let (dir, mut config) = setup();
    only(&mut config, "hate", &[Strategy::Cotr]);
    edit_fixture(dir.path(), |e| {
        set_script(e, "hate/h01/cotr", json!([{"reply": "Translation:\nLabel: Hate"}]));
        set_script(e, "hate/h03/cotr", json!([{"reply": "Translation:   \nLabel: Non-hate"}]));
    });
    let summary = run_experiment(&config).unwrap();
    assert_eq!(summary.counts.empty_translations, 2);
    assert_eq!(Manifest::load(&config.output_dir).unwrap().counts.empty_translations, 2);
    let records = load_records(&config.output_dir).unwrap();
    let h01 = records.iter().find(|r| r.example_id == "h01").unwrap();
    assert_eq!(h01.predicted_label(), Some("Hate"));
    assert!(h01.correct.is_some());
}

#[test]
fn lenient_mode_recovers_reordered_sections() {
    let (dir, mut config) = setup();
    only(&mut config, "sentiment", &[Strategy::Cotr]);
    config.limit = Some(8);
    edit_fixture(dir.path(), |e| {
        set_script(e, "sentiment/s01/cotr", json!([{"reply": "Label: Positive\nTranslation: This movie was very good."}]))
    });
    run_experiment(&config).unwrap();
    let strict = build_report(&[RunData::load(&config.output_dir).unwrap()], None).unwrap();
    let cell = strict.classification_cell("mock-gpt", "sentiment", Strategy::Cotr).unwrap();
    assert_eq!(cell.counts.parse_failures, 1);

    config.parse_mode = ParseMode::Lenient;
    config.output_dir = dir.path().join("lenient");
    run_experiment(&config).unwrap();
    let lenient = build_report(&[RunData::load(&config.output_dir).unwrap()], None).unwrap();
    let cell = lenient.classification_cell("mock-gpt", "sentiment", Strategy::Cotr).unwrap();
    assert_eq!(cell.counts.parse_failures, 0);
    assert_eq!(cell.counts.lenient_recoveries, 1);
    let records = load_records(&config.output_dir).unwrap();
    let modes: Vec<ParseMode> = records.iter().filter_map(|r| r.outcome.parsed()).map(|p| p.parse_mode_used).collect();
    assert_eq!(modes.iter().filter(|m| **m == ParseMode::Strict).count(), 7);
}

#[test]
fn report_is_a_pure_function_of_records_and_partitions_recombine() {
    let (dir, config) = setup();
    run_experiment(&config).unwrap();
    let run = RunData::load(&config.output_dir).unwrap();
    let a = build_report(std::slice::from_ref(&run), None).unwrap();
    let b = build_report(std::slice::from_ref(&run), None).unwrap();
    assert_eq!(a.render_text(), b.render_text());
    assert_eq!(a.render_csv(), b.render_csv());
    assert_eq!(a.render_text(), fs::read_to_string(config.output_dir.join("report.txt")).unwrap_or_else(|_| a.render_text()));

    // Split every cell's records by example parity into two pseudo-runs.
    let (even, odd): (Vec<_>, Vec<_>) = run.records.iter().cloned().partition(|r| {
        r.example_id.bytes().last().unwrap() % 2 == 0
    });
    let part = |records| RunData {
        dir: dir.path().to_owned(),
        manifest: run.manifest.clone(),
        records,
    };
    let pe = build_report(&[part(even)], None).unwrap();
    let po = build_report(&[part(odd)], None).unwrap();
    for whole in &a.classification {
        let pieces: Vec<(f64, usize)> = [&pe, &po]
            .iter()
            .filter_map(|t| t.classification_cell(&whole.model, &whole.dataset, whole.strategy))
            .filter_map(|c| c.stats.map(|s| (s.error_pct, s.n_total)))
            .collect();
        let recombined = weighted_average(&pieces).unwrap();
        let expected = whole.stats.unwrap().error_pct;
        assert!((recombined - expected).abs() < 1e-12, "{recombined} vs {expected}");
    }
}
