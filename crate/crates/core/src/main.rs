use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cotr_harness::config::{ConfigError, RunConfig};
use cotr_harness::gateway::MockBackend;
use cotr_harness::metrics::{self, format_pct, ParseFailurePolicy};
use cotr_harness::mt::MockTranslator;
use cotr_harness::parser::ParseMode;
use cotr_harness::report::{self, ReportError, RunData};
use cotr_harness::runner::{self, RunError, RunStatus};
use cotr_harness::Strategy;

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_PARTIAL: u8 = 4;
const EXIT_ABORTED: u8 = 5;
const LIVE_MAX_EXAMPLES: usize = 10;

/// Evaluate prompting strategies for low-resource language tasks.
#[derive(Parser)]
#[command(name = "cotr", version, about)]
struct Cli {
    /// Log progress (overridden by RUST_LOG).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment grid.
    Run(RunArgs),
    /// Aggregate one or more run directories into tables.
    Report(ReportArgs),
    /// Score plain-text files, one item per line.
    Score(ScoreArgs),
    /// Translate every sampled classification example into the MT cache.
    TranslateCache(GridArgs),
    /// Check the config, datasets, templates and fixtures without calling any provider.
    Validate(GridArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Restrict to these datasets (repeatable).
    #[arg(long = "dataset", value_name = "NAME")]
    datasets: Vec<String>,
    /// Restrict to these models (repeatable).
    #[arg(long = "model", value_name = "NAME")]
    models: Vec<String>,
    /// Restrict to these strategies (repeatable).
    #[arg(long = "strategy", value_name = "NAME")]
    strategies: Vec<Strategy>,
    /// Evaluate at most N examples per dataset.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    cache_dir: Option<PathBuf>,
    /// Run directory.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Use the mock fixtures instead of real providers.
    #[arg(long)]
    mock: bool,
    #[arg(long, value_name = "strict|lenient")]
    parse_mode: Option<ParseMode>,
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,
    /// Skip malformed dataset rows instead of failing.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Wiring smoke test against real providers: at most 10 examples per
    /// dataset and a single model.
    #[arg(long, conflicts_with = "mock")]
    live: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to combine.
    #[arg(required = true, value_name = "RUN_DIR")]
    runs: Vec<PathBuf>,
    /// Where to write report.txt and report.csv (defaults to the run
    /// directory when exactly one is given).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Override the runs' parse-failure policy.
    #[arg(long, value_name = "count_wrong|exclude", value_parser = parse_policy)]
    parse_failures: Option<ParseFailurePolicy>,
    /// Compare two runs cell by cell.
    #[arg(long)]
    diff: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Generated texts, one per line.
    #[arg(long, requires = "references", conflicts_with_all = ["predictions", "golds"])]
    candidates: Option<PathBuf>,
    #[arg(long, requires = "candidates")]
    references: Option<PathBuf>,
    /// Predicted labels, one per line; an empty line is a parse failure.
    #[arg(long, requires = "golds")]
    predictions: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    golds: Option<PathBuf>,
    #[arg(long, value_name = "count_wrong|exclude", value_parser = parse_policy, default_value = "count_wrong")]
    parse_failures: ParseFailurePolicy,
}

fn parse_policy(s: &str) -> Result<ParseFailurePolicy, String> {
    match s {
        "count_wrong" => Ok(ParseFailurePolicy::CountWrong),
        "exclude" => Ok(ParseFailurePolicy::Exclude),
        other => Err(format!("unknown policy {other:?} (expected count_wrong or exclude)")),
    }
}

struct CliError {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_ERROR, error }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        let code = match e {
            RunError::Config(_)
            | RunError::Dataset(_)
            | RunError::Prompt(_)
            | RunError::ManifestMismatch { .. }
            | RunError::Backend(_) => EXIT_CONFIG,
            RunError::Io { .. } | RunError::Corrupt { .. } => EXIT_ERROR,
        };
        Self { code, error: e.into() }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Run(e) => e.into(),
            other => Self {
                code: EXIT_ERROR,
                error: other.into(),
            },
        }
    }
}

fn load_config(args: &GridArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, args)?;
    config.validate()?;
    Ok(config)
}

fn apply_overrides(config: &mut RunConfig, args: &GridArgs) -> Result<(), ConfigError> {
    fn unknown(kind: &str, name: &str, known: Vec<&str>) -> ConfigError {
        ConfigError::Invalid(format!("unknown {kind} {name:?}; configured: {}", known.join(", ")))
    }
    for name in &args.datasets {
        if !config.datasets.iter().any(|d| &d.name == name) {
            return Err(unknown("dataset", name, config.datasets.iter().map(|d| d.name.as_str()).collect()));
        }
    }
    for name in &args.models {
        if !config.models.iter().any(|m| &m.name == name) {
            return Err(unknown("model", name, config.models.iter().map(|m| m.name.as_str()).collect()));
        }
    }
    if !args.datasets.is_empty() {
        config.datasets.retain(|d| args.datasets.contains(&d.name));
        for m in &mut config.models {
            if let Some(ds) = &mut m.datasets {
                ds.retain(|d| args.datasets.contains(d));
            }
        }
        config.models.retain(|m| m.datasets.as_ref().is_none_or(|d| !d.is_empty()));
    }
    if !args.models.is_empty() {
        config.models.retain(|m| args.models.contains(&m.name));
    }
    if !args.strategies.is_empty() {
        config.strategies.retain(|s| args.strategies.contains(s));
        let tasks: Vec<_> = config.strategies.iter().map(|s| s.task()).collect();
        config.datasets.retain(|d| tasks.contains(&d.task));
        if config.strategies.is_empty() {
            return Err(ConfigError::Invalid("none of the requested strategies is configured".into()));
        }
    }
    if let Some(n) = args.limit {
        config.limit = Some(n);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
        for d in &mut config.datasets {
            d.seed = None;
        }
    }
    if let Some(dir) = &args.cache_dir {
        config.cache_dir = dir.clone();
    }
    if let Some(dir) = &args.out {
        config.output_dir = dir.clone();
    }
    if args.mock {
        config.use_mock = true;
    }
    if let Some(mode) = args.parse_mode {
        config.parse_mode = mode;
    }
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    if args.skip_invalid {
        config.skip_invalid = true;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<u8, CliError> {
    let mut config = RunConfig::load(&args.grid.config)?;
    apply_overrides(&mut config, &args.grid)?;
    if args.live {
        config.use_mock = false;
        config.limit = Some(config.limit.map_or(LIVE_MAX_EXAMPLES, |l| l.min(LIVE_MAX_EXAMPLES)));
        if config.models.len() > 1 {
            log::warn!("--live uses only the first model, {}", config.models[0].name);
            config.models.truncate(1);
        }
        let model = config.models[0].name.clone();
        for d in &mut config.datasets {
            d.sample_n = d.sample_n.map(|n| n.min(LIVE_MAX_EXAMPLES));
        }
        config.datasets.retain(|d| config.models[0].runs_on(&d.name));
        eprintln!(
            "note: --live checks provider wiring on at most {LIVE_MAX_EXAMPLES} examples with model {model}; \
             its scores are not comparable to full-scale results"
        );
    }
    config.validate()?;
    let summary = runner::run_experiment(&config)?;
    let c = &summary.counts;
    println!(
        "{}: {} records ({} resumed), {} parse failures, {} call failures; {} backend calls, {} cache hits",
        summary.out_dir.display(),
        c.records,
        c.resumed,
        c.parse_failures,
        c.call_failures,
        c.backend_calls,
        c.cache_hits
    );
    if c.empty_translations > 0 {
        eprintln!("note: {} responses had an empty Translation section", c.empty_translations);
    }
    if c.records > 0 {
        let run = RunData::load(&summary.out_dir)?;
        report::build_report(&[run], None)?.write(&summary.out_dir)?;
    }
    Ok(match summary.status {
        RunStatus::Complete | RunStatus::Running => 0,
        RunStatus::Partial => {
            eprintln!("warning: {} calls failed permanently; see records.jsonl", c.call_failures);
            EXIT_PARTIAL
        }
        RunStatus::Aborted => {
            eprintln!("error: run aborted after too many failed calls");
            EXIT_ABORTED
        }
    })
}

fn cmd_report(args: &ReportArgs) -> Result<u8, CliError> {
    let runs = args
        .runs
        .iter()
        .map(|d| RunData::load(d))
        .collect::<Result<Vec<_>, _>>()?;
    if args.diff {
        let [a, b] = runs.as_slice() else {
            return Err(anyhow::anyhow!("--diff takes exactly two run directories").into());
        };
        let ta = report::build_report(std::slice::from_ref(a), args.parse_failures)?;
        let tb = report::build_report(std::slice::from_ref(b), args.parse_failures)?;
        print!("{}", report::render_diff(&report::diff_reports(&ta, &tb)));
        return Ok(0);
    }
    let table = report::build_report(&runs, args.parse_failures)?;
    print!("{}", table.render_text());
    let out = match (&args.out, args.runs.as_slice()) {
        (Some(out), _) => Some(out.clone()),
        (None, [single]) => Some(single.clone()),
        (None, _) => None,
    };
    if let Some(out) = out {
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        table.write(&out)?;
    }
    Ok(0)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn cmd_score(args: &ScoreArgs) -> Result<u8, CliError> {
    match (&args.candidates, &args.references, &args.predictions, &args.golds) {
        (Some(c), Some(r), None, None) => {
            let (c, r) = (read_lines(c)?, read_lines(r)?);
            if c.len() != r.len() {
                return Err(anyhow::anyhow!("{} candidates but {} references", c.len(), r.len()).into());
            }
            let f1s: Vec<f64> = c.iter().zip(&r).map(|(c, r)| metrics::rouge_l_text(c, r).f1).collect();
            let pct = metrics::mean_f1_pct(&f1s).context("no lines to score")?;
            println!("ROUGE-L F1 (%): {} over {} pairs", format_pct(pct), f1s.len());
        }
        (None, None, Some(p), Some(g)) => {
            let (p, g) = (read_lines(p)?, read_lines(g)?);
            let predictions: Vec<Option<&str>> = p
                .iter()
                .map(|s| Some(s.trim()).filter(|s| !s.is_empty()))
                .collect();
            let golds: Vec<&str> = g.iter().map(|s| s.trim()).collect();
            let stats = metrics::error_rate_with(&predictions, &golds, args.parse_failures)
                .map_err(anyhow::Error::from)?;
            println!(
                "error rate (%): {} ({} wrong of {}, {} parse failures)",
                format_pct(stats.error_pct),
                stats.n_wrong,
                stats.n_total,
                stats.n_parse_failures
            );
        }
        _ => {
            return Err(anyhow::anyhow!(
                "give either --candidates and --references, or --predictions and --golds"
            )
            .into())
        }
    }
    Ok(0)
}

fn cmd_translate_cache(args: &GridArgs) -> Result<u8, CliError> {
    let config = load_config(args)?;
    let (ok, failed) = runner::warm_translation_cache(&config)?;
    println!("{ok} translations cached, {failed} failed");
    Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_validate(args: &GridArgs) -> Result<u8, CliError> {
    let config = load_config(args)?;
    let templates = runner::load_templates(&config)?;
    let datasets = runner::prepare_datasets(&config)?;
    let mock_needed = config.use_mock || config.models.iter().any(|m| m.provider == cotr_harness::config::ProviderKind::Mock);
    if mock_needed {
        if let Some(p) = &config.mock.llm_fixture {
            MockBackend::load(p).map_err(|e| CliError::from(ConfigError::Invalid(e)))?;
        }
    }
    if let Some(p) = &config.mock.mt_fixture {
        if config.use_mock || config.translator.as_ref().is_some_and(|t| t.provider == cotr_harness::config::TranslatorKind::Mock) {
            MockTranslator::load(p).map_err(|e| CliError::from(ConfigError::Invalid(e)))?;
        }
    }
    for d in &datasets {
        let m = &d.manifest;
        println!(
            "dataset {} ({}): {} rows loaded, {} skipped, {} sampled",
            m.name,
            m.task,
            m.n_loaded,
            m.skipped.len(),
            m.n_sampled
        );
    }
    println!(
        "templates: {}; models: {}; strategies: {}",
        templates.digests().len(),
        config.models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(", "),
        config.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
    );
    println!("config ok");
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Score(a) => cmd_score(a),
        Command::TranslateCache(a) => cmd_translate_cache(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
