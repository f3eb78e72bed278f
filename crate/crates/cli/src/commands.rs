use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::Path;

use anyhow::{anyhow, Context};
use cystscribe_core::cost::{cost_table, CostTable};
use cystscribe_core::derive::Severity;
use cystscribe_gateway::stub::{StubOptions, StubServer};
use cystscribe_gateway::{PromptAssets, PromptMode};
use cystscribe_pipeline::corpus::{self, load_annotations, load_corpus, validate_corpus};
use cystscribe_pipeline::evaluate::{accuracy_csv, categories_csv, load_run, render_text};
use cystscribe_pipeline::run::{compute_stages, replay, CompletionRow};
use cystscribe_pipeline::stages::{self, RecordRow, RecordStatus};
use cystscribe_pipeline::{
    compare_runs, evaluate_run, fixtures, patient_level_split, run_extraction, ComparisonReport, EvalOptions,
    PipelineError, ReportDocument, RunSettings, RunStore, SplitFractions,
};
use cystscribe_reader::{ReaderServer, Study};
use serde::Serialize;

use crate::config::Config;
use crate::{Cli, Command, Format, InOut, Status};

/// An error and the exit status it maps to.
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            status: Status::Usage,
            error: e.into(),
        }
    }
}

type Outcome = Result<Status, Failure>;

fn endpoint_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        status: Status::EndpointFailure,
        error: e.into(),
    }
}

pub async fn run(cli: Cli) -> Outcome {
    let config = Config::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(io) => ingest(&io),
        Command::Filter(io) => filter(&io),
        Command::Split {
            input,
            out_dir,
            train,
            val,
            test,
            seed,
        } => split(&input, &out_dir, SplitFractions { train, val, test }, seed),
        Command::Extract {
            corpus,
            runs,
            run_id,
            mode,
            profile,
        } => extract(&config, &corpus, &runs, run_id, mode, profile).await,
        Command::Replay {
            corpus,
            completions,
            runs,
            run_id,
            mode,
        } => replay_cmd(&config, &corpus, &completions, &runs, run_id, mode),
        Command::Aggregate {
            corpus,
            completions,
            mode,
            output,
            tallies,
        } => aggregate(&config, &corpus, &completions, mode, &output, tallies.as_deref()),
        Command::Audit {
            corpus,
            records,
            output,
        } => audit(&corpus, &records, &output),
        Command::Categorize { records, output } => categorize(&records, &output),
        Command::Ground {
            corpus,
            completions,
            mode,
            output,
            summary,
        } => ground(&config, &corpus, &completions, mode, &output, summary.as_deref()),
        Command::Evaluate {
            run,
            annotations,
            compare,
            format,
            output,
        } => evaluate(
            &config,
            &run,
            &annotations,
            compare.as_deref(),
            format,
            output.as_deref(),
        ),
        Command::Cost { format } => cost(&config, format),
        Command::Serve { study, port, host } => serve(&study, &host, port).await,
        Command::Stub {
            port,
            corpus,
            completions,
        } => stub(port, corpus.as_deref(), completions.as_deref()).await,
        Command::Fixtures { out_dir } => write_fixtures(&out_dir),
    }
}

fn mode_of(config: &Config, flag: Option<String>) -> anyhow::Result<PromptMode> {
    let name = flag.unwrap_or_else(|| config.run.mode.clone());
    PromptMode::parse(&name).ok_or_else(|| anyhow!("unknown prompt mode {name:?} (expected standard or cot)"))
}

fn settings(config: &Config, mode: PromptMode) -> anyhow::Result<RunSettings> {
    let mut s = RunSettings::new(mode, config.profile()?);
    s.seed = config.run.seed;
    s.concurrency = config.run.concurrency;
    s.grounding = config.grounding;
    if let Some(dir) = &config.run.prompt_dir {
        s.assets = PromptAssets::from_dir(&config.resolve(dir))?;
    }
    Ok(s)
}

fn new_run_id() -> String {
    chrono::Utc::now().format("run-%Y%m%dT%H%M%S%3fZ").to_string()
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    write_text(path, &corpus::to_jsonl(rows))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn emit(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(path) => write_text(path, text),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn ingest(io: &InOut) -> Outcome {
    let text = std::fs::read_to_string(&io.input).with_context(|| format!("reading {}", io.input.display()))?;
    let mut kept: Vec<ReportDocument> = Vec::new();
    let mut seen = HashSet::new();
    let mut rejected = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let problem = match serde_json::from_str::<ReportDocument>(line) {
            Err(e) => Some(e.to_string()),
            Ok(doc) => match validate_corpus(std::slice::from_ref(&doc)) {
                Err(e) => Some(e.to_string()),
                Ok(()) if !seen.insert(doc.report_id.clone()) => Some(format!("duplicate report_id {}", doc.report_id)),
                Ok(()) => {
                    kept.push(doc);
                    None
                }
            },
        };
        if let Some(problem) = problem {
            rejected += 1;
            eprintln!("{}:{}: {problem}", io.input.display(), i + 1);
        }
    }
    write_rows(&io.output, &kept)?;
    eprintln!("ingested {} reports, rejected {rejected}", kept.len());
    Ok(if rejected > 0 {
        Status::ValidationFailures
    } else {
        Status::Ok
    })
}

fn filter(io: &InOut) -> Outcome {
    let docs = load_corpus(&io.input)?;
    let kept = cystscribe_pipeline::cohort_filter(&docs);
    write_rows(&io.output, &kept)?;
    eprintln!("kept {} of {} reports", kept.len(), docs.len());
    Ok(Status::Ok)
}

fn split(input: &Path, out_dir: &Path, fractions: SplitFractions, seed: u64) -> Outcome {
    let docs = load_corpus(input)?;
    let parts = patient_level_split(&docs, fractions, seed)?;
    let [train, val, test] = parts.patient_counts();
    write_rows(&out_dir.join("train.jsonl"), &parts.train)?;
    write_rows(&out_dir.join("val.jsonl"), &parts.val)?;
    write_rows(&out_dir.join("test.jsonl"), &parts.test)?;
    eprintln!(
        "patients: train {train}, val {val}, test {test}; reports: train {}, val {}, test {}",
        parts.train.len(),
        parts.val.len(),
        parts.test.len()
    );
    Ok(Status::Ok)
}

async fn extract(
    config: &Config,
    corpus_path: &Path,
    runs: &Path,
    run_id: Option<String>,
    mode: Option<String>,
    profile: Option<String>,
) -> Outcome {
    let mut config = config.clone();
    if let Some(name) = profile {
        config.run.profile = crate::config::ProfileChoice::Preset(name);
    }
    let docs = load_corpus(corpus_path)?;
    let mut s = settings(&config, mode_of(&config, mode)?)?;
    s.corpus_source = Some(corpus_path.display().to_string());
    let endpoint = config.endpoint()?;
    let store = RunStore::create(runs, &run_id.unwrap_or_else(new_run_id))?;
    let manifest = run_extraction(&docs, &s, endpoint, &store).await.map_err(|e| match e {
        PipelineError::Gateway(_) => endpoint_failure(e),
        other => other.into(),
    })?;
    let failures: Vec<cystscribe_pipeline::run::FailureRow> = store.read_jsonl("failures.jsonl")?;
    let request_failures = failures
        .iter()
        .filter(|f| f.stage == cystscribe_pipeline::run::FailureStage::Request)
        .count();
    println!("{}", store.dir().display());
    eprintln!(
        "{} reports: {} succeeded, {} failed ({request_failures} request failures)",
        manifest.counts.reports, manifest.counts.succeeded, manifest.counts.failed
    );
    Ok(if request_failures > 0 {
        Status::EndpointFailure
    } else if manifest.counts.failed > 0 {
        Status::ValidationFailures
    } else {
        Status::Ok
    })
}

fn replay_cmd(
    config: &Config,
    corpus_path: &Path,
    completions: &Path,
    runs: &Path,
    run_id: Option<String>,
    mode: Option<String>,
) -> Outcome {
    let docs = load_corpus(corpus_path)?;
    let rows: Vec<CompletionRow> = corpus::read_jsonl(completions)?;
    let mut s = settings(config, mode_of(config, mode)?)?;
    s.corpus_source = Some(corpus_path.display().to_string());
    let store = RunStore::create(runs, &run_id.unwrap_or_else(new_run_id))?;
    let manifest = replay(&docs, &rows, &s, &store, &format!("replay:{}", completions.display()))?;
    println!("{}", store.dir().display());
    Ok(if manifest.counts.failed > 0 {
        Status::ValidationFailures
    } else {
        Status::Ok
    })
}

fn aggregate(
    config: &Config,
    corpus_path: &Path,
    completions: &Path,
    mode: Option<String>,
    output: &Path,
    tallies: Option<&Path>,
) -> Outcome {
    let docs = load_corpus(corpus_path)?;
    let rows: Vec<CompletionRow> = corpus::read_jsonl(completions)?;
    let out = compute_stages(&docs, &rows, &settings(config, mode_of(config, mode)?)?)?;
    write_rows(output, &out.records)?;
    if let Some(path) = tallies {
        write_rows(path, &out.tallies)?;
    }
    let counts = out.counts();
    eprintln!(
        "{} records: {} valid, {} failed",
        counts.reports, counts.succeeded, counts.failed
    );
    Ok(if counts.failed > 0 {
        Status::ValidationFailures
    } else {
        Status::Ok
    })
}

fn audit(corpus_path: &Path, records: &Path, output: &Path) -> Outcome {
    let docs = load_corpus(corpus_path)?;
    let rows: Vec<RecordRow> = corpus::read_jsonl(records)?;
    let by_id: std::collections::HashMap<&str, &ReportDocument> =
        docs.iter().map(|d| (d.report_id.as_str(), d)).collect();
    let mut audits = Vec::new();
    for row in &rows {
        let Some(record) = &row.record else { continue };
        let doc = by_id
            .get(row.report_id.as_str())
            .ok_or_else(|| anyhow!("record {} is not in the corpus", row.report_id))?;
        audits.push(stages::audit(doc, record));
    }
    write_rows(output, &audits)?;
    let flagged = audits.iter().filter(|a| !a.findings.is_empty()).count();
    let errors = audits
        .iter()
        .flat_map(|a| &a.findings)
        .filter(|f| f.severity == Severity::Error)
        .count();
    eprintln!(
        "audited {} records: {flagged} with findings, {errors} errors",
        audits.len()
    );
    Ok(if flagged > 0 {
        Status::ValidationFailures
    } else {
        Status::Ok
    })
}

fn categorize(records: &Path, output: &Path) -> Outcome {
    let rows: Vec<RecordRow> = corpus::read_jsonl(records)?;
    let categories: Vec<_> = rows
        .iter()
        .filter(|r| r.status == RecordStatus::Ok)
        .filter_map(|r| r.record.as_ref().map(|rec| stages::assess(&r.report_id, rec)))
        .collect();
    write_rows(output, &categories)?;
    eprintln!("categorized {} of {} records", categories.len(), rows.len());
    Ok(Status::Ok)
}

fn ground(
    config: &Config,
    corpus_path: &Path,
    completions: &Path,
    mode: Option<String>,
    output: &Path,
    summary: Option<&Path>,
) -> Outcome {
    let docs = load_corpus(corpus_path)?;
    let rows: Vec<CompletionRow> = corpus::read_jsonl(completions)?;
    let out = compute_stages(&docs, &rows, &settings(config, mode_of(config, mode)?)?)?;
    write_rows(output, &out.grounding)?;
    let s = &out.grounding_summary;
    match summary {
        Some(path) => write_pretty(path, s)?,
        None => println!("{}", serde_json::to_string_pretty(s)?),
    }
    eprintln!("{} observations, {} need review", s.total, s.needs_review);
    Ok(Status::Ok)
}

fn eval_options(config: &Config) -> EvalOptions {
    EvalOptions {
        policy: config.evaluate.policy,
        bootstrap: config.bootstrap(),
        alpha: config.evaluate.alpha,
        permutation: config.permutation(),
    }
}

fn evaluate(
    config: &Config,
    run_dir: &Path,
    annotations: &Path,
    compare: Option<&Path>,
    format: Format,
    output: Option<&Path>,
) -> Outcome {
    let truth = load_annotations(annotations)?;
    let options = eval_options(config);
    let run = load_run(&RunStore::open(run_dir)?)?;
    if let Some(other) = compare {
        let other = load_run(&RunStore::open(other)?)?;
        let report = compare_runs(&run, &other, &truth, &options)?;
        let text = match format {
            Format::Json => serde_json::to_string_pretty(&report)? + "\n",
            Format::Text => render_comparison(&report),
            Format::Csv => comparison_csv(&report),
        };
        emit(output, &text)?;
        return Ok(Status::Ok);
    }
    let report = evaluate_run(&run, &truth, &options)?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Text => render_text(&report),
        Format::Csv => {
            let mut out = accuracy_csv(&report);
            if report.categories.is_some() {
                out.push('\n');
                out.push_str(&categories_csv(&report));
            }
            out
        }
    };
    emit(output, &text)?;
    Ok(Status::Ok)
}

fn p_value(p: Option<f64>) -> String {
    p.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into())
}

fn render_comparison(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} vs {} on {} reports", report.run_a, report.run_b, report.cases);
    let _ = writeln!(
        out,
        "average feature accuracy: {:.4} vs {:.4}",
        report.average_accuracy_a, report.average_accuracy_b
    );
    let _ = writeln!(out, "category cases: {}", report.category_cases);
    let _ = writeln!(
        out,
        "{:<32} {:>10} {:>10} {:>10}  reject at {}",
        "test", "statistic", "p", "holm p", report.alpha
    );
    for t in &report.tests {
        match (&t.result, &t.skipped) {
            (Some(r), _) => {
                let _ = writeln!(
                    out,
                    "{:<32} {:>10.4} {:>10} {:>10}  {}",
                    t.name,
                    r.statistic,
                    p_value(Some(r.p_value)),
                    p_value(r.adjusted_p),
                    if r.rejected == Some(true) { "yes" } else { "no" }
                );
            }
            (None, reason) => {
                let _ = writeln!(
                    out,
                    "{:<32} skipped: {}",
                    t.name,
                    reason.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    out
}

fn comparison_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("test,statistic,p_value,adjusted_p,rejected\n");
    for t in &report.tests {
        match &t.result {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    t.name,
                    r.statistic,
                    r.p_value,
                    r.adjusted_p.map(|p| p.to_string()).unwrap_or_default(),
                    r.rejected.map(|b| b.to_string()).unwrap_or_default()
                );
            }
            None => {
                let _ = writeln!(out, "{},,,,", t.name);
            }
        }
    }
    out
}

fn cost(config: &Config, format: Format) -> Outcome {
    let section = config
        .cost
        .as_ref()
        .ok_or_else(|| anyhow!("the configuration has no [cost] section"))?;
    let table = cost_table(&section.models, &section.fixed, &section.rates)?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&table)? + "\n",
        Format::Text => render_cost(&table),
        Format::Csv => {
            let mut out = String::from("model,open,seconds_per_report,cost_per_100\n");
            for r in &table.rows {
                let _ = writeln!(out, "{},{},{},{}", r.name, r.open, r.seconds_per_report, r.cost_per_100);
            }
            out
        }
    };
    emit(None, &text)?;
    Ok(Status::Ok)
}

fn render_cost(table: &CostTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "fixed cost (open models): ${}", table.fixed_cost.round_dp(2));
    let _ = writeln!(
        out,
        "{:<28} {:<7} {:>12} {:>14}",
        "model", "kind", "s/report", "$ per 100"
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:<28} {:<7} {:>12} {:>14}",
            r.name,
            if r.open { "open" } else { "closed" },
            r.seconds_per_report.normalize(),
            r.cost_per_100.round_dp(4).normalize()
        );
    }
    for b in &table.break_even {
        match b.reports {
            Some(n) => {
                let _ = writeln!(out, "{} pays off against {} after {n} reports", b.open, b.closed);
            }
            None => {
                let _ = writeln!(out, "{} never pays off against {}", b.open, b.closed);
            }
        }
    }
    out
}

async fn serve(study_dir: &Path, host: &str, port: u16) -> Outcome {
    let study = Study::load(study_dir)?;
    let ip = host.parse().with_context(|| format!("invalid host {host:?}"))?;
    let server = ReaderServer::start(study, SocketAddr::new(ip, port)).await?;
    eprintln!("serving {} at {}", study_dir.display(), server.url());
    server.run_until_ctrl_c().await;
    Ok(Status::Ok)
}

async fn stub(port: u16, corpus_path: Option<&Path>, completions: Option<&Path>) -> Outcome {
    let (docs, rows) = match (corpus_path, completions) {
        (Some(c), Some(p)) => (load_corpus(c)?, corpus::read_jsonl::<CompletionRow>(p)?),
        _ => (fixtures::corpus(), fixtures::completions()),
    };
    let server = StubServer::start_with(
        fixtures::stub_responder(&docs, &rows),
        StubOptions {
            bind: Some(SocketAddr::from(([127, 0, 0, 1], port))),
            ..StubOptions::default()
        },
    )
    .await
    .map_err(endpoint_failure)?;
    println!("{}", server.base_url());
    std::io::stdout().flush()?;
    let _ = tokio::signal::ctrl_c().await;
    server.shutdown().await;
    Ok(Status::Ok)
}

fn write_fixtures(out_dir: &Path) -> Outcome {
    let files = [
        ("corpus.jsonl", fixtures::corpus_jsonl()),
        ("annotations.jsonl", fixtures::annotations_jsonl()),
        ("completions.jsonl", fixtures::completions_jsonl()),
        ("expected_scores.json", fixtures::expected_jsonl()),
    ];
    for (name, body) in files {
        write_text(&out_dir.join(name), body)?;
    }
    eprintln!("wrote fixtures to {}", out_dir.display());
    Ok(Status::Ok)
}
