use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;

use decc_core::chain::{run_corpus, ChainConfig, DocumentRun, RunMode};
use decc_core::dataset::Corpus;
use decc_core::eval::{round2_value, score, EvalReport, MatchMode, Prediction};

use super::{open_corpus, write_json, write_jsonl};
use crate::backend::{derive_seeds, ActiveBackend, RUN_STREAM};
use crate::config::{
    chain_config, config_err, parse_shot_list, resolve_backend, BackendArgs, BackendSpec, ChainArgs, CorpusArgs,
    FileConfig, DEFAULT_SEED,
};

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Independent runs; defaults to 1 for scripted and replay backends and
    /// 5 for live ones.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Root seed for sampling seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Demonstrations per prompt.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Exit 0 even when some documents failed.
    #[arg(long)]
    pub allow_failures: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated demonstration counts, e.g. 0,1,2,4.
    #[arg(long, required = true)]
    pub shots: String,
}

/// Everything resolved from file and flags before any backend call.
struct Plan {
    corpus: Corpus,
    cfg: ChainConfig,
    mode: RunMode,
    spec: BackendSpec,
    record: Option<PathBuf>,
    seeds: Vec<u64>,
    match_mode: MatchMode,
}

fn plan(args: &CommonArgs, file: &FileConfig) -> anyhow::Result<Plan> {
    let (cfg, mode) = chain_config(&args.chain, file)?;
    let (spec, record) = resolve_backend(&args.backend, file)?;
    let runs = args.runs.or(file.run.run_count).unwrap_or(if spec.is_live() { 5 } else { 1 });
    if runs == 0 {
        return Err(config_err("run count must be at least 1"));
    }
    let match_mode = match &file.eval.mode {
        Some(m) => m.parse().map_err(config_err)?,
        None => MatchMode::ExactIndex,
    };
    if match_mode == MatchMode::HumanJudged {
        return Err(config_err("human-judged scoring needs `decc eval --verdicts`"));
    }
    let seeds = derive_seeds(args.seed.or(file.seed).unwrap_or(DEFAULT_SEED), RUN_STREAM, runs);
    let corpus = open_corpus(&args.corpus, file)?;
    Ok(Plan { corpus, cfg, mode, spec, record, seeds, match_mode })
}

fn execute(corpus: &Corpus, cfg: &ChainConfig, mode: RunMode, backend: &ActiveBackend, seed: u64) -> anyhow::Result<Vec<DocumentRun>> {
    let mut cfg = cfg.clone();
    cfg.params.seed = Some(seed);
    cfg.naive_params.seed = Some(seed);
    Ok(run_corpus(corpus.documents(), &cfg, backend.chat(), mode)?)
}

/// Scores over the labeled documents only; `None` when there are none.
fn score_labeled(preds: &[Prediction], corpus: &Corpus, mode: MatchMode) -> anyhow::Result<Option<EvalReport>> {
    let labeled = corpus.filter(|d| d.is_labeled());
    if labeled.is_empty() {
        return Ok(None);
    }
    let preds: Vec<Prediction> = preds.iter().filter(|p| labeled.get(&p.document_id).is_some()).cloned().collect();
    Ok(Some(score(&preds, &labeled, mode)?))
}

#[derive(Debug, Clone, Serialize)]
struct Scores {
    precision: f64,
    recall: f64,
    f1: f64,
    true_positive: usize,
    predicted: usize,
    gold: usize,
}

impl From<&EvalReport> for Scores {
    fn from(r: &EvalReport) -> Self {
        Scores {
            precision: round2_value(r.precision()),
            recall: round2_value(r.recall()),
            f1: round2_value(r.f1()),
            true_positive: r.true_positive,
            predicted: r.predicted,
            gold: r.gold,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run: usize,
    seed: u64,
    documents: usize,
    failed_documents: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scores: Option<Scores>,
}

#[derive(Debug, Serialize)]
struct Summary {
    variant: String,
    session: String,
    shots: usize,
    match_mode: MatchMode,
    runs: Vec<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_f1: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Metadata {
    version: &'static str,
    backend: &'static str,
    started_at: String,
    finished_at: String,
    elapsed_secs: f64,
    requests_issued: u64,
    requests_sent: u64,
    tokens_used: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    transcript: Option<PathBuf>,
}

fn variant(cfg: &ChainConfig, mode: RunMode) -> String {
    match mode {
        RunMode::Chain => cfg.variant(),
        RunMode::Naive => "naive".into(),
    }
}

fn session_name(cfg: &ChainConfig) -> String {
    serde_json::to_value(cfg.session).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn run_outputs(dir: &Path, runs: &[DocumentRun]) -> anyhow::Result<Vec<Prediction>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let preds: Vec<Prediction> =
        runs.iter().map(|r| Prediction::from_run(r, Some(format!("traces.jsonl#{}", r.trace.document_id)))).collect();
    let traces: Vec<_> = runs.iter().map(|r| &r.trace).collect();
    write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
    write_jsonl(&dir.join("traces.jsonl"), &traces)?;
    Ok(preds)
}

pub fn run(mut args: RunArgs, file: &FileConfig) -> anyhow::Result<()> {
    args.common.chain.shots = args.shots;
    let out = args
        .common
        .out
        .clone()
        .or_else(|| file.output.dir.clone())
        .ok_or_else(|| config_err("no output directory (--out or [output] dir)"))?;
    let plan = plan(&args.common, file)?;
    let backend = ActiveBackend::build(&plan.spec, plan.record.clone())?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();

    let mut summaries = Vec::new();
    let mut failures = 0;
    for (i, &seed) in plan.seeds.iter().enumerate() {
        log::info!("run {}/{} (seed {seed})", i + 1, plan.seeds.len());
        let runs = execute(&plan.corpus, &plan.cfg, plan.mode, &backend, seed);
        backend.save_transcript()?;
        let runs = runs?;
        let dir = if plan.seeds.len() == 1 { out.clone() } else { out.join(format!("run-{}", i + 1)) };
        let preds = run_outputs(&dir, &runs)?;
        let failed: Vec<String> =
            runs.iter().filter(|r| r.trace.failure.is_some()).map(|r| r.trace.document_id.clone()).collect();
        failures += failed.len();
        let scores = score_labeled(&preds, &plan.corpus, plan.match_mode)?.as_ref().map(Scores::from);
        summaries.push(RunSummary { run: i + 1, seed, documents: runs.len(), failed_documents: failed, scores });
    }

    let f1s: Vec<f64> = summaries.iter().filter_map(|s| s.scores.as_ref().map(|m| m.f1)).collect();
    let summary = Summary {
        variant: variant(&plan.cfg, plan.mode),
        session: session_name(&plan.cfg),
        shots: plan.cfg.shots,
        match_mode: plan.match_mode,
        mean_f1: (!f1s.is_empty()).then(|| round2_value(mean(&f1s))),
        runs: summaries,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            version: env!("CARGO_PKG_VERSION"),
            backend: backend.kind(),
            started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            elapsed_secs: clock.elapsed().as_secs_f64(),
            requests_issued: backend.requests_issued(),
            requests_sent: backend.requests_sent(),
            tokens_used: backend.tokens_used(),
            transcript: backend.transcript_path().cloned(),
        },
    )?;
    match summary.mean_f1 {
        Some(f1) => println!("{}: {} runs, mean F1 {f1:.2}", summary.variant, summary.runs.len()),
        None => println!("{}: {} runs, no gold pairs to score", summary.variant, summary.runs.len()),
    }
    if failures > 0 && !args.allow_failures {
        bail!("{failures} document runs failed; see traces.jsonl (--allow-failures to accept)");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    shots: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    runs: usize,
}

pub fn sweep(args: SweepArgs, file: &FileConfig) -> anyhow::Result<()> {
    let shots = parse_shot_list(&args.shots)?;
    let max = *shots.last().expect("non-empty shot list");
    // validate against the largest count; each row narrows `shots` below
    let mut common = args.common;
    common.chain.shots = Some(0);
    let mut plan = plan(&common, file)?;
    plan.cfg.demos.retain(|d| d.curated);
    if plan.cfg.demos.len() < max {
        return Err(config_err(format!(
            "sweep needs {max} curated demonstrations but only {} are available",
            plan.cfg.demos.len()
        )));
    }
    if plan.corpus.documents().iter().all(|d| !d.is_labeled()) {
        return Err(config_err("sweep needs a corpus with gold pairs"));
    }
    let backend = ActiveBackend::build(&plan.spec, plan.record.clone())?;

    let mut rows = Vec::new();
    for &s in &shots {
        let cfg = ChainConfig { shots: s, ..plan.cfg.clone() };
        let mut reports = Vec::new();
        for &seed in &plan.seeds {
            let runs = execute(&plan.corpus, &cfg, plan.mode, &backend, seed);
            backend.save_transcript()?;
            let preds: Vec<Prediction> = runs?.iter().map(|r| Prediction::from_run(r, None)).collect();
            reports.push(score_labeled(&preds, &plan.corpus, plan.match_mode)?.expect("labeled corpus"));
        }
        let avg = |f: fn(&EvalReport) -> f64| round2_value(mean(&reports.iter().map(f).collect::<Vec<_>>()));
        rows.push(SweepRow {
            shots: s,
            precision: avg(EvalReport::precision),
            recall: avg(EvalReport::recall),
            f1: avg(EvalReport::f1),
            runs: reports.len(),
        });
    }

    println!("shots\tP\tR\tF1");
    for r in &rows {
        println!("{}\t{:.2}\t{:.2}\t{:.2}", r.shots, r.precision, r.recall, r.f1);
    }
    if let Some(out) = common.out.clone().or_else(|| file.output.dir.clone()) {
        fs::create_dir_all(&out)?;
        write_json(&out.join("sweep.json"), &rows)?;
    }
    Ok(())
}
