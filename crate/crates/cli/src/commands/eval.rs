use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use decc_core::dataset::filter_multipair;
use decc_core::eval::{round2_value, score, score_with_verdicts, MatchMode, Prediction, VerdictRecord, VerdictTable};

use super::{open_corpus, print_json, read_jsonl, write_json};
use crate::config::{config_err, CorpusArgs, FileConfig};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// predictions.jsonl written by `decc run`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// exact, normalized, fuzzy, fuzzy:THRESHOLD or human.
    #[arg(long)]
    pub mode: Option<String>,
    /// Verdict export of the annotation service; required by `--mode human`.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Restrict scoring to a subset; only `multi-pair` exists.
    #[arg(long)]
    pub subset: Option<String>,
    /// Write the full per-document report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Headline {
    match_mode: MatchMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    subset: Option<String>,
    precision: f64,
    recall: f64,
    f1: f64,
    true_positive: usize,
    predicted: usize,
    gold: usize,
}

pub fn eval(args: EvalArgs, file: &FileConfig) -> anyhow::Result<()> {
    let mode: MatchMode = match args.mode.as_deref().or(file.eval.mode.as_deref()) {
        Some(m) => m.parse().map_err(config_err)?,
        None => MatchMode::ExactIndex,
    };
    let verdicts = match (mode, &args.verdicts) {
        (MatchMode::HumanJudged, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let records: Vec<VerdictRecord> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            Some(VerdictTable::new(records))
        }
        (MatchMode::HumanJudged, None) => return Err(config_err("--mode human needs --verdicts")),
        (_, Some(_)) => return Err(config_err("--verdicts only applies to --mode human")),
        (_, None) => None,
    };
    let multi = match args.subset.as_deref() {
        None => false,
        Some("multi-pair") => true,
        Some(other) => return Err(config_err(format!("unknown subset {other:?} (only multi-pair)"))),
    };

    let mut corpus = open_corpus(&args.corpus, file)?;
    let mut preds: Vec<Prediction> = read_jsonl(&args.predictions)?;
    if multi {
        corpus = filter_multipair(&corpus);
        preds.retain(|p| corpus.get(&p.document_id).is_some());
    }
    let mut report = match &verdicts {
        Some(table) => score_with_verdicts(&preds, &corpus, table)?,
        None => score(&preds, &corpus, mode)?,
    };
    if multi {
        report.subset = Some("multi-pair".into());
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&Headline {
        match_mode: report.match_mode,
        subset: report.subset.clone(),
        precision: round2_value(report.precision()),
        recall: round2_value(report.recall()),
        f1: round2_value(report.f1()),
        true_positive: report.true_positive,
        predicted: report.predicted,
        gold: report.gold,
    })
}
