use clap::Args;
use serde::Serialize;

use decc_core::dataset::{position_histogram, stats as corpus_stats, Corpus};

use super::{open_corpus, print_json};
use crate::config::{config_err, CorpusArgs, FileConfig};

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Only these document ids (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
}

#[derive(Serialize)]
struct BiasReport {
    /// Pair count per offset, emotion index minus cause index.
    counts: std::collections::BTreeMap<i64, usize>,
    total: usize,
    adjacent_share: f64,
}

pub fn stats(args: StatsArgs, file: &FileConfig) -> anyhow::Result<()> {
    let corpus = open_corpus(&args.corpus, file)?;
    print_json(&corpus_stats(&corpus))
}

fn select(corpus: Corpus, ids: &[String]) -> anyhow::Result<Corpus> {
    if ids.is_empty() {
        return Ok(corpus);
    }
    if let Some(missing) = ids.iter().find(|id| corpus.get(id).is_none()) {
        return Err(config_err(format!("document {missing:?} is not in the corpus")));
    }
    Ok(corpus.filter(|d| ids.iter().any(|id| id == d.id())))
}

pub fn bias(args: BiasArgs, file: &FileConfig) -> anyhow::Result<()> {
    let corpus = select(open_corpus(&args.corpus, file)?, &args.ids)?;
    let histogram = position_histogram(&corpus);
    print_json(&BiasReport { total: histogram.total(), adjacent_share: histogram.adjacent_share(), counts: histogram.counts })
}
