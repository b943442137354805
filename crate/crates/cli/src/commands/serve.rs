use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Args;

use decc_core::eval::Prediction;
use decc_service::{build_items, read_items, router, write_items, Store, StoreConfig};

use super::{open_corpus, read_jsonl};
use crate::config::{config_err, CorpusArgs, FileConfig};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Annotation items (JSONL); alternatively build them from
    /// --predictions and --corpus.
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Append-only judgment log; replayed on start.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Allowed annotator names (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub annotators: Vec<String>,
    /// Judgments collected per item.
    #[arg(long)]
    pub panel: Option<usize>,
    /// Agreeing judgments that resolve an item.
    #[arg(long)]
    pub threshold: Option<usize>,
    /// Built annotator UI, served under /ui/.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    /// 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
}

pub fn serve(args: ServeArgs, file: &FileConfig) -> anyhow::Result<()> {
    let s = &file.service;
    let items = match (args.items.clone().or_else(|| s.items.clone()), &args.predictions) {
        (Some(_), Some(_)) => return Err(config_err("give either --items or --predictions, not both")),
        (Some(path), None) => read_items(&path)?,
        (None, Some(preds)) => {
            let corpus = open_corpus(&args.corpus, file)?;
            let preds: Vec<Prediction> = read_jsonl(preds)?;
            build_items(&corpus, &preds)?
        }
        (None, None) => return Err(config_err("no items (--items, or --predictions with --corpus)")),
    };
    let judgments = args
        .judgments
        .clone()
        .or_else(|| s.judgments.clone())
        .ok_or_else(|| config_err("no judgment log path (--judgments or [service] judgments)"))?;
    let annotators: BTreeSet<String> = if args.annotators.is_empty() {
        s.annotators.clone().unwrap_or_default().into_iter().collect()
    } else {
        args.annotators.into_iter().collect()
    };
    if annotators.is_empty() {
        return Err(config_err("no annotators (--annotators or [service] annotators)"));
    }
    let defaults = StoreConfig::default();
    let config = StoreConfig {
        annotators,
        panel: args.panel.or(s.panel).unwrap_or(defaults.panel),
        threshold: args.threshold.or(s.threshold).unwrap_or(defaults.threshold),
    };
    if args.predictions.is_some() {
        let path = judgments.with_extension("items.jsonl");
        write_items(&path, &items)?;
        log::info!("items written to {}", path.display());
    }
    let store = Store::open(items, &judgments, config).map_err(|e| match e {
        decc_service::StoreError::Config(m) => config_err(m),
        other => other.into(),
    })?;
    let ui = args.ui.clone().or_else(|| s.ui_dir.clone());
    let host = args.host.clone().or_else(|| s.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let port = args.port.or(s.port).unwrap_or(8080);

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        decc_service::serve(listener, router(Arc::new(store), ui)).await?;
        Ok(())
    })
}
