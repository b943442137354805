use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Subcommand};
use serde::Serialize;

use decc_core::icl::{
    curate, demo_files, draft_rationales, embed, save_demonstrations, select_candidates, Demonstration,
    EmbeddingProvider, HashEmbedder, HttpEmbedder, HttpEmbedderConfig,
};
use decc_core::types::Document;

use super::{open_corpus, write_json};
use crate::backend::{derive_seeds, ActiveBackend, CLUSTER_STREAM};
use crate::config::{
    chain_config, config_err, resolve_backend, BackendArgs, ChainArgs, CorpusArgs, FileConfig, DEFAULT_SEED,
};

#[derive(Debug, Subcommand)]
pub enum DemosCommand {
    /// Select one training document per cluster and draft its rationale.
    Build(Box<BuildArgs>),
    /// Mark edited drafts as curated; their final pairs must equal gold.
    Curate(CurateArgs),
    /// Show the demonstrations in a directory.
    List(ListArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Training corpus; unlabeled documents are skipped.
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Number of clusters, and so of demonstrations.
    #[arg(long)]
    pub k: Option<usize>,
    /// Root seed; the clustering seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// hash (offline, default) or http.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Base URL of an OpenAI-compatible embeddings endpoint.
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Environment variable holding the embeddings API key.
    #[arg(long)]
    pub embed_api_key_env: Option<String>,
    /// Directory receiving demo-01.json, demo-02.json, ...
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selection (ids, clustering objective per iteration)
    /// as JSON to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Demonstration directory.
    #[arg(long)]
    pub demos: PathBuf,
    /// Only these files; default is every uncurated file in the directory.
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long)]
    pub demos: PathBuf,
}

#[derive(Serialize)]
struct SelectionReport {
    k: usize,
    seed: u64,
    ids: Vec<String>,
    iterations: usize,
    objective_history: Vec<f64>,
}

pub fn demos(cmd: DemosCommand, file: &FileConfig) -> anyhow::Result<()> {
    match cmd {
        DemosCommand::Build(a) => build(*a, file),
        DemosCommand::Curate(a) => curate_files(a),
        DemosCommand::List(a) => list(a),
    }
}

fn embedder(args: &BuildArgs, file: &FileConfig) -> anyhow::Result<Box<dyn EmbeddingProvider>> {
    let icl = &file.icl;
    match args.embedder.as_deref().or(icl.embedder.as_deref()).unwrap_or("hash") {
        "hash" => Ok(Box::new(HashEmbedder { dim: icl.dim.unwrap_or(HashEmbedder::default().dim) })),
        "http" => {
            let endpoint = args
                .embed_endpoint
                .clone()
                .or_else(|| icl.endpoint.clone())
                .ok_or_else(|| config_err("http embedder needs --embed-endpoint or [icl] endpoint"))?;
            let config = HttpEmbedderConfig {
                endpoint,
                model: args.embed_model.clone().or_else(|| icl.model.clone()).unwrap_or("text-embedding-3-small".into()),
                api_key_env: args
                    .embed_api_key_env
                    .clone()
                    .or_else(|| icl.api_key_env.clone())
                    .unwrap_or("OPENAI_API_KEY".into()),
                batch_size: 32,
            };
            Ok(Box::new(HttpEmbedder::new(&config)?))
        }
        other => Err(config_err(format!("unknown embedder {other:?} (hash or http)"))),
    }
}

fn build(args: BuildArgs, file: &FileConfig) -> anyhow::Result<()> {
    let (cfg, _) = chain_config(&args.chain, file)?;
    let (spec, record) = resolve_backend(&args.backend, file)?;
    let k = args.k.or(file.icl.k).unwrap_or(4);
    let seed = derive_seeds(args.seed.or(file.seed).unwrap_or(DEFAULT_SEED), CLUSTER_STREAM, 1)[0];
    let embedder = embedder(&args, file)?;
    let corpus = open_corpus(&args.corpus, file)?.filter(|d| d.is_labeled());
    if k == 0 || k > corpus.len() {
        return Err(config_err(format!("k = {k} must be between 1 and the {} labeled documents", corpus.len())));
    }

    let vectors = embed(&corpus, embedder.as_ref())?;
    let selection = select_candidates(&vectors, k, seed)?;
    let candidates: Vec<Document> =
        selection.ids.iter().map(|id| corpus.get(id).expect("selected from corpus").clone()).collect();
    let backend = ActiveBackend::build(&spec, record)?;
    let drafts = draft_rationales(&candidates, &cfg, backend.chat());
    backend.save_transcript()?;
    let paths = save_demonstrations(&args.out, &drafts?)?;
    if let Some(report) = &args.report {
        write_json(
            report,
            &SelectionReport {
                k,
                seed,
                ids: selection.ids,
                iterations: selection.clustering.iterations,
                objective_history: selection.clustering.objective_history,
            },
        )?;
    }
    list(ListArgs { demos: args.out.clone() })?;
    println!("{} drafts written; review them, then run `decc demos curate --demos {}`", paths.len(), args.out.display());
    Ok(())
}

fn curate_files(args: CurateArgs) -> anyhow::Result<()> {
    let files = if args.files.is_empty() { demo_files(&args.demos)? } else { args.files };
    let mut failed = Vec::new();
    for path in files {
        let demo = Demonstration::load(&path)?;
        if demo.curated {
            continue;
        }
        match curate(demo) {
            Ok(d) => {
                d.save(&path)?;
                println!("curated {}", path.display());
            }
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed.push(path);
            }
        }
    }
    if !failed.is_empty() {
        bail!("{} demonstrations still differ from gold; edit final_pairs and the rationale, then retry", failed.len());
    }
    Ok(())
}

fn list(args: ListArgs) -> anyhow::Result<()> {
    println!("file\tdocument\tcurated\treview\tpairs");
    for path in demo_files(&args.demos)? {
        let demo = Demonstration::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let review = demo
            .review
            .map(|r| serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
            .unwrap_or_else(|| "-".into());
        println!(
            "{}\t{}\t{}\t{}\t{:?}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            demo.document.id(),
            demo.curated,
            review,
            demo.final_pairs
        );
    }
    Ok(())
}
