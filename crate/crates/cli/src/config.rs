//! TOML experiment config, flag overrides and their resolution.
//!
//! Flags win over the file. Backend selection is resolved per layer: a flag
//! that picks a backend (`--script`, `--replay`, `--endpoint`) replaces the
//! file's `[backend]` section as a whole.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use decc_core::chain::{Ablation, ChainConfig, RunMode, SessionMode};
use decc_core::dataset::CorpusFormat;
use decc_core::icl::load_demonstrations;
use decc_core::llm::{GenerationParams, LiveConfig, ProviderKind};
use decc_core::prompts::PromptRegistry;

/// A problem with the configuration, reported before any backend call.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub const DEFAULT_SEED: u64 = 20231;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Root seed for every random choice.
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub backend: BackendSection,
    pub generation: GenerationSection,
    pub chain: ChainSection,
    pub run: RunSection,
    pub output: OutputSection,
    pub icl: IclSection,
    pub eval: EvalSection,
    pub service: ServiceSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub format: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// `scripted`, `replay` or `live`; inferred from the other keys when
    /// absent.
    pub kind: Option<String>,
    pub script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    /// Save every exchange to this transcript.
    pub record: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub provider: Option<ProviderKind>,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub top: Option<f64>,
    pub repetition_penalty: Option<f64>,
    pub max_tokens: Option<u32>,
    /// Temperature for the single-prompt baseline.
    pub naive_temperature: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub ablation: Option<String>,
    pub session: Option<String>,
    pub shots: Option<usize>,
    pub demos_dir: Option<PathBuf>,
    pub parse_retries: Option<u32>,
    pub fuzzy_locate_threshold: Option<f64>,
    pub allow_implicit: Option<bool>,
    pub token_budget: Option<usize>,
    pub parallelism: Option<usize>,
    /// JSON list of prompt sets replacing the built-in ones per language.
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub run_count: Option<usize>,
    /// `naive` runs the single-prompt baseline instead of the chain.
    pub baseline: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclSection {
    pub k: Option<usize>,
    /// `hash` (default) or `http`.
    pub embedder: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub items: Option<PathBuf>,
    pub judgments: Option<PathBuf>,
    pub annotators: Option<Vec<String>>,
    pub panel: Option<usize>,
    pub threshold: Option<usize>,
    pub ui_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CorpusArgs {
    /// Corpus file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// canonical-jsonl, xia2019-raw, singh2021-raw or rebalanced-raw.
    #[arg(long)]
    pub format: Option<String>,
}

pub fn corpus_source(args: &CorpusArgs, file: &FileConfig) -> anyhow::Result<(PathBuf, CorpusFormat)> {
    let path = args
        .corpus
        .clone()
        .or_else(|| file.corpus.path.clone())
        .ok_or_else(|| config_err("no corpus given (--corpus or [corpus] path)"))?;
    let format = match args.format.as_deref().or(file.corpus.format.as_deref()) {
        Some(f) => f.parse().map_err(|e: decc_core::DatasetError| config_err(e.to_string()))?,
        None => CorpusFormat::CanonicalJsonl,
    };
    Ok((path, format))
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Scripted backend: JSON script of canned responses.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Replay a recorded transcript.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Live OpenAI-compatible endpoint, e.g. https://api.openai.com/v1.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// openai, top-k or no-penalty.
    #[arg(long)]
    pub provider: Option<String>,
    /// Save every exchange to this transcript file.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub enum BackendSpec {
    Scripted(PathBuf),
    Replay(PathBuf),
    Live(LiveConfig),
}

impl BackendSpec {
    pub fn is_live(&self) -> bool {
        matches!(self, BackendSpec::Live(_))
    }
}

fn parse_provider(s: &str) -> anyhow::Result<ProviderKind> {
    match s {
        "openai" => Ok(ProviderKind::Openai),
        "top-k" => Ok(ProviderKind::TopK),
        "no-penalty" => Ok(ProviderKind::NoPenalty),
        other => Err(config_err(format!("unknown provider {other:?} (openai, top-k or no-penalty)"))),
    }
}

fn section_backend(s: &BackendSection) -> anyhow::Result<Option<BackendSpec>> {
    let live_keys = s.endpoint.is_some()
        || s.api_key_env.is_some()
        || s.provider.is_some()
        || s.requests_per_minute.is_some()
        || s.timeout_secs.is_some();
    let inferred = match (s.script.is_some(), s.transcript.is_some(), s.endpoint.is_some()) {
        (false, false, false) => None,
        (true, false, false) => Some("scripted"),
        (false, true, false) => Some("replay"),
        (false, false, true) => Some("live"),
        _ => return Err(config_err("[backend] sets more than one of script, transcript and endpoint")),
    };
    let kind = match (s.kind.as_deref(), inferred) {
        (Some(k), Some(i)) if k != i => {
            return Err(config_err(format!("[backend] kind = {k:?} conflicts with the {i} settings present")))
        }
        (Some(k), _) => k,
        (None, Some(i)) => i,
        (None, None) => return Ok(None),
    };
    match kind {
        "scripted" | "replay" if live_keys => {
            Err(config_err(format!("{kind} backend forbids live endpoint settings (endpoint, api_key_env, provider, ...)")))
        }
        "scripted" => Ok(Some(BackendSpec::Scripted(
            s.script.clone().ok_or_else(|| config_err("scripted backend needs [backend] script"))?,
        ))),
        "replay" => Ok(Some(BackendSpec::Replay(
            s.transcript.clone().ok_or_else(|| config_err("replay backend needs [backend] transcript"))?,
        ))),
        "live" => {
            let endpoint = s.endpoint.clone().ok_or_else(|| config_err("live backend needs [backend] endpoint"))?;
            let mut live = LiveConfig::new(endpoint, s.api_key_env.clone().unwrap_or_else(|| "OPENAI_API_KEY".into()));
            live.provider = s.provider.unwrap_or_default();
            live.requests_per_minute = s.requests_per_minute;
            if let Some(t) = s.timeout_secs {
                live.timeout_secs = t;
            }
            Ok(Some(BackendSpec::Live(live)))
        }
        other => Err(config_err(format!("unknown backend kind {other:?} (scripted, replay or live)"))),
    }
}

/// The backend to use and where to record its transcript, if anywhere.
pub fn resolve_backend(args: &BackendArgs, file: &FileConfig) -> anyhow::Result<(BackendSpec, Option<PathBuf>)> {
    let record = args.record.clone().or_else(|| file.backend.record.clone());
    let picked = [args.script.is_some(), args.replay.is_some(), args.endpoint.is_some()].iter().filter(|b| **b).count();
    if picked > 1 {
        return Err(config_err("--script, --replay and --endpoint are mutually exclusive"));
    }
    let spec = if picked == 1 {
        if (args.script.is_some() || args.replay.is_some()) && (args.api_key_env.is_some() || args.provider.is_some()) {
            return Err(config_err("scripted and replay backends forbid --api-key-env and --provider"));
        }
        section_backend(&BackendSection {
            script: args.script.clone(),
            transcript: args.replay.clone(),
            endpoint: args.endpoint.clone(),
            api_key_env: args.api_key_env.clone(),
            provider: args.provider.as_deref().map(parse_provider).transpose()?,
            ..Default::default()
        })?
        .expect("one backend flag given")
    } else {
        let mut spec = section_backend(&file.backend)?
            .ok_or_else(|| config_err("no backend configured (--script, --replay, --endpoint or [backend])"))?;
        if args.api_key_env.is_some() || args.provider.is_some() {
            let BackendSpec::Live(live) = &mut spec else {
                return Err(config_err("--api-key-env and --provider need a live backend"));
            };
            if let Some(v) = &args.api_key_env {
                live.api_key_env = v.clone();
            }
            if let Some(p) = &args.provider {
                live.provider = parse_provider(p)?;
            }
        }
        spec
    };
    if record.is_some() && matches!(spec, BackendSpec::Replay(_)) {
        return Err(config_err("--record makes no sense with a replay backend"));
    }
    Ok((spec, record))
}

#[derive(Debug, Clone, Default, Args)]
pub struct ChainArgs {
    /// full, no-recognize, no-locate, no-analyze or no-summarize.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Run a baseline instead of the chain; only `naive` exists.
    #[arg(long)]
    pub baseline: Option<String>,
    /// continuing or per-step.
    #[arg(long)]
    pub session: Option<String>,
    /// Set by the command: `run --shots` or each row of a sweep.
    #[arg(skip)]
    pub shots: Option<usize>,
    /// Directory of curated demonstrations.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Documents processed concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

pub fn generation_params(args: &ChainArgs, file: &FileConfig) -> (GenerationParams, GenerationParams) {
    let g = &file.generation;
    let mut params = GenerationParams::default();
    if let Some(m) = args.model.clone().or_else(|| g.model.clone()) {
        params.model = m;
    }
    if let Some(t) = args.temperature.or(g.temperature) {
        params.temperature = t;
    }
    if let Some(t) = g.top {
        params.top = t;
    }
    if let Some(p) = g.repetition_penalty {
        params.repetition_penalty = Some(p);
    }
    if let Some(m) = g.max_tokens {
        params.max_tokens = m;
    }
    let mut naive = GenerationParams { model: params.model.clone(), max_tokens: params.max_tokens, ..GenerationParams::naive() };
    if let Some(t) = g.naive_temperature {
        naive.temperature = t;
    }
    (params, naive)
}

pub fn chain_config(args: &ChainArgs, file: &FileConfig) -> anyhow::Result<(ChainConfig, RunMode)> {
    let c = &file.chain;
    let ablation: Ablation = match args.ablate.as_deref().or(c.ablation.as_deref()) {
        Some(a) => a.parse().map_err(config_err)?,
        None => Ablation::Full,
    };
    let mode = match args.baseline.as_deref().or(file.run.baseline.as_deref()) {
        None => RunMode::Chain,
        Some("naive") => RunMode::Naive,
        Some(other) => return Err(config_err(format!("unknown baseline {other:?} (only naive)"))),
    };
    if mode == RunMode::Naive && ablation != Ablation::Full {
        return Err(config_err("--baseline naive cannot be combined with an ablation"));
    }
    let session = match args.session.as_deref().or(c.session.as_deref()) {
        None | Some("continuing") => SessionMode::Continuing,
        Some("per-step") => SessionMode::PerStep,
        Some(other) => return Err(config_err(format!("unknown session mode {other:?} (continuing or per-step)"))),
    };
    let (params, naive_params) = generation_params(args, file);
    let mut cfg = ChainConfig { session, params, naive_params, ..ChainConfig::ablation(ablation) };
    cfg.shots = args.shots.or(c.shots).unwrap_or(0);
    if let Some(dir) = args.demos.clone().or_else(|| c.demos_dir.clone()) {
        cfg.demos = load_demonstrations(&dir).map_err(|e| config_err(e.to_string()))?;
    }
    if let Some(r) = c.parse_retries {
        cfg.parse_retries = r;
    }
    if let Some(t) = c.fuzzy_locate_threshold {
        cfg.fuzzy_locate_threshold = t;
    }
    if let Some(a) = c.allow_implicit {
        cfg.allow_implicit = a;
    }
    cfg.token_budget = c.token_budget;
    if let Some(p) = args.parallelism.or(c.parallelism) {
        cfg.parallelism = p;
    }
    if let Some(path) = &c.prompts {
        cfg.prompts = PromptRegistry::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    }
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok((cfg, mode))
}

/// Parses `0,1,2,4`.
pub fn parse_shot_list(s: &str) -> anyhow::Result<Vec<usize>> {
    let shots: BTreeSet<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| config_err(format!("bad shot count {x:?}"))))
        .collect::<Result<_, _>>()?;
    if shots.is_empty() {
        return Err(config_err("empty shot list"));
    }
    Ok(shots.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(toml_text: &str) -> FileConfig {
        toml::from_str(toml_text).unwrap()
    }

    fn is_config(e: &anyhow::Error) -> bool {
        e.downcast_ref::<ConfigError>().is_some()
    }

    #[test]
    fn scripted_backend_forbids_live_settings() {
        let f = file("[backend]\nscript = \"s.json\"\nendpoint = \"http://x\"\n");
        assert!(is_config(&resolve_backend(&BackendArgs::default(), &f).unwrap_err()));
        let f = file("[backend]\nkind = \"scripted\"\nscript = \"s.json\"\napi_key_env = \"K\"\n");
        assert!(is_config(&resolve_backend(&BackendArgs::default(), &f).unwrap_err()));
        let args = BackendArgs { script: Some("s.json".into()), api_key_env: Some("K".into()), ..Default::default() };
        assert!(is_config(&resolve_backend(&args, &FileConfig::default()).unwrap_err()));
    }

    #[test]
    fn backend_flag_replaces_file_section() {
        let f = file("[backend]\nendpoint = \"https://api.example.com/v1\"\napi_key_env = \"K\"\n");
        let args = BackendArgs { script: Some("s.json".into()), ..Default::default() };
        let (spec, _) = resolve_backend(&args, &f).unwrap();
        assert!(matches!(spec, BackendSpec::Scripted(p) if p == Path::new("s.json")));
        let (spec, _) = resolve_backend(&BackendArgs::default(), &f).unwrap();
        assert!(matches!(spec, BackendSpec::Live(l) if l.api_key_env == "K"));
    }

    #[test]
    fn flags_override_file_values() {
        let f = file("[chain]\nablation = \"no-locate\"\nsession = \"per-step\"\n[generation]\ntemperature = 0.2\n");
        let (cfg, _) = chain_config(&ChainArgs::default(), &f).unwrap();
        assert_eq!(cfg.variant(), "w/o locating");
        assert_eq!(cfg.session, SessionMode::PerStep);
        assert_eq!(cfg.params.temperature, 0.2);
        let args = ChainArgs { ablate: Some("full".into()), temperature: Some(0.9), ..Default::default() };
        let (cfg, _) = chain_config(&args, &f).unwrap();
        assert_eq!(cfg.variant(), "DECC");
        assert_eq!(cfg.params.temperature, 0.9);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for args in [
            ChainArgs { ablate: Some("no-everything".into()), ..Default::default() },
            ChainArgs { shots: Some(2), ..Default::default() },
            ChainArgs { baseline: Some("oracle".into()), ..Default::default() },
            ChainArgs { temperature: Some(3.0), ..Default::default() },
        ] {
            assert!(is_config(&chain_config(&args, &FileConfig::default()).unwrap_err()), "{args:?}");
        }
        assert!(toml::from_str::<FileConfig>("[chain]\nablaton = \"full\"\n").is_err());
    }

    #[test]
    fn example_config_parses() {
        let f = file(include_str!("../configs/example.toml"));
        let (spec, record) = resolve_backend(&BackendArgs::default(), &f).unwrap();
        assert!(matches!(spec, BackendSpec::Live(l) if l.api_key_env == "OPENAI_API_KEY"));
        assert!(record.is_some());
        assert_eq!(f.run.run_count, Some(5));
    }

    #[test]
    fn shot_lists_are_sorted_and_deduplicated() {
        assert_eq!(parse_shot_list("4, 0,2,2").unwrap(), vec![0, 2, 4]);
        assert!(parse_shot_list("1,x").is_err());
    }
}
