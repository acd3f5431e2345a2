use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use thiserror::Error;

use svagent::agents::AnswerOption;
use svagent::dpp::{CombineMode, RatioNorm};
use svagent::eval::{
    ablation_grid, load_qa, load_stores, run_benchmark, standard_ablation_grid, BenchOptions,
};
use svagent::frame_store::FrameStore;
use svagent::model_client::{
    Clients, HttpChatClient, HttpEmbedClient, MockBackend, MockFixtures, RetryPolicy,
};
use svagent::orchestrator::{answer_question, select_frames, Ablations, RunConfig, RunTrace};

mod show;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn run_err(e: impl ToString) -> CliError {
    CliError::Run(e.to_string())
}

/// Closed-loop long-video question answering over frame manifests.
#[derive(Parser)]
#[command(name = "svagent", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one multiple-choice question about a video.
    Answer(AnswerArgs),
    /// Score a QA file, optionally as an ablation grid.
    Bench(BenchArgs),
    /// Run DPP frame selection for a single anchor text.
    DppSelect(DppArgs),
    /// Inspect run traces.
    Trace {
        #[command(subcommand)]
        action: TraceAction,
    },
    /// Check manifests, QA files, fixtures and config files without running anything.
    Validate(ValidateArgs),
}

#[derive(Subcommand)]
enum TraceAction {
    /// Print a per-iteration summary of a trace file.
    Show {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Args)]
struct BackendArgs {
    /// Model backend.
    #[arg(long, value_enum, default_value = "mock")]
    backend: Backend,
    /// Mock fixture JSONL file.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible chat endpoint.
    #[arg(long, env = "SVAGENT_CHAT_URL")]
    chat_url: Option<String>,
    /// Base URL of the embeddings endpoint; defaults to the chat URL.
    #[arg(long, env = "SVAGENT_EMBED_URL")]
    embed_url: Option<String>,
    /// Embedding model name sent to the embeddings endpoint.
    #[arg(long, default_value = "default")]
    embed_model: String,
}

/// Overrides for fields of the run config; unset flags keep the config file value.
#[derive(Args)]
struct RunFlags {
    /// JSON run config; flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    init_fraction: Option<f64>,
    /// sumsizes or k
    #[arg(long, value_parser = serde_enum::<RatioNorm>)]
    ratio_norm: Option<RatioNorm>,
    /// intersection or union
    #[arg(long, value_parser = serde_enum::<CombineMode>)]
    combine_mode: Option<CombineMode>,
    #[arg(long)]
    combine_min_size: Option<usize>,
    /// Comma-separated ablation flags, or "none".
    #[arg(long, value_parser = parse_ablations)]
    ablations: Option<Ablations>,
    /// Model name used for every agent.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnswerArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    question: String,
    /// JSON array (of {"id", "text"} objects or plain strings) or "A=text|B=text".
    #[arg(long)]
    options: String,
    /// Where to write the run trace (JSONL, one line).
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// QA items, one JSON object per line.
    #[arg(long)]
    qa: PathBuf,
    /// Directory of frame manifests (*.json).
    #[arg(long)]
    manifest_dir: PathBuf,
    /// Ablation row as a flag list ("none" is the full pipeline); repeat for
    /// several rows, or pass "standard" for the seven-row grid.
    #[arg(long)]
    ablate: Vec<String>,
    /// Worker threads.
    #[arg(long = "parallel", default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    parallel: u64,
    /// JSON report path.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Directory for per-item traces.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct DppArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Text embedded as the relevance anchor.
    #[arg(long)]
    anchor_text: String,
    /// Number of frames to select.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    qa: Vec<PathBuf>,
    #[arg(long)]
    fixtures: Vec<PathBuf>,
    #[arg(long)]
    config: Vec<PathBuf>,
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_ablations(s: &str) -> Result<Ablations, String> {
    Ablations::parse_list(s).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => read_json::<RunConfig>(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.max_iters {
            c.max_iters = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.init_fraction {
            c.init_fraction = v;
        }
        if let Some(v) = self.ratio_norm {
            c.ratio_norm = v;
        }
        if let Some(v) = self.combine_mode {
            c.combine_mode = v;
        }
        if let Some(v) = self.combine_min_size {
            c.combine_min_size = v;
        }
        if let Some(v) = &self.ablations {
            c.ablations = v.clone();
        }
        if let Some(m) = &self.model {
            c.models = svagent::agents::AgentModels::all(m);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
        Ok(c)
    }
}

type ClientFactory = Box<dyn Fn() -> Result<Clients, CliError>>;

impl BackendArgs {
    /// Mock clients are rebuilt per call so each run replays fixtures from the start.
    fn factory(&self, dimension: usize, fixtures_required: bool) -> Result<ClientFactory, CliError> {
        match self.backend {
            Backend::Mock => {
                let fx = match &self.fixtures {
                    Some(p) => MockFixtures::load(p).map_err(usage)?,
                    None if fixtures_required => return Err(usage("--backend mock requires --fixtures")),
                    None => MockFixtures::new(),
                };
                MockBackend::new(fx.clone(), dimension).map_err(usage)?;
                Ok(Box::new(move || {
                    MockBackend::new(fx.clone(), dimension).map(Clients::mock).map_err(run_err)
                }))
            }
            Backend::Http => {
                if self.fixtures.is_some() {
                    return Err(usage("--fixtures only applies to --backend mock"));
                }
                let chat_url = self
                    .chat_url
                    .clone()
                    .ok_or_else(|| usage("--backend http needs --chat-url or SVAGENT_CHAT_URL"))?;
                let embed_url = self.embed_url.clone().unwrap_or_else(|| chat_url.clone());
                let chat = Arc::new(HttpChatClient::from_env(&chat_url, RetryPolicy::default()).map_err(usage)?);
                let embed = Arc::new(
                    HttpEmbedClient::from_env(&embed_url, &self.embed_model, RetryPolicy::default()).map_err(usage)?,
                );
                let clients = Clients::new(chat, embed);
                Ok(Box::new(move || Ok(clients.clone())))
            }
        }
    }
}

fn parse_options(raw: &str) -> Result<Vec<AnswerOption>, CliError> {
    let raw = raw.trim();
    let options: Vec<AnswerOption> = if raw.starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(raw).map_err(|e| usage(format!("--options: {e}")))?;
        values
            .into_iter()
            .enumerate()
            .map(|(i, v)| match v {
                serde_json::Value::String(text) => Ok(AnswerOption::new(option_letter(i), text)),
                other => serde_json::from_value(other).map_err(|e| usage(format!("--options item {}: {e}", i + 1))),
            })
            .collect::<Result<_, _>>()?
    } else {
        raw.split('|')
            .map(|part| {
                let (id, text) = part
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--options: expected ID=text, got {part:?}")))?;
                Ok(AnswerOption::new(id.trim(), text.trim()))
            })
            .collect::<Result<_, CliError>>()?
    };
    if options.len() < 2 {
        return Err(usage("--options needs at least two options"));
    }
    Ok(options)
}

fn option_letter(i: usize) -> String {
    char::from_u32('A' as u32 + i as u32).map_or_else(|| format!("O{i}"), String::from)
}

fn load_manifest(path: &Path) -> Result<FrameStore, CliError> {
    FrameStore::load_manifest(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| run_err(format!("{}: {e}", path.display())))
}

fn cmd_answer(a: AnswerArgs) -> Result<(), CliError> {
    let store = load_manifest(&a.manifest)?;
    let options = parse_options(&a.options)?;
    let config = a.run.resolve()?;
    let clients = a.backend.factory(store.dimension(), true)?()?;
    let rec = answer_question(&store, &a.question, &options, &config, &clients).map_err(run_err)?;
    for w in &rec.trace.warnings {
        log::warn!("{w}");
    }
    if let Some(path) = &a.trace_out {
        write_file(path, &(rec.trace.to_json_line() + "\n"))?;
    }
    println!("{}", rec.final_option);
    Ok(())
}

fn cmd_bench(b: BenchArgs) -> Result<(), CliError> {
    let items = load_qa(&b.qa).map_err(|e| usage(format!("{}: {e}", b.qa.display())))?;
    let stores = load_stores(&b.manifest_dir).map_err(|e| usage(format!("{}: {e}", b.manifest_dir.display())))?;
    let config = b.run.resolve()?;
    let dimension = stores.values().next().map_or(1, FrameStore::dimension);
    if b.backend.backend == Backend::Mock && stores.values().any(|s| s.dimension() != dimension) {
        return Err(usage("mock backend needs every manifest to share one embedding dimension"));
    }
    let factory = b.backend.factory(dimension, true)?;
    let options = BenchOptions { parallelism: b.parallel as usize, trace_dir: b.trace_dir.clone() };

    let report = if b.ablate.is_empty() {
        let result = run_benchmark(&items, &stores, &config, &factory()?, &options).map_err(run_err)?;
        print!("{}", result.format_summary());
        serde_json::to_string_pretty(&result)
    } else {
        let mut sets = Vec::new();
        for spec in &b.ablate {
            if spec == "standard" {
                sets.extend(standard_ablation_grid());
            } else {
                sets.push(Ablations::parse_list(spec).map_err(|e| usage(format!("--ablate {spec:?}: {e}")))?);
            }
        }
        // mock construction was checked up front, so the factory cannot fail here
        let table = ablation_grid(&config, &sets, &items, &stores, || factory().expect("client factory"), &options)
            .map_err(run_err)?;
        print!("{}", table.format());
        for w in &table.warnings {
            eprintln!("warning: {w}");
        }
        serde_json::to_string_pretty(&table)
    }
    .expect("report serializes");
    if let Some(path) = &b.report_out {
        write_file(path, &(report + "\n"))?;
    }
    Ok(())
}

fn cmd_dpp_select(d: DppArgs) -> Result<(), CliError> {
    let store = load_manifest(&d.manifest)?;
    let clients = d.backend.factory(store.dimension(), false)?()?;
    let anchor = clients.embed.embed_text(&d.anchor_text).map_err(run_err)?;
    let emb = store.all_embeddings();
    let (frames, selection) = select_frames(&store, &emb, &anchor, d.k as usize).map_err(run_err)?;
    let mut out = format!("{frames}\n");
    for (step, (pos, gain)) in selection.order.iter().zip(&selection.gains).enumerate() {
        let _ = writeln!(
            out,
            "step {}: frame {} gain {gain:.6} log-gain {:.6}",
            step + 1,
            store.frames()[*pos].index,
            gain.ln()
        );
    }
    for pos in &selection.padded {
        let _ = writeln!(out, "padded: frame {}", store.frames()[*pos].index);
    }
    print!("{out}");
    Ok(())
}

fn cmd_trace_show(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| run_err(format!("{}: {e}", path.display())))?;
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or_default();
    let trace = RunTrace::from_json(line).map_err(|e| run_err(format!("{}: {e}", path.display())))?;
    print!("{}", show::render(&trace));
    Ok(())
}

fn cmd_validate(v: ValidateArgs) -> Result<(), CliError> {
    if v.manifest.is_empty() && v.qa.is_empty() && v.fixtures.is_empty() && v.config.is_empty() {
        return Err(usage("nothing to validate; pass --manifest, --qa, --fixtures or --config"));
    }
    let mut failures = 0;
    let mut report = |path: &Path, result: Result<String, String>| match result {
        Ok(summary) => println!("ok      {}: {summary}", path.display()),
        Err(e) => {
            failures += 1;
            println!("invalid {}: {e}", path.display());
        }
    };
    for p in &v.manifest {
        let r = FrameStore::load_manifest(p)
            .map(|s| format!("video {:?}, {} frames, dimension {}", s.video_id(), s.len(), s.dimension()))
            .map_err(|e| e.to_string());
        report(p, r);
    }
    for p in &v.qa {
        report(p, load_qa(p).map(|items| format!("{} items", items.len())).map_err(|e| e.to_string()));
    }
    for p in &v.fixtures {
        report(p, MockFixtures::load(p).map(|fx| format!("{} lines", fx.lines.len())));
    }
    for p in &v.config {
        let r = read_json::<RunConfig>(p)
            .map_err(|e| e.to_string())
            .and_then(|c| c.validate().map(|()| "valid run config".to_string()).map_err(|e| e.to_string()));
        report(p, r);
    }
    if failures > 0 {
        return Err(run_err(format!("{failures} file(s) failed validation")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Answer(a) => cmd_answer(a),
        Command::Bench(b) => cmd_bench(b),
        Command::DppSelect(d) => cmd_dpp_select(d),
        Command::Trace { action: TraceAction::Show { trace } } => cmd_trace_show(&trace),
        Command::Validate(v) => cmd_validate(v),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
