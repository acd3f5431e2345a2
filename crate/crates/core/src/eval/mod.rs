//! Benchmark sweeps, ablation grids and significance tests.

pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AnswerOption;
use crate::frame_store::{FrameStore, ManifestError};
use crate::model_client::Clients;
use crate::orchestrator::{answer_question, apply_ablations, Ablations, RunConfig};

pub use stats::{paired_t_one_sided, wilcoxon_signed_rank_one_sided, SignificanceReport, StatsError};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAItem {
    pub video_id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Error)]
pub enum QaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("QA file has no items")]
    Empty,
}

fn check_item(item: &QAItem) -> Result<(), String> {
    if item.options.len() < 2 {
        return Err(format!("need at least 2 options, got {}", item.options.len()));
    }
    let mut ids = BTreeSet::new();
    for o in &item.options {
        if !ids.insert(o.id.as_str()) {
            return Err(format!("duplicate option id {:?}", o.id));
        }
    }
    if !ids.contains(item.answer.as_str()) {
        return Err(format!("answer {:?} is not among the options", item.answer));
    }
    if item.question.trim().is_empty() {
        return Err("empty question".into());
    }
    Ok(())
}

pub fn parse_qa(text: &str) -> Result<Vec<QAItem>, QaError> {
    let mut items = Vec::new();
    let mut seen = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let item: QAItem =
            serde_json::from_str(raw).map_err(|e| QaError::Line { line, message: e.to_string() })?;
        check_item(&item).map_err(|message| QaError::Line { line, message })?;
        if let Some(first) = seen.insert((item.video_id.clone(), item.question.clone()), line) {
            return Err(QaError::Line {
                line,
                message: format!("duplicate of line {first} ({:?}, {:?})", item.video_id, item.question),
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(QaError::Empty);
    }
    Ok(items)
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QAItem>, QaError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| QaError::Io { path: path.to_path_buf(), source })?;
    parse_qa(&text)
}

/// Loads every `*.json` manifest in `dir`, keyed by video id.
pub fn load_stores(dir: impl AsRef<Path>) -> Result<BTreeMap<String, FrameStore>, ManifestError> {
    let dir = dir.as_ref();
    let io = |source| ManifestError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let store = FrameStore::load_manifest(&p)?;
        out.insert(store.video_id().to_string(), store);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub video_id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub predicted: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 }
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub items: Vec<ItemResult>,
    pub overall: Tally,
    pub accuracy: f64,
    pub per_category: BTreeMap<String, Tally>,
    pub seed: u64,
    pub config: RunConfig,
}

impl BenchResult {
    fn from_items(items: Vec<ItemResult>, config: &RunConfig) -> Self {
        let mut overall = Tally::default();
        let mut per_category: BTreeMap<String, Tally> = BTreeMap::new();
        for it in &items {
            overall.add(it.correct);
            if let Some(c) = &it.category {
                per_category.entry(c.clone()).or_default().add(it.correct);
            }
        }
        Self {
            accuracy: overall.accuracy(),
            items,
            overall,
            per_category,
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn format_summary(&self) -> String {
        let mut out = format!(
            "overall   {:>4}/{:<4} {:>7.2}%\n",
            self.overall.correct,
            self.overall.total,
            100.0 * self.accuracy
        );
        for (cat, t) in &self.per_category {
            let _ = writeln!(out, "{cat:<9} {:>4}/{:<4} {:>7.2}%", t.correct, t.total, 100.0 * t.accuracy());
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no frame store for video {0:?}")]
    MissingStore(String),
    #[error("invalid config: {0}")]
    Config(#[from] crate::orchestrator::ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, Default)]
pub struct BenchOptions {
    /// Worker threads; 0 means [`DEFAULT_PARALLELISM`].
    pub parallelism: usize,
    /// When set, each item's trace is written to `<dir>/<position>.jsonl`.
    pub trace_dir: Option<PathBuf>,
}

fn run_item(
    pos: usize,
    item: &QAItem,
    store: &FrameStore,
    config: &RunConfig,
    clients: &Clients,
    trace_dir: Option<&Path>,
) -> Result<ItemResult, BenchError> {
    let mut result = ItemResult {
        video_id: item.video_id.clone(),
        question: item.question.clone(),
        answer: item.answer.clone(),
        category: item.category.clone(),
        predicted: None,
        correct: false,
        trace_path: None,
        error: None,
    };
    match answer_question(store, &item.question, &item.options, config, clients) {
        Ok(rec) => {
            result.correct = rec.final_option == item.answer;
            result.predicted = Some(rec.final_option);
            if let Some(dir) = trace_dir {
                let path = dir.join(format!("{pos:05}.jsonl"));
                fs::write(&path, rec.trace.to_json_line() + "\n")
                    .map_err(|source| BenchError::Io { path: path.clone(), source })?;
                result.trace_path = Some(path);
            }
        }
        Err(e) => {
            log::error!("{}: {:?}: {e}", item.video_id, item.question);
            result.error = Some(e.to_string());
        }
    }
    Ok(result)
}

/// Answers every item, scoring orchestration errors as incorrect. Items run
/// on a bounded pool of worker threads; results keep input order.
pub fn run_benchmark(
    items: &[QAItem],
    stores: &BTreeMap<String, FrameStore>,
    config: &RunConfig,
    clients: &Clients,
    options: &BenchOptions,
) -> Result<BenchResult, BenchError> {
    config.validate()?;
    if let Some(missing) = items.iter().find(|i| !stores.contains_key(&i.video_id)) {
        return Err(BenchError::MissingStore(missing.video_id.clone()));
    }
    if let Some(dir) = &options.trace_dir {
        fs::create_dir_all(dir).map_err(|source| BenchError::Io { path: dir.clone(), source })?;
    }
    let workers = if options.parallelism == 0 { DEFAULT_PARALLELISM } else { options.parallelism };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ItemResult, BenchError>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let pos = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(pos) else { break };
                let r = run_item(pos, item, &stores[&item.video_id], config, clients, options.trace_dir.as_deref());
                slots.lock().expect("result lock")[pos] = Some(r);
            });
        }
    });
    let results = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchResult::from_items(results, config))
}

/// The seven flag sets of the standard ablation table, from the bare
/// hypothesis loop up to the full pipeline. Columns are storyline, text
/// verification, visual verification and meta decision.
pub fn standard_ablation_grid() -> Vec<Ablations> {
    let row = |story: bool, text: bool, vision: bool, meta: bool| Ablations {
        no_storyline: !story,
        no_text_verify: !text,
        no_vision_verify: !vision,
        no_meta: !meta,
    };
    vec![
        row(false, false, false, false),
        row(true, false, false, false),
        row(true, true, false, false),
        row(true, false, true, false),
        row(false, true, true, false),
        row(true, true, true, false),
        row(true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablations: Ablations,
    pub result: BenchResult,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

fn mark(enabled: bool) -> &'static str {
    if enabled { "yes" } else { "-" }
}

impl AblationTable {
    pub fn format(&self) -> String {
        let mut out = format!(
            "{:<6} {:<6} {:<6} {:<6} {:>9} {:>8}\n",
            "story", "text", "visual", "meta", "correct", "acc%"
        );
        for r in &self.rows {
            let a = &r.ablations;
            let _ = writeln!(
                out,
                "{:<6} {:<6} {:<6} {:<6} {:>9} {:>8.2}",
                mark(!a.no_storyline),
                mark(!a.no_text_verify),
                mark(!a.no_vision_verify),
                mark(!a.no_meta),
                format!("{}/{}", r.result.overall.correct, r.result.overall.total),
                100.0 * r.result.accuracy,
            );
        }
        out
    }
}

/// Runs one benchmark per flag set. Duplicate and invalid sets are skipped
/// with a warning. `make_clients` is called once per row so mock fixture
/// cursors start fresh.
pub fn ablation_grid(
    base: &RunConfig,
    flag_sets: &[Ablations],
    items: &[QAItem],
    stores: &BTreeMap<String, FrameStore>,
    make_clients: impl Fn() -> Clients,
    options: &BenchOptions,
) -> Result<AblationTable, BenchError> {
    let mut table = AblationTable::default();
    let mut seen = BTreeSet::new();
    for flags in flag_sets {
        if !seen.insert(flags.clone()) {
            table.warnings.push(format!("duplicate flag set {} skipped", flags.label()));
            continue;
        }
        let config = RunConfig { ablations: flags.clone(), ..base.clone() };
        if let Err(e) = apply_ablations(&config) {
            table.warnings.push(format!("flag set {} skipped: {e}", flags.label()));
            continue;
        }
        let row_options = BenchOptions {
            parallelism: options.parallelism,
            trace_dir: options.trace_dir.as_ref().map(|d| d.join(flags.label())),
        };
        let result = run_benchmark(items, stores, &config, &make_clients(), &row_options)?;
        table.rows.push(AblationRow { ablations: flags.clone(), result });
    }
    for w in &table.warnings {
        log::warn!("{w}");
    }
    Ok(table)
}
