//! The iterative answer loop: sample, narrate, hypothesize, gate on DPP
//! agreement, verify across modalities, reconcile, and otherwise ask for
//! better frames and try again.

use std::thread;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{
    self, AgentError, AgentModels, AgentSession, AnswerOption, CallRecord, Decision, FailureReason,
    Generation, Hypothesis, IterationRecord, PromptSet, Storyline, SuggestionRequest,
};
use crate::dpp::{
    combine_selections, greedy_map, CombineMode, DppError, GateResult, GreedySelection, LowRankKernel,
    RatioNorm, RelevanceVector,
};
use crate::frame_store::{FrameIndexSet, FrameStore};
use crate::model_client::{AgentTag, ClientError, Clients};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_storyline: bool,
    pub no_text_verify: bool,
    pub no_vision_verify: bool,
    pub no_meta: bool,
}

impl Ablations {
    pub const FLAG_NAMES: [&'static str; 4] = ["no_storyline", "no_text_verify", "no_vision_verify", "no_meta"];

    /// Parses a comma-separated flag list such as `no_meta,no_storyline`.
    /// An empty string or `none` is the full pipeline.
    pub fn parse_list(s: &str) -> Result<Self, ConfigError> {
        let mut out = Self::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty() && *f != "none") {
            match flag {
                "no_storyline" => out.no_storyline = true,
                "no_text_verify" => out.no_text_verify = true,
                "no_vision_verify" => out.no_vision_verify = true,
                "no_meta" => out.no_meta = true,
                other => return Err(ConfigError::UnknownFlag(other.to_string())),
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let set: Vec<&str> = Self::FLAG_NAMES
            .iter()
            .zip([self.no_storyline, self.no_text_verify, self.no_vision_verify, self.no_meta])
            .filter_map(|(name, on)| on.then_some(*name))
            .collect();
        if set.is_empty() { "full".into() } else { set.join(",") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub max_iters: usize,
    pub k: usize,
    pub init_fraction: f64,
    pub ratio_norm: RatioNorm,
    pub combine_mode: CombineMode,
    pub combine_min_size: usize,
    pub ablations: Ablations,
    pub models: AgentModels,
    pub generation: Generation,
    /// Offsets the even-spaced fallback sample used when a suggestion is unusable.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            max_iters: 3,
            k: 8,
            init_fraction: 0.1,
            ratio_norm: RatioNorm::Sumsizes,
            combine_mode: CombineMode::Intersection,
            combine_min_size: 2,
            ablations: Ablations::default(),
            models: AgentModels::default(),
            generation: Generation::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("tau must be positive, got {0}")]
    Tau(f64),
    #[error("max_iters must be at least 1")]
    MaxIters,
    #[error("k must be at least 1")]
    K,
    #[error("init_fraction must be in (0, 1], got {0}")]
    InitFraction(f64),
    #[error("no_text_verify and no_vision_verify leave the meta agent without decisions")]
    NoDecisionSource,
    #[error("unknown ablation flag {0:?}")]
    UnknownFlag(String),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ConfigError::Tau(self.tau));
        }
        if self.max_iters == 0 {
            return Err(ConfigError::MaxIters);
        }
        if self.k == 0 {
            return Err(ConfigError::K);
        }
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return Err(ConfigError::InitFraction(self.init_fraction));
        }
        apply_ablations(self).map(|_| ())
    }
}

/// Which stages actually run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub storyline_agent: bool,
    pub text_verify: bool,
    pub vision_verify: bool,
    pub meta: bool,
}

impl PipelinePlan {
    pub fn disabled_agents(&self) -> Vec<AgentTag> {
        let mut out = Vec::new();
        if !self.storyline_agent {
            out.push(AgentTag::Storyline);
        }
        if !self.text_verify {
            out.push(AgentTag::TextDecision);
        }
        if !self.vision_verify {
            out.push(AgentTag::VisionDecision);
        }
        if !self.meta {
            out.push(AgentTag::Meta);
        }
        out
    }
}

/// Both verifiers off is only valid together with `no_meta`: the run then
/// answers from the hypothesis once the gate opens.
pub fn apply_ablations(config: &RunConfig) -> Result<PipelinePlan, ConfigError> {
    let a = &config.ablations;
    if a.no_text_verify && a.no_vision_verify && !a.no_meta {
        return Err(ConfigError::NoDecisionSource);
    }
    Ok(PipelinePlan {
        storyline_agent: !a.no_storyline,
        text_verify: !a.no_text_verify,
        vision_verify: !a.no_vision_verify,
        meta: !a.no_meta,
    })
}

/// Strict: a ratio equal to `tau` does not pass before the last iteration.
pub fn gate(ratio: f64, config: &RunConfig, iteration: usize) -> bool {
    ratio > config.tau || iteration >= config.max_iters
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPath {
    Meta,
    AgreedNoMeta,
    HypothesisFallback,
}

pub fn resolve_final(meta: Option<&str>, agreed: Option<&str>, hypothesis: &str) -> (String, ResolutionPath) {
    match (meta, agreed) {
        (Some(m), _) => (m.to_string(), ResolutionPath::Meta),
        (None, Some(a)) => (a.to_string(), ResolutionPath::AgreedNoMeta),
        (None, None) => (hypothesis.to_string(), ResolutionPath::HypothesisFallback),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run_id: String,
    pub video_id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub config: RunConfig,
    pub iterations: Vec<IterationRecord>,
    pub final_option: String,
    pub resolution_path: ResolutionPath,
    pub calls: Vec<CallRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace: {0}")]
    Json(#[from] serde_json::Error),
    #[error("inconsistent trace: {0}")]
    Inconsistent(String),
}

impl RunTrace {
    /// One line of sorted-key JSON with floats rounded to 6 significant digits.
    pub fn to_json_line(&self) -> String {
        to_stable_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let trace: RunTrace = serde_json::from_str(text)?;
        if !trace.options.iter().any(|o| o.id == trace.final_option) {
            return Err(TraceError::Inconsistent(format!(
                "final option {:?} is not a declared option",
                trace.final_option
            )));
        }
        if trace.iterations.len() > trace.config.max_iters {
            return Err(TraceError::Inconsistent(format!(
                "{} iterations exceed max_iters {}",
                trace.iterations.len(),
                trace.config.max_iters
            )));
        }
        Ok(trace)
    }

    pub fn calls_for(&self, agent: AgentTag) -> usize {
        self.calls.iter().filter(|c| c.agent == agent).count()
    }
}

/// Sorted-key compact JSON with every float rounded to 6 significant digits.
pub fn to_stable_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("trace types serialize");
    round_floats(&mut v);
    serde_json::to_string(&v).expect("value serializes")
}

pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig6).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerRecord {
    pub final_option: String,
    pub trace: RunTrace,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestrationError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no hypothesis formed in {iterations} iterations; last error: {last_error}")]
    NoHypothesis { iterations: usize, last_error: String },
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("anchor embedding: {0}")]
    Embed(#[from] ClientError),
    #[error("frame selection: {0}")]
    Dpp(#[from] DppError),
}

/// Greedy DPP selection over the whole store with relevance to `anchor`.
/// Returns frame indices together with the raw selection over positions.
pub fn select_frames(
    store: &FrameStore,
    embeddings: &DMatrix<f64>,
    anchor: &[f64],
    k: usize,
) -> Result<(FrameIndexSet, GreedySelection), DppError> {
    let relevance = RelevanceVector::from_anchor(anchor, embeddings)?;
    let kernel = LowRankKernel::new(embeddings, &relevance)?;
    let selection = greedy_map(&kernel, k)?;
    let frames = selection.items().iter().map(|p| store.frames()[p].index).collect();
    Ok((frames, selection))
}

/// Stable per-question id scoping mock fixture cursors.
pub fn run_id_for(video_id: &str, question: &str) -> String {
    format!("{video_id}::{question}")
}

fn validate_inputs(query: &str, options: &[AnswerOption]) -> Result<(), OrchestrationError> {
    if query.trim().is_empty() {
        return Err(OrchestrationError::InvalidInput("empty question".into()));
    }
    if options.len() < 2 {
        return Err(OrchestrationError::InvalidInput(format!(
            "need at least 2 options, got {}",
            options.len()
        )));
    }
    for (i, o) in options.iter().enumerate() {
        if o.id.trim().is_empty() {
            return Err(OrchestrationError::InvalidInput(format!("option {i} has an empty id")));
        }
        if options[..i].iter().any(|p| p.id == o.id) {
            return Err(OrchestrationError::InvalidInput(format!("duplicate option id {:?}", o.id)));
        }
    }
    Ok(())
}

enum StepOutcome {
    Final(String, ResolutionPath),
    Continue,
}

struct Loop<'a, 's> {
    store: &'a FrameStore,
    query: &'a str,
    options: &'a [AnswerOption],
    config: &'a RunConfig,
    plan: PipelinePlan,
    clients: &'a Clients,
    embeddings: DMatrix<f64>,
    session: AgentSession<'s>,
    storyline: Option<Storyline>,
    hypothesis: Option<Hypothesis>,
    query_anchor: Option<Vec<f64>>,
}

impl Loop<'_, '_> {
    fn step(&mut self, n: usize, frames: &FrameIndexSet, rec: &mut IterationRecord) -> Result<StepOutcome, StepError> {
        let store = self.store;
        let story = if self.plan.storyline_agent {
            agents::run_storyline(&mut self.session, store, frames, self.query, self.options, self.storyline.as_ref())?
        } else {
            Storyline::from_captions(store, frames, self.storyline.as_ref())
        };
        rec.storyline = Some(story.clone());
        self.storyline = Some(story.clone());

        let hyp = agents::run_hypothesis(&mut self.session, &story, self.query, self.options, store, frames)?;
        rec.hypothesis = Some(hyp.clone());
        self.hypothesis = Some(hyp.clone());

        let query_anchor = match &self.query_anchor {
            Some(a) => a.clone(),
            None => {
                let a = self.clients.embed.embed_text(self.query)?;
                self.query_anchor = Some(a.clone());
                a
            }
        };
        let evidence_anchor = self.clients.embed.embed_text(&hyp.evidence_text)?;
        let k = self.config.k;
        let (y_q, _) = select_frames(store, &self.embeddings, &query_anchor, k)?;
        let (y_e, _) = select_frames(store, &self.embeddings, &evidence_anchor, k)?;
        let ratio = self.config.ratio_norm.ratio(&y_q, &y_e, k)?;
        let passed = gate(ratio, self.config, n);
        rec.gate = Some(GateResult {
            intersection: y_q.intersection(&y_e),
            y_q: y_q.clone(),
            y_e: y_e.clone(),
            ratio,
            passed,
        });
        if !passed {
            rec.failure_reason = FailureReason::GateFailed;
            return Ok(StepOutcome::Continue);
        }

        let y = combine_selections(&y_q, &y_e, self.config.combine_mode, self.config.combine_min_size);
        rec.decision_frames = Some(y.clone());
        if !self.plan.text_verify && !self.plan.vision_verify {
            let (option, path) = resolve_final(None, None, &hyp.answer_option);
            return Ok(StepOutcome::Final(option, path));
        }
        let (text, vision) = self.decisions(&story, &y)?;
        rec.decisions = Some((text.clone(), vision.clone()));
        let agreed = text.option == vision.option;
        if !agreed && n < self.config.max_iters {
            rec.failure_reason = FailureReason::DecisionsDisagree;
            return Ok(StepOutcome::Continue);
        }

        let mut meta = None;
        if self.plan.meta {
            match agents::run_meta_decision(&mut self.session, &text, &vision, &story, store, &y, self.query, self.options) {
                Ok(v) => meta = Some(v),
                Err(e) => self.session.warnings.push(format!("meta failed, falling back: {e}")),
            }
        }
        rec.meta = meta.clone();
        let agreed_option = agreed.then_some(text.option.as_str());
        let (option, path) = resolve_final(
            meta.as_ref().map(|m| m.final_option.as_str()),
            agreed_option,
            &hyp.answer_option,
        );
        Ok(StepOutcome::Final(option, path))
    }

    fn decisions(&mut self, story: &Storyline, y: &FrameIndexSet) -> Result<(Decision, Decision), AgentError> {
        let (store, query, options) = (self.store, self.query, self.options);
        match (self.plan.text_verify, self.plan.vision_verify) {
            (true, true) => {
                let mut text_session = self.session.fork();
                let mut vision_session = self.session.fork();
                let (text, vision) = thread::scope(|scope| {
                    let t = scope.spawn(|| {
                        agents::run_text_decision(&mut text_session, story, store, y, query, options)
                    });
                    let v = agents::run_vision_decision(&mut vision_session, story, store, y, query, options);
                    (t.join().expect("text decision thread panicked"), v)
                });
                self.session.absorb(text_session);
                self.session.absorb(vision_session);
                Ok((text?, vision?))
            }
            (true, false) => {
                let t = agents::run_text_decision(&mut self.session, story, store, y, query, options)?;
                Ok((t.clone(), t))
            }
            (false, true) => {
                let v = agents::run_vision_decision(&mut self.session, story, store, y, query, options)?;
                Ok((v.clone(), v))
            }
            (false, false) => unreachable!("hypothesis-only plans never reach the decision stage"),
        }
    }
}

pub fn answer_question(
    store: &FrameStore,
    query: &str,
    options: &[AnswerOption],
    config: &RunConfig,
    clients: &Clients,
) -> Result<AnswerRecord, OrchestrationError> {
    answer_question_with_prompts(store, query, options, config, clients, &PromptSet::default())
}

pub fn answer_question_with_prompts(
    store: &FrameStore,
    query: &str,
    options: &[AnswerOption],
    config: &RunConfig,
    clients: &Clients,
    prompts: &PromptSet,
) -> Result<AnswerRecord, OrchestrationError> {
    config.validate()?;
    let plan = apply_ablations(config)?;
    validate_inputs(query, options)?;
    let run_id = run_id_for(store.video_id(), query);
    let session = AgentSession::new(clients.chat.as_ref(), &run_id, prompts, &config.models, &config.generation);
    let mut state = Loop {
        store,
        query,
        options,
        config,
        plan,
        clients,
        embeddings: store.all_embeddings(),
        session,
        storyline: None,
        hypothesis: None,
        query_anchor: None,
    };
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut outcome = None;
    let mut last_error = String::new();

    for n in 1..=config.max_iters {
        state.session.set_iteration(n);
        let (frames, suggestion) = if n == 1 {
            (store.uniform_sample(config.init_fraction, &FrameIndexSet::new()), None)
        } else {
            let req = SuggestionRequest {
                history: &history,
                query,
                options,
                storyline: state.storyline.as_ref(),
                limit: config.k,
                fallback_size: config.k,
                seed: config.seed,
            };
            let s = agents::run_suggestion(&mut state.session, store, &req);
            (s.proposed_frames.clone(), Some(s))
        };
        let mut rec = IterationRecord::new(n, frames.clone());
        rec.suggestion = suggestion;
        match state.step(n, &frames, &mut rec) {
            Ok(StepOutcome::Final(option, path)) => {
                history.push(rec);
                outcome = Some((option, path));
                break;
            }
            Ok(StepOutcome::Continue) => {}
            Err(e) => {
                log::warn!("{run_id}: iteration {n}: {e}");
                last_error = e.to_string();
                rec.failure_reason = FailureReason::AgentError;
                rec.error = Some(last_error.clone());
            }
        }
        history.push(rec);
    }

    let (final_option, resolution_path) = match outcome {
        Some(o) => o,
        None => match &state.hypothesis {
            Some(h) => resolve_final(None, None, &h.answer_option),
            None => {
                return Err(OrchestrationError::NoHypothesis { iterations: history.len(), last_error });
            }
        },
    };
    let trace = RunTrace {
        run_id: run_id.clone(),
        video_id: store.video_id().to_string(),
        question: query.to_string(),
        options: options.to_vec(),
        config: config.clone(),
        iterations: history,
        final_option: final_option.clone(),
        resolution_path,
        calls: state.session.ledger,
        warnings: state.session.warnings,
    };
    Ok(AnswerRecord { final_option, trace })
}

/// Re-runs the question recorded in `trace` with its config. The clients
/// must be fresh: mock fixture cursors are per run and do not rewind.
pub fn replay(trace: &RunTrace, store: &FrameStore, clients: &Clients) -> Result<AnswerRecord, OrchestrationError> {
    if store.video_id() != trace.video_id {
        return Err(OrchestrationError::InvalidInput(format!(
            "trace is for video {:?}, store is {:?}",
            trace.video_id,
            store.video_id()
        )));
    }
    answer_question(store, &trace.question, &trace.options, &trace.config, clients)
}
