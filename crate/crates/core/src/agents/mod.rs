//! The six agents of the pipeline: storyline, hypothesis, text decision,
//! vision decision, meta decision and suggestion.
//!
//! Each agent renders a prompt, asks the chat backend, and parses the reply
//! against a strict JSON schema. A reply that fails the schema triggers one
//! re-ask; a second failure is an [`AgentError`] (the suggestion agent falls
//! back to even-spaced sampling instead). Every model call lands in the
//! session ledger.

pub mod parse;
pub mod prompts;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dpp::GateResult;
use crate::frame_store::{even_spaced, FrameIndexSet, FrameStore};
use crate::model_client::{AgentTag, ChatModel, ChatRequest, ClientError, Message};

pub use prompts::{PromptSet, PromptTemplate};

/// Attempts per agent call: the first ask plus one re-ask.
pub const MAX_ASKS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub id: String,
    pub text: String,
}

impl AnswerOption {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Storyline {
    pub narrative: String,
    pub source_frames: FrameIndexSet,
    pub iteration: usize,
}

impl Storyline {
    /// Placeholder narrative assembled from raw captions, used when the
    /// storyline agent is ablated.
    pub fn from_captions(store: &FrameStore, frames: &FrameIndexSet, prior: Option<&Storyline>) -> Self {
        let mut source = prior.map(|p| p.source_frames.clone()).unwrap_or_default();
        source.extend(frames);
        Self {
            narrative: format_captions(store, &source),
            source_frames: source,
            iteration: prior.map_or(1, |p| p.iteration + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub answer_option: String,
    pub evidence_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub option: String,
    pub evidence: String,
    pub frame_weights: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaVerdict {
    pub final_option: String,
    pub justification: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    GateFailed,
    DecisionsDisagree,
    AgentError,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionResult {
    pub proposed_frames: FrameIndexSet,
    pub rationale: String,
    /// True when the agent's proposal was unusable and even-spaced sampling
    /// over the unexplored frames was used instead.
    pub fallback: bool,
}

/// One pass through the loop, as recorded in the run history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub frames_used: FrameIndexSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<SuggestionResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storyline: Option<Storyline>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Hypothesis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_frames: Option<FrameIndexSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisions: Option<(Decision, Decision)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaVerdict>,
    pub failure_reason: FailureReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IterationRecord {
    pub fn new(iteration: usize, frames_used: FrameIndexSet) -> Self {
        Self {
            iteration,
            frames_used,
            suggestion: None,
            storyline: None,
            hypothesis: None,
            gate: None,
            decision_frames: None,
            decisions: None,
            meta: None,
            failure_reason: FailureReason::None,
            error: None,
        }
    }

    /// Frames this iteration consumed for storyline building or decisions.
    pub fn touched_frames(&self) -> FrameIndexSet {
        let mut all = self.frames_used.clone();
        if let Some(y) = &self.decision_frames {
            all.extend(y);
        }
        all
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentModels {
    pub storyline: String,
    pub hypothesis: String,
    pub text_decision: String,
    pub vision_decision: String,
    pub meta: String,
    pub suggestion: String,
}

impl Default for AgentModels {
    fn default() -> Self {
        let m = "default".to_string();
        Self {
            storyline: m.clone(),
            hypothesis: m.clone(),
            text_decision: m.clone(),
            vision_decision: m.clone(),
            meta: m.clone(),
            suggestion: m,
        }
    }
}

impl AgentModels {
    pub fn all(name: &str) -> Self {
        Self {
            storyline: name.into(),
            hypothesis: name.into(),
            text_decision: name.into(),
            vision_decision: name.into(),
            meta: name.into(),
            suggestion: name.into(),
        }
    }

    pub fn for_agent(&self, agent: AgentTag) -> &str {
        match agent {
            AgentTag::Storyline => &self.storyline,
            AgentTag::Hypothesis => &self.hypothesis,
            AgentTag::TextDecision => &self.text_decision,
            AgentTag::VisionDecision => &self.vision_decision,
            AgentTag::Meta => &self.meta,
            AgentTag::Suggestion => &self.suggestion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    ParseError,
    ClientError,
}

/// Ledger line for one model call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub iteration: usize,
    pub agent: AgentTag,
    pub attempt: u32,
    pub outcome: CallOutcome,
    pub latency_ms: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{agent} agent: unusable reply after {} attempts: {reason}", raw.len())]
    Parse {
        agent: AgentTag,
        reason: String,
        /// Every raw completion received, in order.
        raw: Vec<String>,
    },
    #[error("{agent} agent: {source}")]
    Client {
        agent: AgentTag,
        #[source]
        source: ClientError,
    },
    #[error("{agent} agent: invalid input: {reason}")]
    InvalidInput { agent: AgentTag, reason: String },
}

impl AgentError {
    pub fn agent(&self) -> AgentTag {
        match self {
            AgentError::Parse { agent, .. }
            | AgentError::Client { agent, .. }
            | AgentError::InvalidInput { agent, .. } => *agent,
        }
    }
}

/// Generation settings shared by all agent calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Generation {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024 }
    }
}

/// Per-run view of the chat backend: stamps requests with the run id and
/// collects the call ledger and parse warnings.
pub struct AgentSession<'a> {
    chat: &'a dyn ChatModel,
    run_id: &'a str,
    prompts: &'a PromptSet,
    models: &'a AgentModels,
    generation: &'a Generation,
    iteration: usize,
    pub ledger: Vec<CallRecord>,
    pub warnings: Vec<String>,
}

impl<'a> AgentSession<'a> {
    pub fn new(
        chat: &'a dyn ChatModel,
        run_id: &'a str,
        prompts: &'a PromptSet,
        models: &'a AgentModels,
        generation: &'a Generation,
    ) -> Self {
        Self {
            chat,
            run_id,
            prompts,
            models,
            generation,
            iteration: 0,
            ledger: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    /// Same backend and settings, empty ledger.
    pub fn fork(&self) -> AgentSession<'a> {
        AgentSession { ledger: Vec::new(), warnings: Vec::new(), ..*self }
    }

    pub fn absorb(&mut self, other: AgentSession<'_>) {
        self.ledger.extend(other.ledger);
        self.warnings.extend(other.warnings);
    }

    pub fn prompts(&self) -> &PromptSet {
        self.prompts
    }

    fn ask<T>(
        &mut self,
        agent: AgentTag,
        prompt: Message,
        option_ids: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, AgentError> {
        let mut raws = Vec::new();
        let mut reason = String::new();
        for attempt in 1..=MAX_ASKS {
            let mut messages = vec![Message::system(self.prompts.system.text()), prompt.clone()];
            if attempt > 1 {
                let vars = BTreeMap::from([
                    ("error", reason.clone()),
                    ("option_ids", option_ids.to_string()),
                ]);
                messages.push(Message::user(self.prompts.reask.render(&vars)));
            }
            let req = ChatRequest {
                run_id: self.run_id.to_string(),
                agent,
                model: self.models.for_agent(agent).to_string(),
                messages,
                temperature: self.generation.temperature,
                max_tokens: self.generation.max_tokens,
            };
            let resp = match self.chat.chat_complete(&req) {
                Ok(r) => r,
                Err(source) => {
                    self.ledger.push(CallRecord {
                        iteration: self.iteration,
                        agent,
                        attempt,
                        outcome: CallOutcome::ClientError,
                        latency_ms: 0,
                        prompt_tokens: 0,
                        completion_tokens: 0,
                        detail: Some(source.to_string()),
                    });
                    return Err(AgentError::Client { agent, source });
                }
            };
            let parsed = parse(&resp.text);
            self.ledger.push(CallRecord {
                iteration: self.iteration,
                agent,
                attempt,
                outcome: if parsed.is_ok() { CallOutcome::Ok } else { CallOutcome::ParseError },
                latency_ms: resp.latency_ms,
                prompt_tokens: resp.usage.prompt_tokens,
                completion_tokens: resp.usage.completion_tokens,
                detail: parsed.as_ref().err().cloned(),
            });
            raws.push(resp.text);
            match parsed {
                Ok(v) => return Ok(v),
                Err(e) => reason = e,
            }
        }
        Err(AgentError::Parse { agent, reason, raw: raws })
    }
}

pub fn format_options(options: &[AnswerOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}. {}", o.id, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn option_ids(options: &[AnswerOption]) -> String {
    options.iter().map(|o| o.id.as_str()).collect::<Vec<_>>().join(", ")
}

/// `[index] 12.0s: caption` lines in ascending index order.
pub fn format_captions(store: &FrameStore, frames: &FrameIndexSet) -> String {
    frames
        .iter()
        .filter_map(|i| store.frame(i))
        .map(|f| format!("[{}] {:.1}s: {}", f.index, f.timestamp_s, f.caption))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_frame_times(store: &FrameStore, frames: &FrameIndexSet) -> String {
    frames
        .iter()
        .filter_map(|i| store.frame(i))
        .map(|f| format!("[{}] {:.1}s", f.index, f.timestamp_s))
        .collect::<Vec<_>>()
        .join("\n")
}

fn image_refs(store: &FrameStore, frames: &FrameIndexSet) -> Vec<String> {
    frames
        .iter()
        .filter_map(|i| store.frame(i).and_then(|f| f.image_ref.clone()))
        .collect()
}

fn match_option(raw: &str, options: &[AnswerOption]) -> Result<String, String> {
    let want = parse::normalize_option(raw);
    options
        .iter()
        .find(|o| o.id == want)
        .or_else(|| options.iter().find(|o| o.id.eq_ignore_ascii_case(&want)))
        .map(|o| o.id.clone())
        .ok_or_else(|| format!("{raw:?} is not one of the options {}", option_ids(options)))
}

fn base_vars(query: &str, options: &[AnswerOption]) -> BTreeMap<&'static str, String> {
    BTreeMap::from([("query", query.to_string()), ("options", format_options(options))])
}

fn check_frames(agent: AgentTag, store: &FrameStore, frames: &FrameIndexSet) -> Result<(), AgentError> {
    if frames.is_empty() {
        return Err(AgentError::InvalidInput { agent, reason: "no frames".into() });
    }
    if let Some(bad) = frames.iter().find(|i| store.frame(*i).is_none()) {
        return Err(AgentError::InvalidInput { agent, reason: format!("unknown frame {bad}") });
    }
    Ok(())
}

pub fn parse_storyline(raw: &str) -> Result<String, String> {
    let obj = parse::extract_object(raw)?;
    Ok(parse::required_nonempty_str(&obj, "narrative")?.to_string())
}

/// Initial storyline when `prior` is `None`, refinement otherwise.
pub fn run_storyline(
    session: &mut AgentSession<'_>,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
    prior: Option<&Storyline>,
) -> Result<Storyline, AgentError> {
    check_frames(AgentTag::Storyline, store, frames)?;
    let mut vars = base_vars(query, options);
    vars.insert("captions", format_captions(store, frames));
    let template = match prior {
        Some(p) => {
            vars.insert("storyline", p.narrative.clone());
            &session.prompts.storyline_refine
        }
        None => &session.prompts.storyline,
    };
    let prompt = Message::user(template.render(&vars));
    let narrative = session.ask(AgentTag::Storyline, prompt, &option_ids(options), parse_storyline)?;
    let mut source_frames = prior.map(|p| p.source_frames.clone()).unwrap_or_default();
    source_frames.extend(frames);
    Ok(Storyline {
        narrative,
        source_frames,
        iteration: prior.map_or(1, |p| p.iteration + 1),
    })
}

pub fn parse_hypothesis(raw: &str, options: &[AnswerOption]) -> Result<Hypothesis, String> {
    let obj = parse::extract_object(raw)?;
    let answer = parse::required_str(&obj, "answer")?;
    let evidence = parse::required_nonempty_str(&obj, "evidence")?;
    Ok(Hypothesis {
        answer_option: match_option(answer, options)?,
        evidence_text: evidence.to_string(),
    })
}

pub fn run_hypothesis(
    session: &mut AgentSession<'_>,
    storyline: &Storyline,
    query: &str,
    options: &[AnswerOption],
    store: &FrameStore,
    frames: &FrameIndexSet,
) -> Result<Hypothesis, AgentError> {
    check_frames(AgentTag::Hypothesis, store, frames)?;
    let mut vars = base_vars(query, options);
    vars.insert("storyline", storyline.narrative.clone());
    vars.insert("captions", format_captions(store, frames));
    let prompt = Message::user(session.prompts.hypothesis.render(&vars));
    session.ask(AgentTag::Hypothesis, prompt, &option_ids(options), |raw| {
        parse_hypothesis(raw, options)
    })
}

/// Parses a decision reply. Weights are clamped to `[0, 1]`; weights for
/// frames outside `shown` are dropped and reported in the warning list.
pub fn parse_decision(
    raw: &str,
    shown: &FrameIndexSet,
    options: &[AnswerOption],
) -> Result<(Decision, Vec<String>), String> {
    let obj = parse::extract_object(raw)?;
    let option = match_option(parse::required_str(&obj, "option")?, options)?;
    let evidence = parse::required_str(&obj, "evidence")?.to_string();
    let weights = match obj.get("frame_weights") {
        Some(Value::Object(m)) => m,
        Some(other) => return Err(format!("field \"frame_weights\" must be an object, got {}", parse::kind(other))),
        None => return Err("missing field \"frame_weights\"".into()),
    };
    let mut frame_weights = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, value) in weights {
        let Some(w) = value.as_f64() else {
            return Err(format!("weight for frame {key:?} must be a number, got {}", parse::kind(value)));
        };
        match key.trim().parse::<usize>() {
            Ok(idx) if shown.contains(idx) => {
                if !(0.0..=1.0).contains(&w) {
                    warnings.push(format!("weight {w} for frame {idx} clamped"));
                }
                frame_weights.insert(idx, w.clamp(0.0, 1.0));
            }
            _ => warnings.push(format!("dropped weight for frame {key:?} not among shown frames")),
        }
    }
    Ok((Decision { option, evidence, frame_weights }, warnings))
}

fn ask_decision(
    session: &mut AgentSession<'_>,
    agent: AgentTag,
    prompt: Message,
    shown: &FrameIndexSet,
    options: &[AnswerOption],
) -> Result<Decision, AgentError> {
    let (decision, warnings) = session.ask(agent, prompt, &option_ids(options), |raw| {
        parse_decision(raw, shown, options)
    })?;
    session
        .warnings
        .extend(warnings.into_iter().map(|w| format!("{agent}: {w}")));
    Ok(decision)
}

/// Renders the text-decision prompt. It takes no hypothesis by construction.
pub fn text_decision_prompt(
    prompts: &PromptSet,
    storyline: &Storyline,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
) -> Message {
    let mut vars = base_vars(query, options);
    vars.insert("storyline", storyline.narrative.clone());
    vars.insert("captions", format_captions(store, frames));
    Message::user(prompts.text_decision.render(&vars))
}

pub fn vision_decision_prompt(
    prompts: &PromptSet,
    storyline: &Storyline,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
) -> Message {
    let mut vars = base_vars(query, options);
    vars.insert("storyline", storyline.narrative.clone());
    vars.insert("frames", format_frame_times(store, frames));
    Message::user(prompts.vision_decision.render(&vars)).with_images(image_refs(store, frames))
}

pub fn run_text_decision(
    session: &mut AgentSession<'_>,
    storyline: &Storyline,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
) -> Result<Decision, AgentError> {
    check_frames(AgentTag::TextDecision, store, frames)?;
    let prompt = text_decision_prompt(session.prompts, storyline, store, frames, query, options);
    ask_decision(session, AgentTag::TextDecision, prompt, frames, options)
}

pub fn run_vision_decision(
    session: &mut AgentSession<'_>,
    storyline: &Storyline,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
) -> Result<Decision, AgentError> {
    check_frames(AgentTag::VisionDecision, store, frames)?;
    let prompt = vision_decision_prompt(session.prompts, storyline, store, frames, query, options);
    if prompt.image_refs.is_empty() {
        session
            .warnings
            .push("vision_decision: no image_ref on the selected frames".into());
    }
    ask_decision(session, AgentTag::VisionDecision, prompt, frames, options)
}

fn format_decision(d: &Decision) -> String {
    let weights = d
        .frame_weights
        .iter()
        .map(|(i, w)| format!("{i}: {w:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("option: {}\nevidence: {}\nframe importance: {{{weights}}}", d.option, d.evidence)
}

pub fn parse_meta(raw: &str, options: &[AnswerOption]) -> Result<MetaVerdict, String> {
    let obj = parse::extract_object(raw)?;
    let final_option = match_option(parse::required_str(&obj, "final_option")?, options)?;
    let justification = parse::required_str(&obj, "justification")?.to_string();
    Ok(MetaVerdict { final_option, justification })
}

#[allow(clippy::too_many_arguments)]
pub fn run_meta_decision(
    session: &mut AgentSession<'_>,
    text: &Decision,
    vision: &Decision,
    storyline: &Storyline,
    store: &FrameStore,
    frames: &FrameIndexSet,
    query: &str,
    options: &[AnswerOption],
) -> Result<MetaVerdict, AgentError> {
    let mut vars = base_vars(query, options);
    let agreement = if text.option == vision.option {
        format!("Both chose option {}.", text.option)
    } else {
        format!(
            "They disagree: the text agent chose {} and the vision agent chose {}.",
            text.option, vision.option
        )
    };
    vars.insert("agreement", agreement);
    vars.insert("storyline", storyline.narrative.clone());
    vars.insert("text_decision", format_decision(text));
    vars.insert("vision_decision", format_decision(vision));
    vars.insert("frames", format_frame_times(store, frames));
    let prompt = Message::user(session.prompts.meta.render(&vars)).with_images(image_refs(store, frames));
    session.ask(AgentTag::Meta, prompt, &option_ids(options), |raw| parse_meta(raw, options))
}

fn format_history(history: &[IterationRecord]) -> String {
    history
        .iter()
        .map(|r| {
            let outcome = match r.failure_reason {
                FailureReason::GateFailed => match &r.gate {
                    Some(g) => format!("query and evidence frame selections did not agree (ratio {:.3})", g.ratio),
                    None => "selections did not agree".to_string(),
                },
                FailureReason::DecisionsDisagree => match &r.decisions {
                    Some((t, v)) => format!("text agent chose {}, vision agent chose {}", t.option, v.option),
                    None => "decision agents disagreed".to_string(),
                },
                FailureReason::AgentError => {
                    format!("an agent failed: {}", r.error.as_deref().unwrap_or("unknown error"))
                }
                FailureReason::None => "no failure".to_string(),
            };
            let hyp = r
                .hypothesis
                .as_ref()
                .map(|h| format!("; hypothesis {} ({})", h.answer_option, h.evidence_text))
                .unwrap_or_default();
            format!("iteration {}: sampled frames {}; {outcome}{hyp}", r.iteration, r.frames_used)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct SuggestionRequest<'r> {
    pub history: &'r [IterationRecord],
    pub query: &'r str,
    pub options: &'r [AnswerOption],
    pub storyline: Option<&'r Storyline>,
    /// Cap on proposed frames kept after sanitization.
    pub limit: usize,
    /// Size of the even-spaced fallback sample.
    pub fallback_size: usize,
    /// Shifts the fallback sample within its stride.
    pub seed: u64,
}

fn parse_suggestion_frames(raw: &str) -> Result<(Vec<i64>, String, Vec<String>), String> {
    let obj = parse::extract_object(raw)?;
    let frames = match obj.get("frames") {
        Some(Value::Array(items)) => items,
        Some(other) => return Err(format!("field \"frames\" must be an array, got {}", parse::kind(other))),
        None => return Err("missing field \"frames\"".into()),
    };
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(format!("field \"rationale\" must be a string, got {}", parse::kind(other))),
        None => String::new(),
    };
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for item in frames {
        match item.as_i64() {
            Some(i) => out.push(i),
            None => warnings.push(format!("dropped non-integer frame {item}")),
        }
    }
    Ok((out, rationale, warnings))
}

/// Proposes unexplored frames for the next iteration. Never fails: an
/// unusable reply or an empty sanitized proposal falls back to an even-spaced
/// sample over frames no earlier iteration touched.
pub fn run_suggestion(
    session: &mut AgentSession<'_>,
    store: &FrameStore,
    req: &SuggestionRequest<'_>,
) -> SuggestionResult {
    let mut used = FrameIndexSet::new();
    for r in req.history {
        used.extend(&r.touched_frames());
    }
    let mut vars = base_vars(req.query, req.options);
    vars.insert(
        "storyline",
        req.storyline.map(|s| s.narrative.clone()).unwrap_or_else(|| "(none yet)".into()),
    );
    vars.insert("history", format_history(req.history));
    vars.insert("used_frames", format_frame_times(store, &used));
    vars.insert("frame_count", store.len().to_string());
    vars.insert("first_frame", store.frames()[0].index.to_string());
    vars.insert("last_frame", store.frames()[store.len() - 1].index.to_string());
    let prompt = Message::user(session.prompts.suggestion.render(&vars));

    let reply = session.ask(AgentTag::Suggestion, prompt, &option_ids(req.options), parse_suggestion_frames);
    let mut proposed = FrameIndexSet::new();
    let mut rationale = String::new();
    match reply {
        Ok((frames, why, warnings)) => {
            session.warnings.extend(warnings.into_iter().map(|w| format!("suggestion: {w}")));
            rationale = why;
            for f in frames {
                if proposed.len() >= req.limit {
                    break;
                }
                let Ok(idx) = usize::try_from(f) else {
                    session.warnings.push(format!("suggestion: dropped negative frame {f}"));
                    continue;
                };
                if store.frame(idx).is_none() {
                    session.warnings.push(format!("suggestion: dropped out-of-range frame {idx}"));
                } else if used.contains(idx) {
                    session.warnings.push(format!("suggestion: dropped already used frame {idx}"));
                } else {
                    proposed.insert(idx);
                }
            }
        }
        Err(e) => session.warnings.push(format!("suggestion: {e}; using fallback")),
    }
    if !proposed.is_empty() {
        return SuggestionResult { proposed_frames: proposed, rationale, fallback: false };
    }
    let unexplored: Vec<usize> = store.universe().difference(&used).to_vec();
    let pool = if unexplored.is_empty() {
        session
            .warnings
            .push("suggestion: every frame already used; resampling the whole video".into());
        store.universe().to_vec()
    } else {
        unexplored
    };
    SuggestionResult {
        proposed_frames: even_spaced(&pool, req.fallback_size.max(1), req.seed),
        rationale: if rationale.is_empty() { "even-spaced fallback over unexplored frames".into() } else { rationale },
        fallback: true,
    }
}
