//! Fixture-driven backend for tests and offline runs.
//!
//! Fixture files are JSONL. Chat lines are
//! `{"agent_tag": "...", "response_text": "...", "run_id": "..."?}` and are
//! consumed in order per agent tag. Lines without `run_id` form the default
//! script that every run replays from the start; lines with `run_id` override
//! it for that run only. Embedding lines `{"embed_text": "...",
//! "embedding": [...]}` pin the vector returned for an exact text; any other
//! text hashes to a reproducible pseudo-random unit direction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    unit_normalize, AgentTag, ChatModel, ChatRequest, ChatResponse, ClientError, TextEmbedder, Usage,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureLine {
    Chat {
        agent_tag: AgentTag,
        response_text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        run_id: Option<String>,
    },
    Embedding {
        embed_text: String,
        embedding: Vec<f64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MockFixtures {
    pub lines: Vec<FixtureLine>,
}

impl MockFixtures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, String> {
        let mut lines = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine =
                serde_json::from_str(line).map_err(|e| format!("fixture line {}: {e}", n + 1))?;
            lines.push(parsed);
        }
        Ok(Self { lines })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("fixture serializes") + "\n")
            .collect()
    }

    pub fn chat(mut self, agent: AgentTag, response: impl Into<String>) -> Self {
        self.lines.push(FixtureLine::Chat {
            agent_tag: agent,
            response_text: response.into(),
            run_id: None,
        });
        self
    }

    pub fn chat_for_run(mut self, run_id: &str, agent: AgentTag, response: impl Into<String>) -> Self {
        self.lines.push(FixtureLine::Chat {
            agent_tag: agent,
            response_text: response.into(),
            run_id: Some(run_id.to_string()),
        });
        self
    }

    pub fn pin_embedding(mut self, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        self.lines.push(FixtureLine::Embedding { embed_text: text.into(), embedding });
        self
    }
}

type ScriptKey = (Option<String>, AgentTag);

pub struct MockBackend {
    scripts: HashMap<ScriptKey, Vec<String>>,
    pinned: HashMap<String, Vec<f64>>,
    dimension: usize,
    cursors: Mutex<HashMap<(String, AgentTag), usize>>,
}

impl MockBackend {
    /// `dimension` sizes hashed embeddings; it must match the frame store.
    pub fn new(fixtures: MockFixtures, dimension: usize) -> Result<Self, ClientError> {
        let mut scripts: HashMap<ScriptKey, Vec<String>> = HashMap::new();
        let mut pinned = HashMap::new();
        for line in fixtures.lines {
            match line {
                FixtureLine::Chat { agent_tag, response_text, run_id } => {
                    scripts.entry((run_id, agent_tag)).or_default().push(response_text);
                }
                FixtureLine::Embedding { embed_text, embedding } => {
                    if embedding.len() != dimension {
                        return Err(ClientError::Embedding(format!(
                            "pinned embedding for {embed_text:?} has length {}, expected {dimension}",
                            embedding.len()
                        )));
                    }
                    pinned.insert(embed_text, unit_normalize(embedding)?);
                }
            }
        }
        Ok(Self { scripts, pinned, dimension, cursors: Mutex::new(HashMap::new()) })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn next_response(&self, run_id: &str, agent: AgentTag) -> Result<String, ClientError> {
        let run_key = (Some(run_id.to_string()), agent);
        let script = self
            .scripts
            .get(&run_key)
            .or_else(|| self.scripts.get(&(None, agent)));
        let mut cursors = self.cursors.lock().expect("mock cursor lock");
        let cursor = cursors.entry((run_id.to_string(), agent)).or_insert(0);
        let text = script.and_then(|s| s.get(*cursor)).cloned().ok_or_else(|| {
            ClientError::FixtureExhausted { run_id: run_id.to_string(), agent }
        })?;
        *cursor += 1;
        Ok(text)
    }

    /// Deterministic unit vector derived from the SHA-256 of `text`.
    pub fn hash_embedding(text: &str, dimension: usize) -> Vec<f64> {
        let digest = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        unit_normalize(raw).expect("gaussian draw is non-zero")
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ChatModel for MockBackend {
    fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate()?;
        let text = self.next_response(&req.run_id, req.agent)?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: req.messages.iter().map(|m| word_count(&m.text)).sum(),
                completion_tokens: word_count(&text),
            },
            text,
            latency_ms: 0,
            attempts: 1,
        })
    }
}

impl TextEmbedder for MockBackend {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        if text.is_empty() {
            return Err(ClientError::Embedding("empty text".into()));
        }
        Ok(self
            .pinned
            .get(text)
            .cloned()
            .unwrap_or_else(|| Self::hash_embedding(text, self.dimension)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::Message;

    fn req(run: &str, agent: AgentTag) -> ChatRequest {
        ChatRequest {
            run_id: run.into(),
            agent,
            model: "mock".into(),
            messages: vec![Message::user("tell me")],
            temperature: 0.0,
            max_tokens: 32,
        }
    }

    #[test]
    fn echoes_fixture_in_order_per_tag() {
        let fx = MockFixtures::new()
            .chat(AgentTag::Storyline, "A man enters.")
            .chat(AgentTag::Hypothesis, "h1")
            .chat(AgentTag::Storyline, "He sits.");
        let m = MockBackend::new(fx, 4).unwrap();
        assert_eq!(m.chat_complete(&req("r", AgentTag::Storyline)).unwrap().text, "A man enters.");
        assert_eq!(m.chat_complete(&req("r", AgentTag::Storyline)).unwrap().text, "He sits.");
        assert_eq!(m.chat_complete(&req("r", AgentTag::Hypothesis)).unwrap().text, "h1");
        assert!(matches!(
            m.chat_complete(&req("r", AgentTag::Storyline)).unwrap_err(),
            ClientError::FixtureExhausted { agent: AgentTag::Storyline, .. }
        ));
    }

    #[test]
    fn runs_have_independent_cursors_and_overrides() {
        let fx = MockFixtures::new()
            .chat(AgentTag::Meta, "default")
            .chat_for_run("special", AgentTag::Meta, "override");
        let m = MockBackend::new(fx, 4).unwrap();
        assert_eq!(m.chat_complete(&req("a", AgentTag::Meta)).unwrap().text, "default");
        assert_eq!(m.chat_complete(&req("b", AgentTag::Meta)).unwrap().text, "default");
        assert_eq!(m.chat_complete(&req("special", AgentTag::Meta)).unwrap().text, "override");
    }

    #[test]
    fn fixture_jsonl_round_trip() {
        let text = concat!(
            r#"{"agent_tag": "storyline", "response_text": "{\"narrative\": \"x\"}"}"#,
            "\n\n",
            r#"{"embed_text": "q", "embedding": [0, 3, 4]}"#,
            "\n"
        );
        let fx = MockFixtures::parse_jsonl(text).unwrap();
        assert_eq!(fx.lines.len(), 2);
        assert_eq!(MockFixtures::parse_jsonl(&fx.to_jsonl()).unwrap(), fx);
        let m = MockBackend::new(fx, 3).unwrap();
        assert_eq!(m.embed_text("q").unwrap(), vec![0.0, 0.6, 0.8]);
        assert!(MockFixtures::parse_jsonl("{\"agent_tag\": 1}").is_err());
    }

    #[test]
    fn embeddings_are_deterministic_and_unit() {
        let m = MockBackend::new(MockFixtures::new(), 16).unwrap();
        let a = m.embed_text("abc").unwrap();
        assert_eq!(a, m.embed_text("abc").unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(m.embed_text("").is_err());
    }

    #[test]
    fn distinct_strings_separate() {
        // 1,000-string corpus: every pair of hashed directions must differ
        let corpus: Vec<Vec<f64>> = (0..1000)
            .map(|i| MockBackend::hash_embedding(&format!("s{i}"), 32))
            .collect();
        let mut max_cos = f64::MIN;
        for i in 0..corpus.len() {
            for j in i + 1..corpus.len() {
                let c: f64 = corpus[i].iter().zip(&corpus[j]).map(|(a, b)| a * b).sum();
                max_cos = max_cos.max(c);
            }
        }
        assert!(max_cos < 1.0 - 1e-6, "max cosine {max_cos}");
    }

    #[test]
    fn pinned_dimension_checked() {
        let fx = MockFixtures::new().pin_embedding("q", vec![1.0, 0.0]);
        assert!(MockBackend::new(fx, 3).is_err());
    }
}
