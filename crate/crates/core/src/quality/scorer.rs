//! Prompt-based InsTag and Difficulty scoring through a chat-completion
//! endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{QualityError, QualityMetric, QualityScore};

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant.";

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "GRADSPECT_SCORER_TOKEN";

const INSTAG_PREFIX: &str = "You are a tagging system that provides useful tags for instruction intentions to distinguish instructions for a helpful AI assistant. Below is an instruction:\n[begin]\n";
const INSTAG_SUFFIX: &str = "\n[end]\nPlease provide coarse-grained tags, such as \"Spelling and Grammar Check\" and \"Cosplay\", to identify the main intentions of the above instruction. Your answer should be a list that includes the titles of tags and a brief explanation of each tag. You can provide several tags as you wish. Your response has to strictly follow this JSON format: [{\"tag\": str, \"explanation\": str},{\"tag\": str, \"explanation\": str},...]. Please respond in English.";

const DIFFICULTY_PREFIX: &str = "You are a difficulty estimation system that can rate the difficulty level of instruction intentions. Below is an instruction:\n[begin]\n";
const DIFFICULTY_SUFFIX: &str = "\n[end]\nThe instruction can be tagged with a difficulty level from 1 to 10, where 1 is the easiest and 10 is the hardest. Please rate the difficulty level of the instruction. Please first output a single line containing the difficulty score. Then, provide a brief explanation of why you rated the instruction with that difficulty score.";

/// User prompt for `metric` with `instruction` inserted byte for byte.
/// Only InsTag and Difficulty are prompt-based.
pub fn build_user_prompt(metric: QualityMetric, instruction: &str) -> Option<String> {
    let (prefix, suffix) = match metric {
        QualityMetric::InsTag => (INSTAG_PREFIX, INSTAG_SUFFIX),
        QualityMetric::Difficulty => (DIFFICULTY_PREFIX, DIFFICULTY_SUFFIX),
        _ => return None,
    };
    let mut s = String::with_capacity(prefix.len() + instruction.len() + suffix.len());
    s.push_str(prefix);
    s.push_str(instruction);
    s.push_str(suffix);
    Some(s)
}

/// Number of tag objects in an InsTag reply. The JSON list may be wrapped
/// in prose or a code fence; the outermost `[`..`]` span is parsed.
pub fn parse_instag(reply: &str) -> Result<f64, QualityError> {
    let start = reply.find('[');
    let end = reply.rfind(']');
    let (Some(start), Some(end)) = (start, end) else {
        return Err(QualityError::Parse("no JSON list in reply".into()));
    };
    if end < start {
        return Err(QualityError::Parse("no JSON list in reply".into()));
    }
    let items: Vec<Value> = serde_json::from_str(&reply[start..=end])
        .map_err(|e| QualityError::Parse(format!("tag list: {e}")))?;
    for (i, item) in items.iter().enumerate() {
        if !item.get("tag").is_some_and(Value::is_string) {
            return Err(QualityError::Parse(format!(
                "element {i} has no string \"tag\""
            )));
        }
    }
    Ok(items.len() as f64)
}

/// First line of a Difficulty reply as an integer in `1..=10`.
pub fn parse_difficulty(reply: &str) -> Result<f64, QualityError> {
    let first = reply.trim_start().lines().next().unwrap_or("").trim();
    let level: i64 = first
        .parse()
        .map_err(|_| QualityError::Parse(format!("first line '{first}' is not an integer")))?;
    if !(1..=10).contains(&level) {
        return Err(QualityError::Parse(format!(
            "difficulty {level} outside 1..=10"
        )));
    }
    Ok(level as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
}

/// Something that answers a chat-completion request with the assistant's
/// text.
pub trait ChatTransport: Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, QualityError>;
}

#[derive(Debug, Clone)]
pub struct ScorerConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub concurrency: usize,
    pub timeout: Duration,
}

impl ScorerConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            concurrency: 4,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Blocking HTTP transport speaking the common chat-completion JSON shape.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &ScorerConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(config.timeout))
                .build(),
        );
        Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            token: config.token.clone(),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, QualityError> {
        let body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| QualityError::Transport(e.to_string()))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| QualityError::Transport(format!("response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| QualityError::Parse("response has no choices[0].message.content".into()))
    }
}

pub struct ExternalScorer<T: ChatTransport> {
    transport: T,
    config: ScorerConfig,
}

impl<T: ChatTransport> ExternalScorer<T> {
    pub fn new(transport: T, config: ScorerConfig) -> Self {
        Self { transport, config }
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    /// Scores one instruction. Transport failures are retried with
    /// exponential backoff; malformed replies are not.
    pub fn score(&self, instruction: &str, metric: QualityMetric) -> Result<f64, QualityError> {
        if instruction.is_empty() {
            return Err(QualityError::EmptyInstruction);
        }
        let user = build_user_prompt(metric, instruction)
            .ok_or_else(|| QualityError::Parse(format!("metric {metric} is not prompt-based")))?;
        let request = ChatRequest {
            model: self.config.model.clone(),
            system: SYSTEM_PROMPT.to_string(),
            user,
        };
        let attempts = self.config.max_attempts.max(1);
        let mut delay = self.config.initial_backoff;
        let mut attempt = 1;
        let reply = loop {
            match self.transport.complete(&request) {
                Ok(reply) => break reply,
                Err(QualityError::Transport(msg)) if attempt < attempts => {
                    log::warn!("scorer attempt {attempt}/{attempts} failed: {msg}");
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        match metric {
            QualityMetric::InsTag => parse_instag(&reply),
            _ => parse_difficulty(&reply),
        }
    }
}

#[derive(Debug)]
pub struct ScoreFailure {
    pub sample_id: String,
    pub error: QualityError,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// In input order.
    pub scores: Vec<QualityScore>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores `(sample_id, instruction)` pairs with at most
/// `config.concurrency` requests in flight. Failed samples are reported,
/// never fatal.
pub fn score_batch<T: ChatTransport>(
    scorer: &ExternalScorer<T>,
    items: &[(String, String)],
    metric: QualityMetric,
) -> BatchOutcome {
    let slots: Vec<Mutex<Option<Result<f64, QualityError>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = scorer.config.concurrency.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((_, instruction)) = items.get(i) else {
                    break;
                };
                let result = scorer.score(instruction, metric);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let mut out = BatchOutcome::default();
    for ((id, _), slot) in items.iter().zip(slots) {
        match slot
            .into_inner()
            .expect("slot lock")
            .expect("every slot filled")
        {
            Ok(value) => out
                .scores
                .push(QualityScore::new(id.clone(), metric, value)),
            Err(error) => out.failures.push(ScoreFailure {
                sample_id: id.clone(),
                error,
            }),
        }
    }
    if !out.failures.is_empty() {
        log::warn!(
            "{} of {} samples could not be scored",
            out.failures.len(),
            items.len()
        );
    }
    out
}
