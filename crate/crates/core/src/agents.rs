//! Agent backends: deterministic scripted behaviors for tests and
//! experiments, adversarial wrappers, a role-profile registry, and a
//! generic chat-completion HTTP client.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{normalize_answer, Message, QueryRecord};

/// A named prompt template. Templates may reference `{query}` and
/// `{peer_messages}`; anything else between braces is rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub name: String,
    pub prompt_template: String,
}

impl RoleProfile {
    pub fn new(name: impl Into<String>, template: impl Into<String>) -> Result<Self> {
        let profile = Self {
            name: name.into(),
            prompt_template: template.into(),
        };
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<()> {
        let mut rest = self.prompt_template.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                return Err(Error::Config(format!(
                    "role '{}': unterminated placeholder",
                    self.name
                )));
            };
            let inner = &rest[open + 1..open + close];
            if inner != "query" && inner != "peer_messages" {
                return Err(Error::Config(format!(
                    "role '{}': unknown placeholder '{{{inner}}}'",
                    self.name
                )));
            }
            rest = &rest[open + close + 1..];
        }
        if rest.contains('}') {
            return Err(Error::Config(format!(
                "role '{}': stray closing brace",
                self.name
            )));
        }
        Ok(())
    }

    pub fn render(&self, query: &str, peer_messages: &str) -> String {
        self.prompt_template
            .replace("{query}", query)
            .replace("{peer_messages}", peer_messages)
    }
}

/// The bundled role templates, loaded from `data/roles/`.
pub fn builtin_roles() -> BTreeMap<String, RoleProfile> {
    let raw: &[(&str, &str)] = &[
        ("knowledge-expert", include_str!("../data/roles/knowledge_expert.txt")),
        ("critic", include_str!("../data/roles/critic.txt")),
        ("math-solver", include_str!("../data/roles/math_solver.txt")),
        ("programming-expert", include_str!("../data/roles/programming_expert.txt")),
        ("liar", include_str!("../data/roles/liar.txt")),
        ("gibberish", include_str!("../data/roles/gibberish.txt")),
    ];
    raw.iter()
        .map(|(name, text)| {
            let profile = RoleProfile::new(*name, text.trim_end()).expect("bundled role is valid");
            (profile.name.clone(), profile)
        })
        .collect()
}

pub fn role_by_name(name: &str) -> Option<RoleProfile> {
    builtin_roles().get(name).cloned()
}

/// Deterministic test-double behaviors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case")]
pub enum ScriptedBehavior {
    /// Repeats the query text.
    Echo,
    /// Takes the strongest upstream content (or the query) and appends
    /// `|<id>`, making information flow visible in the trace.
    AppendId,
    /// Always the same reply.
    FixedAnswer { answer: String },
    /// Votes with the most frequent peer answer; ties go to the earliest
    /// sender. Falls back to the query's first line with no peers.
    MajorityOfInputs,
    /// Answers correctly with the given probability, otherwise picks a
    /// wrong choice uniformly.
    NoisyOracle { accuracy: f64 },
}

/// Scripted reply for `behavior`, deterministic given inputs and the RNG
/// state.
pub fn scripted_respond<R: Rng + ?Sized>(
    behavior: &ScriptedBehavior,
    agent_id: usize,
    query: &QueryRecord,
    temporal_msgs: &[Message],
    spatial_msgs: &[Message],
    rng: &mut R,
) -> String {
    match behavior {
        ScriptedBehavior::Echo => query.text.clone(),
        ScriptedBehavior::AppendId => {
            let base = if spatial_msgs.is_empty() {
                query.text.clone()
            } else {
                let mut parts: Vec<&str> =
                    spatial_msgs.iter().map(|m| m.content.as_str()).collect();
                parts.sort();
                parts.join("&")
            };
            format!("{base}|{agent_id}")
        }
        ScriptedBehavior::FixedAnswer { answer } => answer.clone(),
        ScriptedBehavior::MajorityOfInputs => {
            majority_of(spatial_msgs.iter().chain(temporal_msgs.iter()))
                .unwrap_or_else(|| normalize_answer(&query.text))
        }
        ScriptedBehavior::NoisyOracle { accuracy } => {
            let Some(label) = query.label.as_deref() else {
                return "?".to_string();
            };
            if rng.random::<f64>() < *accuracy {
                label.to_string()
            } else {
                wrong_choice(query, rng).unwrap_or_else(|| label.to_string())
            }
        }
    }
}

fn majority_of<'a>(msgs: impl Iterator<Item = &'a Message>) -> Option<String> {
    // answer -> (count, earliest sender id)
    let mut votes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for msg in msgs {
        let answer = msg.answer_line();
        let sender = msg.sender.unwrap_or(usize::MAX);
        let entry = votes.entry(answer).or_insert((0, sender));
        entry.0 += 1;
        entry.1 = entry.1.min(sender);
    }
    votes
        .into_iter()
        .max_by(|a, b| (a.1 .0, std::cmp::Reverse(a.1 .1)).cmp(&(b.1 .0, std::cmp::Reverse(b.1 .1))))
        .map(|(answer, _)| answer)
}

fn wrong_choice<R: Rng + ?Sized>(query: &QueryRecord, rng: &mut R) -> Option<String> {
    let label = query.label.as_deref()?;
    let wrong: Vec<&String> = query.choices.iter().filter(|c| c.as_str() != label).collect();
    if wrong.is_empty() {
        return None;
    }
    Some(wrong[rng.random_range(0..wrong.len())].clone())
}

/// Which adversarial wrapper is active on an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Role prompt replaced with the deceiver template; the agent always
    /// emits a wrong label plus a misleading rationale.
    Prompt,
    /// Backend replaced with a dummy that emits a uniformly random label
    /// plus incoherent filler, ignoring all inputs.
    Replacement,
}

/// What an agent produces: the reply text, token usage when the backend
/// reports it, and how many HTTP attempts the reply took.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub content: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub attempts: u32,
}

impl BackendReply {
    fn text(content: String) -> Self {
        Self {
            content,
            prompt_tokens: None,
            completion_tokens: None,
            attempts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum AgentBackend {
    Scripted { behavior: ScriptedBehavior },
    Http { endpoint: HttpEndpointConfig },
}

/// An agent node bound to a backend. Owns its RNG and mutable state, so
/// identical construction plus identical inputs replay identically.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub role: RoleProfile,
    pub state: BTreeMap<String, String>,
    pub backend: AgentBackend,
    attack: Option<AttackKind>,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn scripted(id: usize, role: RoleProfile, behavior: ScriptedBehavior, seed: u64) -> Self {
        Self {
            id,
            role,
            state: BTreeMap::new(),
            backend: AgentBackend::Scripted { behavior },
            attack: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn http(id: usize, role: RoleProfile, endpoint: HttpEndpointConfig, seed: u64) -> Self {
        Self {
            id,
            role,
            state: BTreeMap::new(),
            backend: AgentBackend::Http { endpoint },
            attack: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn attack(&self) -> Option<AttackKind> {
        self.attack
    }

    /// Replace the role with the deceiver profile. Idempotent: re-wrapping
    /// leaves the role untouched.
    pub fn wrap_prompt_attack(mut self) -> Self {
        if self.attack == Some(AttackKind::Prompt) {
            return self;
        }
        self.role = role_by_name("liar").expect("bundled liar role");
        self.attack = Some(AttackKind::Prompt);
        self
    }

    /// Replace the backend output with uniformly random labels plus
    /// incoherent filler.
    pub fn wrap_replacement_attack(mut self) -> Self {
        if self.attack == Some(AttackKind::Replacement) {
            return self;
        }
        self.role = role_by_name("gibberish").expect("bundled gibberish role");
        self.attack = Some(AttackKind::Replacement);
        self
    }

    /// Clear per-dialogue state (kept across rounds, reset between queries).
    pub fn reset_state(&mut self) {
        self.state.clear();
    }

    /// Produce this agent's reply given the query and its in-messages.
    pub fn respond(
        &mut self,
        query: &QueryRecord,
        temporal_msgs: &[Message],
        spatial_msgs: &[Message],
    ) -> Result<BackendReply> {
        let reply = match self.attack {
            Some(AttackKind::Prompt) => BackendReply::text(self.lying_reply(query)),
            Some(AttackKind::Replacement) => BackendReply::text(self.random_reply(query)),
            None => match &self.backend {
                AgentBackend::Scripted { behavior } => {
                    let behavior = behavior.clone();
                    BackendReply::text(scripted_respond(
                        &behavior,
                        self.id,
                        query,
                        temporal_msgs,
                        spatial_msgs,
                        &mut self.rng,
                    ))
                }
                AgentBackend::Http { endpoint } => http_chat_complete(
                    endpoint,
                    &self.role,
                    &query.text,
                    temporal_msgs,
                    spatial_msgs,
                )?,
            },
        };
        self.state
            .insert("last_answer".to_string(), normalize_answer(&reply.content));
        Ok(reply)
    }

    fn lying_reply(&mut self, query: &QueryRecord) -> String {
        let wrong = wrong_choice(query, &mut self.rng)
            .or_else(|| query.choices.first().cloned())
            .unwrap_or_else(|| "NO".to_string());
        format!("{wrong}\nEvery other option fails on closer inspection; this one is certain.")
    }

    fn random_reply(&mut self, query: &QueryRecord) -> String {
        let fallback = ["A", "B", "C", "D"];
        let pick = if query.choices.is_empty() {
            fallback[self.rng.random_range(0..fallback.len())].to_string()
        } else {
            query.choices[self.rng.random_range(0..query.choices.len())].clone()
        };
        format!("{pick}\nridge lantern foams over the eastward spoon of arithmetic")
    }
}

/// Chat-completion endpoint settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Header name carrying the secret, e.g. `Authorization`.
    #[serde(default)]
    pub auth_header: Option<String>,
    /// Header value, e.g. `Bearer <token>`. Usually injected from the
    /// environment by the harness rather than stored in config files.
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

/// Serialize peer messages in the fixed prompt order: temporal first, then
/// spatial, each block sorted by sender id.
fn serialize_peers(temporal: &[Message], spatial: &[Message]) -> String {
    let mut out = String::new();
    let mut block = |title: &str, msgs: &[Message]| {
        if msgs.is_empty() {
            return;
        }
        let mut sorted: Vec<&Message> = msgs.iter().collect();
        sorted.sort_by_key(|m| m.sender);
        out.push_str(title);
        out.push('\n');
        for m in sorted {
            let sender = m.sender.map_or("?".to_string(), |s| s.to_string());
            out.push_str(&format!("[agent {sender}] {}\n", m.content));
        }
    };
    block("Messages from the previous round:", temporal);
    block("Messages from this round:", spatial);
    out
}

/// POST a chat-completion request, retrying transient failures with
/// exponential backoff, and parse the first reply choice. Token usage is
/// taken from the reply metadata when present.
pub fn http_chat_complete(
    cfg: &HttpEndpointConfig,
    role: &RoleProfile,
    query: &str,
    temporal_msgs: &[Message],
    spatial_msgs: &[Message],
) -> Result<BackendReply> {
    let peers = serialize_peers(temporal_msgs, spatial_msgs);
    let system = role.render(query, &peers);
    let user = if peers.is_empty() {
        query.to_string()
    } else {
        format!("{query}\n\n{peers}")
    };
    let body = ChatRequest {
        model: &cfg.model,
        messages: vec![
            ChatMessage { role: "system", content: system },
            ChatMessage { role: "user", content: user },
        ],
        temperature: cfg.temperature,
    };

    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build()
        .map_err(|e| Error::BackendUnavailable(e.to_string()))?;

    let attempts = cfg.max_attempts.max(1);
    let mut last_error = String::new();
    let mut timed_out = false;
    for attempt in 0..attempts {
        if attempt > 0 {
            // Exponential backoff; delays never decrease.
            let delay = cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
            std::thread::sleep(Duration::from_millis(delay));
        }
        let mut request = client.post(&cfg.url).json(&body);
        if let (Some(name), Some(value)) = (&cfg.auth_header, &cfg.auth_token) {
            request = request.header(name.as_str(), value.as_str());
        }
        match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.as_u16() == 401 || status.as_u16() == 403 {
                    return Err(Error::AuthFailure(format!("status {status}")));
                }
                if status.is_server_error() || status.as_u16() == 429 {
                    last_error = format!("status {status}");
                    timed_out = false;
                    continue;
                }
                if !status.is_success() {
                    return Err(Error::MalformedBackendReply(format!("status {status}")));
                }
                let value: serde_json::Value = response
                    .json()
                    .map_err(|e| Error::MalformedBackendReply(e.to_string()))?;
                let mut reply = parse_chat_reply(&value)?;
                reply.attempts = attempt + 1;
                return Ok(reply);
            }
            Err(e) => {
                timed_out = e.is_timeout();
                last_error = e.to_string();
            }
        }
    }
    if timed_out {
        Err(Error::BackendTimeout(last_error))
    } else {
        Err(Error::BackendUnavailable(format!(
            "{attempts} attempts exhausted: {last_error}"
        )))
    }
}

fn parse_chat_reply(value: &serde_json::Value) -> Result<BackendReply> {
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| {
            Error::MalformedBackendReply("missing choices[0].message.content".to_string())
        })?;
    Ok(BackendReply {
        content: content.to_string(),
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(|v| v.as_u64()),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64()),
        attempts: 1,
    })
}
