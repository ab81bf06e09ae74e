use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, Transport, TransportError, TransportReply};
use crate::promptgen::estimate_tokens;

/// A scripted reply: plain text, or `{"error": kind}` where kind is one of
/// `auth`, `rate_limited`, `server`, `network`, `rejected`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Error { error: String },
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }

    pub fn error(kind: impl Into<String>) -> Self {
        MockReply::Error { error: kind.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub contains: String,
    pub response: MockReply,
}

/// Lookup order: exact request hash, call ordinal, substring rules, default.
///
/// Among rules, the one whose needle occurs furthest right in the last user
/// message wins, so prompts carrying earlier turns as history still resolve
/// to the current question.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub by_hash: BTreeMap<String, MockReply>,
    pub by_ordinal: Vec<MockReply>,
    pub rules: Vec<MockRule>,
    pub default: Option<MockReply>,
}

impl MockScript {
    pub fn default_reply(text: &str) -> Self {
        Self { default: Some(MockReply::text(text)), ..Default::default() }
    }

    pub fn ordinal<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            by_ordinal: replies.into_iter().map(|s| MockReply::text(s)).collect(),
            ..Default::default()
        }
    }

    pub fn rule(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule { contains: contains.into(), response: MockReply::text(reply) });
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn resolve(&self, request: &ChatRequest, ordinal: usize) -> Option<&MockReply> {
        if let Some(r) = self.by_hash.get(&request.cache_key()) {
            return Some(r);
        }
        if let Some(r) = self.by_ordinal.get(ordinal) {
            return Some(r);
        }
        let user = request.last_user_content();
        let mut best: Option<(usize, &MockReply)> = None;
        for rule in &self.rules {
            if let Some(pos) = user.rfind(&rule.contains) {
                if best.is_none_or(|(p, _)| pos > p) {
                    best = Some((pos, &rule.response));
                }
            }
        }
        best.map(|(_, r)| r).or(self.default.as_ref())
    }
}

type Responder = dyn Fn(&ChatRequest, usize) -> Result<String, TransportError> + Send + Sync;

/// Offline transport for tests and dry runs. Token counts use the same
/// byte-based estimate as prompt budgeting.
pub struct MockTransport {
    source: Source,
    calls: AtomicUsize,
}

enum Source {
    Script(MockScript),
    Func(Box<Responder>),
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        Self { source: Source::Script(script), calls: AtomicUsize::new(0) }
    }

    /// Replies computed from the request and its 0-based call ordinal.
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest, usize) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        Self { source: Source::Func(Box::new(f)), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn scripted_error(kind: &str) -> TransportError {
    match kind {
        "auth" => TransportError::Auth("scripted".into()),
        "rate_limited" => TransportError::RateLimited("scripted".into()),
        "server" => TransportError::Server { status: 500, message: "scripted".into() },
        "network" => TransportError::Network("scripted".into()),
        "rejected" => TransportError::Rejected("scripted".into()),
        other => TransportError::Script(format!("unknown error kind {other:?}")),
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<TransportReply, TransportError> {
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        let text = match &self.source {
            Source::Func(f) => f(request, ordinal)?,
            Source::Script(script) => match script.resolve(request, ordinal) {
                Some(MockReply::Text(t)) => t.clone(),
                Some(MockReply::Error { error }) => return Err(scripted_error(error)),
                None => return Err(TransportError::Script("no scripted reply for request".into())),
            },
        };
        let prompt_tokens = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum::<usize>();
        Ok(TransportReply {
            prompt_tokens: prompt_tokens as u64,
            completion_tokens: estimate_tokens(&text) as u64,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::user(text)])
    }

    #[test]
    fn rightmost_rule_wins() {
        let script = MockScript::default().rule("How many", "SELECT 1").rule("oldest", "SELECT 2");
        let t = MockTransport::new(script);
        assert_eq!(t.send(&req("How many students? ... oldest one?")).unwrap().text, "SELECT 2");
        assert_eq!(t.send(&req("oldest? How many")).unwrap().text, "SELECT 1");
    }

    #[test]
    fn hash_beats_ordinal_and_default() {
        let r = req("x");
        let mut script = MockScript::ordinal(["A"]);
        script.default = Some(MockReply::text("D"));
        script.by_hash.insert(r.cache_key(), MockReply::text("H"));
        let t = MockTransport::new(script);
        assert_eq!(t.send(&r).unwrap().text, "H");
        assert_eq!(t.send(&req("y")).unwrap().text, "D");
    }

    #[test]
    fn unmatched_request_is_an_error() {
        let t = MockTransport::new(MockScript::default());
        assert!(matches!(t.send(&req("x")), Err(TransportError::Script(_))));
    }

    #[test]
    fn script_json_round_trip() {
        let json = r#"{"by_ordinal": ["SELECT 1", {"error": "server"}], "rules": [{"contains": "dorm", "response": "SELECT 2"}]}"#;
        let s: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(s.by_ordinal[1], MockReply::error("server"));
        assert_eq!(s.rules[0].response, MockReply::text("SELECT 2"));
    }
}
