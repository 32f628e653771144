//! HTTP adapters for the external contracts: detector, chat-completion
//! backend, scorer, translator and embedder.
//!
//! All adapters are blocking and share one request shape: JSON (or raw PNG
//! for the detector) in, JSON out. The bearer token for the chat backend is
//! read from `GLOTRAN_API_TOKEN` and never from a config file.

use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::glod::{ContractError, Embedder, Recognizer, Translator};
use crate::imaging::Image;
use crate::metrics::{ExternalScorer, ScorerError};
use crate::orchestrator::{BackendError, BackendReply, BackendRequest, TranslationBackend};
use crate::prompt::{Language, MessageItem, ViewKind};
use crate::regions::{BoundingBox, Detector, DetectorError};

pub const TOKEN_ENV: &str = "GLOTRAN_API_TOKEN";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

/// Transport-level failure, classified.
#[derive(Debug)]
enum Failure {
    Timeout(String),
    Transport(String),
    Status(u16, String),
    Malformed(String),
}

impl From<ureq::Error> for Failure {
    fn from(e: ureq::Error) -> Self {
        match e {
            ureq::Error::Status(code, resp) => Failure::Status(code, resp.into_string().unwrap_or_default()),
            ureq::Error::Transport(t) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("WouldBlock") {
                    Failure::Timeout(msg)
                } else {
                    Failure::Transport(msg)
                }
            }
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Timeout(m) => write!(f, "timed out: {m}"),
            Failure::Transport(m) => write!(f, "transport: {m}"),
            Failure::Status(c, b) => write!(f, "status {c}: {b}"),
            Failure::Malformed(m) => write!(f, "malformed response: {m}"),
        }
    }
}

fn post_json<T: for<'de> Deserialize<'de>>(agent: &ureq::Agent, url: &str, body: &Value) -> Result<T, Failure> {
    let resp = agent.post(url).send_json(body)?;
    let text = resp.into_string().map_err(|e| Failure::Transport(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Failure::Malformed(format!("{e}: {text}")))
}

fn contract(e: Failure) -> ContractError {
    ContractError::Unavailable(e.to_string())
}

/// Posts the PNG-encoded image and reads a box list back. The body may be
/// a bare JSON array or an object with a `boxes` field.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    pub url: String,
    pub timeout: Duration,
}

impl HttpDetector {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxList {
    Bare(Vec<BoundingBox>),
    Wrapped { boxes: Vec<BoundingBox> },
}

impl Detector for HttpDetector {
    fn name(&self) -> &str {
        "http-detector"
    }

    fn detect(&self, image: &Image) -> Result<Vec<BoundingBox>, DetectorError> {
        let png = image
            .encode_png()
            .map_err(|e| DetectorError::Request(e.to_string()))?;
        let resp = agent(self.timeout)
            .post(&self.url)
            .set("Content-Type", "image/png")
            .send_bytes(&png)
            .map_err(|e| DetectorError::Request(Failure::from(e).to_string()))?;
        let text = resp
            .into_string()
            .map_err(|e| DetectorError::Request(e.to_string()))?;
        let list: BoxList =
            serde_json::from_str(&text).map_err(|e| DetectorError::Malformed(format!("{e}: {text}")))?;
        Ok(match list {
            BoxList::Bare(b) | BoxList::Wrapped { boxes: b } => b,
        })
    }
}

/// Chat-completion style multimodal backend (`POST {base}/chat/completions`).
#[derive(Debug, Clone)]
pub struct ChatBackend {
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

impl ChatBackend {
    /// Adapter with the token taken from `GLOTRAN_API_TOKEN`, if set.
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Request body for one slice.
    pub fn request_body(&self, request: &BackendRequest<'_>) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        for item in &request.messages.items {
            match item {
                MessageItem::Identifier(view) => content.push(json!({"type": "text", "text": view.identifier()})),
                MessageItem::Image { image, .. } => {
                    let png = image.encode_png().map_err(|e| BackendError::Malformed(e.to_string()))?;
                    let data = base64::engine::general_purpose::STANDARD.encode(png);
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{data}")}
                    }));
                }
                MessageItem::Text(t) => content.push(json!({"type": "text", "text": t})),
            }
        }
        Ok(json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": request.params.max_tokens,
            "temperature": request.params.temperature,
        }))
    }
}

/// Extract `choices[0].message.content` from a chat-completion body.
pub fn completion_text(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed(format!("no choices[0].message.content in {body}")))?;
    let text = match content {
        Value::String(s) => s.clone(),
        // content-part arrays: concatenate the text parts
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(BackendError::Malformed(format!("unexpected content {other}"))),
    };
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(BackendError::Empty("empty completion".into()));
    }
    Ok(text)
}

impl TranslationBackend for ChatBackend {
    fn name(&self) -> &str {
        "chat"
    }

    fn translate(&self, request: &BackendRequest<'_>) -> Result<BackendReply, BackendError> {
        let body = self.request_body(request)?;
        let mut req = agent(self.timeout).post(&self.endpoint());
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = req.send_json(body).map_err(|e| match Failure::from(e) {
            Failure::Timeout(m) => BackendError::Timeout(m),
            Failure::Status(status, body) => BackendError::Status { status, body },
            Failure::Transport(m) => BackendError::Transport(m),
            Failure::Malformed(m) => BackendError::Malformed(m),
        })?;
        let first_byte = Instant::now();
        let text = resp
            .into_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {text}")))?;
        Ok(BackendReply {
            text: completion_text(&value)?,
            first_byte: Some(first_byte),
        })
    }
}

/// `POST {src, hyp, ref}` → `{score}`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    pub name: String,
    pub url: String,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    src: &'a [String],
    hyp: &'a [String],
    #[serde(rename = "ref")]
    reference: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ExternalScorer for HttpScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, hyps: &[String], refs: &[String], srcs: &[String]) -> Result<f64, ScorerError> {
        let body = serde_json::to_value(ScoreRequest {
            src: srcs,
            hyp: hyps,
            reference: refs,
        })
        .expect("score request serializes");
        post_json::<ScoreResponse>(&agent(self.timeout), &self.url, &body)
            .map(|r| r.score)
            .map_err(|e| ScorerError::Unsupported {
                metric: self.name.clone(),
                reason: e.to_string(),
            })
    }
}

/// `POST {text, src, tgt}` → `{text}`.
#[derive(Debug, Clone)]
pub struct HttpTranslator {
    pub name: String,
    pub url: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

impl Translator for HttpTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn translate(&self, text: &str, src: Language, tgt: Language) -> Result<String, ContractError> {
        let body = json!({"text": text, "src": src.code(), "tgt": tgt.code()});
        post_json::<TextResponse>(&agent(self.timeout), &self.url, &body)
            .map(|r| r.text)
            .map_err(contract)
    }
}

/// `POST {text}` → `{embedding}` (or `{vector}`).
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub name: String,
    pub url: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbedResponse {
    #[serde(alias = "vector")]
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ContractError> {
        post_json::<EmbedResponse>(&agent(self.timeout), &self.url, &json!({"text": text}))
            .map(|r| r.embedding)
            .map_err(contract)
    }
}

/// `POST {image, box, mode}` → `{text}`; `image` is base64 PNG of the
/// whole image.
#[derive(Debug, Clone)]
pub struct HttpRecognizer {
    pub name: String,
    pub url: String,
    /// Sent as `mode`, e.g. `local` or `context`.
    pub mode: String,
    pub timeout: Duration,
}

impl Recognizer for HttpRecognizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn recognize(&self, image: &Image, region: &BoundingBox) -> Result<String, ContractError> {
        let png = image.encode_png().map_err(|e| ContractError::Failed(e.to_string()))?;
        let body = json!({
            "image": base64::engine::general_purpose::STANDARD.encode(png),
            "box": region,
            "mode": self.mode,
        });
        post_json::<TextResponse>(&agent(self.timeout), &self.url, &body)
            .map(|r| r.text)
            .map_err(contract)
    }
}

/// Which view an image payload in a chat request belongs to, by position.
pub fn payload_views(body: &Value) -> Vec<ViewKind> {
    let mut out = Vec::new();
    let mut pending = None;
    if let Some(parts) = body.pointer("/messages/0/content").and_then(Value::as_array) {
        for p in parts {
            match p.get("type").and_then(Value::as_str) {
                Some("text") => {
                    pending = match p.get("text").and_then(Value::as_str) {
                        Some(crate::prompt::GLOBAL_IDENTIFIER) => Some(ViewKind::Global),
                        Some(crate::prompt::LOCAL_IDENTIFIER) => Some(ViewKind::Local),
                        _ => None,
                    }
                }
                Some("image_url") => {
                    if let Some(v) = pending.take() {
                        out.push(v);
                    }
                }
                _ => {}
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_text_shapes() {
        let s = json!({"choices": [{"message": {"content": " 你好 "}}]});
        assert_eq!(completion_text(&s).unwrap(), "你好");
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"text": "b"}]}}]});
        assert_eq!(completion_text(&parts).unwrap(), "ab");
        assert!(matches!(completion_text(&json!({})), Err(BackendError::Malformed(_))));
        let empty = json!({"choices": [{"message": {"content": ""}}]});
        assert!(matches!(completion_text(&empty), Err(BackendError::Empty(_))));
    }

    #[test]
    fn box_list_forms() {
        let bare: BoxList = serde_json::from_str(r#"[{"x_min":0,"y_min":0,"x_max":2,"y_max":3,"confidence":0.9}]"#).unwrap();
        let wrapped: BoxList = serde_json::from_str(r#"{"boxes":[{"x_min":0,"y_min":0,"x_max":2,"y_max":3}]}"#).unwrap();
        for l in [bare, wrapped] {
            let (BoxList::Bare(b) | BoxList::Wrapped { boxes: b }) = l;
            assert_eq!(b.len(), 1);
        }
    }
}
