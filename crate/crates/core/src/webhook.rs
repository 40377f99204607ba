//! Webhook delivery authentication and parsing.
//!
//! The accepted payload is the GitHub `pull_request` event subset: `action`,
//! `number`, `pull_request.head.sha`, `pull_request.head.ref`,
//! `pull_request.base.ref`, `repository.clone_url`, `repository.full_name`.

use std::collections::{BTreeMap, HashSet, VecDeque};

use hmac::{Hmac, Mac};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::model::{CommitId, PrAction, PrEvent, Timestamp};

pub const HEADER_EVENT_KIND: &str = "x-event-kind";
pub const HEADER_DELIVERY_ID: &str = "x-delivery-id";
pub const HEADER_SIGNATURE: &str = "x-signature-256";

const HEADER_ALIASES: [(&str, &str); 3] = [
    ("x-github-event", HEADER_EVENT_KIND),
    ("x-github-delivery", HEADER_DELIVERY_ID),
    ("x-hub-signature-256", HEADER_SIGNATURE),
];

pub const DEDUP_WINDOW: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WebhookError {
    #[error("signature header missing")]
    MissingSignature,
    #[error("signature mismatch")]
    BadSignature,
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

/// One raw webhook delivery. Header names are stored lowercase.
#[derive(Clone, Debug, Default)]
pub struct Delivery {
    pub raw_body: Vec<u8>,
    headers: BTreeMap<String, String>,
}

impl Delivery {
    pub fn new(raw_body: impl Into<Vec<u8>>) -> Self {
        Self { raw_body: raw_body.into(), headers: BTreeMap::new() }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.insert_header(name, value);
        self
    }

    pub fn insert_header(&mut self, name: &str, value: impl Into<String>) {
        let lower = name.to_ascii_lowercase();
        let key = HEADER_ALIASES
            .iter()
            .find(|(alias, _)| *alias == lower)
            .map(|(_, canonical)| canonical.to_string())
            .unwrap_or(lower);
        self.headers.insert(key, value.into());
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(String::as_str)
    }

    pub fn event_kind(&self) -> Option<&str> {
        self.header(HEADER_EVENT_KIND)
    }

    pub fn delivery_id(&self) -> Option<&str> {
        self.header(HEADER_DELIVERY_ID)
    }
}

/// Computes the `sha256=<hex>` signature of `body` under `secret`.
pub fn sign(secret: &[u8], body: &[u8]) -> String {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(body);
    format!("sha256={}", hex::encode(mac.finalize().into_bytes()))
}

/// Checks the delivery's `X-Signature-256` header against HMAC-SHA256 of the
/// body. Comparison is constant-time. An empty `secret` disables the check.
pub fn verify_signature(delivery: &Delivery, secret: &[u8]) -> Result<bool, WebhookError> {
    if secret.is_empty() {
        return Ok(true);
    }
    let header = delivery.header(HEADER_SIGNATURE).ok_or(WebhookError::MissingSignature)?;
    let Some(hex_sig) = header.strip_prefix("sha256=") else {
        return Ok(false);
    };
    let Ok(expected) = hex::decode(hex_sig) else {
        return Ok(false);
    };
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(&delivery.raw_body);
    Ok(mac.verify_slice(&expected).is_ok())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Parsed {
    Event(PrEvent),
    Ignored(String),
}

fn field<'a>(root: &'a Value, path: &str) -> Result<&'a Value, WebhookError> {
    path.split('.')
        .try_fold(root, |v, key| v.get(key))
        .filter(|v| !v.is_null())
        .ok_or_else(|| WebhookError::MalformedPayload(format!("missing field {path}")))
}

fn str_field(root: &Value, path: &str) -> Result<String, WebhookError> {
    field(root, path)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| WebhookError::MalformedPayload(format!("field {path} must be a string")))
}

/// Turns a delivery into a [`PrEvent`]; anything that is not a handled
/// pull-request action is [`Parsed::Ignored`].
pub fn parse_event(delivery: &Delivery, received_at: Timestamp) -> Result<Parsed, WebhookError> {
    if let Some(kind) = delivery.event_kind() {
        if kind != "pull_request" {
            return Ok(Parsed::Ignored(format!("event kind {kind}")));
        }
    }
    let root: Value = serde_json::from_slice(&delivery.raw_body)
        .map_err(|e| WebhookError::MalformedPayload(format!("invalid JSON: {e}")))?;
    if !root.is_object() {
        return Err(WebhookError::MalformedPayload("payload must be an object".into()));
    }
    if delivery.event_kind().is_none() && root.get("pull_request").is_none() {
        return Ok(Parsed::Ignored("not a pull_request payload".into()));
    }
    let action = str_field(&root, "action")?;
    let action = match action.as_str() {
        "opened" => PrAction::Opened,
        "synchronize" => PrAction::Synchronized,
        "closed" => PrAction::Closed,
        other => return Ok(Parsed::Ignored(format!("action {other}"))),
    };
    let pr_number = field(&root, "number")?
        .as_u64()
        .filter(|n| *n >= 1)
        .ok_or_else(|| WebhookError::MalformedPayload("field number must be a positive integer".into()))?;
    let sha = str_field(&root, "pull_request.head.sha")?;
    let head_commit = CommitId::parse(&sha).map_err(|e| WebhookError::MalformedPayload(e.to_string()))?;
    let event = PrEvent {
        repo_id: str_field(&root, "repository.full_name")?,
        pr_number,
        action,
        head_commit,
        source_branch: str_field(&root, "pull_request.head.ref")?,
        target_branch: str_field(&root, "pull_request.base.ref")?,
        clone_url: str_field(&root, "repository.clone_url")?,
        delivery_id: delivery.delivery_id().unwrap_or_default().to_owned(),
        received_at,
    };
    Ok(Parsed::Event(event))
}

/// Remembers the last [`DEDUP_WINDOW`] delivery ids.
#[derive(Debug)]
pub struct DeliveryDedup {
    order: VecDeque<String>,
    seen: HashSet<String>,
    capacity: usize,
}

impl Default for DeliveryDedup {
    fn default() -> Self {
        Self::with_capacity(DEDUP_WINDOW)
    }
}

impl DeliveryDedup {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { order: VecDeque::with_capacity(capacity), seen: HashSet::with_capacity(capacity), capacity }
    }

    pub fn contains(&self, id: &str) -> bool {
        !id.is_empty() && self.seen.contains(id)
    }

    /// Returns false when `id` was already seen inside the window.
    pub fn observe(&mut self, id: &str) -> bool {
        if id.is_empty() {
            return true;
        }
        if self.seen.contains(id) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(id.to_owned());
        self.seen.insert(id.to_owned());
        true
    }
}

/// Builds a minimal `pull_request` payload for tests and fixtures.
pub fn pull_request_payload(
    repo_id: &str,
    clone_url: &str,
    number: u64,
    action: &str,
    sha: &str,
    head_ref: &str,
    base_ref: &str,
) -> Value {
    serde_json::json!({
        "action": action,
        "number": number,
        "pull_request": {
            "number": number,
            "head": { "sha": sha, "ref": head_ref },
            "base": { "ref": base_ref }
        },
        "repository": { "full_name": repo_id, "clone_url": clone_url }
    })
}
