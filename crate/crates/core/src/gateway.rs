//! Turns verified webhook deliveries into engine submissions.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::clock::unix_nanos;
use crate::model::TaskId;
use crate::runtime::{Engine, EngineError, SubmitOutcome};
use crate::scheduler::SchedulerError;
use crate::webhook::{parse_event, verify_signature, Delivery, DeliveryDedup, Parsed, WebhookError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DispatchOutcome {
    Enqueued(TaskId),
    Superseded { killed: Vec<TaskId>, task_id: TaskId },
    Cancelled(Vec<TaskId>),
    Ignored(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unauthorized: {0}")]
    Unauthorized(WebhookError),
    #[error(transparent)]
    Malformed(WebhookError),
    #[error("wait queue is full (capacity {capacity})")]
    QueueFull { capacity: usize },
    #[error("dispatch failed: {0}")]
    Engine(EngineError),
}

impl GatewayError {
    pub fn http_status(&self) -> u16 {
        match self {
            GatewayError::Unauthorized(_) => 401,
            GatewayError::Malformed(_) => 400,
            GatewayError::QueueFull { .. } | GatewayError::Engine(EngineError::Stopped) => 503,
            GatewayError::Engine(_) => 500,
        }
    }
}

pub struct Gateway {
    engine: Arc<Engine>,
    secret: Vec<u8>,
    /// Empty accepts every repository.
    repositories: BTreeSet<String>,
    dedup: Mutex<DeliveryDedup>,
}

impl Gateway {
    pub fn new(engine: Arc<Engine>, secret: Option<&str>, repositories: impl IntoIterator<Item = String>) -> Self {
        Self {
            engine,
            secret: secret.unwrap_or_default().as_bytes().to_vec(),
            repositories: repositories.into_iter().collect(),
            dedup: Mutex::default(),
        }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// A delivery id is remembered only once its dispatch succeeded, so a
    /// redelivery after a 503 is processed.
    pub fn handle(&self, delivery: &Delivery) -> Result<DispatchOutcome, GatewayError> {
        match verify_signature(delivery, &self.secret) {
            Ok(true) => {}
            Ok(false) => return Err(GatewayError::Unauthorized(WebhookError::BadSignature)),
            Err(e) => return Err(GatewayError::Unauthorized(e)),
        }
        if delivery.raw_body.is_empty() {
            return Err(GatewayError::Malformed(WebhookError::MalformedPayload("empty body".into())));
        }
        let event = match parse_event(delivery, unix_nanos()).map_err(GatewayError::Malformed)? {
            Parsed::Ignored(why) => return Ok(DispatchOutcome::Ignored(why)),
            Parsed::Event(e) => e,
        };
        if !self.repositories.is_empty() && !self.repositories.contains(&event.repo_id) {
            return Ok(DispatchOutcome::Ignored(format!("repository {} is not configured", event.repo_id)));
        }
        let mut dedup = self.dedup.lock().unwrap();
        let id = delivery.delivery_id().unwrap_or_default();
        if dedup.contains(id) {
            return Ok(DispatchOutcome::Ignored(format!("duplicate delivery {id}")));
        }
        let outcome = match self.engine.submit(event) {
            Ok(SubmitOutcome::Queued { task_id, superseded }) if superseded.is_empty() => {
                DispatchOutcome::Enqueued(task_id)
            }
            Ok(SubmitOutcome::Queued { task_id, superseded }) => {
                DispatchOutcome::Superseded { killed: superseded, task_id }
            }
            Ok(SubmitOutcome::Cancelled(ids)) => DispatchOutcome::Cancelled(ids),
            Err(EngineError::Scheduler(SchedulerError::WaitQueueFull { capacity })) => {
                return Err(GatewayError::QueueFull { capacity })
            }
            Err(e) => return Err(GatewayError::Engine(e)),
        };
        dedup.observe(id);
        Ok(outcome)
    }
}
