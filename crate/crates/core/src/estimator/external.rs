//! Client side of the evaluator wire protocol.
//!
//! Evaluators are child processes speaking line-delimited JSON over
//! stdin/stdout. Request:
//!
//! ```json
//! {"id": 3, "protocol": 1, "resolution": 224, "stages": [{"width": 16, "depth": 1}], "budget": {"macs": 390000000}}
//! ```
//!
//! Response, matched by `id`:
//!
//! ```json
//! {"id": 3, "accuracy": 0.771, "meta": {"epochs": 20}}
//! ```
//!
//! A response may carry `"error": "<message>"` instead of an accuracy. A
//! response carrying a `protocol` other than 1 is a hard error.
//!
//! Each client owns one child with at most one request in flight. Children
//! run in their own process group; dropping a client kills the whole group
//! and reaps the child.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{EvalError, EvaluationResult, Evaluator};
use crate::arch::{ArchConfig, NetworkTemplate};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireStage {
    pub width: u32,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBudget {
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub protocol: u32,
    pub resolution: u32,
    pub stages: Vec<WireStage>,
    pub budget: WireBudget,
}

impl WireRequest {
    pub fn new(id: u64, config: &ArchConfig, budget_macs: u64) -> Self {
        WireRequest {
            id,
            protocol: PROTOCOL_VERSION,
            resolution: config.resolution(),
            stages: config
                .widths()
                .iter()
                .zip(config.depths())
                .map(|(&width, &depth)| WireStage { width, depth })
                .collect(),
            budget: WireBudget { macs: budget_macs },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u64>,
}

enum Line {
    Text(String),
    Failed(std::io::Error),
}

/// One evaluator child process.
pub struct ExternalClient {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    reader: Option<JoinHandle<()>>,
    timeout: Duration,
    dead: bool,
}

impl ExternalClient {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, EvalError> {
        let argv = shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| EvalError::Invalid(format!("cannot parse command `{command}`")))?;
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        let mut child = cmd.spawn().map_err(|e| EvalError::Spawn {
            command: command.to_string(),
            message: e.to_string(),
        })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let msg = match line {
                    Ok(text) => Line::Text(text),
                    Err(e) => Line::Failed(e),
                };
                let failed = matches!(msg, Line::Failed(_));
                if tx.send(msg).is_err() || failed {
                    break;
                }
            }
        });
        debug!(command, pid = child.id(), "spawned evaluator");
        Ok(ExternalClient {
            command: command.to_string(),
            child,
            stdin,
            lines: rx,
            reader: Some(reader),
            timeout,
            dead: false,
        })
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Sends one request and waits for the response with the same id.
    pub fn request(&mut self, request: &WireRequest) -> Result<WireResponse, EvalError> {
        let deadline = Instant::now() + self.timeout;
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        let sent = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()),
            None => Err(std::io::ErrorKind::BrokenPipe.into()),
        };
        if sent.is_err() {
            return Err(self.exit_error(deadline));
        }

        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(remaining) {
                Ok(Line::Text(text)) => {
                    if text.trim().is_empty() {
                        continue;
                    }
                    let response: WireResponse = serde_json::from_str(&text)
                        .map_err(|e| EvalError::MalformedResponse(format!("{e}: {text}")))?;
                    if let Some(found) = response.protocol {
                        if found != PROTOCOL_VERSION as u64 {
                            return Err(EvalError::ProtocolMismatch {
                                expected: PROTOCOL_VERSION,
                                found,
                            });
                        }
                    }
                    if response.id != request.id as i64 {
                        return Err(EvalError::MalformedResponse(format!(
                            "response id {} does not match request id {}",
                            response.id, request.id
                        )));
                    }
                    return Ok(response);
                }
                Ok(Line::Failed(e)) => return Err(EvalError::Io(e)),
                Err(RecvTimeoutError::Timeout) => {
                    warn!(command = %self.command, "evaluator timed out");
                    self.kill();
                    return Err(EvalError::Timeout(self.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => return Err(self.exit_error(deadline)),
            }
        }
    }

    /// Evaluates one configuration and validates the accuracy range.
    pub fn evaluate(
        &mut self,
        id: u64,
        config: &ArchConfig,
        budget_macs: u64,
    ) -> Result<EvaluationResult, EvalError> {
        let started = Instant::now();
        let response = self.request(&WireRequest::new(id, config, budget_macs))?;
        if let Some(message) = response.error {
            return Err(EvalError::Remote(message));
        }
        let accuracy = response
            .accuracy
            .ok_or_else(|| EvalError::MalformedResponse("response has no accuracy".into()))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(EvalError::AccuracyOutOfRange(accuracy));
        }
        Ok(EvaluationResult {
            accuracy,
            meta: response.meta,
            duration: started.elapsed(),
        })
    }

    fn exit_error(&mut self, deadline: Instant) -> EvalError {
        // stdout closed or stdin broken: the child is exiting; give it until the deadline.
        self.stdin.take();
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => {
                    self.kill();
                    return EvalError::NonZeroExit {
                        status: status.to_string(),
                    };
                }
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(5))
                }
                Ok(None) => {
                    self.kill();
                    return EvalError::Timeout(self.timeout);
                }
                Err(e) => return EvalError::Io(e),
            }
        }
    }

    fn kill(&mut self) {
        if self.dead {
            return;
        }
        self.dead = true;
        self.stdin.take();
        #[cfg(unix)]
        {
            // Negative pid: the whole process group created at spawn.
            let pgid = self.child.id() as libc::pid_t;
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}

impl Drop for ExternalClient {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Pool of evaluator processes; each concurrent caller gets its own child.
pub struct ExternalEvaluator {
    command: String,
    timeout: Duration,
    next_id: AtomicU64,
    idle: Mutex<Vec<ExternalClient>>,
}

impl ExternalEvaluator {
    pub fn new(command: &str, timeout: Duration) -> Result<Self, EvalError> {
        if timeout.is_zero() {
            return Err(EvalError::Invalid("timeout must be positive".into()));
        }
        match shlex::split(command) {
            Some(argv) if !argv.is_empty() => {}
            _ => {
                return Err(EvalError::Invalid(format!(
                    "cannot parse command `{command}`"
                )))
            }
        }
        Ok(ExternalEvaluator {
            command: command.to_string(),
            timeout,
            next_id: AtomicU64::new(0),
            idle: Mutex::new(Vec::new()),
        })
    }

    /// Number of live idle children.
    pub fn idle_processes(&self) -> usize {
        self.idle.lock().unwrap().len()
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(
        &self,
        _template: &NetworkTemplate,
        config: &ArchConfig,
        budget_macs: u64,
    ) -> Result<EvaluationResult, EvalError> {
        let pooled = self.idle.lock().unwrap().pop();
        let mut client = match pooled {
            Some(client) => client,
            None => ExternalClient::spawn(&self.command, self.timeout)?,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let result = client.evaluate(id, config, budget_macs);
        match &result {
            // A client that failed mid-protocol is dropped (and killed).
            Ok(_) | Err(EvalError::AccuracyOutOfRange(_)) | Err(EvalError::Remote(_)) => {
                self.idle.lock().unwrap().push(client)
            }
            Err(_) => {}
        }
        result
    }
}
