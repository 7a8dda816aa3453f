//! Subprocess inference backend speaking the wire protocol.
//!
//! One child process serves one role (detector, classifier, or
//! segmenter). The client pipelines up to `max_in_flight` requests and
//! matches responses by id, so the child may answer out of order. A
//! malformed frame poisons the connection: every pending and future
//! request fails and the pipeline aborts cleanly.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{WireOp, WireRequest, WireResponse};
use super::{
    BackendError, ClassifierBackend, DetectorBackend, DetectorOutput, SegmenterBackend,
};
use crate::mask::Mask;
use crate::wsi::Tile;

pub const DEFAULT_TIMEOUT_SECS: u64 = 60;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// How to launch an external backend process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnSpec {
    pub argv: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl SpawnSpec {
    pub fn new(argv: Vec<String>) -> Self {
        SpawnSpec {
            argv,
            env: BTreeMap::new(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

struct Pending {
    channels: HashMap<u64, mpsc::Sender<WireResponse>>,
    /// First protocol failure; poisons the connection permanently.
    failure: Option<String>,
}

struct Inner {
    pending: Mutex<Pending>,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
    max_in_flight: usize,
}

/// Handle to a running backend process.
pub struct ExternalBackend {
    spec: SpawnSpec,
    child: Mutex<Child>,
    stdin: Mutex<std::process::ChildStdin>,
    inner: Arc<Inner>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl ExternalBackend {
    pub fn spawn(spec: SpawnSpec) -> Result<Self, BackendError> {
        if spec.argv.is_empty() {
            return Err(BackendError::Process("spawn spec has empty argv".into()));
        }
        let mut command = Command::new(&spec.argv[0]);
        command
            .args(&spec.argv[1..])
            .envs(&spec.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        let mut child = command
            .spawn()
            .map_err(|e| BackendError::Process(format!("spawn `{}` failed: {e}", spec.argv[0])))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");

        let inner = Arc::new(Inner {
            pending: Mutex::new(Pending { channels: HashMap::new(), failure: None }),
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
            max_in_flight: spec.max_in_flight.max(1),
        });

        let reader_inner = Arc::clone(&inner);
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let frame = match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => l,
                    Err(e) => {
                        fail(&reader_inner, format!("stdout read failed: {e}"));
                        return;
                    }
                };
                match WireResponse::parse_line(&frame) {
                    Ok(resp) => {
                        let mut pending = reader_inner.pending.lock().expect("pending lock");
                        match pending.channels.remove(&resp.id) {
                            Some(tx) => {
                                // Receiver may have timed out; ignore.
                                let _ = tx.send(resp);
                            }
                            None => {
                                let id = resp.id;
                                drop(pending);
                                fail(&reader_inner, format!("response for unknown request id {id}"));
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        fail(&reader_inner, e.to_string());
                        return;
                    }
                }
            }
            fail(&reader_inner, "backend closed its stdout".into());
        });

        let timeout = Duration::from_secs(spec.timeout_secs);
        Ok(ExternalBackend {
            spec,
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            inner,
            next_id: AtomicU64::new(1),
            timeout,
        })
    }

    fn acquire_slot(&self) -> SlotGuard<'_> {
        let mut in_flight = self.inner.in_flight.lock().expect("slot lock");
        while *in_flight >= self.inner.max_in_flight {
            in_flight = self.inner.slot_free.wait(in_flight).expect("slot wait");
        }
        *in_flight += 1;
        SlotGuard { inner: &self.inner }
    }

    /// Issue one request and wait for its response.
    pub fn request(&self, op: WireOp, tile: &Tile) -> Result<WireResponse, BackendError> {
        let _slot = self.acquire_slot();
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.inner.pending.lock().expect("pending lock");
            if let Some(failure) = &pending.failure {
                return Err(BackendError::Protocol(failure.clone()));
            }
            pending.channels.insert(id, tx);
        }

        let request = WireRequest::from_tile(id, op, tile);
        let mut line = serde_json::to_string(&request)
            .map_err(|e| BackendError::Protocol(format!("request encode failed: {e}")))?;
        line.push('\n');
        {
            let mut stdin = self.stdin.lock().expect("stdin lock");
            if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
                self.inner.pending.lock().expect("pending lock").channels.remove(&id);
                return Err(BackendError::Process(format!("request write failed: {e}")));
            }
        }

        match rx.recv_timeout(self.timeout) {
            Ok(resp) => Ok(resp),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.inner.pending.lock().expect("pending lock").channels.remove(&id);
                Err(BackendError::Timeout { id })
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                let pending = self.inner.pending.lock().expect("pending lock");
                Err(BackendError::Protocol(
                    pending.failure.clone().unwrap_or_else(|| "connection failed".into()),
                ))
            }
        }
    }

    pub fn spec(&self) -> &SpawnSpec {
        &self.spec
    }
}

struct SlotGuard<'a> {
    inner: &'a Inner,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.inner.in_flight.lock().expect("slot lock");
        *in_flight -= 1;
        self.inner.slot_free.notify_one();
    }
}

fn fail(inner: &Inner, message: String) {
    let mut pending = inner.pending.lock().expect("pending lock");
    if pending.failure.is_none() {
        pending.failure = Some(message);
    }
    // Dropping the senders wakes every waiting request with Disconnected.
    pending.channels.clear();
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl DetectorBackend for ExternalBackend {
    fn detect(&self, tile: &Tile) -> Result<DetectorOutput, BackendError> {
        let resp = self.request(WireOp::Detect, tile)?;
        Ok(DetectorOutput::Detections(resp.detections()?))
    }

    fn identity(&self) -> String {
        format!("external({})", self.spec.argv.join(" "))
    }
}

impl ClassifierBackend for ExternalBackend {
    fn classify(&self, patch: &Tile) -> Result<Vec<f64>, BackendError> {
        let resp = self.request(WireOp::Classify, patch)?;
        resp.probs()
    }

    fn identity(&self) -> String {
        format!("external({})", self.spec.argv.join(" "))
    }
}

impl SegmenterBackend for ExternalBackend {
    fn segment(&self, patch: &Tile) -> Result<Mask, BackendError> {
        let resp = self.request(WireOp::Segment, patch)?;
        resp.mask(patch.width, patch.height)
    }

    fn identity(&self) -> String {
        format!("external({})", self.spec.argv.join(" "))
    }
}
