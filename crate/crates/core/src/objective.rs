//! Black-box objectives over pruning masks, an evaluation cache, and the
//! line-delimited JSON protocol for external evaluator processes.
//!
//! All objectives are maximized. QUBO energies are negated when wrapped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::PruningMask;
use crate::qubo::QuboMatrix;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

/// A deterministic score to maximize.
pub trait Objective: Send + Sync {
    /// Mask length the objective accepts.
    fn n(&self) -> usize;

    fn evaluate(&self, mask: &PruningMask) -> Result<f64>;

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Custom
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    SyntheticSeparable,
    SyntheticQuboEnergy,
    ExternalCommand,
    Custom,
}

/// `Σ_i w_i p_i`.
#[derive(Debug, Clone)]
pub struct SeparableObjective {
    weights: Vec<f64>,
}

impl SeparableObjective {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }
}

impl Objective for SeparableObjective {
    fn n(&self) -> usize {
        self.weights.len()
    }

    fn evaluate(&self, mask: &PruningMask) -> Result<f64> {
        check_len(self.n(), mask)?;
        Ok(mask.pruned_indices().map(|i| self.weights[i]).sum())
    }

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::SyntheticSeparable
    }
}

/// `-E(p)` for a fixed QUBO.
#[derive(Debug, Clone)]
pub struct QuboEnergyObjective {
    q: QuboMatrix,
}

impl QuboEnergyObjective {
    pub fn new(q: QuboMatrix) -> Self {
        Self { q }
    }

    pub fn qubo(&self) -> &QuboMatrix {
        &self.q
    }
}

impl Objective for QuboEnergyObjective {
    fn n(&self) -> usize {
        self.q.n()
    }

    fn evaluate(&self, mask: &PruningMask) -> Result<f64> {
        Ok(-self.q.energy(mask)?)
    }

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::SyntheticQuboEnergy
    }
}

fn check_len(n: usize, mask: &PruningMask) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: mask.len(),
        });
    }
    Ok(())
}

/// Penalized objective `raw - lambda * |card - k|`.
pub fn penalized(raw: f64, cardinality: usize, k_target: usize, lambda_card: f64) -> f64 {
    if cardinality == k_target {
        raw
    } else {
        raw - lambda_card * cardinality.abs_diff(k_target) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Fresh,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mask: PruningMask,
    pub raw_metric: f64,
    pub penalized: f64,
    pub source: EvalSource,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    mask: PruningMask,
    score: f64,
}

/// Raw scores keyed by exact bit pattern. Safe for concurrent use.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: RwLock<HashMap<PruningMask, f64>>,
    fresh: AtomicUsize,
    hits: AtomicUsize,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, mask: &PruningMask) -> Option<f64> {
        self.map.read().unwrap().get(mask).copied()
    }

    pub fn contains(&self, mask: &PruningMask) -> bool {
        self.map.read().unwrap().contains_key(mask)
    }

    pub fn insert(&self, mask: PruningMask, score: f64) {
        self.map.write().unwrap().insert(mask, score);
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of evaluations that reached the underlying objective.
    pub fn fresh_count(&self) -> usize {
        self.fresh.load(Ordering::Relaxed)
    }

    pub fn hit_count(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Stored masks in ascending order.
    pub fn masks(&self) -> Vec<PruningMask> {
        let mut masks: Vec<PruningMask> = self.map.read().unwrap().keys().cloned().collect();
        masks.sort();
        masks
    }

    /// Writes one `{"mask": "...", "score": x}` line per entry, sorted by mask.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = self.map.read().unwrap();
        let mut entries: Vec<(&PruningMask, &f64)> = map.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (mask, &score) in entries {
            let line = CacheLine {
                mask: mask.clone(),
                score,
            };
            out.push_str(&serde_json::to_string(&line).expect("cache line serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            cache.insert(entry.mask, entry.score);
        }
        Ok(cache)
    }
}

/// An objective together with its evaluation cache.
#[derive(Clone)]
pub struct ObjectiveHandle {
    objective: Arc<dyn Objective>,
    cache: Arc<EvalCache>,
}

impl std::fmt::Debug for ObjectiveHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectiveHandle")
            .field("kind", &self.objective.kind())
            .field("n", &self.objective.n())
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl ObjectiveHandle {
    pub fn new(objective: Arc<dyn Objective>) -> Self {
        Self {
            objective,
            cache: Arc::new(EvalCache::new()),
        }
    }

    pub fn with_cache(objective: Arc<dyn Objective>, cache: Arc<EvalCache>) -> Self {
        Self { objective, cache }
    }

    pub fn separable(weights: Vec<f64>) -> Self {
        Self::new(Arc::new(SeparableObjective::new(weights)))
    }

    pub fn qubo_energy(q: QuboMatrix) -> Self {
        Self::new(Arc::new(QuboEnergyObjective::new(q)))
    }

    pub fn external(spec: ExternalSpec, n: usize) -> Self {
        Self::new(Arc::new(ExternalObjective::new(spec, n)))
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.objective.kind()
    }

    pub fn n(&self) -> usize {
        self.objective.n()
    }

    pub fn cache(&self) -> &Arc<EvalCache> {
        &self.cache
    }

    /// Raw metric of `mask`, served from the cache when possible.
    pub fn evaluate(&self, mask: &PruningMask) -> Result<f64> {
        self.evaluate_sourced(mask).map(|(v, _)| v)
    }

    pub fn evaluate_sourced(&self, mask: &PruningMask) -> Result<(f64, EvalSource)> {
        check_len(self.n(), mask)?;
        if let Some(v) = self.cache.get(mask) {
            self.cache.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((v, EvalSource::Cache));
        }
        let v = self.objective.evaluate(mask)?;
        if !v.is_finite() {
            return Err(Error::Evaluation {
                mask: mask.to_string(),
                message: format!("objective returned non-finite score {v}"),
            });
        }
        self.cache.fresh.fetch_add(1, Ordering::Relaxed);
        self.cache.insert(mask.clone(), v);
        Ok((v, EvalSource::Fresh))
    }

    pub fn evaluate_record(
        &self,
        mask: &PruningMask,
        k_target: usize,
        lambda_card: f64,
    ) -> Result<EvalRecord> {
        let (raw, source) = self.evaluate_sourced(mask)?;
        Ok(EvalRecord {
            mask: mask.clone(),
            raw_metric: raw,
            penalized: penalized(raw, mask.cardinality(), k_target, lambda_card),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExternalMode {
    /// One process per evaluation.
    #[default]
    OneShot,
    /// Long-lived processes answering many requests after a handshake.
    Session,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub command: Vec<String>,
    #[serde(default)]
    pub mode: ExternalMode,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Number of concurrent sessions in session mode.
    #[serde(default = "default_sessions")]
    pub sessions: usize,
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

fn default_sessions() -> usize {
    1
}

impl ExternalSpec {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            mode: ExternalMode::OneShot,
            timeout_secs: default_timeout_secs(),
            sessions: 1,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }
}

#[derive(Serialize)]
struct EvalRequest<'a> {
    op: &'static str,
    mask: &'a [u8],
    id: u64,
}

#[derive(Serialize)]
struct HelloRequest {
    op: &'static str,
    n: usize,
}

/// Request line for evaluating `mask` (no trailing newline).
pub fn eval_request_line(mask: &PruningMask, id: u64) -> String {
    serde_json::to_string(&EvalRequest {
        op: "eval",
        mask: mask.bits(),
        id,
    })
    .expect("request serializes")
}

pub fn hello_request_line(n: usize) -> String {
    serde_json::to_string(&HelloRequest { op: "hello", n }).expect("request serializes")
}

/// Parses an evaluator reply, checking the echoed id.
pub fn parse_reply(line: &str, expected_id: u64) -> std::result::Result<f64, String> {
    let value: serde_json::Value = serde_json::from_str(line.trim())
        .map_err(|e| format!("malformed reply {:?}: {e}", truncate(line)))?;
    let obj = value
        .as_object()
        .ok_or_else(|| format!("reply is not an object: {:?}", truncate(line)))?;
    let id = obj
        .get("id")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| format!("reply without integer id: {:?}", truncate(line)))?;
    if id != expected_id {
        return Err(format!(
            "reply id {id} does not match request id {expected_id}"
        ));
    }
    if let Some(err) = obj.get("error") {
        let msg = err
            .as_str()
            .map(str::to_string)
            .unwrap_or_else(|| err.to_string());
        return Err(format!("evaluator reported error: {msg}"));
    }
    let score = obj
        .get("score")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| format!("reply without numeric score: {:?}", truncate(line)))?;
    if !score.is_finite() {
        return Err(format!("non-finite score {score}"));
    }
    Ok(score)
}

fn truncate(s: &str) -> String {
    let s = s.trim();
    if s.chars().count() > 200 {
        format!("{}...", s.chars().take(200).collect::<String>())
    } else {
        s.to_string()
    }
}

/// Evaluator that talks to an external command over stdin/stdout.
pub struct ExternalObjective {
    spec: ExternalSpec,
    n: usize,
    next_id: AtomicU64,
    sessions: Vec<Mutex<Option<Session>>>,
    round_robin: AtomicUsize,
}

impl ExternalObjective {
    pub fn new(spec: ExternalSpec, n: usize) -> Self {
        let slots = if spec.mode == ExternalMode::Session {
            spec.sessions.max(1)
        } else {
            0
        };
        Self {
            n,
            next_id: AtomicU64::new(0),
            sessions: (0..slots).map(|_| Mutex::new(None)).collect(),
            round_robin: AtomicUsize::new(0),
            spec,
        }
    }

    fn fail(mask: &PruningMask, message: impl Into<String>) -> Error {
        Error::Evaluation {
            mask: mask.to_string(),
            message: message.into(),
        }
    }

    fn spawn(&self) -> std::io::Result<Child> {
        let (program, args) = self
            .spec
            .command
            .split_first()
            .ok_or_else(|| std::io::Error::other("empty evaluator command"))?;
        Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
    }

    fn evaluate_one_shot(&self, mask: &PruningMask, id: u64) -> Result<f64> {
        let mut child = self
            .spawn()
            .map_err(|e| Self::fail(mask, format!("cannot spawn {:?}: {e}", self.spec.command)))?;
        let stderr = collect_stderr(&mut child);
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut text = String::new();
            let res = stdout.read_to_string(&mut text).map(|_| text);
            let _ = tx.send(res);
        });
        let request = eval_request_line(mask, id) + "\n";
        // a stub may exit without reading its input
        let _ = stdin.write_all(request.as_bytes());
        drop(stdin);

        let reply = match rx.recv_timeout(self.spec.timeout()) {
            Ok(Ok(text)) => text,
            Ok(Err(e)) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Self::fail(mask, format!("reading evaluator output: {e}")));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Self::fail(
                    mask,
                    format!("evaluator timed out after {:.1} s", self.spec.timeout_secs),
                ));
            }
        };
        let status = child.wait().map_err(|e| Self::fail(mask, e.to_string()))?;
        let err_text = stderr.lock().unwrap().clone();
        if !status.success() {
            return Err(Self::fail(
                mask,
                format!(
                    "evaluator exited with {status}; stderr: {}",
                    err_text.trim()
                ),
            ));
        }
        let line = reply.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        parse_reply(line, id).map_err(|m| {
            if err_text.trim().is_empty() {
                Self::fail(mask, m)
            } else {
                Self::fail(mask, format!("{m}; stderr: {}", err_text.trim()))
            }
        })
    }

    fn evaluate_session(&self, mask: &PruningMask, id: u64) -> Result<f64> {
        let slots = self.sessions.len();
        let start = self.round_robin.fetch_add(1, Ordering::Relaxed) % slots;
        let mut guard = (0..slots)
            .find_map(|k| self.sessions[(start + k) % slots].try_lock().ok())
            .unwrap_or_else(|| self.sessions[start].lock().unwrap());
        if guard.is_none() {
            let session = Session::open(self, mask)?;
            *guard = Some(session);
        }
        let session = guard.as_mut().expect("session present");
        match session.request(&eval_request_line(mask, id), self.spec.timeout()) {
            Ok(line) => parse_reply(&line, id).map_err(|m| Self::fail(mask, m)),
            Err(m) => {
                let stderr = session.stderr.lock().unwrap().clone();
                *guard = None;
                Err(Self::fail(
                    mask,
                    if stderr.trim().is_empty() {
                        m
                    } else {
                        format!("{m}; stderr: {}", stderr.trim())
                    },
                ))
            }
        }
    }
}

impl Objective for ExternalObjective {
    fn n(&self) -> usize {
        self.n
    }

    fn evaluate(&self, mask: &PruningMask) -> Result<f64> {
        check_len(self.n, mask)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match self.spec.mode {
            ExternalMode::OneShot => self.evaluate_one_shot(mask, id),
            ExternalMode::Session => self.evaluate_session(mask, id),
        }
    }

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::ExternalCommand
    }
}

fn collect_stderr(child: &mut Child) -> Arc<Mutex<String>> {
    let buf = Arc::new(Mutex::new(String::new()));
    if let Some(mut err) = child.stderr.take() {
        let sink = Arc::clone(&buf);
        thread::spawn(move || {
            let mut chunk = [0u8; 4096];
            while let Ok(k) = err.read(&mut chunk) {
                if k == 0 {
                    break;
                }
                let mut s = sink.lock().unwrap();
                s.push_str(&String::from_utf8_lossy(&chunk[..k]));
                // keep the tail only
                if s.len() > 16 * 1024 {
                    let cut = s.len() - 8 * 1024;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(0);
                    s.drain(..cut);
                }
            }
        });
    }
    buf
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
}

impl Session {
    fn open(owner: &ExternalObjective, mask: &PruningMask) -> Result<Self> {
        let mut child = owner.spawn().map_err(|e| {
            ExternalObjective::fail(mask, format!("cannot spawn {:?}: {e}", owner.spec.command))
        })?;
        let stderr = collect_stderr(&mut child);
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut session = Session {
            child,
            stdin,
            lines: rx,
            stderr,
        };
        let reply = session
            .request(&hello_request_line(owner.n), owner.spec.timeout())
            .map_err(|m| ExternalObjective::fail(mask, format!("handshake failed: {m}")))?;
        let value: serde_json::Value = serde_json::from_str(reply.trim()).map_err(|e| {
            ExternalObjective::fail(mask, format!("malformed handshake reply {reply:?}: {e}"))
        })?;
        let ok = value.get("ok").and_then(|v| v.as_bool()) == Some(true);
        let n = value.get("n").and_then(|v| v.as_u64());
        if !ok || n != Some(owner.n as u64) {
            return Err(ExternalObjective::fail(
                mask,
                format!(
                    "protocol error: handshake for n = {} answered with {}",
                    owner.n,
                    reply.trim()
                ),
            ));
        }
        Ok(session)
    }

    fn request(&mut self, line: &str, timeout: Duration) -> std::result::Result<String, String> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| format!("writing request: {e}"))?;
        loop {
            match self.lines.recv_timeout(timeout) {
                Ok(Ok(reply)) if reply.trim().is_empty() => continue,
                Ok(Ok(reply)) => return Ok(reply),
                Ok(Err(e)) => return Err(format!("reading reply: {e}")),
                Err(RecvTimeoutError::Timeout) => {
                    let _ = self.child.kill();
                    return Err(format!(
                        "evaluator timed out after {:.1} s",
                        timeout.as_secs_f64()
                    ));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err("evaluator closed its output".to_string())
                }
            }
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
