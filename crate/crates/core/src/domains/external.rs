//! Line-delimited JSON protocol for evaluators running as child processes.
//!
//! Requests are written one per line as `{"id": "..", "params": [..]}`;
//! the child answers each with `{"id": "..", "fitness": f, "features": [a, b]}`
//! or `{"id": "..", "error": ".."}`, in any order. The child is started with
//! the path of the domain descriptor as its only argument.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::qd::{Evaluation, Evaluator};
use crate::{Error, Genome, Result};

use super::{Domain, DomainDescriptor};

pub type ItemResult = std::result::Result<Evaluation, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub command: PathBuf,
    /// Seconds to wait for the next response before the oldest outstanding
    /// request is failed.
    pub timeout_secs: f64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Where the descriptor is written; a temporary path when unset.
    #[serde(default)]
    pub descriptor_path: Option<PathBuf>,
}

impl ExternalConfig {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            timeout_secs: 600.0,
            env: BTreeMap::new(),
            descriptor_path: None,
        }
    }
}

/// The child exited or closed its output before answering every request.
#[derive(Debug, Clone)]
pub struct BatchFailure {
    pub message: String,
    /// Outcomes received before the failure, by input position.
    pub partial: Vec<Option<ItemResult>>,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalEvaluator {
    descriptor: DomainDescriptor,
    cfg: ExternalConfig,
    descriptor_path: PathBuf,
    worker: Mutex<Option<Worker>>,
    batches: AtomicU64,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("domain", &self.descriptor.name)
            .field("command", &self.cfg.command)
            .finish()
    }
}

impl ExternalEvaluator {
    pub fn new(descriptor: DomainDescriptor, cfg: ExternalConfig) -> Result<Self> {
        if !(cfg.timeout_secs > 0.0) {
            return Err(Error::Validation("evaluator timeout must be positive".into()));
        }
        let descriptor_path = cfg.descriptor_path.clone().unwrap_or_else(|| {
            std::env::temp_dir().join(format!("produqd-{}-{}.json", descriptor.name, std::process::id()))
        });
        descriptor.save(&descriptor_path)?;
        Ok(Self {
            descriptor,
            cfg,
            descriptor_path,
            worker: Mutex::new(None),
            batches: AtomicU64::new(0),
        })
    }

    pub fn descriptor_path(&self) -> &std::path::Path {
        &self.descriptor_path
    }

    fn spawn(&self) -> Result<Worker> {
        let mut child = Command::new(&self.cfg.command)
            .arg(&self.descriptor_path)
            .envs(&self.cfg.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Evaluator(format!("cannot start {}: {e}", self.cfg.command.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Worker { child, stdin, lines })
    }

    /// Sends the whole batch, then collects responses by id. When no
    /// response arrives within the timeout, the oldest outstanding request
    /// is failed and the clock restarts for the rest.
    pub fn run_batch(&self, genomes: &[Genome]) -> std::result::Result<Vec<ItemResult>, BatchFailure> {
        let n = genomes.len();
        let mut results: Vec<Option<ItemResult>> = vec![None; n];
        if n == 0 {
            return Ok(Vec::new());
        }
        let fail = |results: Vec<Option<ItemResult>>, message: String| BatchFailure { message, partial: results };
        let mut guard = self.worker.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            match self.spawn() {
                Ok(w) => *guard = Some(w),
                Err(e) => return Err(fail(results, e.to_string())),
            }
        }
        let batch = self.batches.fetch_add(1, Ordering::Relaxed);
        let ids: HashMap<String, usize> = (0..n).map(|i| (format!("{batch}-{i}"), i)).collect();
        let worker = guard.as_mut().expect("worker present");

        let mut payload = String::new();
        for (i, g) in genomes.iter().enumerate() {
            payload.push_str(&json!({ "id": format!("{batch}-{i}"), "params": g }).to_string());
            payload.push('\n');
        }
        if let Err(e) = worker.stdin.write_all(payload.as_bytes()).and_then(|_| worker.stdin.flush()) {
            *guard = None;
            return Err(fail(results, format!("evaluator closed its input: {e}")));
        }

        let timeout = Duration::from_secs_f64(self.cfg.timeout_secs);
        let mut outstanding = n;
        let mut last = Instant::now();
        while outstanding > 0 {
            let wait = (last + timeout).saturating_duration_since(Instant::now());
            match worker.lines.recv_timeout(wait) {
                Ok(line) => match parse_response(&line) {
                    Some((id, outcome)) => match ids.get(&id) {
                        Some(&i) if results[i].is_none() => {
                            results[i] = Some(outcome);
                            outstanding -= 1;
                            last = Instant::now();
                        }
                        _ => log::debug!("ignoring response for unknown or settled id {id}"),
                    },
                    None => log::warn!("unparseable evaluator output: {line}"),
                },
                Err(RecvTimeoutError::Timeout) => {
                    let i = results.iter().position(|r| r.is_none()).expect("outstanding item");
                    results[i] = Some(Err(format!("timed out after {}s", self.cfg.timeout_secs)));
                    outstanding -= 1;
                    last = Instant::now();
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let mut w = guard.take().expect("worker present");
                    let status = w.child.wait().map(|s| s.to_string()).unwrap_or_else(|e| e.to_string());
                    drop(w);
                    return Err(fail(results, format!("evaluator exited ({status})")));
                }
            }
        }
        Ok(results.into_iter().map(|r| r.expect("settled")).collect())
    }
}

/// Correlation id and outcome of one response line. Lines that carry an id
/// but no valid payload become item failures.
pub fn parse_response(line: &str) -> Option<(String, ItemResult)> {
    let v: Value = serde_json::from_str(line).ok()?;
    let id = v.get("id")?.as_str()?.to_string();
    if let Some(err) = v.get("error") {
        let msg = err.as_str().map_or_else(|| err.to_string(), str::to_string);
        return Some((id, Err(msg)));
    }
    let fitness = v.get("fitness").and_then(Value::as_f64);
    let features = v.get("features").and_then(Value::as_array).and_then(|a| match a.as_slice() {
        [x, y] => Some([x.as_f64()?, y.as_f64()?]),
        _ => None,
    });
    let outcome = match (fitness, features) {
        (Some(fitness), Some(features)) => Ok(Evaluation { fitness, features }),
        _ => Err(format!("malformed response: {line}")),
    };
    Some((id, outcome))
}

impl Evaluator for ExternalEvaluator {
    fn cheap_features(&self, _genome: &[f64]) -> Option<[f64; 2]> {
        None
    }

    fn evaluate_batch(&self, genomes: &[Genome]) -> Vec<ItemResult> {
        match self.run_batch(genomes) {
            Ok(r) => r,
            Err(f) => f
                .partial
                .into_iter()
                .map(|r| r.unwrap_or_else(|| Err(f.message.clone())))
                .collect(),
        }
    }
}

impl Domain for ExternalEvaluator {
    fn descriptor(&self) -> &DomainDescriptor {
        &self.descriptor
    }

    fn is_analytic(&self) -> bool {
        false
    }
}
