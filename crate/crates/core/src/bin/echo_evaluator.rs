//! Test double for the external evaluator protocol.
//!
//! Answers each request with fitness `-|x|^2` and features `(x0, x1)`.
//! Faults are injected through environment variables holding 0-based
//! request counts (comma separated where a list is accepted):
//!
//! - `ECHO_SLEEP_ON`, `ECHO_SLEEP_MS`: sleep before answering these.
//! - `ECHO_SILENT_ON`: never answer these.
//! - `ECHO_ERROR_ON`: answer with an error.
//! - `ECHO_MALFORMED_ON`: answer with a malformed fitness.
//! - `ECHO_CRASH_AFTER`: exit with status 1 after this many answers.
//! - `ECHO_SHUFFLE_BLOCK`, `ECHO_SHUFFLE_SEED`: buffer requests in blocks of
//!   this size and answer each block in a seeded random order.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn set(name: &str) -> HashSet<usize> {
    std::env::var(name)
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect()
}

fn number(name: &str) -> Option<u64> {
    std::env::var(name).ok()?.trim().parse().ok()
}

fn main() {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: echo_evaluator <descriptor.json>");
        std::process::exit(2);
    };
    let descriptor: Value = match std::fs::read_to_string(&path).map(|s| serde_json::from_str(&s)) {
        Ok(Ok(v)) => v,
        _ => {
            eprintln!("cannot read descriptor {path}");
            std::process::exit(2);
        }
    };
    let dim = descriptor["bounds"]["lower"].as_array().map_or(0, Vec::len);

    let sleep_on = set("ECHO_SLEEP_ON");
    let sleep_ms = number("ECHO_SLEEP_MS").unwrap_or(0);
    let silent_on = set("ECHO_SILENT_ON");
    let error_on = set("ECHO_ERROR_ON");
    let malformed_on = set("ECHO_MALFORMED_ON");
    let crash_after = number("ECHO_CRASH_AFTER");
    let block = number("ECHO_SHUFFLE_BLOCK").unwrap_or(1).max(1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(number("ECHO_SHUFFLE_SEED").unwrap_or(0));

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut pending: Vec<(usize, Value)> = Vec::new();
    let mut answered = 0u64;
    for (count, line) in stdin.lock().lines().enumerate() {
        let Ok(line) = line else { break };
        let Ok(req) = serde_json::from_str::<Value>(&line) else {
            continue;
        };
        pending.push((count, req));
        if pending.len() < block {
            continue;
        }
        pending.shuffle(&mut rng);
        for (k, req) in pending.drain(..) {
            if crash_after == Some(answered) {
                std::process::exit(1);
            }
            if sleep_on.contains(&k) {
                std::thread::sleep(std::time::Duration::from_millis(sleep_ms));
            }
            if silent_on.contains(&k) {
                continue;
            }
            let id = req["id"].clone();
            let params: Vec<f64> = req["params"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            let reply = if error_on.contains(&k) {
                json!({ "id": id, "error": "injected failure" })
            } else if malformed_on.contains(&k) {
                json!({ "id": id, "fitness": "not a number", "features": [0.0, 0.0] })
            } else if dim != 0 && params.len() != dim {
                json!({ "id": id, "error": format!("expected {dim} parameters, got {}", params.len()) })
            } else {
                let fitness = -params.iter().map(|x| x * x).sum::<f64>();
                let f = |i: usize| params.get(i).copied().unwrap_or(0.0);
                json!({ "id": id, "fitness": fitness, "features": [f(0), f(1)] })
            };
            writeln!(out, "{reply}").ok();
            out.flush().ok();
            answered += 1;
        }
    }
}
