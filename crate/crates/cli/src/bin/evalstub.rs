//! Reference evaluator speaking the line-delimited wire protocol.
//!
//! Answers one request and exits (one-shot), or, when the first line is a
//! `hello` handshake, keeps answering requests until stdin closes (session).

use std::io::{self, BufRead, Write};

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Always reply with `--score`.
    Fixed,
    /// Reply with minus the Hamming distance to `--target`.
    Hamming,
    /// Reply with text that is not a valid document.
    Malformed,
    /// Reply with an error record.
    Error,
}

#[derive(Debug, Parser)]
#[command(
    name = "prunequbo-evalstub",
    about = "Stub mask evaluator for protocol tests"
)]
struct Args {
    #[arg(long, value_enum, default_value = "fixed")]
    mode: Mode,
    #[arg(long, default_value_t = 1.25)]
    score: f64,
    /// Hidden target mask as a bit string (hamming mode).
    #[arg(long)]
    target: Option<String>,
    /// Mask length accepted in the handshake (defaults to the target length).
    #[arg(long)]
    n: Option<usize>,
}

fn reply(args: &Args, request: &Value) -> String {
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    let Some(mask) = request.get("mask").and_then(Value::as_array) else {
        return json!({"id": id, "error": "request has no mask"}).to_string();
    };
    match args.mode {
        Mode::Fixed => json!({"id": id, "score": args.score}).to_string(),
        Mode::Malformed => "score=?".to_string(),
        Mode::Error => json!({"id": id, "error": "stub evaluator failure"}).to_string(),
        Mode::Hamming => {
            let target = args.target.as_deref().unwrap_or_default().as_bytes();
            if target.len() != mask.len() {
                return json!({"id": id, "error": format!(
                    "mask length {} does not match target length {}", mask.len(), target.len()
                )})
                .to_string();
            }
            let distance = mask
                .iter()
                .zip(target)
                .filter(|(bit, &t)| bit.as_u64() != Some(u64::from(t - b'0')))
                .count();
            json!({"id": id, "score": 0.0 - distance as f64}).to_string()
        }
    }
}

fn main() -> io::Result<()> {
    let args = Args::parse();
    let expected_n = args.n.or(args.target.as_ref().map(String::len));
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                writeln!(stdout, "{}", json!({"error": format!("bad request: {e}")}))?;
                stdout.flush()?;
                continue;
            }
        };
        if request.get("op").and_then(Value::as_str) == Some("hello") {
            let n = request.get("n").and_then(Value::as_u64).unwrap_or(0) as usize;
            let answer = match expected_n {
                Some(expected) if expected != n => {
                    json!({"ok": false, "n": expected, "error": format!("expected n = {expected}, got {n}")})
                }
                _ => json!({"ok": true, "n": n}),
            };
            writeln!(stdout, "{answer}")?;
            stdout.flush()?;
            // session: keep serving requests until stdin closes
            continue;
        }
        writeln!(stdout, "{}", reply(&args, &request))?;
        stdout.flush()?;
    }
    Ok(())
}
