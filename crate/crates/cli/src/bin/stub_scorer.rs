//! Minimal JSON-lines scorer for exercising the external-scorer path.
//!
//! `stub-scorer [--classes a,b] [--probs p1,...,pK,pbg]` answers every request
//! with the same probabilities (uniform by default).

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use serde_json::{json, Value};

fn list(args: &[String], flag: &str) -> Option<String> {
    args.iter().position(|a| a == flag).and_then(|i| args.get(i + 1)).cloned()
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let classes: Vec<String> = list(&args, "--classes")
        .unwrap_or_else(|| "object".into())
        .split(',')
        .map(str::to_string)
        .collect();
    let n = classes.len() + 1;
    let probs: Vec<f64> = match list(&args, "--probs") {
        Some(s) => match s.split(',').map(str::parse).collect::<Result<Vec<f64>, _>>() {
            Ok(p) if p.len() == n => p,
            _ => {
                eprintln!("--probs needs {n} numbers");
                return ExitCode::from(1);
            }
        },
        None => vec![1.0 / n as f64; n],
    };

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let hello = json!({ "protocol": 1, "classes": classes });
    if writeln!(out, "{hello}").and_then(|_| out.flush()).is_err() {
        return ExitCode::from(2);
    }
    for line in io::stdin().lock().lines() {
        let Ok(line) = line else { return ExitCode::from(2) };
        if line.trim().is_empty() {
            continue;
        }
        let id = match serde_json::from_str::<Value>(&line).ok().and_then(|v| v["id"].as_u64()) {
            Some(id) => id,
            None => {
                eprintln!("bad request: {line}");
                return ExitCode::from(1);
            }
        };
        let reply = json!({ "id": id, "probs": probs });
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
