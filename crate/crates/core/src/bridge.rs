//! Line-delimited JSON protocol for scorers running in a child process.
//!
//! The server writes a handshake line `{"protocol":1,"classes":[...]}`, then
//! answers each request `{"id":n,"image_path":"...","mask":[x0,y0,x1,y1]}`
//! with `{"id":n,"probs":[...]}`. Responses may arrive in any order; they
//! are matched by id.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsStr;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;

use crate::context::ContextualSample;
use crate::dataset_io::encode_png;
use crate::error::{Error, IoContext, Result};
use crate::scorer::{ContextScorer, ScoreVector};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: u64,
    pub image_path: String,
    pub mask: [i64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: u64,
    pub probs: Vec<f64>,
}

impl ScoreRequest {
    pub fn new(id: u64, image_path: &Path, sample: &ContextualSample) -> Self {
        let r = sample.masked_region;
        Self {
            id,
            image_path: image_path.to_string_lossy().into_owned(),
            mask: [r.x0, r.y0, r.x1, r.y1].map(|v| v.round() as i64),
        }
    }

    /// The wire form, newline-terminated.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("request serializes");
        s.push('\n');
        s
    }
}

pub fn parse_handshake(line: &str) -> Result<Handshake> {
    let h: Handshake = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Protocol(format!("bad handshake {line:?}: {e}")))?;
    if h.protocol != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported protocol {} (expected {PROTOCOL_VERSION})",
            h.protocol
        )));
    }
    if h.classes.is_empty() {
        return Err(Error::Protocol("handshake lists no classes".into()));
    }
    Ok(h)
}

pub fn parse_response(line: &str) -> Result<ScoreResponse> {
    serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Protocol(format!("malformed response {line:?}: {e}")))
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    broken: Option<String>,
}

impl Channel {
    fn recv_line(&mut self, deadline: Instant, timeout: Duration) -> Result<String> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(wait) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Protocol(format!("reading from scorer: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol("scorer process closed its output".into()))
            }
        }
    }
}

/// A scorer served by a child process.
pub struct RemoteScorer {
    classes: Vec<String>,
    channel: Mutex<Channel>,
    timeout: Duration,
    scratch: TempDir,
}

impl RemoteScorer {
    /// Starts `program` with `args` and waits for its handshake.
    pub fn spawn<S: AsRef<OsStr>>(program: &Path, args: &[S], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .at(program)?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut channel = Channel {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            broken: None,
        };
        let first = channel.recv_line(Instant::now() + timeout, timeout);
        let handshake = match first.and_then(|l| parse_handshake(&l)) {
            Ok(h) => h,
            Err(e) => {
                let _ = channel.child.kill();
                let _ = channel.child.wait();
                return Err(e);
            }
        };
        log::info!(
            "scorer {} ready with {} classes",
            program.display(),
            handshake.classes.len()
        );
        Ok(Self {
            classes: handshake.classes,
            channel: Mutex::new(channel),
            timeout,
            scratch: tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?,
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Sends all samples before reading any response.
    pub fn score_pipelined(&self, samples: &[ContextualSample]) -> Result<Vec<ScoreVector>> {
        let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(why) = &ch.broken {
            return Err(Error::Protocol(format!("scorer channel unusable: {why}")));
        }
        let mut files = Vec::with_capacity(samples.len());
        let result = self.exchange(&mut ch, samples, &mut files);
        for f in &files {
            let _ = fs::remove_file(f);
        }
        if let Err(e) = &result {
            if matches!(e, Error::Timeout(_) | Error::Protocol(_)) {
                ch.broken = Some(e.to_string());
            }
        }
        result
    }

    fn exchange(
        &self,
        ch: &mut Channel,
        samples: &[ContextualSample],
        files: &mut Vec<PathBuf>,
    ) -> Result<Vec<ScoreVector>> {
        let first_id = ch.next_id;
        let mut outstanding = HashSet::new();
        let mut batch = String::new();
        for (i, s) in samples.iter().enumerate() {
            let id = first_id + i as u64;
            let path = self.scratch.path().join(format!("req_{id}.png"));
            fs::write(&path, encode_png(&s.pixels)?).at(&path)?;
            files.push(path.clone());
            batch.push_str(&ScoreRequest::new(id, &path, s).to_line());
            outstanding.insert(id);
        }
        ch.next_id = first_id + samples.len() as u64;
        ch.stdin
            .write_all(batch.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::Protocol(format!("writing to scorer: {e}")))?;

        let deadline = Instant::now() + self.timeout;
        let mut got = BTreeMap::new();
        while !outstanding.is_empty() {
            let resp = parse_response(&ch.recv_line(deadline, self.timeout)?)?;
            if !outstanding.remove(&resp.id) {
                return Err(Error::Protocol(format!("unexpected response id {}", resp.id)));
            }
            if resp.probs.len() != self.classes.len() + 1 {
                return Err(Error::Protocol(format!(
                    "expected {} probabilities, got {}",
                    self.classes.len() + 1,
                    resp.probs.len()
                )));
            }
            got.insert(resp.id, resp.probs);
        }
        got.into_values().map(ScoreVector::new).collect()
    }
}

impl ContextScorer for RemoteScorer {
    fn class_names(&self) -> &[String] {
        &self.classes
    }

    fn score(&self, sample: &ContextualSample) -> Result<ScoreVector> {
        Ok(self
            .score_pipelined(std::slice::from_ref(sample))?
            .pop()
            .expect("one response"))
    }

    fn score_batch(&self, samples: &[ContextualSample]) -> Result<Vec<ScoreVector>> {
        self.score_pipelined(samples)
    }
}

impl Drop for RemoteScorer {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|p| p.into_inner());
        let _ = ch.child.kill();
        let _ = ch.child.wait();
    }
}
