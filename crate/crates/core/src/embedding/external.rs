//! Backend hosted by an external process speaking JSON lines on
//! stdin/stdout.
//!
//! Each request is one JSON object per line and receives exactly one
//! response line:
//!
//! | request                                        | response                      |
//! |------------------------------------------------|-------------------------------|
//! | `{"op":"info"}`                                | `{"model_id":..,"dim":..}`    |
//! | `{"op":"embed_text","text":..}`                | `{"embedding":[..]}`          |
//! | `{"op":"embed_image","pixels":[..]}`           | `{"embedding":[..]}`          |
//! | `{"op":"infill","sentence":..,"top_k":..}`     | `{"candidates":[..]}`         |
//! | `{"op":"token_log_probs","sentence":..}`       | `{"log_probs":[..]}`          |
//!
//! Any response carrying `{"error": msg}` is surfaced as a backend error.
//! Requests are serialized over a single process.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{EmbeddingBackend, EmbeddingVector, Image};
use crate::category::SentenceScorer;
use crate::error::{Error, Result};
use crate::hierarchy::mining::Infiller;

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalBackend {
    program: String,
    model_id: String,
    dim: usize,
    channel: Mutex<Channel>,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("program", &self.program)
            .field("model_id", &self.model_id)
            .field("dim", &self.dim)
            .finish()
    }
}

#[derive(Deserialize)]
struct Info {
    model_id: String,
    dim: usize,
}

impl ExternalBackend {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = Self {
            program: program.to_string(),
            model_id: String::new(),
            dim: 0,
            channel: Mutex::new(Channel {
                child,
                stdin,
                stdout,
            }),
        };
        let info: Info = serde_json::from_value(backend.request(json!({"op": "info"}))?)
            .map_err(|e| Error::Backend(format!("{program:?}: malformed info response: {e}")))?;
        if info.dim == 0 {
            return Err(Error::Backend(format!("{program:?} reports dimension 0")));
        }
        backend.model_id = info.model_id;
        backend.dim = info.dim;
        Ok(backend)
    }

    fn request(&self, body: Value) -> Result<Value> {
        let mut ch = self.channel.lock().expect("backend channel poisoned");
        let mut line = serde_json::to_string(&body)?;
        line.push('\n');
        ch.stdin
            .write_all(line.as_bytes())
            .and_then(|_| ch.stdin.flush())
            .map_err(|e| Error::Backend(format!("{:?}: write failed: {e}", self.program)))?;
        let mut response = String::new();
        let n = ch
            .stdout
            .read_line(&mut response)
            .map_err(|e| Error::Backend(format!("{:?}: read failed: {e}", self.program)))?;
        if n == 0 {
            return Err(Error::Backend(format!("{:?} exited unexpectedly", self.program)));
        }
        let value: Value = serde_json::from_str(&response).map_err(|e| {
            Error::Backend(format!("{:?}: malformed response: {e}", self.program))
        })?;
        if let Some(msg) = value.get("error") {
            let msg = msg.as_str().map(str::to_string).unwrap_or_else(|| msg.to_string());
            return Err(Error::Backend(format!("{:?}: {msg}", self.program)));
        }
        Ok(value)
    }

    fn field<T: serde::de::DeserializeOwned>(&self, value: Value, key: &str) -> Result<T> {
        let inner = value
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("{:?}: response lacks {key:?}", self.program)))?;
        serde_json::from_value(inner)
            .map_err(|e| Error::Backend(format!("{:?}: bad {key:?}: {e}", self.program)))
    }

    fn embedding(&self, value: Value) -> Result<EmbeddingVector> {
        let values: Vec<f64> = self.field(value, "embedding")?;
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        EmbeddingVector::from_f64(&values, self.model_id.clone())
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

impl EmbeddingBackend for ExternalBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::Validation("cannot embed empty text".into()));
        }
        let v = self.request(json!({"op": "embed_text", "text": text}))?;
        self.embedding(v)
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let v = self.request(json!({"op": "embed_image", "pixels": image.pixels}))?;
        self.embedding(v)
    }
}

impl Infiller for ExternalBackend {
    fn infill(&self, sentence: &str, top_k: usize) -> Result<Vec<String>> {
        let v = self.request(json!({"op": "infill", "sentence": sentence, "top_k": top_k}))?;
        self.field(v, "candidates")
    }
}

impl SentenceScorer for ExternalBackend {
    fn token_log_probs(&self, sentence: &str) -> Result<Vec<f64>> {
        let v = self.request(json!({"op": "token_log_probs", "sentence": sentence}))?;
        self.field(v, "log_probs")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(body: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backend.sh");
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        let path = path.to_string_lossy().into_owned();
        (dir, path)
    }

    /// Answers info, then a fixed embedding for every other request.
    const ECHO: &str = r#"while read -r line; do
  case "$line" in
    *'"info"'*) echo '{"model_id":"ext-test","dim":2}' ;;
    *'"infill"'*) echo '{"candidates":["Big","small"]}' ;;
    *'"token_log_probs"'*) echo '{"log_probs":[-1.0,-2.0]}' ;;
    *'"crash"'*) exit 1 ;;
    *'bad'*) echo '{"error":"refused"}' ;;
    *) echo '{"embedding":[3.0,4.0]}' ;;
  esac
done"#;

    #[test]
    fn speaks_the_line_protocol() {
        let (_dir, path) = script(ECHO);
        let b = ExternalBackend::spawn("sh", &[path]).unwrap();
        assert_eq!(b.model_id(), "ext-test");
        assert_eq!(b.dim(), 2);
        let v = b.embed_text("grey hair").unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-6);
        let v = b.embed_image(&Image::new(vec![1.0, 2.0])).unwrap();
        assert_eq!(v.model_id(), "ext-test");
        assert_eq!(b.infill("[MASK] nose", 2).unwrap(), ["Big", "small"]);
        assert_eq!(b.token_log_probs("x").unwrap(), [-1.0, -2.0]);
    }

    #[test]
    fn error_responses_are_backend_errors() {
        let (_dir, path) = script(ECHO);
        let b = ExternalBackend::spawn("sh", &[path]).unwrap();
        let err = b.embed_text("bad text").unwrap_err();
        assert!(err.is_backend(), "{err}");
        assert!(err.to_string().contains("refused"));
        let err = b.embed_text("crash").unwrap_err();
        assert!(err.is_backend());
    }

    #[test]
    fn missing_program_is_a_backend_error() {
        let err = ExternalBackend::spawn("/nonexistent/backend-binary", &[]).unwrap_err();
        assert!(err.is_backend());
    }
}
