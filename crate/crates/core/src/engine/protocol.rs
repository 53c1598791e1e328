//! Framed JSON protocol spoken with subprocess UDFs.
//!
//! Every frame is a 4-byte big-endian length followed by a UTF-8 JSON body.
//! The runner sends `hello`, the child answers `schema`; then each `batch`
//! is answered by a `result`, and `end` asks the child to exit 0.

use std::io::{BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value as Json};

use super::udf::{BatchRow, UdfSpec};
use crate::error::{Error, Result};
use crate::table::{ColumnType, Value};

pub const PROTOCOL_VERSION: u64 = 1;
/// Frames larger than this are treated as a corrupt stream.
pub const MAX_FRAME: u32 = 1 << 30;

pub fn write_frame(w: &mut impl Write, msg: &Json) -> std::io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

#[derive(Debug)]
pub enum FrameError {
    /// Clean end of stream before a length prefix.
    Eof,
    Io(std::io::Error),
    Malformed(String),
}

pub fn read_frame(r: &mut impl Read) -> std::result::Result<Json, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Eof),
            Ok(0) => return Err(FrameError::Malformed("stream ended inside a length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrameError::Io(e)),
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(FrameError::Malformed(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FrameError::Malformed("stream ended inside a frame".into()),
        _ => FrameError::Io(e),
    })?;
    serde_json::from_slice(&body).map_err(|e| FrameError::Malformed(format!("frame is not JSON: {e}")))
}

fn message_type(msg: &Json) -> &str {
    msg.get("type").and_then(Json::as_str).unwrap_or("")
}

/// JSON form of one batch row.
pub fn row_json(row: &BatchRow, needs_sample_bytes: bool) -> Json {
    let mut obj = serde_json::Map::new();
    obj.insert("uid".into(), Json::String(row.uid.clone()));
    if needs_sample_bytes {
        let b64 = row
            .sample
            .as_ref()
            .map(|s| base64::engine::general_purpose::STANDARD.encode(s))
            .unwrap_or_default();
        obj.insert("sample_b64".into(), Json::String(b64));
    }
    let attrs: serde_json::Map<String, Json> = row
        .attrs
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect();
    obj.insert("attrs".into(), Json::Object(attrs));
    Json::Object(obj)
}

/// Parses a declared column from a `schema` message: `type` may be
/// `fvec` with a separate `dim`, or `fvec(64)` / `fvec:64`.
fn declared_type(col: &Json) -> Option<(String, ColumnType)> {
    let name = col.get("name")?.as_str()?.to_string();
    let ty = col.get("type")?.as_str()?;
    let dim = col.get("dim").and_then(Json::as_u64).unwrap_or(0);
    let ty = if ty == "fvec" {
        format!("fvec:{dim}").parse().ok()?
    } else {
        ty.parse().ok()?
    };
    Some((name, ty))
}

/// A running UDF child.
pub struct UdfProcess {
    udf: String,
    child: Child,
    /// Frames go through a writer thread so a child that stops reading
    /// cannot block us past the timeout.
    stdin: Option<mpsc::Sender<Vec<u8>>>,
    frames: Receiver<std::result::Result<Json, FrameError>>,
    stderr: Arc<Mutex<Vec<u8>>>,
    timeout: Duration,
    outputs: Vec<(String, ColumnType)>,
    needs_sample_bytes: bool,
}

impl UdfProcess {
    /// Spawns the command and performs the hello/schema handshake.
    pub fn spawn(spec: &UdfSpec, params: &crate::expr::Params, timeout: Duration) -> Result<Self> {
        let argv = spec.command().ok_or_else(|| Error::UnknownUdf(spec.udf_id.clone()))?;
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::BadArgument("empty UDF command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::UdfCrashed {
                udf: spec.udf_id.clone(),
                diagnostics: format!("failed to start {program:?}: {e}"),
            })?;
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                let frame = read_frame(&mut r);
                let stop = frame.is_err();
                if tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        let stderr_buf = Arc::new(Mutex::new(Vec::new()));
        {
            let mut stderr = child.stderr.take().expect("piped");
            let buf = Arc::clone(&stderr_buf);
            std::thread::spawn(move || {
                let mut chunk = [0u8; 4096];
                while let Ok(n) = stderr.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    let mut b = buf.lock().unwrap();
                    b.extend_from_slice(&chunk[..n]);
                    // Keep only the tail.
                    if b.len() > 64 * 1024 {
                        let cut = b.len() - 64 * 1024;
                        b.drain(..cut);
                    }
                }
            });
        }
        let stdin = {
            let mut pipe = child.stdin.take().expect("piped");
            let (tx, rx) = mpsc::channel::<Vec<u8>>();
            std::thread::spawn(move || {
                for frame in rx {
                    if pipe.write_all(&frame).and_then(|_| pipe.flush()).is_err() {
                        break;
                    }
                }
            });
            Some(tx)
        };
        let mut p = UdfProcess {
            udf: spec.udf_id.clone(),
            child,
            stdin,
            frames: rx,
            stderr: stderr_buf,
            timeout,
            outputs: spec.outputs.iter().map(|f| (f.name.clone(), f.ty)).collect(),
            needs_sample_bytes: spec.needs_sample_bytes,
        };
        let mut hello = json!({
            "type": "hello",
            "proto": PROTOCOL_VERSION,
            "input_columns": spec.input_columns,
            "needs_sample_bytes": spec.needs_sample_bytes,
        });
        if !params.is_empty() {
            hello["params"] = Json::Object(params.iter().map(|(k, v)| (k.clone(), v.to_json())).collect());
        }
        p.send(&hello)?;
        let schema = p.recv()?;
        if message_type(&schema) != "schema" {
            return Err(p.violation(format!("expected schema message, got {schema}")));
        }
        let declared: Option<Vec<(String, ColumnType)>> = schema
            .get("columns")
            .and_then(Json::as_array)
            .map(|cols| cols.iter().map(declared_type).collect::<Option<Vec<_>>>())
            .unwrap_or(None);
        match declared {
            Some(d) if d == p.outputs => Ok(p),
            Some(d) => {
                let show = |v: &[(String, ColumnType)]| {
                    v.iter().map(|(n, t)| format!("{n}:{t}")).collect::<Vec<_>>().join(", ")
                };
                Err(p.violation(format!(
                    "child declared [{}] but the spec expects [{}]",
                    show(&d),
                    show(&p.outputs)
                )))
            }
            None => Err(p.violation(format!("malformed schema message {schema}"))),
        }
    }

    fn violation(&mut self, msg: String) -> Error {
        let _ = self.child.kill();
        let _ = self.child.wait();
        Error::ProtocolViolation(format!("{}: {msg}", self.udf))
    }

    fn diagnostics(&mut self, what: &str) -> String {
        // Give the child a moment to finish dying so the status is known.
        let mut status = None;
        for _ in 0..50 {
            if let Ok(Some(s)) = self.child.try_wait() {
                status = Some(s);
                break;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        if status.is_none() {
            let _ = self.child.kill();
            status = self.child.wait().ok();
        }
        std::thread::sleep(Duration::from_millis(20));
        let stderr = String::from_utf8_lossy(&self.stderr.lock().unwrap()).trim().to_string();
        let status = status.map_or("unknown".to_string(), |s| s.to_string());
        if stderr.is_empty() {
            format!("{what}; {status}")
        } else {
            format!("{what}; {status}; stderr: {stderr}")
        }
    }

    fn crashed(&mut self, what: &str) -> Error {
        Error::UdfCrashed {
            udf: self.udf.clone(),
            diagnostics: self.diagnostics(what),
        }
    }

    fn send(&mut self, msg: &Json) -> Result<()> {
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(self.crashed("input stream closed"));
        };
        let mut frame = Vec::new();
        write_frame(&mut frame, msg).map_err(|e| Error::InvariantViolation(format!("encoding frame: {e}")))?;
        if stdin.send(frame).is_err() {
            return Err(self.crashed("write failed"));
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Json> {
        match self.frames.recv_timeout(self.timeout) {
            Ok(Ok(msg)) => Ok(msg),
            Ok(Err(FrameError::Eof)) | Err(RecvTimeoutError::Disconnected) => {
                Err(self.crashed("output stream ended"))
            }
            Ok(Err(FrameError::Io(e))) => Err(self.crashed(&format!("read failed: {e}"))),
            Ok(Err(FrameError::Malformed(m))) => {
                // A dying child often leaves a torn frame behind.
                if let Ok(Some(status)) = self.child.try_wait() {
                    if !status.success() {
                        return Err(self.crashed(&m));
                    }
                }
                Err(self.violation(m))
            }
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(Error::Timeout {
                    udf: self.udf.clone(),
                    secs: self.timeout.as_secs(),
                })
            }
        }
    }

    /// Sends one batch and returns one value vector per output column.
    pub fn run_batch(&mut self, rows: &[BatchRow]) -> Result<Vec<Vec<Value>>> {
        let msg = json!({
            "type": "batch",
            "rows": rows.iter().map(|r| row_json(r, self.needs_sample_bytes)).collect::<Vec<_>>(),
        });
        self.send(&msg)?;
        let reply = self.recv()?;
        if message_type(&reply) != "result" {
            return Err(self.violation(format!("expected result message, got type {:?}", message_type(&reply))));
        }
        let Some(columns) = reply.get("values").and_then(Json::as_array) else {
            return Err(self.violation("result without a values array".into()));
        };
        if columns.len() != self.outputs.len() {
            return Err(self.violation(format!(
                "result has {} columns, expected {}",
                columns.len(),
                self.outputs.len()
            )));
        }
        let mut out = Vec::with_capacity(columns.len());
        for (col, (name, ty)) in columns.iter().zip(&self.outputs) {
            let bad = |reason: String| Error::UdfBadOutput {
                udf: self.udf.clone(),
                reason: format!("column {name}: {reason}"),
            };
            let items = col.as_array().ok_or_else(|| bad("not an array".into()))?;
            if items.len() != rows.len() {
                return Err(bad(format!("{} values for {} rows", items.len(), rows.len())));
            }
            let values = items
                .iter()
                .map(|v| Value::from_json_typed(v, *ty).map_err(|_| bad(format!("value {v} is not {ty}"))))
                .collect::<Result<Vec<_>>>()?;
            out.push(values);
        }
        Ok(out)
    }

    /// Sends `end` and waits for a clean exit.
    pub fn finish(mut self) -> Result<()> {
        self.send(&json!({"type": "end"}))?;
        drop(self.stdin.take());
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(s)) if s.success() => return Ok(()),
                Ok(Some(_)) => return Err(self.crashed("nonzero exit after end")),
                Ok(None) if std::time::Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(5))
                }
                Ok(None) => {
                    let _ = self.child.kill();
                    return Err(Error::Timeout {
                        udf: self.udf.clone(),
                        secs: self.timeout.as_secs(),
                    });
                }
                Err(e) => return Err(Error::io(format!("waiting for UDF {}", self.udf), e)),
            }
        }
    }
}

impl Drop for UdfProcess {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Runs `batches` through one child process; values are concatenated per
/// output column in batch order.
pub fn run_udf_subprocess(
    spec: &UdfSpec,
    params: &crate::expr::Params,
    batches: &[Vec<BatchRow>],
    timeout: Duration,
) -> Result<Vec<Vec<Value>>> {
    let mut p = UdfProcess::spawn(spec, params, timeout)?;
    let mut out = vec![Vec::new(); spec.outputs.len()];
    for batch in batches {
        for (acc, col) in out.iter_mut().zip(p.run_batch(batch)?) {
            acc.extend(col);
        }
    }
    p.finish()?;
    Ok(out)
}
