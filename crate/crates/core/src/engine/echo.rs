//! Reference subprocess UDF.
//!
//! Echoes per-row facts about each sample: an `int64` output is the payload
//! length, `float64` the same as a float, `utf8` the uid, `bool` whether the
//! length is even, `fvec(d)` the first `d` bytes scaled to [0, 1] and
//! `bytes` the payload itself.
//!
//! ```text
//! df-echo-udf [--out name:type]... [--declare name:type]...   (or `df echo-udf ...`)
//!             [--mode ok|crash-mid|bad-rows|garbage|hang] [--after N]
//! ```
//!
//! `--declare` overrides what the handshake announces (to provoke a schema
//! mismatch); the failure modes trigger on batch `N` (default 1, zero-based).

use std::io::{self, BufReader, BufWriter};

use base64::Engine as _;
use super::protocol::{read_frame, write_frame, FrameError};
use crate::table::ColumnType;
use serde_json::{json, Value as Json};

#[derive(PartialEq)]
enum Mode {
    Ok,
    CrashMid,
    BadRows,
    Garbage,
    Hang,
}

struct Args {
    outputs: Vec<(String, ColumnType)>,
    declared: Option<Vec<(String, ColumnType)>>,
    mode: Mode,
    after: usize,
}

fn parse_column(s: &str) -> Result<(String, ColumnType), String> {
    let (name, ty) = s.split_once(':').ok_or(format!("expected name:type, got {s:?}"))?;
    Ok((name.to_string(), ty.parse().map_err(|e| format!("{e}"))?))
}

fn parse_args(argv: impl IntoIterator<Item = String>) -> Result<Args, String> {
    let mut args = Args {
        outputs: Vec::new(),
        declared: None,
        mode: Mode::Ok,
        after: 1,
    };
    let mut it = argv.into_iter();
    while let Some(flag) = it.next() {
        let mut value = || it.next().ok_or(format!("{flag} needs a value"));
        match flag.as_str() {
            "--out" => args.outputs.push(parse_column(&value()?)?),
            "--declare" => args
                .declared
                .get_or_insert_with(Vec::new)
                .push(parse_column(&value()?)?),
            "--mode" => {
                args.mode = match value()?.as_str() {
                    "ok" => Mode::Ok,
                    "crash-mid" => Mode::CrashMid,
                    "bad-rows" => Mode::BadRows,
                    "garbage" => Mode::Garbage,
                    "hang" => Mode::Hang,
                    other => return Err(format!("unknown mode {other:?}")),
                }
            }
            "--after" => args.after = value()?.parse().map_err(|_| "bad --after".to_string())?,
            other => return Err(format!("unknown flag {other:?}")),
        }
    }
    if args.outputs.is_empty() {
        args.outputs.push(("len".into(), ColumnType::Int64));
    }
    Ok(args)
}

fn describe(cols: &[(String, ColumnType)]) -> Json {
    Json::Array(
        cols.iter()
            .map(|(n, t)| json!({"name": n, "type": t.name(), "dim": t.dim()}))
            .collect(),
    )
}

fn compute(ty: ColumnType, uid: &str, sample: &[u8]) -> Json {
    match ty {
        ColumnType::Int64 => json!(sample.len()),
        ColumnType::Float64 => json!(sample.len() as f64),
        ColumnType::Bool => json!(sample.len() % 2 == 0),
        ColumnType::Utf8 => json!(uid),
        ColumnType::Bytes => json!(base64::engine::general_purpose::STANDARD.encode(sample)),
        ColumnType::FVec(d) => Json::Array(
            (0..d as usize)
                .map(|i| json!(sample.get(i).map_or(0.0, |&b| b as f64 / 255.0)))
                .collect(),
        ),
    }
}

fn run(args: Args) -> Result<(), String> {
    let mut input = BufReader::new(io::stdin().lock());
    let mut output = BufWriter::new(io::stdout().lock());
    let io_err = |e: io::Error| e.to_string();

    let hello = read_frame(&mut input).map_err(|e| format!("reading hello: {e:?}"))?;
    if hello["type"] != "hello" {
        return Err(format!("expected hello, got {hello}"));
    }
    let declared = args.declared.as_ref().unwrap_or(&args.outputs);
    write_frame(&mut output, &json!({"type": "schema", "columns": describe(declared)})).map_err(io_err)?;

    let mut batch_no = 0usize;
    loop {
        let msg = match read_frame(&mut input) {
            Ok(m) => m,
            Err(FrameError::Eof) => return Err("input closed without end".into()),
            Err(e) => return Err(format!("reading frame: {e:?}")),
        };
        match msg["type"].as_str() {
            Some("end") => return Ok(()),
            Some("batch") => {}
            _ => return Err(format!("unexpected message {msg}")),
        }
        let rows = msg["rows"].as_array().cloned().unwrap_or_default();
        let failing = batch_no == args.after;
        batch_no += 1;
        if failing {
            match args.mode {
                Mode::CrashMid => {
                    eprintln!("echo-udf: simulated crash on batch {}", batch_no - 1);
                    std::process::exit(3);
                }
                Mode::Garbage => {
                    use std::io::Write;
                    output.write_all(&[0, 0, 0, 9]).map_err(io_err)?;
                    output.write_all(b"not json!").map_err(io_err)?;
                    output.flush().map_err(io_err)?;
                    continue;
                }
                Mode::Hang => loop {
                    std::thread::sleep(std::time::Duration::from_secs(3600));
                },
                Mode::Ok | Mode::BadRows => {}
            }
        }
        let mut values: Vec<Vec<Json>> = Vec::new();
        for (_, ty) in &args.outputs {
            let mut col = Vec::with_capacity(rows.len());
            for row in &rows {
                let uid = row["uid"].as_str().unwrap_or("");
                let sample = row["sample_b64"]
                    .as_str()
                    .map(|s| base64::engine::general_purpose::STANDARD.decode(s))
                    .transpose()
                    .map_err(|e| e.to_string())?
                    .unwrap_or_default();
                col.push(compute(*ty, uid, &sample));
            }
            if failing && args.mode == Mode::BadRows {
                col.pop();
            }
            values.push(col);
        }
        write_frame(&mut output, &json!({"type": "result", "values": values})).map_err(io_err)?;
    }
}

/// Runs the echo UDF over stdin/stdout with `argv` (program name excluded)
/// and returns the process exit code.
pub fn main(argv: impl IntoIterator<Item = String>) -> u8 {
    let args = match parse_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("echo-udf: {e}");
            return 2;
        }
    };
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("echo-udf: {e}");
            1
        }
    }
}
