//! Identity plugin: answers every request from its own input. Useful as a
//! protocol reference and for conformance testing; the faults produce the
//! two classic malformed generations.

use std::io::{BufRead, Write};

use serde_json::{json, Value};

use super::adapter::{GenerateResult, Op, Request, Response, SparseRow};
use crate::serialization::{ExtractionInput, GenerationInput, PolicyInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EchoFault {
    #[default]
    None,
    /// Every row carries half its mass.
    ScaleRows,
    /// The last row is missing.
    DropRow,
}

fn parse<T: serde::de::DeserializeOwned>(payload: &Value) -> Result<T, String> {
    serde_json::from_value(payload.clone()).map_err(|e| format!("bad payload: {e}"))
}

fn answer(request: &Request, fault: EchoFault) -> Result<Value, String> {
    match request.op {
        Op::Generate => {
            let input: GenerationInput = parse(&request.payload)?;
            let tokens: Vec<String> = input.target.split_whitespace().map(str::to_string).collect();
            let mass = if fault == EchoFault::ScaleRows { 0.5 } else { 1.0 };
            let mut rows: Vec<SparseRow> = tokens
                .iter()
                .map(|t| SparseRow {
                    top: vec![(t.clone(), mass)],
                    tail: 0.0,
                })
                .collect();
            if fault == EchoFault::DropRow {
                rows.pop();
            }
            let result = GenerateResult {
                text: tokens.join(" "),
                tokens,
                rows: None,
                sparse_rows: Some(rows),
            };
            serde_json::to_value(result).map_err(|e| e.to_string())
        }
        Op::Extract => {
            let input: ExtractionInput = parse(&request.payload)?;
            Ok(json!({ "answer": input.context }))
        }
        Op::Score => {
            let _: PolicyInput = parse(&request.payload)?;
            Ok(json!({ "retain_probability": 0.5 }))
        }
        Op::TokenProb => Ok(json!({ "probability": 1.0 })),
        Op::Train => Ok(json!({ "loss": 0.0, "losses": [] })),
        Op::Save => {
            let path = request.payload["path"].as_str().ok_or("missing `path`")?;
            std::fs::write(path, b"echo").map_err(|e| format!("{path}: {e}"))?;
            Ok(json!({}))
        }
        Op::Load => {
            let path = request.payload["path"].as_str().ok_or("missing `path`")?;
            std::fs::read(path).map_err(|e| format!("{path}: {e}"))?;
            Ok(json!({}))
        }
    }
}

pub fn handle(request: &Request, fault: EchoFault) -> Response {
    match answer(request, fault) {
        Ok(v) => Response::success(v),
        Err(e) => Response::failure(e),
    }
}

/// Serve requests line by line until the input closes.
pub fn serve(input: impl BufRead, mut output: impl Write, fault: EchoFault) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(&req, fault),
            Err(e) => Response::failure(format!("malformed request: {e}")),
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}
