//! Evaluation and cost accounting: top-1 accuracy, communication bytes,
//! cumulative MACs, and structured metrics emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::factorize::count_params;
use crate::modelspec::ModelSpec;
use crate::nn::model::Model;

/// One metrics row: a capability level's view of one communication round.
///
/// `seconds` is simulated compute time (this round's training MACs at a
/// nominal 1 GMAC/s device), so the metrics stream is bit-reproducible;
/// real wall-clock time goes to the console, not the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub level: usize,
    pub params: u64,
    pub acc_top1: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub cum_macs: u64,
    pub seconds: f64,
}

impl RoundRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        round: usize,
        level: usize,
        params: u64,
        acc_top1: f64,
        bytes_up: u64,
        bytes_down: u64,
        cum_macs: u64,
        seconds: f64,
    ) -> Self {
        RoundRecord {
            round,
            level,
            params,
            acc_top1: quantize6(acc_top1),
            bytes_up,
            bytes_down,
            cum_macs,
            seconds: quantize6(seconds),
        }
    }
}

/// Rounds to six decimal places, the emission precision, so records
/// round-trip exactly through their file form.
fn quantize6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("fixed-point format parses")
}

const EVAL_BATCH: usize = 256;

/// Fraction of samples whose argmax logit equals the label. Evaluation runs
/// the model in eval mode (batch-norm running statistics); argmax ties break
/// toward the lowest class index.
pub fn evaluate_top1(model: &Model, data: &Dataset) -> Result<f64> {
    let classes = model.spec.classes;
    if data.classes > classes {
        return Err(Error::dimension(format!(
            "dataset has {} classes but model outputs {classes}",
            data.classes
        )));
    }
    let n = data.len();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.gather(chunk);
        let logits = model.forward_eval(&x)?;
        if logits.shape() != [chunk.len(), classes] {
            return Err(Error::dimension(format!(
                "model produced {:?} logits",
                logits.shape()
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            let slice = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            let mut best_v = slice[0];
            for (j, &v) in slice.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Wire size of a model's parameters: 4 bytes per parameter (32-bit wire
/// format, independent of compute precision). The serialized file container
/// adds its own header on top of this payload figure.
pub fn comm_bytes(spec: &ModelSpec) -> u64 {
    4 * count_params(spec) as u64
}

/// Parameter ratio of a compressed spec against its full counterpart.
pub fn comm_ratio(compressed: &ModelSpec, full: &ModelSpec) -> f64 {
    count_params(compressed) as f64 / count_params(full) as f64
}

/// Output format for the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmitFormat {
    Csv,
    JsonLines,
}

pub const CSV_HEADER: &str = "round,level,params,acc_top1,bytes_up,bytes_down,cum_macs,seconds";

/// Writes records in a stable format: CSV columns in fixed order with six
/// decimal places, or JSON lines mirroring the same fields.
pub fn emit(records: &[RoundRecord], path: &Path, format: EmitFormat) -> Result<()> {
    let mut out = String::new();
    match format {
        EmitFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in records {
                out.push_str(&format!(
                    "{},{},{},{:.6},{},{},{},{:.6}\n",
                    r.round,
                    r.level,
                    r.params,
                    r.acc_top1,
                    r.bytes_up,
                    r.bytes_down,
                    r.cum_macs,
                    r.seconds
                ));
            }
        }
        EmitFormat::JsonLines => {
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a CSV metrics file back into records.
pub fn parse_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::format(0, format!("bad metrics header: {other:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::format(
                (i + 2) as u64,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let parse_err = |f: &str| Error::format((i + 2) as u64, format!("bad field `{f}`"));
        out.push(RoundRecord {
            round: fields[0].parse().map_err(|_| parse_err(fields[0]))?,
            level: fields[1].parse().map_err(|_| parse_err(fields[1]))?,
            params: fields[2].parse().map_err(|_| parse_err(fields[2]))?,
            acc_top1: fields[3].parse().map_err(|_| parse_err(fields[3]))?,
            bytes_up: fields[4].parse().map_err(|_| parse_err(fields[4]))?,
            bytes_down: fields[5].parse().map_err(|_| parse_err(fields[5]))?,
            cum_macs: fields[6].parse().map_err(|_| parse_err(fields[6]))?,
            seconds: fields[7].parse().map_err(|_| parse_err(fields[7]))?,
        });
    }
    Ok(out)
}

/// Parses a JSON-lines metrics file back into records.
pub fn parse_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::format((i + 1) as u64, format!("bad json line: {e}")))?,
        );
    }
    Ok(out)
}
