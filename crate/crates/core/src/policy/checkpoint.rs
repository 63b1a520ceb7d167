//! Policy checkpoints: one JSON header line describing the layout, followed
//! by the parameter table as little-endian `f64`s.

use std::io::{BufRead, Write};

use super::{PolicyShape, SoftmaxPolicy};
use crate::error::{HillError, Result};

const MAGIC: &str = "hill-policy-v1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format: String,
    shape: PolicyShape,
    n_params: usize,
}

pub fn write_checkpoint<W: Write>(policy: &SoftmaxPolicy, mut w: W) -> Result<()> {
    let header = Header {
        format: MAGIC.to_string(),
        shape: policy.shape(),
        n_params: policy.n_params(),
    };
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    let mut bytes = line;
    bytes.reserve(policy.n_params() * 8);
    for p in policy.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&bytes)
        .map_err(|e| HillError::Checkpoint(e.to_string()))
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<SoftmaxPolicy> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| HillError::Checkpoint(e.to_string()))?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| HillError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != MAGIC {
        return Err(HillError::Checkpoint(format!("unknown format {}", header.format)));
    }
    let mut shape = header.shape;
    shape.layout.finish();
    if shape.layout.n_params() != header.n_params {
        return Err(HillError::Checkpoint("layout does not match parameter count".into()));
    }
    let mut raw = Vec::with_capacity(header.n_params * 8);
    r.read_to_end(&mut raw)
        .map_err(|e| HillError::Checkpoint(e.to_string()))?;
    if raw.len() != header.n_params * 8 {
        return Err(HillError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    SoftmaxPolicy::from_params(shape.layout, params, shape.temperature, shape.max_len)
}
