//! Network checkpoints: one JSON header line, then the parameters as
//! little-endian `f64` in layout order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpSpec, NnError, ParameterVector};
use crate::scalar::Scalar;

pub const CHECKPOINT_SCHEMA: &str = "startsel.mlp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const LAYOUT: &str = "layer-major; weights row-major (fan_out x fan_in) then bias; f64 little-endian";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
    spec: MlpSpec,
    layout: String,
    parameter_count: usize,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    spec: &MlpSpec,
    params: &ParameterVector<T>,
) -> Result<(), NnError> {
    spec.check_params(params)?;
    let header = Header {
        schema: CHECKPOINT_SCHEMA.to_string(),
        version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        layout: LAYOUT.to_string(),
        parameter_count: params.len(),
    };
    let line = serde_json::to_string(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for v in params.as_slice() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<(MlpSpec, ParameterVector<T>), NnError> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
    if header.schema != CHECKPOINT_SCHEMA || header.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported schema {} v{} (expected {CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION})",
            header.schema, header.version
        )));
    }
    if header.parameter_count != header.spec.parameter_count() {
        return Err(NnError::Checkpoint(format!(
            "header parameter_count {} does not match spec ({})",
            header.parameter_count,
            header.spec.parameter_count()
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != header.parameter_count * 8 {
        return Err(NnError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.parameter_count * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Ok((header.spec, ParameterVector { values }))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, spec: &MlpSpec, params: &ParameterVector<T>) -> Result<(), NnError> {
    write_checkpoint(BufWriter::new(File::create(path)?), spec, params)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(MlpSpec, ParameterVector<T>), NnError> {
    read_checkpoint(File::open(path)?)
}
