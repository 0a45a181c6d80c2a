//! MLP checkpoint format.
//!
//! ```text
//! QFILMLP v1 <tag> input=<i> width=<w> depth=<d> output=<o> count=<n>\n
//! <n little-endian scalars in the flat parameter layout>
//! ```
//!
//! `<tag>` is `f64` or `f32`. The payload is the raw parameter buffer, so a
//! write followed by a read reproduces every bit.

use super::{MlpArch, MlpParams, NumericsError};
use crate::scalar::Scalar;
use std::io::{Read, Write};

const MAGIC: &str = "QFILMLP v1";

pub fn write_checkpoint<T: Scalar, W: Write>(params: &MlpParams<T>, mut out: W) -> Result<(), NumericsError> {
    let a = params.arch();
    let data = params.as_slice();
    writeln!(
        out,
        "{MAGIC} {} input={} width={} depth={} output={} count={}",
        T::TAG,
        a.input,
        a.width,
        a.depth,
        a.output,
        data.len()
    )?;
    let mut buf = Vec::with_capacity(data.len() * T::BYTES);
    for &x in data {
        x.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<MlpParams<T>, NumericsError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NumericsError::Checkpoint("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| NumericsError::Checkpoint("header is not utf-8".into()))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| NumericsError::Checkpoint(format!("bad magic in {header:?}")))?;
    let mut fields = rest.split_whitespace();
    let tag = fields.next().unwrap_or_default();
    if tag != T::TAG {
        return Err(NumericsError::Checkpoint(format!("scalar type {tag}, expected {}", T::TAG)));
    }
    let mut get = |key: &str| -> Result<usize, NumericsError> {
        let field = fields
            .next()
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing {key}")))?;
        field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NumericsError::Checkpoint(format!("bad field {field:?}, expected {key}=<n>")))
    };
    let arch = MlpArch::new(get("input")?, get("width")?, get("depth")?, get("output")?);
    let count = get("count")?;
    let payload = &bytes[nl + 1..];
    if payload.len() != count * T::BYTES {
        return Err(NumericsError::Checkpoint(format!(
            "payload has {} bytes, header declares {} values",
            payload.len(),
            count
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    MlpParams::from_flat(arch, data)
}
