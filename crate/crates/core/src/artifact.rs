//! Shared plumbing for sidecar artifacts (codecs, checkpoints).
//!
//! Same envelope as the LNV raster format: one JSON header line, then a raw
//! little-endian `f32` payload. Each artifact type owns its header schema;
//! this module only moves bytes and keeps round-trips exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_artifact(path: &Path, header_line: &str, payload: &[f32]) -> Result<()> {
    debug_assert!(!header_line.contains('\n'));
    if let Some(index) = payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteVoxel { index });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(header_line.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_artifact(path: &Path) -> Result<(String, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => return Err(Error::header(path, "magic", "file ended before header newline")),
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                header_bytes.push(byte[0]);
                if header_bytes.len() > 1024 * 1024 {
                    return Err(Error::header(path, "magic", "header line exceeds 1 MiB"));
                }
            }
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    let header = String::from_utf8(header_bytes)
        .map_err(|_| Error::header(path, "magic", "header is not UTF-8"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() % 4 != 0 {
        return Err(Error::PayloadLengthMismatch {
            path: path.to_path_buf(),
            expected: payload.len() / 4 + 1,
            found: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}
