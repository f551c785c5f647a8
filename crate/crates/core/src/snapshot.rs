//! Parameter snapshot files: a plain-text header listing tensor names and
//! shapes behind the magic string `NPLAB1`, followed by the concatenated
//! little-endian `f64` buffers.
//!
//! ```text
//! NPLAB1
//! tensors=3
//! dense0.w 2 20
//! dense0.b 1 20
//! dense1.w 20 1
//! data
//! <raw little-endian f64 payload>
//! ```

use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &str = "NPLAB1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {MAGIC}, got {0:?}")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload truncated: expected {expected} doubles, got {got}")]
    Truncated { expected: usize, got: usize },
}

pub fn write_named(path: &Path, entries: &[(String, Tensor)]) -> Result<(), SnapshotError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors={}", entries.len())?;
    for (name, t) in entries {
        debug_assert!(!name.contains(char::is_whitespace));
        write!(w, "{name}")?;
        for d in t.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "data")?;
    for (_, t) in entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_named(path: &Path) -> Result<Vec<(String, Tensor)>, SnapshotError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    // The header is ASCII lines up to and including "data\n".
    let mut pos = 0;
    let mut next_line = |bytes: &[u8]| -> Result<String, SnapshotError> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(SnapshotError::Header("unterminated header line".into()));
        }
        let line = String::from_utf8(bytes[start..pos].to_vec())
            .map_err(|_| SnapshotError::Header("non-utf8 header".into()))?;
        pos += 1;
        Ok(line)
    };

    let magic = next_line(&bytes)?;
    if magic != MAGIC {
        return Err(SnapshotError::BadMagic(magic));
    }
    let count_line = next_line(&bytes)?;
    let count: usize = count_line
        .strip_prefix("tensors=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| SnapshotError::Header(format!("bad count line {count_line:?}")))?;

    let mut metas = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&bytes)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| SnapshotError::Header("empty tensor line".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| SnapshotError::Header(format!("bad extent {p:?}")))
            })
            .collect::<Result<_, _>>()?;
        metas.push((name, shape));
    }
    let data_line = next_line(&bytes)?;
    if data_line != "data" {
        return Err(SnapshotError::Header(format!(
            "expected data marker, got {data_line:?}"
        )));
    }

    let payload = &bytes[pos..];
    let total: usize = metas.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(SnapshotError::Truncated {
            expected: total,
            got: payload.len() / 8,
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut off = 0;
    for (name, shape) in metas {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[(off + k) * 8..(off + k + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        off += n;
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}
