//! Binary dFCN file.
//!
//! Layout (little-endian): magic `DFCN`, `u32` version, `T` and `N` as
//! `u64`, `T·N·N` `f32` values in `(t, i, j)` order, then the metadata
//! block: subject id and scan id (each a `u32` byte length plus UTF-8) and
//! the class label as `u32`.

use std::fs;
use std::path::Path;

use super::DfcnTensor;
use crate::error::{Error, Result};
use crate::io::{put_string, ByteReader};

pub const DFCN_MAGIC: &[u8; 4] = b"DFCN";
pub const DFCN_VERSION: u32 = 1;

pub fn encode_dfcn(t: &DfcnTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 4 * t.values.len() + 64);
    buf.extend_from_slice(DFCN_MAGIC);
    buf.extend_from_slice(&DFCN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.windows as u64).to_le_bytes());
    buf.extend_from_slice(&(t.regions as u64).to_le_bytes());
    for &v in &t.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    put_string(&mut buf, &t.subject_id);
    put_string(&mut buf, &t.scan_id);
    buf.extend_from_slice(&(t.label as u32).to_le_bytes());
    buf
}

/// Decodes a dFCN file. The degeneracy flag is recovered from zero diagonal
/// entries, which only zero-variance regions produce.
pub fn decode_dfcn(bytes: &[u8]) -> Result<DfcnTensor> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DFCN_MAGIC)?;
    let version = r.u32()?;
    if version != DFCN_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DFCN_VERSION,
        });
    }
    let windows = r.extent()?;
    let regions = r.extent()?;
    let at = r.offset();
    let n = windows
        .checked_mul(regions)
        .and_then(|v| v.checked_mul(regions))
        .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::Format {
            offset: at,
            message: format!("{windows}×{regions}×{regions} payload exceeds file"),
        })?;
    let values = r.f32_values(n)?;
    let subject_id = r.string()?;
    let scan_id = r.string()?;
    let label = r.u32()? as usize;
    if !r.is_at_end() {
        return Err(Error::Format {
            offset: r.offset(),
            message: "trailing bytes after metadata".into(),
        });
    }
    let degenerate = (0..windows).any(|t| (0..regions).any(|i| values[(t * regions + i) * regions + i] == 0.0));
    Ok(DfcnTensor {
        subject_id,
        scan_id,
        label,
        windows,
        regions,
        values,
        degenerate,
    })
}

pub fn write_dfcn(path: &Path, t: &DfcnTensor) -> Result<()> {
    fs::write(path, encode_dfcn(t))?;
    Ok(())
}

pub fn read_dfcn(path: &Path) -> Result<DfcnTensor> {
    decode_dfcn(&fs::read(path)?)
}
