//! Named-tensor checkpoint file.
//!
//! Layout (little-endian): magic `DCAW`, `u32` version, then records until
//! end of file. Each record is a `u32` name length, the UTF-8 name, a `u32`
//! rank, `rank` extents as `u64`, and the values as `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::io::{put_string, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCAW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in records {
        put_string(&mut buf, name);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut out = Vec::new();
    while !r.is_at_end() {
        let name = r.string()?;
        let rank_at = r.offset();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format {
                offset: rank_at,
                message: format!("implausible rank {rank} for {name}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.extent()?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let payload_at = r.offset();
        let n = n
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format {
                offset: payload_at,
                message: format!("payload of {name} {shape:?} exceeds file"),
            })?;
        let data = r.f32_values(n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(path: &Path, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(records))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&fs::read(path)?)
}
