//! `FCKP1` checkpoints.
//!
//! ```text
//! "FCKP1"
//! repeated to EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::numerics::Tensor;

use super::FedError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FCKP1";

pub fn write_checkpoint<'a>(w: &mut impl Write, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), FedError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in entries {
        let len = u32::try_from(name.len()).map_err(|_| FedError::Checkpoint(format!("name too long: {name:?}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize, what: &str) -> Result<[u8; N], FedError> {
    let end = *pos + N;
    let bytes = buf.get(*pos..end).ok_or_else(|| FedError::Checkpoint(format!("truncated {what} at byte {pos}")))?;
    *pos = end;
    Ok(bytes.try_into().expect("length checked"))
}

/// Reads every entry in file order.
pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>, FedError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if !buf.starts_with(CHECKPOINT_MAGIC) {
        return Err(FedError::Checkpoint("missing FCKP1 magic".into()));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut out = Vec::new();
    while pos < buf.len() {
        let len = u32::from_le_bytes(take(&buf, &mut pos, "name length")?) as usize;
        let name_bytes = buf.get(pos..pos + len).ok_or_else(|| FedError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| FedError::Checkpoint("name is not UTF-8".into()))?;
        pos += len;
        let rank = u32::from_le_bytes(take(&buf, &mut pos, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&buf, &mut pos, "extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        if n == 0 || buf.len().saturating_sub(pos) / 8 < n {
            return Err(FedError::Checkpoint(format!("bad or truncated tensor {name:?} with shape {shape:?}")));
        }
        let data = (0..n).map(|_| take(&buf, &mut pos, "value").map(f64::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}
