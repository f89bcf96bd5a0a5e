//! `FCSD1` dataset blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCSD1"
//! u32 C₀, u32 H, u32 W
//! u32 num_domains
//! u32 num_classes, then per class: u32 byte length, UTF-8 name
//! u64 train count, then per example: u32 label, u32 domain, C₀·H·W × f64
//! u64 eval count,  same record layout
//! ```

use std::io::{Read, Write};

use super::{DatagenError, Dataset, Example};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 5] = b"FCSD1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), DatagenError> {
    let v = u32::try_from(v).map_err(|_| DatagenError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn examples_out(w: &mut impl Write, xs: &[Example]) -> Result<(), DatagenError> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for e in xs {
        put_u32(w, e.label)?;
        put_u32(w, e.domain)?;
        for v in e.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> Result<(), DatagenError> {
    w.write_all(DATASET_MAGIC)?;
    for &e in &ds.image_shape {
        put_u32(w, e)?;
    }
    put_u32(w, ds.num_domains)?;
    put_u32(w, ds.class_names.len())?;
    for n in &ds.class_names {
        put_u32(w, n.len())?;
        w.write_all(n.as_bytes())?;
    }
    examples_out(w, &ds.train)?;
    examples_out(w, &ds.eval)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], DatagenError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| DatagenError::Format(format!("truncated blob: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize, DatagenError> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64, DatagenError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, DatagenError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn examples(&mut self, shape: [usize; 3], classes: usize, domains: usize) -> Result<Vec<Example>, DatagenError> {
        let n = self.u64()?;
        let pixels: usize = shape.iter().product();
        let mut out = Vec::new();
        for _ in 0..n {
            let label = self.u32()?;
            let domain = self.u32()?;
            if label >= classes || domain >= domains {
                return Err(DatagenError::Format(format!("example label {label} / domain {domain} out of range")));
            }
            let data = (0..pixels).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
            let image = Tensor::new(&shape, data).map_err(|e| DatagenError::Format(e.to_string()))?;
            out.push(Example { image, label, domain });
        }
        Ok(out)
    }
}

pub fn read_dataset(r: impl Read) -> Result<Dataset, DatagenError> {
    let mut rd = Reader { inner: r };
    let magic: [u8; 5] = rd.bytes()?;
    if &magic != DATASET_MAGIC {
        return Err(DatagenError::Format(format!("bad magic {magic:?}, expected FCSD1")));
    }
    let image_shape = [rd.u32()?, rd.u32()?, rd.u32()?];
    if image_shape.contains(&0) {
        return Err(DatagenError::Format("zero image extent".into()));
    }
    let num_domains = rd.u32()?;
    let classes = rd.u32()?;
    let mut class_names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = rd.u32()?;
        let mut buf = vec![0u8; len];
        rd.inner.read_exact(&mut buf).map_err(|e| DatagenError::Format(format!("truncated name: {e}")))?;
        class_names.push(String::from_utf8(buf).map_err(|e| DatagenError::Format(e.to_string()))?);
    }
    let train = rd.examples(image_shape, classes, num_domains)?;
    let eval = rd.examples(image_shape, classes, num_domains)?;
    let mut trailing = Vec::new();
    rd.inner.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(DatagenError::Format(format!("{} trailing bytes", trailing.len())));
    }
    Ok(Dataset { image_shape, class_names, num_domains, train, eval })
}
