//! Binary checkpoints: magic header, format version, then named tensors with
//! their shapes and little-endian 32-bit float values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Parameterized;

pub const MAGIC: &[u8; 8] = b"BITLOCCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &dyn Parameterized) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut count = 0u32;
    model.visit_params(&mut |_| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.visit_params(&mut |p| {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.value {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Loads values into `model`; names and shapes must match exactly and in order.
pub fn from_bytes(model: &mut dyn Parameterized, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values: Vec<f64> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    let mut expected = 0;
    model.visit_params(&mut |_| expected += 1);
    if expected != count {
        return Err(Error::Checkpoint(format!("model has {expected} tensors, checkpoint has {count}")));
    }
    let mut k = 0;
    let mut mismatch = None;
    model.visit_params(&mut |p| {
        let (name, shape, _) = &tensors[k];
        if mismatch.is_none() && (name != &p.name || shape != &p.shape) {
            mismatch = Some(format!("tensor {k}: expected {} {:?}, found {name} {shape:?}", p.name, p.shape));
        }
        k += 1;
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    let mut k = 0;
    model.visit_params_mut(&mut |p| {
        p.value.copy_from_slice(&tensors[k].2);
        k += 1;
    });
    Ok(())
}

pub fn save(model: &dyn Parameterized, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(model: &mut dyn Parameterized, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    from_bytes(model, &bytes)
}
