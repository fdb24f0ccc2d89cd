//! Binary checkpoint format.
//!
//! ```text
//! "ADND" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 data
//! ```
//!
//! All integers and floats are little-endian. Values are stored at 32-bit
//! precision.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Adand;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADND";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank of {name} exceeds 255")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into named tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let start = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: start + 2, detail: format!("tensor {i}: name is not UTF-8") })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            offset: start,
            detail: format!("tensor {name}: shape {shape:?} overflows"),
        })?;
        let raw = r.take(n.saturating_mul(4), &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, detail: "trailing bytes".into() });
    }
    Ok(out)
}

pub fn save(model: &Adand, path: &Path) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    fs::write(path, encode(&named)?)?;
    Ok(())
}

/// Loads a checkpoint into a model built from `config`; every tensor name and
/// shape must match that model exactly.
pub fn load(path: &Path, config: &ModelConfig) -> Result<Adand> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, config)
}

pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Adand> {
    let mut model = Adand::new(config.clone())?;
    let tensors = decode(bytes)?;
    let expected = model.params().len();
    if tensors.len() != expected {
        return Err(Error::Format {
            offset: 8,
            detail: format!("{} tensors in file, model has {expected}", tensors.len()),
        });
    }
    let ids: Vec<_> = model.params().ids().collect();
    let mut values = Vec::with_capacity(expected);
    for (id, (name, t)) in ids.into_iter().zip(tensors) {
        let want = model.params().name(id);
        if name != want {
            return Err(Error::Format { offset: 12, detail: format!("tensor {name} found where {want} was expected") });
        }
        let shape = model.params().get(id).shape();
        if t.shape() != shape {
            return Err(Error::Format {
                offset: 12,
                detail: format!("tensor {name}: shape {:?} does not match expected {shape:?}", t.shape()),
            });
        }
        values.push(t);
    }
    model.params_mut().set_tensors(values);
    Ok(model)
}
