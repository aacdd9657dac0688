//! Flat binary weight blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"APWB"  version u32 = 1  tag u8  count u32
//! count x { name_len u16, name utf-8, requires_grad u8,
//!           ndim u8, dims u32 x ndim, data f32 x prod(dims) }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"APWB";
const VERSION: u32 = 1;

pub fn encode(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(store.tag());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.requires_grad as u8);
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "not a weight blob (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported blob version {version}"),
        });
    }
    let mut store = ParamStore::new(r.u8("tag")?);
    let count = r.u32("parameter count")?;
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at + 2,
                detail: "parameter name is not utf-8".into(),
            })?
            .to_string();
        let requires_grad = r.u8("grad flag")? != 0;
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let mut t = Tensor::new(&shape, data)?;
        t.requires_grad = requires_grad;
        store.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            detail: "trailing bytes after the last parameter".into(),
        });
    }
    Ok(store)
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new(3);
        s.push("a", Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]).unwrap().with_grad());
        s.push("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 13 && offset < bytes.len()),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(decode(b"XXXX"), Err(Error::Parse { offset: 0, .. })));
    }
}
