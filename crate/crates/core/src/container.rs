//! Binary container used for checkpoints and extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ATNC"  u32 version=1  u32 section_count
//! per section:
//!   u32 name_len, name (UTF-8)
//!   u8 kind (0 = text, 1 = f32 tensor)
//!   u32 ndim, ndim × u64 dims        (ndim = 0 for text)
//!   u64 payload_len, payload         (text bytes, or f32 LE values)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATNC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    Text(String),
    Tensor { shape: Vec<usize>, data: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    sections: Vec<(String, SectionData)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self, name: &str, text: impl Into<String>) {
        self.sections.push((name.to_string(), SectionData::Text(text.into())));
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.sections.push((
            name.to_string(),
            SectionData::Tensor {
                shape: shape.to_vec(),
                data,
            },
        ));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    fn find(&self, name: &str) -> Result<&SectionData> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Data(format!("container has no section `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.find(name)? {
            SectionData::Text(t) => Ok(t),
            _ => Err(Error::Data(format!("section `{name}` is not text"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.find(name)? {
            SectionData::Tensor { shape, data } => Ok((shape, data)),
            _ => Err(Error::Data(format!("section `{name}` is not a tensor"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match data {
                SectionData::Text(t) => {
                    out.push(0);
                    out.extend_from_slice(&0u32.to_le_bytes());
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
                SectionData::Tensor { shape, data } => {
                    out.push(1);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not an ATNC container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported container version {version}")));
        }
        let n = r.u32()?;
        let mut c = Container::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Data("section name is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let plen = r.u64()? as usize;
            let payload = r.take(plen)?;
            let data = match kind {
                0 => SectionData::Text(
                    String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Data(format!("section `{name}` is not UTF-8")))?,
                ),
                1 => {
                    let values: Vec<f32> = payload
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    if plen % 4 != 0 || values.len() != shape.iter().product::<usize>() {
                        return Err(Error::Data(format!("tensor `{name}` size mismatch")));
                    }
                    SectionData::Tensor {
                        shape,
                        data: values,
                    }
                }
                k => return Err(Error::Data(format!("unknown section kind {k}"))),
            };
            c.sections.push((name, data));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(text in ".{0,40}", data in proptest::collection::vec(-1e6f32..1e6, 0..50)) {
            let mut c = Container::new();
            c.push_text("meta", text.clone());
            c.push_tensor("w", &[data.len()], data.clone());
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.text("meta").unwrap(), text.as_str());
            prop_assert_eq!(back.tensor("w").unwrap().1, data.as_slice());
        }
    }

    #[test]
    fn truncated_rejected() {
        let mut c = Container::new();
        c.push_tensor("w", &[2], vec![1.0, 2.0]);
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Container::from_bytes(b"XXXX").is_err());
    }
}
