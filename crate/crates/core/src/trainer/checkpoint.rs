//! Versioned binary container of named sections.
//!
//! Layout: magic `GMCMLCK\0`, `u32` format version, `u32` section count,
//! then per section a `u32`-length UTF-8 name and a `u64`-length payload.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GMCMLCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sections {
    entries: Vec<(String, Vec<u8>)>,
}

impl Sections {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, payload: Vec<u8>) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => entry.1 = payload,
            None => self.entries.push((name.to_string(), payload)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
            let len = r.u64()? as usize;
            entries.push((name, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Cursor over a byte payload with truncation checks.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes named tensors: count, then name, rank, dims and values each.
pub fn encode_tensors(names: &[String], tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    out
}

/// Decodes into existing tensors, requiring matching names and shapes.
pub fn decode_tensors_into(section: &str, bytes: &[u8], names: &[String], targets: Vec<&mut Tensor>) -> Result<()> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    if count != targets.len() {
        return Err(Error::Checkpoint(format!(
            "`{section}` holds {count} tensors, model has {}",
            targets.len()
        )));
    }
    for (name, target) in names.iter().zip(targets) {
        let len = r.u32()? as usize;
        let stored = r.take(len)?;
        if stored != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "`{section}`: expected tensor `{name}`, found `{}`",
                String::from_utf8_lossy(stored)
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != target.shape() {
            return Err(Error::Checkpoint(format!(
                "`{section}.{name}`: stored shape {shape:?}, model shape {:?}",
                target.shape()
            )));
        }
        let data = r.f64s()?;
        if data.len() != target.numel() {
            return Err(Error::Checkpoint(format!("`{section}.{name}`: value count mismatch")));
        }
        target.data_mut().copy_from_slice(&data);
    }
    r.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_round_trip() {
        let mut s = Sections::new();
        s.insert("a", vec![1, 2, 3]);
        s.insert("b", vec![]);
        s.insert("a", vec![9]);
        let back = Sections::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.get("a").unwrap(), &[9]);
        assert!(back.get("c").is_err());
    }

    #[test]
    fn rejects_corruption() {
        let mut s = Sections::new();
        s.insert("x", vec![7; 10]);
        let bytes = s.to_bytes();
        assert!(Sections::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Sections::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Sections::from_bytes(&v2).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Sections::from_bytes(&extra).is_err());
    }

    #[test]
    fn tensors_round_trip_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(&[std::f64::consts::PI]);
        let names = vec!["a".to_string(), "b".to_string()];
        let bytes = encode_tensors(&names, &[&a, &b]);
        let mut a2 = Tensor::zeros(&[2, 2]);
        let mut b2 = Tensor::zeros(&[1]);
        decode_tensors_into("t", &bytes, &names, vec![&mut a2, &mut b2]).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&a2));
        assert_eq!(bits(&b), bits(&b2));
        let mut wrong = Tensor::zeros(&[4]);
        assert!(decode_tensors_into("t", &bytes, &names, vec![&mut wrong, &mut b2]).is_err());
    }
}
