//! Little-endian tensor container shared by weight (`TTLM`) and adapter
//! (`TTLA`) files.
//!
//! ```text
//! magic [4]u8 | version u32 | count u32
//! count × { name_len u32 | name utf-8 | rank u8 | extents [rank]u64 | data [n]f32 }
//! meta_len u32 | meta utf-8 JSON
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"TTLM";
pub const ADAPTER_MAGIC: [u8; 4] = *b"TTLA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub tensors: Vec<(String, Tensor)>,
    /// Trailing metadata block (JSON).
    pub meta: Vec<u8>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| n.len() + 13 + 8 * t.shape().len() + 4 * t.len())
            .sum();
        let mut out = Vec::with_capacity(16 + payload + self.meta.len());
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out
    }

    pub fn decode(bytes: &[u8], expected_magic: [u8; 4]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("took 4 bytes");
        if magic != expected_magic {
            return Err(Error::Format(format!(
                "unknown magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| Error::Format("extent overflows usize".into()))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let meta_len = r.u32()? as usize;
        let meta = r.take(meta_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Container {
            magic,
            tensors,
            meta,
        })
    }

    pub fn read(path: &Path, expected_magic: [u8; 4]) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, expected_magic)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.swap_remove(idx).1)
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
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        Container {
            magic: WEIGHTS_MAGIC,
            tensors: vec![
                (
                    "a".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap(),
                ),
                ("b.c".into(), Tensor::from_vec(&[3], vec![0.25; 3]).unwrap()),
            ],
            meta: br#"{"k":1}"#.to_vec(),
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"TTLM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes[17], 2);
        assert_eq!(&bytes[18..26], &2u64.to_le_bytes());
        assert_eq!(&bytes[34..38], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut bytes = sample().encode();
        assert!(Container::decode(&bytes, ADAPTER_MAGIC).is_err());
        bytes[4] = 2;
        let err = Container::decode(&bytes, WEIGHTS_MAGIC).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().encode();
        assert!(Container::decode(&bytes[..bytes.len() - 1], WEIGHTS_MAGIC).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Container::decode(&longer, WEIGHTS_MAGIC).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            values in prop::collection::vec(-1e6f32..1e6, 1..40),
            meta in "[a-z{}:\"]{0,20}",
        ) {
            let n = values.len();
            let c = Container {
                magic: ADAPTER_MAGIC,
                tensors: vec![("x".into(), Tensor::from_vec(&[n], values).unwrap())],
                meta: meta.into_bytes(),
            };
            prop_assert_eq!(Container::decode(&c.encode(), ADAPTER_MAGIC).unwrap(), c);
        }
    }
}
