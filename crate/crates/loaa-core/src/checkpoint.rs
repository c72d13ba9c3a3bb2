//! The shared named-tensor container format.
//!
//! Layout (all integers little-endian):
//!   magic "LOAA" | u32 version = 1 | u32 tensor count
//!   per tensor (sorted by name): u16 name length | name bytes (UTF-8)
//!     | u8 frozen flag | u8 rank | u64 dims... | u8 dtype tag (0 = f32)
//!     | raw f32 little-endian data
//!   trailing u32 CRC32 over every preceding byte.
//!
//! Encoding iterates tensors in name order, so encode/decode/encode is
//! byte-identical.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{numel_of, Tensor};

pub const MAGIC: [u8; 4] = *b"LOAA";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl TensorEntry {
    pub fn from_tensor(t: &Tensor<f32>, frozen: bool) -> Self {
        TensorEntry { shape: t.shape().to_vec(), data: t.data().to_vec(), frozen }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// Named-tensor container with per-tensor freeze flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, entry: TensorEntry) -> Result<()> {
        if numel_of(&entry.shape) != entry.data.len() {
            return Err(CoreError::Dimension(format!(
                "tensor '{name}': shape {:?} does not match {} elements",
                entry.shape,
                entry.data.len()
            )));
        }
        if self.tensors.contains_key(name) {
            return Err(CoreError::Validation(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, entry) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.frozen as u8);
            out.push(entry.shape.len() as u8);
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: &str| CoreError::Checkpoint {
            offset,
            message: message.to_string(),
        };
        let need = |offset: usize, len: usize, what: &str| -> Result<()> {
            if offset + len > bytes.len() {
                Err(fail(offset, &format!("truncated file while reading {what}")))
            } else {
                Ok(())
            }
        };
        need(0, 4, "magic")?;
        if bytes[0..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"LOAA\""));
        }
        need(4, 4, "version")?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(4, &format!("unsupported version {version}, expected {VERSION}")));
        }
        need(8, 4, "tensor count")?;
        let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;

        let mut ckpt = Checkpoint::new();
        let mut pos = 12usize;
        for _ in 0..count {
            need(pos, 2, "name length")?;
            let name_len =
                u16::from_le_bytes(bytes[pos..pos + 2].try_into().expect("2 bytes")) as usize;
            pos += 2;
            need(pos, name_len, "name")?;
            let name = core::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| fail(pos, "tensor name is not valid UTF-8"))?
                .to_string();
            pos += name_len;
            need(pos, 1, "frozen flag")?;
            let frozen = match bytes[pos] {
                0 => false,
                1 => true,
                v => return Err(fail(pos, &format!("frozen flag must be 0 or 1, got {v}"))),
            };
            pos += 1;
            need(pos, 1, "rank")?;
            let rank = bytes[pos] as usize;
            pos += 1;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                need(pos, 8, "dimension")?;
                shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"))
                    as usize);
                pos += 8;
            }
            need(pos, 1, "dtype tag")?;
            if bytes[pos] != DTYPE_F32 {
                return Err(fail(pos, &format!("unsupported dtype tag {}", bytes[pos])));
            }
            pos += 1;
            let numel = numel_of(&shape);
            need(pos, numel * 4, "tensor data")?;
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let at = pos + i * 4;
                data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")));
            }
            pos += numel * 4;
            if ckpt.tensors.contains_key(&name) {
                return Err(fail(pos, &format!("duplicate tensor name '{name}'")));
            }
            ckpt.tensors.insert(name, TensorEntry { shape, data, frozen });
        }
        need(pos, 4, "crc32")?;
        let stored = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..pos]);
        if stored != computed {
            return Err(fail(
                pos,
                &format!("crc mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            ));
        }
        if pos + 4 != bytes.len() {
            return Err(fail(pos + 4, "trailing bytes after crc"));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "b.weights",
            TensorEntry {
                shape: vec![2, 3],
                data: vec![1.0, -2.0, 3.5, 0.0, 1e-8, -7.25],
                frozen: true,
            },
        )
        .unwrap();
        c.insert("a.bias", TensorEntry { shape: vec![3], data: vec![0.5, 1.5, 2.5], frozen: false })
            .unwrap();
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.get("b.weights").unwrap().frozen);
        assert!(!back.get("a.bias").unwrap().frozen);
    }

    #[test]
    fn corrupt_magic_byte_names_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[2] ^= 0xff;
        match Checkpoint::from_bytes(&bytes) {
            Err(CoreError::Checkpoint { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_payload_byte_fails_crc_with_offset() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let body_len = bytes.len() - 4;
        bytes[body_len - 3] ^= 0x01; // inside the last tensor's data
        match Checkpoint::from_bytes(&bytes) {
            Err(CoreError::Checkpoint { offset, message }) => {
                assert_eq!(offset, body_len);
                assert!(message.contains("crc mismatch"));
            }
            other => panic!("expected crc error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_the_failing_field() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 6];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(CoreError::Checkpoint { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..3]),
            Err(CoreError::Checkpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected_on_insert() {
        let mut c = sample();
        let err = c
            .insert("a.bias", TensorEntry { shape: vec![1], data: vec![0.0], frozen: false })
            .unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }
}
