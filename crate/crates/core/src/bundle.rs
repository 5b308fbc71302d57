//! `CVB1` container for per-factor, per-layer direction vectors.
//!
//! Layout: magic, u32 LE header length, JSON header, then every vector as
//! f64 LE in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factor::Factor;

pub const CVB_MAGIC: [u8; 4] = *b"CVB1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorBundle {
    pub model_id: String,
    /// Free-form tag such as `raw` or `purified`.
    pub kind: String,
    dim: usize,
    vectors: BTreeMap<Factor, BTreeMap<usize, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_id: String,
    kind: String,
    dim: usize,
    entries: Vec<(Factor, usize)>,
}

impl VectorBundle {
    pub fn new(model_id: impl Into<String>, kind: impl Into<String>, dim: usize) -> Self {
        VectorBundle {
            model_id: model_id.into(),
            kind: kind.into(),
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, factor: Factor, layer: usize, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        self.vectors.entry(factor).or_default().insert(layer, v);
        Ok(())
    }

    pub fn get(&self, factor: Factor, layer: usize) -> Result<&[f64]> {
        self.vectors
            .get(&factor)
            .and_then(|m| m.get(&layer))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invariant(format!("bundle has no {factor} vector at layer {layer}")))
    }

    pub fn contains(&self, factor: Factor, layer: usize) -> bool {
        self.vectors.get(&factor).is_some_and(|m| m.contains_key(&layer))
    }

    pub fn factors(&self) -> Vec<Factor> {
        self.vectors.keys().copied().collect()
    }

    pub fn layers_of(&self, factor: Factor) -> Vec<usize> {
        self.vectors
            .get(&factor)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Layers present for every factor in `factors`.
    pub fn common_layers(&self, factors: &[Factor]) -> Vec<usize> {
        let Some((first, rest)) = factors.split_first() else {
            return Vec::new();
        };
        self.layers_of(*first)
            .into_iter()
            .filter(|&l| rest.iter().all(|&f| self.contains(f, l)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vectors.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries: Vec<(Factor, usize)> = self
            .vectors
            .iter()
            .flat_map(|(f, m)| m.keys().map(move |l| (*f, *l)))
            .collect();
        let header = serde_json::to_vec(&Header {
            model_id: self.model_id.clone(),
            kind: self.kind.clone(),
            dim: self.dim,
            entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.len() * self.dim * 8);
        out.extend_from_slice(&CVB_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.vectors.values() {
            for v in m.values() {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save<W: Write>(&self, sink: &mut W) -> Result<usize> {
        let bytes = self.encode();
        sink.write_all(&bytes)?;
        Ok(bytes.len())
    }

    pub fn load<R: Read>(source: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                expected: 8,
                actual: bytes.len() as u64,
            });
        }
        if bytes[..4] != CVB_MAGIC {
            return Err(Error::BadMagic {
                expected: CVB_MAGIC,
                found: bytes[..4].try_into().expect("4 bytes"),
            });
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Truncated {
                expected: (8 + hlen) as u64,
                actual: bytes.len() as u64,
            });
        }
        let header: Header =
            serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| Error::Metadata(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let expected = header.entries.len() * header.dim * 8;
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected: (8 + hlen + expected) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut bundle = VectorBundle::new(header.model_id, header.kind, header.dim);
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for (f, l) in header.entries {
            if bundle.contains(f, l) {
                return Err(Error::Duplicate(format!("{f}@{l}")));
            }
            let v: Vec<f64> = values.by_ref().take(header.dim).collect();
            bundle.insert(f, l, v)?;
        }
        Ok(bundle)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut b = VectorBundle::new("toy", "raw", 3);
        b.insert(Factor::Superiority, 4, vec![0.1, -0.2, 1.0 / 3.0]).unwrap();
        b.insert(Factor::Weekday, 4, vec![f64::MIN_POSITIVE, 0.0, -1.0]).unwrap();
        b.insert(Factor::Superiority, 7, vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = b.encode();
        let back = VectorBundle::decode(&bytes).unwrap();
        assert_eq!(b, back);
        assert_eq!(back.common_layers(&[Factor::Superiority, Factor::Weekday]), vec![4]);
        assert!(VectorBundle::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(VectorBundle::decode(&bad), Err(Error::BadMagic { .. })));
        assert!(b.insert(Factor::Relevance, 0, vec![1.0]).is_err());
    }
}
