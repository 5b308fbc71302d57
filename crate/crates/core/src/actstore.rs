//! Activation data model and the `ACF1` capture format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "ACF1" | N: u32 | L: u32 | d: u32 | meta_len: u32 | meta: [u8; meta_len] (UTF-8 JSON)
//!        | payload: N*L*d f32, record-major, then layer, then dimension
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factor::Factor;

pub const ACF_MAGIC: [u8; 4] = *b"ACF1";
const HEADER_LEN: usize = 4 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pos,
    Neg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub record_id: String,
    #[serde(default)]
    pub labels: BTreeMap<Factor, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

impl RecordMeta {
    pub fn new(record_id: impl Into<String>) -> Self {
        RecordMeta {
            record_id: record_id.into(),
            labels: BTreeMap::new(),
            ground_truth: None,
            split_tag: None,
            pair_id: None,
            polarity: None,
        }
    }

    pub fn label(&self, factor: Factor) -> Option<u8> {
        self.labels.get(&factor).copied()
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model_id: String,
    capture_note: String,
    records: Vec<RecordMeta>,
}

/// Per-record, per-layer hidden states plus label metadata.
///
/// Immutable once built; construction validates every invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    records: Vec<RecordMeta>,
    layers: usize,
    dim: usize,
    tensor: Vec<f32>,
    model_id: String,
    capture_note: String,
}

impl ActivationSet {
    pub fn new(
        records: Vec<RecordMeta>,
        layers: usize,
        dim: usize,
        tensor: Vec<f32>,
        model_id: impl Into<String>,
        capture_note: impl Into<String>,
    ) -> Result<Self> {
        let set = ActivationSet {
            records,
            layers,
            dim,
            tensor,
            model_id: model_id.into(),
            capture_note: capture_note.into(),
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let expected = self.records.len() * self.layers * self.dim;
        if self.tensor.len() != expected {
            return Err(Error::Invariant(format!(
                "tensor holds {} values, shape ({}, {}, {}) needs {expected}",
                self.tensor.len(),
                self.records.len(),
                self.layers,
                self.dim
            )));
        }
        let mut ids = HashSet::new();
        let mut pairs: HashMap<&str, Vec<Option<Polarity>>> = HashMap::new();
        for rec in &self.records {
            if !ids.insert(rec.record_id.as_str()) {
                return Err(Error::Duplicate(rec.record_id.clone()));
            }
            if let Some((f, v)) = rec.labels.iter().find(|(_, &v)| v > 1) {
                return Err(Error::Invariant(format!(
                    "record {:?}: label {f} = {v} is not binary",
                    rec.record_id
                )));
            }
            if let Some(gt) = rec.ground_truth {
                if !(1..=5).contains(&gt) {
                    return Err(Error::Invariant(format!(
                        "record {:?}: ground truth {gt} outside 1..=5",
                        rec.record_id
                    )));
                }
            }
            if let Some(pid) = &rec.pair_id {
                pairs.entry(pid.as_str()).or_default().push(rec.polarity);
            }
        }
        for (pid, pols) in pairs {
            let ok = pols.len() == 2
                && pols.contains(&Some(Polarity::Pos))
                && pols.contains(&Some(Polarity::Neg));
            if !ok {
                return Err(Error::Invariant(format!(
                    "pair {pid:?} must have exactly one pos and one neg record"
                )));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn capture_note(&self) -> &str {
        &self.capture_note
    }

    pub fn tensor(&self) -> &[f32] {
        &self.tensor
    }

    /// Hidden state of `record` at `layer`.
    pub fn state(&self, record: usize, layer: usize) -> &[f32] {
        let start = (record * self.layers + layer) * self.dim;
        &self.tensor[start..start + self.dim]
    }

    pub fn select_layer(&self, layer: usize) -> Result<LayerView<'_>> {
        if layer >= self.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                count: self.layers,
            });
        }
        Ok(LayerView { set: self, layer })
    }

    /// Index of `(pair_id, pos row, neg row)` in record order of the pos half.
    pub fn pair_rows(&self) -> Vec<(String, usize, usize)> {
        let mut pos: BTreeMap<&str, usize> = BTreeMap::new();
        let mut neg: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            match (&rec.pair_id, rec.polarity) {
                (Some(p), Some(Polarity::Pos)) => {
                    pos.insert(p, i);
                }
                (Some(p), Some(Polarity::Neg)) => {
                    neg.insert(p, i);
                }
                _ => {}
            }
        }
        let mut out: Vec<_> = pos
            .into_iter()
            .filter_map(|(p, i)| neg.get(p).map(|&j| (p.to_owned(), i, j)))
            .collect();
        out.sort_by_key(|&(_, i, _)| i);
        out
    }

    /// Keeps only the records for which `keep` returns true, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&RecordMeta) -> bool) -> Result<ActivationSet> {
        let stride = self.layers * self.dim;
        let mut records = Vec::new();
        let mut tensor = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            if keep(rec) {
                records.push(rec.clone());
                tensor.extend_from_slice(&self.tensor[i * stride..(i + 1) * stride]);
            }
        }
        ActivationSet::new(
            records,
            self.layers,
            self.dim,
            tensor,
            self.model_id.clone(),
            self.capture_note.clone(),
        )
    }

    /// SHA-256 of the canonical `ACF1` encoding, hex encoded.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_unchecked(&mut buf).expect("vec write");
        hex::encode(Sha256::digest(&buf))
    }

    fn write_unchecked<W: Write>(&self, sink: &mut W) -> Result<usize> {
        let meta = serde_json::to_vec(&Metadata {
            model_id: self.model_id.clone(),
            capture_note: self.capture_note.clone(),
            records: self.records.clone(),
        })?;
        let mut header = Vec::with_capacity(HEADER_LEN + meta.len());
        header.extend_from_slice(&ACF_MAGIC);
        for v in [self.records.len(), self.layers, self.dim, meta.len()] {
            let v = u32::try_from(v)
                .map_err(|_| Error::Invariant(format!("{v} does not fit the u32 header")))?;
            header.extend_from_slice(&v.to_le_bytes());
        }
        header.extend_from_slice(&meta);
        sink.write_all(&header)?;
        let mut payload = Vec::with_capacity(self.tensor.len() * 4);
        for x in &self.tensor {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        sink.write_all(&payload)?;
        Ok(header.len() + payload.len())
    }
}

/// One layer of an [`ActivationSet`]: an N x d matrix whose rows follow record order.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    set: &'a ActivationSet,
    layer: usize,
}

impl<'a> LayerView<'a> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn rows(&self) -> usize {
        self.set.len()
    }

    pub fn dim(&self) -> usize {
        self.set.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        self.set.state(i, self.layer)
    }

    pub fn records(&self) -> &'a [RecordMeta] {
        &self.set.records
    }

    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| crate::linalg::to_f64(self.row(i)))
            .collect()
    }
}

/// Writes `set` as `ACF1`, returning the byte count. Invariants are re-checked
/// before the first byte goes out.
pub fn save_acf<W: Write>(set: &ActivationSet, sink: &mut W) -> Result<usize> {
    set.validate()?;
    set.write_unchecked(sink)
}

pub fn load_acf<R: Read>(source: &mut R) -> Result<ActivationSet> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn decode(bytes: &[u8]) -> Result<ActivationSet> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != ACF_MAGIC {
        return Err(Error::BadMagic {
            expected: ACF_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let n = read_u32(bytes, 4) as u64;
    let layers = read_u32(bytes, 8) as u64;
    let dim = read_u32(bytes, 12) as u64;
    let meta_len = read_u32(bytes, 16) as u64;
    let expected = HEADER_LEN as u64 + meta_len + 4 * n * layers * dim;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Metadata(format!(
            "{} trailing bytes after payload",
            bytes.len() as u64 - expected
        )));
    }
    let meta_end = HEADER_LEN + meta_len as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| Error::Metadata(e.to_string()))?;
    if meta.records.len() as u64 != n {
        return Err(Error::Metadata(format!(
            "header declares {n} records, metadata lists {}",
            meta.records.len()
        )));
    }
    let tensor = bytes[meta_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ActivationSet::new(
        meta.records,
        layers as usize,
        dim as usize,
        tensor,
        meta.model_id,
        meta.capture_note,
    )
}
