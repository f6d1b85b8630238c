//! `BICO` binary container.
//!
//! Layout:
//!
//! ```text
//! "BICO"  0x01  u64-le manifest length  manifest (UTF-8 JSON)  payload
//! ```
//!
//! The manifest is a JSON object with a `kind` string, a `tensors` index of
//! `{name, shape, dtype, byte_offset, byte_len}` entries and any number of
//! kind-specific fields (`spec`, `meta`, ...). Tensor payloads are little-endian
//! `f64` or `i64` values; offsets count from the first byte after the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"BICO";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    I64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    tensors: Vec<TensorEntry>,
    #[serde(flatten)]
    fields: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: TensorData::F64(v.to_vec()),
        }
    }

    pub fn ints(name: impl Into<String>, v: &[i64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: TensorData::I64(v.to_vec()),
        }
    }

    fn dtype(&self) -> DType {
        match self.data {
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
        }
    }
}

/// In-memory view of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub fields: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            fields: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_field(mut self, key: &str, value: Value) -> Self {
        self.fields.insert(key.to_string(), value);
        self
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                HEADER_LEN,
                format!("expected a {kind:?} container, found {:?}", self.kind),
            ));
        }
        Ok(())
    }

    pub fn field(&self, key: &str) -> Result<&Value> {
        self.fields
            .get(key)
            .ok_or_else(|| Error::format(HEADER_LEN, format!("manifest lacks field {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(HEADER_LEN, format!("missing tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensor(name)?;
        match (&t.data, t.shape.as_slice()) {
            (TensorData::F64(v), [r, c]) => Matrix::from_vec_finite(*r, *c, v.clone()),
            _ => Err(Error::format(
                HEADER_LEN,
                format!("tensor {name:?} is not a 2-d f64 tensor"),
            )),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        match (&t.data, t.shape.as_slice()) {
            (TensorData::F64(v), [_]) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "tensor {name:?} has non-finite values"
                    )));
                }
                Ok(v.clone())
            }
            _ => Err(Error::format(
                HEADER_LEN,
                format!("tensor {name:?} is not a 1-d f64 tensor"),
            )),
        }
    }

    pub fn ints(&self, name: &str) -> Result<Vec<i64>> {
        let t = self.tensor(name)?;
        match (&t.data, t.shape.as_slice()) {
            (TensorData::I64(v), [_]) => Ok(v.clone()),
            _ => Err(Error::format(
                HEADER_LEN,
                format!("tensor {name:?} is not a 1-d i64 tensor"),
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let len = 8 * t.shape.iter().product::<usize>() as u64;
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype(),
                byte_offset: offset,
                byte_len: len,
            });
            offset += len;
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            tensors: entries,
            fields: self.fields.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, not a BICO container"));
        }
        if bytes.len() < 5 {
            return Err(Error::format(4, "truncated before version byte"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {:#04x}", bytes[4]),
            ));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(5, "truncated manifest length"));
        }
        let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let data_start = (HEADER_LEN as u64).saturating_add(mlen);
        if data_start > bytes.len() as u64 {
            return Err(Error::format(
                HEADER_LEN,
                format!("manifest of {mlen} bytes runs past end of file"),
            ));
        }
        let data_start = data_start as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..data_start])
            .map_err(|e| Error::format(HEADER_LEN, format!("bad manifest: {e}")))?;

        let payload = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut end = 0u64;
        for e in &manifest.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|c| c.checked_mul(8));
            if count != Some(e.byte_len) {
                return Err(Error::format(
                    HEADER_LEN,
                    format!(
                        "tensor {:?}: byte_len {} does not match shape {:?}",
                        e.name, e.byte_len, e.shape
                    ),
                ));
            }
            let stop = e.byte_offset.checked_add(e.byte_len);
            if stop.is_none_or(|s| s > payload.len() as u64) {
                return Err(Error::format(
                    data_start + payload.len(),
                    format!("tensor {:?} extends past end of file", e.name),
                ));
            }
            end = end.max(stop.unwrap());
            let raw = &payload[e.byte_offset as usize..stop.unwrap() as usize];
            let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
            let data = match e.dtype {
                DType::F64 => TensorData::F64(words.map(f64::from_le_bytes).collect()),
                DType::I64 => TensorData::I64(words.map(i64::from_le_bytes).collect()),
            };
            tensors.push(Tensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        if end != payload.len() as u64 {
            return Err(Error::format(
                data_start + end as usize,
                format!(
                    "{} trailing bytes after last tensor",
                    payload.len() as u64 - end
                ),
            ));
        }
        Ok(Self {
            kind: manifest.kind,
            fields: manifest.fields,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Decodes a manifest field into a typed value.
pub(crate) fn decode_field<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_value(c.field(key)?.clone())
        .map_err(|e| Error::format(HEADER_LEN, format!("field {key:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test").with_field("note", Value::from("hi"));
        c.push(Tensor::matrix(
            "m",
            &Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.5]]),
        ));
        c.push(Tensor::ints("labels", &[0, 3, 1]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.ints("labels").unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"BICO");
        assert_eq!(b[4], 1);
        let mlen = u64::from_le_bytes(b[5..13].try_into().unwrap()) as usize;
        let manifest: Value = serde_json::from_slice(&b[13..13 + mlen]).unwrap();
        assert_eq!(manifest["kind"], "test");
        assert_eq!(manifest["tensors"][1]["byte_offset"], 32);
        assert_eq!(manifest["tensors"][1]["dtype"], "i64");
        assert_eq!(b.len(), 13 + mlen + 32 + 24);
    }

    #[test]
    fn truncation_and_corruption() {
        let b = sample().to_bytes();
        for cut in [0, 3, 4, 9, 20, b.len() - 1] {
            let err = Container::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(
            Container::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut extra = b;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }
}
