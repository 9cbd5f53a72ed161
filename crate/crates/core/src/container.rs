//! Binary container shared by every persisted model.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "CUEGEN01"
//! 8 bytes   header length N, u64 little-endian
//! N bytes   UTF-8 JSON header
//! ...       tensor data, little-endian, in directory order
//! ```
//!
//! The header is `{"kind": str, "meta": any, "tensors": [{"name", "shape",
//! "dtype", "offset", "nbytes"}]}` where `offset` is relative to the start
//! of the data section. JSON objects are written with sorted keys, so
//! load-then-save reproduces the input byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::textmodel::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CUEGEN01";

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model container (bad magic)")]
    BadMagic,
    #[error("truncated container")]
    Truncated,
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("expected container kind {expected}, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: {detail}")]
    BadTensor { name: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }

    fn of<T: Scalar>() -> DType {
        if T::DTYPE == "f64" {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    dtype: DType,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * DType::of::<T>().size());
        for &x in &t.data {
            x.to_le(&mut bytes);
        }
        RawTensor { name: name.into(), shape: [t.rows, t.cols], dtype: DType::of::<T>(), bytes }
    }

    pub fn from_counts(name: impl Into<String>, rows: usize, cols: usize, data: &[u32]) -> Self {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        RawTensor { name: name.into(), shape: [rows, cols], dtype: DType::U32, bytes }
    }

    /// Decode as floats of type `T`, converting from the stored dtype.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, ContainerError> {
        let [r, c] = self.shape;
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|b| T::from_f(f32::from_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|b| T::from_f(f64::from_le(b))).collect(),
            DType::U32 => self.to_counts()?.into_iter().map(|x| T::from_f(x as f64)).collect(),
        };
        if data.len() != r * c {
            return Err(ContainerError::BadTensor { name: self.name.clone(), detail: "size mismatch".into() });
        }
        Ok(Tensor::from_vec(r, c, data))
    }

    pub fn to_counts(&self) -> Result<Vec<u32>, ContainerError> {
        if self.dtype != DType::U32 {
            return Err(ContainerError::BadTensor { name: self.name.clone(), detail: "expected u32".into() });
        }
        Ok(self.bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<RawTensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, t: RawTensor) {
        self.tensors.push(t);
    }

    pub fn tensor(&self, name: &str) -> Result<&RawTensor, ContainerError> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| ContainerError::MissingTensor(name.into()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ContainerError::WrongKind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape,
                    dtype: t.dtype,
                    offset,
                    nbytes: t.bytes.len(),
                };
                offset += t.bytes.len();
                e
            })
            .collect();
        let header = Header { kind: self.kind.clone(), meta: self.meta.clone(), tensors };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 16 {
            return Err(ContainerError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(hlen).ok_or(ContainerError::Truncated)?;
        if bytes.len() < data_start {
            return Err(ContainerError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e.offset.checked_add(e.nbytes).ok_or(ContainerError::Truncated)?;
            if end > data.len() {
                return Err(ContainerError::Truncated);
            }
            if e.nbytes != e.shape[0] * e.shape[1] * e.dtype.size() {
                return Err(ContainerError::BadTensor { name: e.name, detail: "nbytes does not match shape".into() });
            }
            tensors.push(RawTensor { name: e.name, shape: e.shape, dtype: e.dtype, bytes: data[e.offset..end].to_vec() });
        }
        Ok(Container { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut c = Container::new("test", serde_json::json!({"b": 1, "a": [1, 2]}));
        c.push(RawTensor::from_tensor("w", &Tensor::from_vec(2, 2, vec![1.0f32, -2.0, 3.5, 0.0])));
        c.push(RawTensor::from_tensor("x", &Tensor::from_vec(1, 1, vec![0.1f64])));
        c.push(RawTensor::from_counts("n", 1, 3, &[0, 7, 9]));
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("w").unwrap().to_tensor::<f64>().unwrap().data, vec![1.0, -2.0, 3.5, 0.0]);
        assert_eq!(back.tensor("n").unwrap().to_counts().unwrap(), vec![0, 7, 9]);
        assert!(matches!(back.tensor("zz"), Err(ContainerError::MissingTensor(_))));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Container::from_bytes(b"short"), Err(ContainerError::Truncated)));
        assert!(matches!(Container::from_bytes(&[0u8; 32]), Err(ContainerError::BadMagic)));
        let mut c = Container::new("t", serde_json::Value::Null);
        c.push(RawTensor::from_counts("n", 1, 2, &[1, 2]));
        let bytes = c.to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(ContainerError::Truncated)));
    }
}
