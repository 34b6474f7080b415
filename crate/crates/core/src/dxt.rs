//! DXT tensor files.
//!
//! ```text
//! "DXT1" | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE, row-major
//! ```
//!
//! The header is `{"dtype":"f32","order":"row-major","shape":[..]}` with an
//! optional `metadata` object. A shape of `[]` denotes a scalar.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DXT1";

#[derive(Debug, Clone, PartialEq)]
pub struct DxtTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    metadata: Option<Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<Value>,
    order: String,
    shape: Vec<usize>,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DxtTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&shape);
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            metadata: None,
        })
    }

    pub fn with_metadata(mut self, metadata: Value) -> Self {
        self.metadata = Some(metadata);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn metadata(&self) -> Option<&Value> {
        self.metadata.as_ref()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>, Option<Value>) {
        (self.shape, self.data, self.metadata)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dtype: "f32".into(),
            metadata: self.metadata.clone(),
            order: "row-major".into(),
            shape: self.shape.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TensorFormat(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if header_len > body.len() {
            return Err(Error::TensorFormat(format!(
                "header length {header_len} exceeds remaining {} bytes",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::TensorFormat(format!("invalid header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::TensorFormat(format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.order != "row-major" {
            return Err(Error::TensorFormat(format!("unsupported order {:?}", header.order)));
        }
        let payload = &body[header_len..];
        let expected = element_count(&header.shape);
        if !payload.len().is_multiple_of(4) || payload.len() / 4 != expected {
            return Err(Error::LengthMismatch {
                shape: header.shape,
                expected,
                found: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            shape: header.shape,
            data,
            metadata: header.metadata,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
