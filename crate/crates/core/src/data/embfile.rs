//! Binary embedding-file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"EMBF"
//! 4       4     version (u32) = 1
//! 8       4     rows (u32)
//! 12      4     cols (u32)
//! 16      4     dtype (u32) = 1, meaning f32 little-endian
//! 20      4*r*c payload, row-major f32
//! ```
//!
//! Readers convert to host order; writers always emit little-endian, so
//! files round-trip bitwise on any platform.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EMBF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn write_embedding_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + t.len() * 4);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    rows: usize,
    cols: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let dtype = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    if dtype != DTYPE_F32 {
        return Err(Error::BadVersion {
            path: path.into(),
            version: dtype,
        });
    }
    Ok(Header { rows, cols })
}

/// Check magic, version and header plausibility without reading the payload.
pub fn validate_embedding_header(path: &Path) -> Result<(usize, usize)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &head[..n])?;
    Ok((header.rows, header.cols))
}

pub fn read_embedding_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let expected = HEADER_LEN + header.rows * header.cols * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(header.rows * header.cols);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("embedding file {}", path.display())));
        }
        data.push(v);
    }
    Ok(Tensor::from_raw(header.rows, header.cols, data))
}
