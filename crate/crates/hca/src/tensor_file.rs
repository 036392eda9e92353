//! Binary tensor container.
//!
//! ```text
//! "HCAT" | version 0x01 | dtype 0x01 (f64) | ndim: u8 | ndim × u64 LE extents | f64 LE payload
//! ```
//!
//! The payload is row-major and must hold exactly `8 · Π extents` bytes.

use std::path::Path;

use hca_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HCAT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;
const HEADER: usize = 7;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * t.ndim() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(u8::try_from(t.ndim()).expect("tensors have at most 255 axes"));
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, message: String| Error::Format { path: path.to_path_buf(), offset: offset as u64, message };
    if bytes.len() < HEADER {
        return Err(fail(bytes.len(), format!("truncated header: expected {} bytes, found {}", HEADER, bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(fail(5, format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let dims_end = HEADER + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(bytes.len(), format!("truncated extents: expected {} bytes, found {}", dims_end, bytes.len())));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let count = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let expected = count.and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(dims_end));
    let Some(expected) = expected else {
        return Err(fail(HEADER, format!("extents {:?} overflow", shape)));
    };
    if bytes.len() != expected {
        return Err(fail(
            dims_end,
            format!("payload length mismatch: expected {} bytes in total, found {}", expected, bytes.len()),
        ));
    }
    let data = bytes[dims_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(shape, data).map_err(|e| fail(HEADER, e.to_string()))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..7], b"HCAT\x01\x01\x02");
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[23..31], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 7 + 16 + 16);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(f64::MIN_POSITIVE);
        let b = encode(&t);
        assert_eq!(b.len(), 15);
        assert_eq!(decode(&b, Path::new("s")).unwrap(), t);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let b = encode(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = decode(&b[..b.len() - 3], Path::new("t.hcat")).unwrap_err().to_string();
        assert!(err.contains("expected 39 bytes") && err.contains("found 36"), "{err}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("t")), Err(Error::Format { offset: 0, .. })));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad, Path::new("t")), Err(Error::Format { offset: 4, .. })));
        let mut bad = b;
        bad[5] = 9;
        assert!(matches!(decode(&bad, Path::new("t")), Err(Error::Format { offset: 5, .. })));
        assert!(decode(b"HCA", Path::new("t")).is_err());
    }
}
