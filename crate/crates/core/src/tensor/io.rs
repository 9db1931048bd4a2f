//! Tensor container files.
//!
//! Layout: magic `OLMT`, version byte 0x01, dtype byte (0x00 = f32,
//! 0x01 = f64), rank byte, rank u32 little-endian dims, then the raw
//! row-major little-endian payload. No alignment padding anywhere.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Scalar, TensorData};

pub const MAGIC: [u8; 4] = *b"OLMT";
pub const VERSION: u8 = 0x01;

#[derive(Error, Debug)]
pub enum TensorFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes (not a tensor container)")]
    BadMagic { path: String },
    #[error("{path}: unsupported container version {version:#04x}")]
    UnsupportedVersion { path: String, version: u8 },
    #[error("{path}: unsupported dtype byte {dtype:#04x} (expected {expected:#04x})")]
    UnsupportedDtype {
        path: String,
        dtype: u8,
        expected: u8,
    },
    #[error("{path}: truncated payload: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TensorFileError {
    TensorFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode<F: Scalar>(t: &TensorData<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + t.rank() * 4 + t.numel() * F::byte_width());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(F::DTYPE);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes(&mut out);
    }
    out
}

pub fn decode<F: Scalar>(bytes: &[u8], path: &str) -> Result<TensorData<F>, TensorFileError> {
    let p = || path.to_string();
    if bytes.len() < 7 || bytes[0..4] != MAGIC {
        return Err(TensorFileError::BadMagic { path: p() });
    }
    if bytes[4] != VERSION {
        return Err(TensorFileError::UnsupportedVersion {
            path: p(),
            version: bytes[4],
        });
    }
    if bytes[5] != F::DTYPE {
        return Err(TensorFileError::UnsupportedDtype {
            path: p(),
            dtype: bytes[5],
            expected: F::DTYPE,
        });
    }
    let rank = bytes[6] as usize;
    let header = 7 + rank * 4;
    if bytes.len() < header {
        return Err(TensorFileError::Truncated {
            path: p(),
            expected: header,
            found: bytes.len(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + i * 4;
        shape.push(
            u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize,
        );
    }
    let numel: usize = shape.iter().product();
    let w = F::byte_width();
    let expected = header + numel * w;
    if bytes.len() != expected {
        return Err(TensorFileError::Truncated {
            path: p(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[header..]
        .chunks_exact(w)
        .map(F::from_le_slice)
        .collect();
    Ok(TensorData::new(shape, data))
}

pub fn write_tensor<F: Scalar>(path: &Path, t: &TensorData<F>) -> Result<(), TensorFileError> {
    let bytes = encode(t);
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn read_tensor<F: Scalar>(path: &Path) -> Result<TensorData<F>, TensorFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_for_2x3() {
        let t = TensorData::<f32>::zeros(&[2, 3]);
        let bytes = encode(&t);
        assert_eq!(&bytes[0..4], b"OLMT");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0x00);
        assert_eq!(bytes[6], 0x02);
        assert_eq!(&bytes[7..11], &[0x02, 0x00, 0x00, 0x00]);
        assert_eq!(&bytes[11..15], &[0x03, 0x00, 0x00, 0x00]);
        assert_eq!(bytes.len(), 15 + 6 * 4);
    }

    #[test]
    fn roundtrip_bit_exact_f32_and_f64() {
        let vals: Vec<f64> = (0..60).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let t32 = TensorData::<f32>::from_f64s(&[3, 4, 5], &vals);
        let back32: TensorData<f32> = decode(&encode(&t32), "mem").unwrap();
        assert_eq!(t32, back32);

        let t64 = TensorData::<f64>::from_f64s(&[3, 4, 5], &vals);
        let back64: TensorData<f64> = decode(&encode(&t64), "mem").unwrap();
        assert_eq!(t64, back64);
    }

    #[test]
    fn corrupted_magic_is_bad_magic() {
        let t = TensorData::<f32>::zeros(&[2]);
        let mut bytes = encode(&t);
        bytes[0] = b'X';
        let err = decode::<f32>(&bytes, "mem").unwrap_err();
        assert!(matches!(err, TensorFileError::BadMagic { .. }));
    }

    #[test]
    fn wrong_dtype_and_truncation_are_distinct() {
        let t = TensorData::<f32>::zeros(&[2]);
        let bytes = encode(&t);
        let err = decode::<f64>(&bytes, "mem").unwrap_err();
        assert!(matches!(err, TensorFileError::UnsupportedDtype { .. }));

        let err = decode::<f32>(&bytes[..bytes.len() - 1], "mem").unwrap_err();
        assert!(matches!(err, TensorFileError::Truncated { .. }));

        let mut vbytes = encode(&t);
        vbytes[4] = 0x02;
        let err = decode::<f32>(&vbytes, "mem").unwrap_err();
        assert!(matches!(err, TensorFileError::UnsupportedVersion { .. }));
    }
}
