//! PTNSR v1: a tiny binary tensor container.
//!
//! Layout, all little-endian, no padding:
//!
//! ```text
//! offset  size       field
//! 0       4          magic "PTNS" (50 54 4E 53)
//! 4       1          version, currently 1
//! 5       1          dtype: 1 = f64, 2 = u8
//! 6       1          ndim
//! 7       4*ndim     dims as u32
//! ...     prod*size  row-major payload
//! ```
//!
//! f64 payloads round-trip bit-exactly; u8 is used for class-id masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"PTNS";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Ptnsr { reason: format!("rank {} exceeds 255", shape.len()) });
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Ptnsr { reason: format!("dim {d} exceeds u32") })?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    Ok(out)
}

/// Serialize an f64 tensor.
pub fn encode_f64(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F64, t.shape())?;
    out.reserve(t.len() * 8);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Serialize a u8 payload (class-id masks).
pub fn encode_u8(data: &[u8], shape: &[usize]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::DataLength { expected: n, got: data.len() });
    }
    let mut out = header(DTYPE_U8, shape)?;
    out.extend_from_slice(data);
    Ok(out)
}

struct Parsed {
    dtype: u8,
    shape: Vec<usize>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < 7 {
        return Err(Error::Ptnsr { reason: format!("file too short for PTNS header: {} bytes", bytes.len()) });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Ptnsr { reason: format!("bad magic {:02x?}, expected PTNS", &bytes[0..4]) });
    }
    if bytes[4] != VERSION {
        return Err(Error::Ptnsr { reason: format!("unsupported PTNS version {}", bytes[4]) });
    }
    let dtype = bytes[5];
    if dtype != DTYPE_F64 && dtype != DTYPE_U8 {
        return Err(Error::Ptnsr { reason: format!("unknown PTNS dtype {dtype}") });
    }
    let ndim = bytes[6] as usize;
    let payload_offset = 7 + 4 * ndim;
    if bytes.len() < payload_offset {
        return Err(Error::Ptnsr { reason: "PTNS header truncated inside dims".into() });
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        shape.push(d);
    }
    Ok(Parsed { dtype, shape, payload_offset })
}

fn check_payload(bytes: &[u8], p: &Parsed, elem_size: usize) -> Result<usize> {
    let n: usize = p.shape.iter().product();
    let want = p.payload_offset + n * elem_size;
    if bytes.len() != want {
        return Err(Error::Ptnsr {
            reason: format!("PTNS payload length mismatch: file {} bytes, header implies {}", bytes.len(), want),
        });
    }
    Ok(n)
}

/// Deserialize an f64 tensor.
pub fn decode_f64(bytes: &[u8]) -> Result<Tensor> {
    let p = parse_header(bytes)?;
    if p.dtype != DTYPE_F64 {
        return Err(Error::Ptnsr { reason: format!("expected f64 payload, file holds dtype {}", p.dtype) });
    }
    let n = check_payload(bytes, &p, 8)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = p.payload_offset + 8 * i;
        data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
    }
    Tensor::from_vec(data, &p.shape)
}

/// Deserialize a u8 payload and its shape.
pub fn decode_u8(bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>)> {
    let p = parse_header(bytes)?;
    if p.dtype != DTYPE_U8 {
        return Err(Error::Ptnsr { reason: format!("expected u8 payload, file holds dtype {}", p.dtype) });
    }
    check_payload(bytes, &p, 1)?;
    Ok((bytes[p.payload_offset..].to_vec(), p.shape))
}

pub fn write_f64(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_f64(t)?)?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Tensor> {
    decode_f64(&fs::read(path)?)
}

/// Write a tensor of integral class ids as a u8 mask file.
pub fn write_mask(path: &Path, t: &Tensor) -> Result<()> {
    let mut data = Vec::with_capacity(t.len());
    for (pos, &v) in t.data().iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v > 255.0 {
            return Err(Error::ClassOutOfRange { id: v as usize, num_classes: 256, position: pos });
        }
        data.push(v as u8);
    }
    fs::write(path, encode_u8(&data, t.shape())?)?;
    Ok(())
}

/// Read a u8 mask file back into an f64 tensor of class ids.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let (data, shape) = decode_u8(&fs::read(path)?)?;
    Tensor::from_vec(data.into_iter().map(f64::from).collect(), &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let vals = vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, 1e300, -3.25, 0.1, 255.000000001];
        let t = Tensor::from_vec(vals, &[2, 2, 2]).unwrap();
        let back = decode_f64(&encode_f64(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_bytes_match_layout() {
        let t = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        let bytes = encode_f64(&t).unwrap();
        assert_eq!(&bytes[0..4], b"PTNS");
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 1); // f64
        assert_eq!(bytes[6], 2); // ndim
        assert_eq!(&bytes[7..11], &1u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 8);
    }

    #[test]
    fn u8_mask_roundtrip() {
        let t = Tensor::from_vec(vec![0.0, 3.0, 18.0, 255.0], &[1, 2, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ptnsr");
        write_mask(&path, &t).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        // dtype byte on disk is u8
        assert_eq!(fs::read(&path).unwrap()[5], 2);
    }

    #[test]
    fn bad_magic_is_named() {
        let t = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let mut bytes = encode_f64(&t).unwrap();
        bytes[0] = b'X';
        match decode_f64(&bytes) {
            Err(Error::Ptnsr { reason }) => assert!(reason.contains("PTNS"), "{reason}"),
            other => panic!("expected Ptnsr error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let bytes = encode_f64(&t).unwrap();
        assert!(decode_f64(&bytes[..bytes.len() - 1]).is_err());
        // trailing garbage also rejected
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_f64(&long).is_err());
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let bytes = encode_u8(&[1, 2], &[2]).unwrap();
        assert!(decode_f64(&bytes).is_err());
        let t = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        assert!(decode_u8(&encode_f64(&t).unwrap()).is_err());
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let t = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let mut bytes = encode_f64(&t).unwrap();
        bytes[4] = 9;
        assert!(decode_f64(&bytes).is_err());
    }

    #[test]
    fn mask_rejects_fractional_ids() {
        let t = Tensor::from_vec(vec![0.5], &[1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_mask(&dir.path().join("m.ptnsr"), &t).is_err());
    }
}
