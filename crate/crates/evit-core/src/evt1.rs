//! The EVT1 tensor container: magic "EVT1", u8 dtype code (0=f32, 1=f64),
//! u8 rank, rank little-endian u64 extents, then the raw little-endian
//! scalars in row-major order. One tensor per record; checkpoints, dataset
//! samples, and prediction outputs all use it.

use std::io::{Read, Write};

use crate::dtype::{Dtype, Scalar};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVT1";

pub fn encode<T: Scalar>(shape: &[usize], data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + shape.len() * 8 + data.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t.shape(), &t.data()))?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::CorruptFile(format!("truncated while reading {what}")))?;
    Ok(buf)
}

/// Parse the header, returning (dtype, shape).
pub fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let magic = read_exact(r, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptFile("bad magic, not an EVT1 record".into()));
    }
    let meta = read_exact(r, 2, "dtype/rank")?;
    let dtype = Dtype::from_code(meta[0])
        .ok_or_else(|| Error::CorruptFile(format!("unknown dtype code {}", meta[0])))?;
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = read_exact(r, 8, "extent")?;
        let d = u64::from_le_bytes(b.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::CorruptFile("zero extent in shape".into()));
        }
        shape.push(d);
    }
    Ok((dtype, shape))
}

/// Read one tensor of the expected element type; a stored dtype that
/// differs is an error, never a silent conversion.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: match T::DTYPE {
                Dtype::F32 => "f32",
                Dtype::F64 => "f64",
            },
            got: dtype.to_string(),
        });
    }
    let n: usize = shape.iter().product();
    let raw = read_exact(r, n * T::BYTES, "payload")?;
    let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(&shape, data)
}

pub fn read_tensor_from_path<T: Scalar>(path: &std::path::Path) -> Result<Tensor<T>> {
    let mut f = std::fs::File::open(path)?;
    read_tensor(&mut f)
}

pub fn write_tensor_to_path<T: Scalar>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_tensor(&mut f, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.5, -2.0, 0.0, 3.25, 1e-7, -1e7]).unwrap();
        let bytes = encode(t.shape(), &t.data());
        let back: Tensor<f32> = read_tensor(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(t.shape(), &t.data());
        assert_eq!(&bytes[..4], b"EVT1");
        assert_eq!(bytes[4], 1); // f64 code
        assert_eq!(bytes[5], 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 14 + 16);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        let bytes = encode(t.shape(), &t.data());
        let r: Result<Tensor<f64>> = read_tensor(&mut bytes.as_slice());
        assert!(matches!(r, Err(Error::DtypeMismatch { .. })));
    }

    #[test]
    fn bad_magic_rejected() {
        let r: Result<Tensor<f32>> = read_tensor(&mut b"NOPE....".as_slice());
        assert!(matches!(r, Err(Error::CorruptFile(_))));
    }
}
