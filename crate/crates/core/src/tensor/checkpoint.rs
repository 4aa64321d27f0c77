//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "CIRCKPT\0"
//! version    u32
//! precision  u8       4 or 8 (bytes per value)
//! meta_len   u32, followed by meta_len bytes of UTF-8 JSON
//! n_tensors  u32
//! directory  per tensor: name_len u32, name, ndim u32, dims u64 x ndim, offset u64
//! data       raw little-endian values; offsets are relative to the data start
//! ```

use super::{Precision, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CIRCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn write_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::PRECISION.byte_width() as u8);
    out.extend_from_slice(&(ck.metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.metadata.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    let width = T::PRECISION.byte_width() as u64;
    let mut offset = 0u64;
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64 * width;
    }
    for (_, t) in &ck.tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads only the precision byte, so callers can dispatch on it.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    match bytes[12] {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Format(format!("unknown precision width {}", w))),
    }
}

pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let width = r.take(1)?[0] as usize;
    if width != T::PRECISION.byte_width() {
        return Err(Error::Format(format!(
            "checkpoint stores {}-byte values, reader expects {}",
            width,
            T::PRECISION.byte_width()
        )));
    }
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut dir = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        dir.push((name, shape, offset));
    }
    let data_start = r.pos;
    let mut tensors = Vec::with_capacity(n);
    for (name, shape, offset) in dir {
        let count: usize = shape.iter().product();
        let start = data_start + offset;
        let end = start + count * width;
        if end > bytes.len() {
            return Err(Error::Format(format!("tensor `{}` runs past end of file", name)));
        }
        let data = bytes[start..end].chunks_exact(width).map(T::read_le).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Checkpoint { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t1 = Tensor::<f32>::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, 7.0, -1e-30]).unwrap();
        let t2 = Tensor::<f32>::scalar(0.1);
        let ck = Checkpoint {
            metadata: "{\"k\":1}".to_string(),
            tensors: vec![("a".into(), t1), ("b".into(), t2)],
        };
        let bytes = write_checkpoint(&ck);
        let back = read_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let ck = Checkpoint::<f64> {
            metadata: String::new(),
            tensors: vec![("x".into(), Tensor::zeros(&[1]))],
        };
        let bytes = write_checkpoint(&ck);
        assert_eq!(checkpoint_precision(&bytes).unwrap(), Precision::F64);
        assert!(read_checkpoint::<f32>(&bytes).is_err());
        assert!(read_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
