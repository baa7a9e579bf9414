//! `DKPT` container: named tensors with a CRC32 trailer.
//!
//! ```text
//! "DKPT" | u16 version | u32 chunk count
//! per chunk: u16 name length | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | data (LE)
//! u32 CRC32 of every preceding byte
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"DKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

/// Ordered named tensors. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    chunks: Vec<(String, TensorData)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptData(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let raw = r.take(n.checked_mul(size).ok_or_else(|| corrupt("tensor too large"))?)?;
    let data = raw.chunks(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.chunks.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert_data(&mut self, name: impl Into<String>, data: TensorData) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::config("chunk name too long"));
        }
        if data.shape().len() > u8::MAX as usize || data.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Unsupported(format!("chunk {name} has an unrepresentable shape")));
        }
        if self.chunks.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("duplicate chunk {name}")));
        }
        self.chunks.push((name, data));
        Ok(())
    }

    /// Stores a tensor in its native precision.
    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.insert_data(name, TensorData::from_tensor(t))
    }

    pub fn put_f64(&mut self, name: impl Into<String>, values: &[f64]) -> Result<()> {
        self.put(name, &Tensor::new([values.len()], values.to_vec())?)
    }

    pub fn data(&self, name: &str) -> Result<&TensorData> {
        self.chunks.iter().find(|(n, _)| n == name).map(|(_, d)| d).ok_or_else(|| corrupt(format!("checkpoint has no chunk {name}")))
    }

    /// Reads a chunk, converting to `T` if stored in the other precision.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        Ok(self.data(name)?.to_tensor())
    }

    pub fn get_f64(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get::<f64>(name)?.into_data())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for (name, data) in &self.chunks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype() as u8);
            out.push(data.shape().len() as u8);
            for &d in data.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match data {
                TensorData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                TensorData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(corrupt("checkpoint truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad checkpoint magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let crc = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
        if crc32fast::hash(body) != crc {
            return Err(corrupt("checkpoint CRC mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("chunk name is not UTF-8"))?.to_string();
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = match dtype {
                DType::F32 => TensorData::F32(read_tensor(&mut r, shape)?),
                DType::F64 => TensorData::F64(read_tensor(&mut r, shape)?),
            };
            ck.insert_data(name, data).map_err(|e| corrupt(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after the last chunk"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put("a/weight", &Tensor::<f32>::from_f64([2, 3], &[1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, -0.0]).unwrap()).unwrap();
        ck.put("b", &Tensor::<f64>::from_f64([4], &[0.1, 1e300, -7.0, 2.0]).unwrap()).unwrap();
        ck.put_f64("meta/seed", &[42.0]).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.get::<f32>("a/weight").unwrap(), ck.get::<f32>("a/weight").unwrap());
        assert_eq!(back.data("b").unwrap().dtype(), DType::F64);
    }

    #[test]
    fn empty_is_valid() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 4);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptData(_))));
        let mut body = bytes.clone();
        body[20] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&body), Err(Error::CorruptData(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptData(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::CorruptData(_))));
    }

    #[test]
    fn version_mismatch_is_unsupported() {
        let mut bytes = Checkpoint::new().to_bytes();
        bytes[4] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Unsupported(_))));
    }
}
