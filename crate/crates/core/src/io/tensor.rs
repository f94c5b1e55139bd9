//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! | field   | size          |
//! |---------|---------------|
//! | magic   | `b"CVTF"`     |
//! | version | u16           |
//! | ndims   | u8            |
//! | dims    | u32 × ndims   |
//! | dtype   | u8 (1 = f32, 2 = f64) |
//! | payload | row-major values |
//!
//! f32 payloads are promoted to f64 on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CVTF";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let ndims = u8::try_from(tensor.shape().len())
        .map_err(|_| Error::Format(format!("too many dims: {}", tensor.shape().len())))?;
    let mut out = Vec::with_capacity(8 + 4 * ndims as usize + tensor.len() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(ndims);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.code());
    match dtype {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Cursor over a byte slice that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "{} truncated: need {n} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4], version: u16) -> Result<()> {
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u16()?;
    if v != version {
        return Err(Error::Format(format!("unsupported format version {v}, expected {version}")));
    }
    Ok(())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    check_magic(&mut r, TENSOR_MAGIC, TENSOR_VERSION)?;
    let ndims = r.u8()? as usize;
    if ndims == 0 {
        return Err(Error::Format("tensor has zero dims".into()));
    }
    let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let dtype = DType::from_code(r.u8()?)?;
    let data = match dtype {
        DType::F32 => r.f32s(count)?,
        DType::F64 => r.f64s(count)?,
    };
    r.finish()?;
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(format!("tensor entry {pos}")));
    }
    Tensor::new(dims, data)
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(tensor, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn f64_round_trip_is_bitwise() {
        let t = random_tensor(vec![8, 8, 64], 1);
        let back = decode_tensor(&encode_tensor(&t, DType::F64).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn f32_promotes_on_load() {
        let t = random_tensor(vec![2, 3], 2);
        let back = decode_tensor(&encode_tensor(&t, DType::F32).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_tensor(&t, DType::F64).unwrap();
        assert_eq!(&bytes[..4], b"CVTF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes[15], 2);
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = encode_tensor(&random_tensor(vec![4, 4], 3), DType::F64).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode_tensor(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_tensor(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_version_dtype() {
        let good = encode_tensor(&random_tensor(vec![2], 4), DType::F64).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
        let mut b = good;
        b[11] = 7;
        assert!(matches!(decode_tensor(&b), Err(Error::Format(_))));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_tensor(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), DType::F64).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::NonFiniteValue(_))));
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(dims in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
            let t = random_tensor(dims, seed);
            let back = decode_tensor(&encode_tensor(&t, DType::F64).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
