//! `ASFT` tensor files.
//!
//! ```text
//! magic "ASFT" | version u16 | dtype u8 (0 f32, 1 f64) | rank u8 | dims u64 × rank | payload
//! ```
//!
//! Everything little-endian, payload row-major.

use std::path::Path;

use crate::codec::{read_dims, Reader};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"ASFT";
const VERSION: u16 = 1;
const DTYPE_OFFSET: u64 = 6;

/// A decoded tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_payload<T: Scalar>(r: &mut Reader<'_>, dims: Vec<usize>, count: usize) -> Result<Tensor<T>> {
    let bytes = r.take(count.saturating_mul(T::DTYPE.size()), "payload")?;
    r.finish()?;
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(dims, data)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::format(0, "bad magic, expected ASFT"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let code = r.u8("dtype")?;
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::format(DTYPE_OFFSET, format!("unknown dtype code {code}")))?;
    let rank = r.u8("rank")? as usize;
    let (dims, count) = read_dims(&mut r, rank)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&mut r, dims, count)?),
        DType::F64 => AnyTensor::F64(decode_payload(&mut r, dims, count)?),
    })
}

/// Decodes a tensor that must have precision `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let any = decode_any(bytes)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::format(
            DTYPE_OFFSET,
            format!("stored dtype {:?}, requested {:?}", any.dtype(), T::DTYPE),
        ));
    }
    Ok(match any {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn read_any_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_any(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-10.0..10.0)).unwrap()
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let t = random_f32(&[3, 4, 5], 0);
        let back: Tensor<f32> = decode_tensor(&encode_tensor(&t)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn f64_round_trip_keeps_all_bits() {
        let vals = vec![1.0 + f64::EPSILON, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI, f64::NAN];
        let t = Tensor::new(vec![2, 3], vals).unwrap();
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip_and_dtype_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.asft");
        let t = random_f32(&[2, 2], 1);
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor::<f32>(&path).unwrap(), t);
        assert_eq!(read_any_tensor(&path).unwrap(), AnyTensor::F32(t));
        match read_tensor::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, DTYPE_OFFSET),
            other => panic!("expected dtype mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_tensor(&random_f32(&[3, 4, 5], 2));
        let header = 4 + 2 + 1 + 1 + 3 * 8;
        match decode_any(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, header as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_tensor(&random_f32(&[2], 3));
        bytes[0] = b'X';
        assert!(matches!(decode_any(&bytes), Err(Error::Format { offset: 0, .. })));
        bytes[0] = b'A';
        bytes[4] = 9;
        assert!(matches!(decode_any(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn header_fuzz_never_silently_accepts() {
        let t = random_f32(&[3, 4, 5], 4);
        let bytes = encode_tensor(&t);
        let header = 4 + 2 + 1 + 1 + 3 * 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut b = bytes.clone();
            let pos = rng.gen_range(0..header);
            b[pos] ^= rng.gen_range(1..=255u8);
            match decode_any(&b) {
                Err(Error::Format { .. }) => {}
                other => panic!("corrupted byte {pos}: {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_any(&bytes);
        }

        #[test]
        fn arbitrary_shapes_round_trip(shape in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let t = random_f32(&shape, seed);
            prop_assert_eq!(decode_tensor::<f32>(&encode_tensor(&t)).unwrap(), t);
        }
    }
}
