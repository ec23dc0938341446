//! `UDTF` binary tensor container.
//!
//! Layout: magic `UDTF`, version byte `0x01`, dtype code (`0x01` f64,
//! `0x02` f32), rank byte, `rank` little-endian `u32` extents, then the
//! little-endian row-major payload.

use std::io::{self, Read, Write};

use super::{DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UDTF";
pub const VERSION: u8 = 0x01;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds 255", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.dtype().code(), t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match t.dtype() {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad UDTF magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported UDTF version {}",
            head[4]
        )));
    }
    let dtype = DType::from_code(head[5])?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
    let mut payload = vec![0u8; n * dtype.width()];
    read_exact(r, &mut payload)?;
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(Tensor::new(&shape, data)?.with_dtype(dtype))
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * t.dtype().width());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let t = read_tensor(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok(t)
}

/// `read_exact` with end-of-file reported as a format error.
pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("truncated input".into()),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"UDTF");
        assert_eq!(b[4..7], [0x01, 0x01, 2]);
        assert_eq!(b[7..11], 2u32.to_le_bytes());
        assert_eq!(b[11..15], 1u32.to_le_bytes());
        assert_eq!(b[15..23], 1.0f64.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 16);
    }

    #[test]
    fn truncated_is_format_error() {
        let b = encode(&Tensor::zeros(&[3, 3]));
        for cut in [0, 3, 7, 12, b.len() - 1] {
            assert!(
                matches!(decode(&b[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn scalar_and_f32() {
        let s = Tensor::scalar(3.25);
        assert!(decode(&encode(&s)).unwrap().bit_eq(&s));
        let f = Tensor::new(&[3], vec![0.1, 0.2, 0.3])
            .unwrap()
            .to_dtype(DType::F32);
        let b = encode(&f);
        assert_eq!(b[5], 0x02);
        assert_eq!(b.len(), 7 + 4 + 12);
        let back = decode(&b).unwrap();
        assert_eq!(back.dtype(), DType::F32);
        assert!(back.bit_eq(&f));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert_eq!(encode(&back), encode(&t));
        }
    }
}
