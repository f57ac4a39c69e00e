//! `DIMT` raw tensor container.
//!
//! Layout (little-endian): `b"DIMT"`, version `u8`, rank `u32`, `rank × u64`
//! dims, dtype `u8` (0 = f32, 1 = f64), then the flat row-major payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{DimError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DIMT";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(DimError::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version] = read_array::<1, _>(r)?;
    if version != TENSOR_VERSION {
        return Err(DimError::Format(format!("unsupported tensor version {version}")));
    }
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank == 0 || rank > 16 {
        return Err(DimError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let [dtype] = read_array::<1, _>(r)?;
    let n: usize = shape.iter().product();
    let data = match dtype {
        0 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        other => return Err(DimError::Format(format!("unknown dtype byte {other}"))),
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, Rng};

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"DIMT");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..9], &2u32.to_le_bytes());
        assert_eq!(&buf[9..17], &2u64.to_le_bytes());
        assert_eq!(&buf[17..25], &3u64.to_le_bytes());
        assert_eq!(buf[25], 1);
        assert_eq!(buf.len(), 26 + 6 * 8);
    }

    #[test]
    fn f64_exact_and_f32_rounded() {
        let t = randn(&mut Rng::new(2), &[4, 5]).unwrap();
        for (dtype, expect) in [(DType::F64, t.clone()), (DType::F32, t.to_f32_precision())] {
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, dtype).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            assert_eq!(back, expect);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::vector(vec![1.0]), DType::F64).unwrap();
        buf[0] = b'X';
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
