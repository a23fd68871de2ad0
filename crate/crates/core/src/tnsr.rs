//! `TNSR` binary tensor files.
//!
//! Layout: the five magic bytes `TNSR1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"TNSR1";

pub fn write_tnsr<T: Real, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads just the shape from a TNSR stream.
pub fn read_tnsr_shape<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing TNSR1 magic".into()));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect()
}

pub fn read_tnsr<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let shape = read_tnsr_shape(&mut r)?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Tensor::new(&shape, data)
}

pub fn save_tnsr<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tnsr(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tnsr(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_tnsr(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tnsr(&t, &mut buf).unwrap();
        let mut expect = b"TNSR1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tnsr(&b"TNSR2\x01\0\0\0"[..]), Err(Error::Format(_))));
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tnsr(&t, &mut buf).unwrap();
        assert!(read_tnsr(&buf[..buf.len() - 2]).is_err());
        buf.push(0);
        assert!(read_tnsr(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::from_fn(&shape, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff));
            let mut buf = Vec::new();
            write_tnsr(&t, &mut buf).unwrap();
            let back = read_tnsr(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
