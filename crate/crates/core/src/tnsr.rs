//! The `TNSR` binary tensor format.
//!
//! Layout: magic `TNSR1\0`, one byte holding the order N, N little-endian
//! `u64` dims, then the values as little-endian IEEE-754 `f64` in storage
//! order. Round trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const MAGIC: &[u8; 6] = b"TNSR1\0";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 1 + 8 * (t.order() + t.len()));
    write_to(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn write_to(t: &Tensor, w: &mut impl Write) -> Result<()> {
    let order = u8::try_from(t.order())
        .map_err(|_| Error::Format(format!("order {} does not fit in one byte", t.order())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[order])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cursor = bytes;
    let t = read_from(&mut cursor)?;
    Ok((t, bytes.len() - cursor.len()))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut order = [0u8; 1];
    read_exact(r, &mut order, "order")?;
    if order[0] == 0 {
        return Err(Error::Format("order must be at least 1".into()));
    }
    let mut dims = Vec::with_capacity(order[0] as usize);
    let mut buf = [0u8; 8];
    for _ in 0..order[0] {
        read_exact(r, &mut buf, "dims")?;
        let d = u64::from_le_bytes(buf);
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let mut data = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        read_exact(r, &mut buf, "values")?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn write_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &Tensor::from_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_file(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -0.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..6], b"TNSR1\0");
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(&b[15..23], &1u64.to_le_bytes());
        assert_eq!(&b[23..31], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 39);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut zero_dim = b;
        zero_dim[7..15].copy_from_slice(&0u64.to_le_bytes());
        assert!(decode(&zero_dim).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., f64::MIN_POSITIVE]);
        let path = dir.path().join("m.tnsr");
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..4, 1..5),
            seed in any::<u64>(),
        ) {
            let len: usize = dims.iter().product();
            // arbitrary bit patterns, NaN payloads included
            let data: Vec<f64> = (0..len as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i.rotate_left(17))))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let a: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
