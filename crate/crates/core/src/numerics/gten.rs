//! `GTEN` tensor container.
//!
//! Layout, all little-endian: the four magic bytes `GTEN`, a `u32` rank, one
//! `u32` per dimension, then the `f32` payload in row-major order.

use std::io::{self, Read, Write};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"GTEN";

/// Size in bytes of the encoded form of a tensor with this shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> io::Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t.shape()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "missing GTEN magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"GTEN");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(t.shape()));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::new(vec![4], vec![1.0f32; 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
        assert!(read_tensor(&mut &b"NOPE\0\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 97)))
                .map(|x| if x.is_finite() { x } else { 0.5 })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            let mut again = Vec::new();
            write_tensor(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
            prop_assert_eq!(back.shape(), t.shape());
        }
    }
}
