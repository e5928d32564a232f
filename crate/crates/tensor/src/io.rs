//! Raw little-endian f32 blobs. Shapes live in a sidecar manifest owned by
//! the caller.

use std::io::{Read, Write};

use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

pub fn write_f32_le<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f32_le<T: Scalar>(r: &mut impl Read, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

/// Parses a whole blob given every shape in storage order.
pub fn read_all_f32_le<T: Scalar>(bytes: &[u8], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return invalid(
            "read_all_f32_le",
            format!("blob has {} bytes, manifest expects {}", bytes.len(), total * 4),
        );
    }
    let mut cursor = bytes;
    shapes.iter().map(|s| read_f32_le(&mut cursor, s)).collect()
}
