//! Binary tensor format.
//!
//! ```text
//! magic      4 bytes  "RATN"
//! precision  u8       1 = f32, 2 = f64
//! rank       u8
//! extents    rank × u32, little-endian
//! values     product(extents) × f32/f64, little-endian, row-major
//! ```
//!
//! Files may hold several records back to back.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

use super::tensor::{numel, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"RATN";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, precision: Precision) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::dim(format!("rank {} does not fit the format", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[precision.code(), t.rank() as u8])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::dim(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * precision.byte_width());
    match precision {
        Precision::Single => t.data().iter().for_each(|&v| buf.extend((v as f32).to_le_bytes())),
        Precision::Double => t.data().iter().for_each(|&v| buf.extend(v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record. Returns `Ok(None)` at a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<(Tensor, Precision)>> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic[..1])? {
        0 => return Ok(None),
        _ => r.read_exact(&mut magic[1..])?,
    }
    if &magic != MAGIC {
        return Err(Error::Data(format!("bad tensor magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let precision = Precision::from_code(head[0])
        .ok_or_else(|| Error::Data(format!("unknown precision code {}", head[0])))?;
    let mut shape = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n = numel(&shape);
    let mut raw = vec![0u8; n * precision.byte_width()];
    r.read_exact(&mut raw).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Data("truncated tensor payload".into()),
        _ => Error::Io(e),
    })?;
    let data = match precision {
        Precision::Single => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::Double => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Some((Tensor::new(shape, data)?, precision)))
}

pub fn read_all<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some((t, _)) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::Single).unwrap();
        assert_eq!(&buf[..4], b"RATN");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&buf[18..22], &(-2.0f32).to_le_bytes());
        assert_eq!(buf.len(), 22);
    }

    #[test]
    fn rejects_garbage() {
        let mut r: &[u8] = b"NOPE\x01\x00";
        assert!(read_tensor(&mut r).is_err());
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, Precision::Double).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn concatenated_records_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..4),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<Tensor> = shapes.iter().enumerate().map(|(k, s)| {
                Tensor::from_fn(s, |i| ((seed as f64) * 1e-3 + (i * 7 + k) as f64).sin())
            }).collect();
            let mut buf = Vec::new();
            for t in &tensors {
                write_tensor(&mut buf, t, Precision::Double).unwrap();
            }
            let back = read_all(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
