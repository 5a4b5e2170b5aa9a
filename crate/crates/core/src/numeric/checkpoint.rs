//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "APCK" | version u32 | param count u32
//! per parameter: name length u32 | name (UTF-8) | ndim u32 | dims u64 × ndim | data f64 × Π dims
//! ```
//!
//! Output depends only on names, shapes and values, so equal parameters give
//! byte-identical files.

use std::io::{Read, Write};

use super::{NumericError, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"APCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<'a, W, I>(mut w: W, params: I) -> Result<(), NumericError>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let params: Vec<_> = params.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&len_u32(tensor.shape().len())?.to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumericError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NumericError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NumericError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| NumericError::Checkpoint(format!("parameter name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(
                usize::try_from(u64::from_le_bytes(b))
                    .map_err(|e| NumericError::Checkpoint(e.to_string()))?,
            );
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| NumericError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NumericError::Checkpoint(
            "trailing bytes after last parameter".into(),
        ));
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32, NumericError> {
    u32::try_from(n).map_err(|_| NumericError::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, [("w", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"APCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'w');
        // magic + version + count + name len + name + ndim + 2 dims + 2 values
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(
            f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()),
            -2.0
        );
    }

    #[test]
    fn round_trip() {
        let a = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, f64::MIN_POSITIVE]).unwrap();
        let b = Tensor::new(vec![3], vec![-1.0, 0.0, 1e300]).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, [("a", &a), ("blocks.0.b", &b)]).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "blocks.0.b");
        assert!(back[0].1.bit_eq(&a));
        assert!(back[1].1.bit_eq(&b));
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let t = Tensor::zeros(&[4]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, [("t", &t)]).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(NumericError::Checkpoint(_))
        ));
        bytes.push(0);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
    }
}
