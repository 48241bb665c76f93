//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PSMMCKPT"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!          payload f64 × product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{DiffError, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PSMMCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamStore) -> Result<(), DiffError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: io::Error) -> DiffError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        DiffError::Checkpoint("truncated checkpoint".into())
    } else {
        DiffError::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParamStore, DiffError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        if name_len > 1 << 16 {
            return Err(DiffError::Checkpoint(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| DiffError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        if rank == 0 || rank > 8 {
            return Err(DiffError::Checkpoint(format!("`{name}`: rank {rank} unsupported")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| DiffError::Checkpoint(format!("`{name}`: shape {shape:?} too large")))?;
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &ParamStore) -> Result<(), DiffError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore, DiffError> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_documented() {
        let mut p = ParamStore::new();
        p.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(&buf[..8], b"PSMMCKPT");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..22], b"ab");
        assert_eq!(&buf[22..26], &2u32.to_le_bytes());
        assert_eq!(&buf[26..34], &1u64.to_le_bytes());
        assert_eq!(&buf[34..42], &2u64.to_le_bytes());
        assert_eq!(&buf[42..50], &1.0f64.to_le_bytes());
        assert_eq!(&buf[50..58], &(-2.5f64).to_le_bytes());
        assert_eq!(buf.len(), 58);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[4])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(DiffError::Checkpoint(_))));
    }
}
