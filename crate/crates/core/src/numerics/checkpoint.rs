//! Binary checkpoint codec.
//!
//! Little-endian layout: magic `SPAC`, `u32` version (1), `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, one `u32`
//! per dimension and the `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SPAC";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>, NumericsError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| NumericsError::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| NumericsError::Checkpoint(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| NumericsError::Checkpoint(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        if self.pos + n > self.buf.len() {
            return Err(NumericsError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore, NumericsError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| NumericsError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(NumericsError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), NumericsError> {
    let bytes = encode(store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore, NumericsError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let mut s = ParamStore::new();
        s.add("ab", Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap());
        let b = encode(&s).unwrap();
        let mut expected = b"SPAC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(decode(&b).unwrap(), s);
    }

    #[test]
    fn rejects_corruption() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[3, 3]));
        let b = encode(&s).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(decode(&v2).is_err());
    }
}
