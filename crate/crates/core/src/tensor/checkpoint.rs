//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SAMB" | u32 version | { u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f64 payload[numel] }*
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SAMB";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, have {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"SAMB\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut entries = Vec::new();
    while r.pos < buf.len() {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: (start + 4) as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        assert!(matches!(
            decode(b"NOPE\x01\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        let entries = vec![("w".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())];
        let bytes = encode(&entries);
        // header 8, name len 4, name 1, rank 4, dim 4 => payload starts at 21
        match decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shapes in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..3), 0..4),
            seed in any::<u64>(),
        ) {
            let mut bits = seed;
            let entries: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| {
                    bits = bits.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(bits)
                }).collect();
                (format!("p{i}.ü"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let bytes = encode(&entries);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), entries.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let a: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
