//! Named-array binary container used for checkpoints.
//!
//! Layout, all little-endian: magic `UNMX`, `u32` version, `u32` entry
//! count, then per entry a `u32` name length, the UTF-8 name, a kind byte
//! (`0` = f64, `1` = bytes), a `u64` element count and the elements.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UNMX";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_f64(&mut self, name: &str, data: Vec<f64>) {
        self.entries.push((name.to_string(), Entry::F64(data)));
    }

    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.entries.push((name.to_string(), Entry::Bytes(data)));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put_bytes(name, v.to_le_bytes().to_vec());
    }

    fn find(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.find(name)? {
            Entry::F64(v) => Ok(v),
            Entry::Bytes(_) => Err(corrupt(format!("entry `{name}` is not an f64 array"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name)? {
            Entry::Bytes(v) => Ok(v),
            Entry::F64(_) => Err(corrupt(format!("entry `{name}` is not a byte array"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let b = self.bytes(name)?;
        let arr: [u8; 8] = b.try_into().map_err(|_| corrupt(format!("entry `{name}` is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec()).map_err(|_| corrupt(format!("entry `{name}` is not UTF-8")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match e {
                Entry::F64(v) => {
                    w.write_all(&[0])?;
                    w.write_all(&(v.len() as u64).to_le_bytes())?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                Entry::Bytes(v) => {
                    w.write_all(&[1])?;
                    w.write_all(&(v.len() as u64).to_le_bytes())?;
                    w.write_all(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(mut b: &[u8]) -> Result<Self> {
        fn take<'a>(b: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
            if b.len() < n {
                return Err(corrupt("truncated file"));
            }
            let (head, tail) = b.split_at(n);
            *b = tail;
            Ok(head)
        }
        fn u32_(b: &mut &[u8]) -> Result<u32> {
            Ok(u32::from_le_bytes(take(b, 4)?.try_into().unwrap()))
        }
        fn u64_(b: &mut &[u8]) -> Result<u64> {
            Ok(u64::from_le_bytes(take(b, 8)?.try_into().unwrap()))
        }
        if take(&mut b, 4)? != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32_(&mut b)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = u32_(&mut b)?;
        let mut c = Container::new();
        for _ in 0..count {
            let nlen = u32_(&mut b)? as usize;
            let name = std::str::from_utf8(take(&mut b, nlen)?)
                .map_err(|_| corrupt("entry name is not UTF-8"))?
                .to_string();
            let kind = take(&mut b, 1)?[0];
            let len = u64_(&mut b)? as usize;
            let entry = match kind {
                0 => {
                    let raw = take(&mut b, len.checked_mul(8).ok_or_else(|| corrupt("entry too large"))?)?;
                    Entry::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                1 => Entry::Bytes(take(&mut b, len)?.to_vec()),
                k => return Err(corrupt(format!("unknown entry kind {k}"))),
            };
            c.entries.push((name, entry));
        }
        if !b.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(c)
    }
}
