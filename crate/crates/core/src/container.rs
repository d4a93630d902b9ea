//! CYCK container: a flat list of named, typed tensors.
//!
//! Layout (little endian): `"CYCK"`, version `u32`, entry count `u32`, then
//! per entry a `u16` name length, the UTF-8 name, a dtype tag `u8`
//! (0 = f32, 1 = f64, 2 = u64), a rank `u8`, `rank` extents as `u32`, and the
//! raw payload.

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CYCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            _ => Payload::F64(t.data().iter().map(|v| v.to_f64().unwrap()).collect()),
        };
        Self { name: name.into(), shape: t.shape().to_vec(), payload }
    }

    pub fn u64s(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self { name: name.into(), shape: vec![values.len()], payload: Payload::U64(values) }
    }

    pub fn u64(name: impl Into<String>, value: u64) -> Self {
        Self { name: name.into(), shape: Vec::new(), payload: Payload::U64(vec![value]) }
    }

    pub fn f64(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), shape: Vec::new(), payload: Payload::F64(vec![value]) }
    }

    pub fn f64s(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), shape: vec![values.len()], payload: Payload::F64(values) }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut names = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::InvalidArgument("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate entry name {}", e.name)));
        }
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::InvalidArgument(format!("entry name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| Error::InvalidArgument(format!("{}: rank too large", e.name)))?;
        if e.shape.iter().product::<usize>() != e.payload.len() {
            return Err(Error::shape("encode", format!("{}: shape {:?} vs {} values", e.name, e.shape, e.payload.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.payload.dtype() as u8);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{}: extent too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

/// Parses a whole container; nothing is returned unless every byte is valid.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.array::<4>("magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected CYCK"));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = u32::from_le_bytes(r.array("entry count")?);
    let mut entries = Vec::new();
    let mut names = BTreeSet::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(start + 2, "entry name is not UTF-8"))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::format(start, format!("duplicate entry {name}")));
        }
        let tag_at = r.pos as u64;
        let dtype = DType::from_tag(r.array::<1>("dtype")?[0])
            .ok_or_else(|| Error::format(tag_at, format!("{name}: unknown dtype tag")))?;
        let rank = r.array::<1>("rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("extent")?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(tag_at, format!("{name}: element count overflows")))?;
        let bytes = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::format(tag_at, format!("{name}: payload size overflows")))?;
        let raw = r.take(bytes, &format!("payload of {name}"))?;
        let payload = match dtype {
            DType::F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U64 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        entries.push(Entry { name, shape, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

/// Name-indexed view over decoded entries that tracks which were consumed.
pub struct Entries {
    entries: Vec<Option<Entry>>,
}

impl Entries {
    pub fn new(entries: Vec<Entry>) -> Self {
        Self { entries: entries.into_iter().map(Some).collect() }
    }

    pub fn take(&mut self, name: &str) -> Result<Entry> {
        self.entries
            .iter_mut()
            .find(|e| e.as_ref().is_some_and(|e| e.name == name))
            .and_then(Option::take)
            .ok_or_else(|| Error::InvalidArgument(format!("missing entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().flatten().any(|e| e.name == name)
    }

    pub fn tensor<T: Element>(&mut self, name: &str) -> Result<Tensor<T>> {
        let e = self.take(name)?;
        if e.payload.dtype() != T::DTYPE {
            return Err(Error::InvalidArgument(format!("{name}: stored as {:?}, expected {:?}", e.payload.dtype(), T::DTYPE)));
        }
        let Entry { shape, payload, .. } = e;
        let data: Vec<T> = match payload {
            Payload::F32(v) => v.into_iter().map(|x| T::from_f32(x).unwrap()).collect(),
            Payload::F64(v) => v.into_iter().map(|x| T::from_f64(x).unwrap()).collect(),
            Payload::U64(_) => unreachable!(),
        };
        Tensor::new(shape, data)
    }

    pub fn u64s(&mut self, name: &str) -> Result<Vec<u64>> {
        match self.take(name)?.payload {
            Payload::U64(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!("{name}: expected u64 values, found {:?}", other.dtype()))),
        }
    }

    pub fn u64(&mut self, name: &str) -> Result<u64> {
        single(name, self.u64s(name)?)
    }

    pub fn f64s(&mut self, name: &str) -> Result<Vec<f64>> {
        match self.take(name)?.payload {
            Payload::F64(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!("{name}: expected f64 values, found {:?}", other.dtype()))),
        }
    }

    pub fn f64(&mut self, name: &str) -> Result<f64> {
        single(name, self.f64s(name)?)
    }

    pub fn usize(&mut self, name: &str) -> Result<usize> {
        usize::try_from(self.u64(name)?).map_err(|_| Error::InvalidArgument(format!("{name}: value too large")))
    }

    /// Fails if any entry was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().flatten().next() {
            Some(e) => Err(Error::InvalidArgument(format!("unexpected entry {}", e.name))),
            None => Ok(()),
        }
    }
}

fn single<V>(name: &str, mut v: Vec<V>) -> Result<V> {
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!("{name}: expected one value, found {}", v.len())));
    }
    Ok(v.pop().unwrap())
}
