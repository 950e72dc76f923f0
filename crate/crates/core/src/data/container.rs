//! Binary container shared by dataset files and parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "DBLT"
//! version   u16      1
//! kind      u8       1 = dataset, 2 = checkpoint
//! reserved  u8       0
//! count     u32      number of arrays
//! per array:
//!   name_len u16, name (UTF-8)
//!   dtype    u8      1 = f64, 2 = u32, 3 = u64
//!   ndim     u8, dims u64 × ndim
//!   payload  product(dims) elements
//! ```

use super::DataError;

pub const MAGIC: &[u8; 4] = b"DBLT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Dataset = 1,
    Checkpoint = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: &[usize], data: ArrayData) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

pub fn encode(kind: ContainerKind, arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.push(0);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        let dtype: u8 = match a.data {
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
            ArrayData::U64(_) => 3,
        };
        out.push(dtype);
        out.push(a.shape.len() as u8);
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, DataError> {
        Err(DataError::Parse {
            offset: self.offset,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        match self.offset.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            _ => self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.offset
            )),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ContainerKind, Vec<NamedArray>), DataError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.offset = 0;
        return r.fail("bad magic");
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let kind = match r.u8("kind")? {
        1 => ContainerKind::Dataset,
        2 => ContainerKind::Checkpoint,
        k => return r.fail(format!("unknown container kind {k}")),
    };
    r.u8("reserved")?;
    let count = r.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = match std::str::from_utf8(r.take(name_len, "array name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => return r.fail("array name is not UTF-8"),
        };
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(n) = n else {
            return r.fail(format!("array `{name}` shape {shape:?} overflows"));
        };
        let data = match dtype {
            1 => {
                let raw = r.take(n.saturating_mul(8), &name)?;
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let raw = r.take(n.saturating_mul(4), &name)?;
                ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            3 => {
                let raw = r.take(n.saturating_mul(8), &name)?;
                ArrayData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return r.fail(format!("unknown dtype {other} for `{name}`")),
        };
        arrays.push(NamedArray { name, shape, data });
    }
    if r.offset != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.offset));
    }
    Ok((kind, arrays))
}

/// Looks up an array by name.
pub fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray, DataError> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| DataError::Validation(format!("missing array `{name}`")))
}
