//! `RADT` tensor archive: a flat, little-endian list of named tensors.
//!
//! ```text
//! "RADT" | version u32 | count u32 | count × entry
//! entry = name_len u32 | name utf-8 | dtype u8 | rank u8 | rank × dim u64 | data
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::param::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"RADT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a tensor archive (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("tensor {name:?} has dtype {found:?}, expected {expected:?}")]
    DtypeMismatch { name: String, found: DType, expected: DType },
    #[error("archive has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, casting between precisions.
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        fn body<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
            out.push(T::DTYPE.code());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(out);
            }
        }
        match self {
            AnyTensor::F32(t) => body(t, out),
            AnyTensor::F64(t) => body(t, out),
        }
    }
}

impl<T: Element> From<Tensor<T>> for AnyTensor {
    fn from(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) -> Result<(), ArchiveError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        self.entries.push((name, t.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Snapshot of every parameter value in `store`.
    pub fn from_store<T: Element>(store: &ParamStore<T>) -> Self {
        Archive {
            entries: store.iter().map(|p| (p.name.clone(), AnyTensor::from(p.value.clone()))).collect(),
        }
    }

    /// Overwrites every parameter of `store` from the archive; names and shapes must match.
    pub fn load_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<(), ArchiveError> {
        for p in store.iter_mut() {
            let t = self.get(&p.name).ok_or_else(|| ArchiveError::Missing(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(ArchiveError::ShapeMismatch {
                    name: p.name.clone(),
                    found: t.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
            p.value = t.to();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| ArchiveError::BadName)?.to_string();
            if !seen.insert(name.clone()) {
                return Err(ArchiveError::DuplicateName(name));
            }
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(ArchiveError::BadDtype(code))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = n.and_then(|n| n.checked_mul(dtype.size())).ok_or(ArchiveError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
            let raw = r.take(nbytes)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(decode(&shape, raw)),
                DType::F64 => AnyTensor::F64(decode(&shape, raw)),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Archive { entries })
    }

    /// Writes atomically: a temporary sibling file is renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn decode<T: Element>(shape: &[usize], raw: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).expect("length checked")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ArchiveError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a temporary file next to `path`, syncs, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
