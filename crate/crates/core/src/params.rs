//! Named parameter collections and their binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      b"FFCK"
//! version    u32
//! digest     u32 length + utf-8 bytes (config digest, may be empty)
//! count      u32
//! per tensor u32 name length + utf-8 name, u32 ndim, ndim × u64 dims, u8 frozen
//! payload    concatenated f32 values of every tensor in header order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub frozen: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor payload/shape mismatch");
        Self { shape, data, frozen: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    /// (rows, cols) view; vectors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }
}

/// Ordered map from parameter name to tensor. Names are unique and insertion
/// order is preserved (it is part of the checkpoint format).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, t) in &mut self.entries {
            t.frozen = frozen;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.frozen)
    }

    /// Subset of tensors whose name satisfies `keep`, in original order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self { entries: self.entries.iter().filter(|(n, _)| keep(n)).cloned().collect() }
    }

    /// Appends every tensor of `other`; fails on a name collision.
    pub fn merge(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (n, t) in &other.entries {
            self.insert(n.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Same names, shapes and frozen flags.
    pub fn same_layout<U: Real>(&self, other: &ParamSet<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape == tb.shape)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let data = t.data.iter().map(|&v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect();
                    (n.clone(), Tensor { shape: t.shape.clone(), data, frozen: t.frozen })
                })
                .collect(),
        }
    }

    /// Sum of absolute element-wise differences over tensors matching `select`.
    pub fn abs_diff(&self, other: &ParamSet<T>, select: impl Fn(&str, &Tensor<T>) -> bool) -> T {
        let mut total = T::zero();
        for ((n, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            if select(n, a) {
                for (&x, &y) in a.data.iter().zip(&b.data) {
                    total = total + (x - y).abs();
                }
            }
        }
        total
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet<f32> {
    pub fn to_bytes(&self, digest: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.numel() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(u8::from(t.frozen));
        }
        for (_, t) in &self.entries {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, returning the parameters and the stored digest.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let digest = r.string()?;
        let count = r.u32()? as usize;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::CorruptCheckpoint(format!("frozen flag {b} for {name}"))),
            };
            header.push((name, shape, frozen));
        }
        let mut params = ParamSet::new();
        for (name, shape, frozen) in header {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params
                .insert(name, Tensor { shape, data, frozen })
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((params, digest))
    }
}

pub fn save_checkpoint(params: &ParamSet<f32>, digest: &str, path: &Path) -> Result<()> {
    write_atomic(path, &params.to_bytes(digest))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, String)> {
    ParamSet::from_bytes(&fs::read(path)?)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
}
