//! Flat binary archive of named tensors.
//!
//! Layout (all integers little-endian `u64`, floats little-endian `f64`):
//!
//! ```text
//! magic "EPISEGCK" | version | seed
//! meta_count  | meta_count × (key_len key_utf8 value_len value_utf8)
//! tensor_count| tensor_count × (name_len name_utf8 rank extents[rank] payload[numel])
//! ```
//!
//! Metadata carries the architecture description so a checkpoint can be
//! rebuilt without any side files.

use std::io::Write;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EPISEGCK";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(seed: u64) -> Self {
        Checkpoint {
            seed,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Snapshot of every tensor in `store`, without gradients.
    pub fn from_store(seed: u64, meta: Vec<(String, String)>, store: &ParamStore) -> Self {
        Checkpoint {
            seed,
            meta,
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())))
                .collect(),
        }
    }

    /// Copies the archived values into `store`, which must hold exactly the
    /// same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            store.load_named(name, t)?;
        }
        Ok(())
    }

    /// Fails unless the `kind` metadata equals `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.meta("kind") {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found {}",
                other.unwrap_or("no kind")
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, FORMAT_VERSION);
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.meta.len() as u64);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &e in t.shape() {
                put_u64(&mut out, e as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u64()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let seed = r.u64()?;
        let n_meta = r.len()?;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_tensors = r.len()?;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.len()?;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` too large"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            seed,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}
