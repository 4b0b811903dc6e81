//! Checkpoint container: named weight and moment tables, step counter, and
//! the sampler state, guarded by a trailing checksum.

use crate::nn::Param;
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"CLMAE\0";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
/// Serialized generator state: 32 seed bytes, stream u64, position u128.
pub const RNG_STATE_LEN: usize = 56;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint is damaged (checksum mismatch)")]
    Corrupt,
    #[error("checkpoint format version {found} is not supported (expected {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checkpoint declares unknown element type {found}")]
    BadDtype { found: u8 },
    #[error("checkpoint ends in the middle of {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint is missing parameter '{name}'")]
    MissingParam { name: String },
    #[error("checkpoint carries unexpected parameter '{name}'")]
    UnexpectedParam { name: String },
    #[error(
        "parameter '{name}' has shape {found:?} in the checkpoint, model expects {expected:?}"
    )]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Data-loader position: generator bytes, pass counter, offset into the
/// current permutation, and the permutation itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RngBlob {
    pub rng: [u8; RNG_STATE_LEN],
    pub epoch: u64,
    pub pos: u64,
    pub perm: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: Vec<TableEntry>,
    pub moments: Vec<TableEntry>,
    pub step: u64,
    pub rng: RngBlob,
}

fn push_table(out: &mut Vec<u8>, table: &[TableEntry]) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for e in table {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &ext in &e.shape {
            out.extend_from_slice(&(ext as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CkptError> {
        if self.at + n > self.bytes.len() {
            return Err(CkptError::Truncated { what });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CkptError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("len checked")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CkptError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("len checked")))
    }

    fn table(&mut self, dtype: u8) -> Result<Vec<TableEntry>, CkptError> {
        let count = self.u32("table length")? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u32("name length")? as usize;
            let name = String::from_utf8(self.take(name_len, "name")?.to_vec())
                .map_err(|_| CkptError::Truncated { what: "name (not UTF-8)" })?;
            let rank = self.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("extent")? as usize);
            }
            let numel = shape.iter().product::<usize>();
            let data = match dtype {
                DTYPE_F64 => self
                    .take(numel * 8, "payload")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunked")))
                    .collect(),
                DTYPE_F32 => self
                    .take(numel * 4, "payload")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunked")) as f64)
                    .collect(),
                other => return Err(CkptError::BadDtype { found: other }),
            };
            table.push(TableEntry { name, shape, data });
        }
        Ok(table)
    }
}

impl Checkpoint {
    /// Snapshot the given parameters (weights plus both moment vectors)
    /// in their listed order.
    pub fn capture(digest: [u8; 32], params: &[&Param], step: u64, rng: RngBlob) -> Self {
        let mut table = Vec::with_capacity(params.len());
        let mut moments = Vec::with_capacity(params.len() * 2);
        for p in params {
            table.push(TableEntry {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                data: p.value.data.clone(),
            });
            moments.push(TableEntry {
                name: format!("{}.adam_m", p.name),
                shape: p.value.shape.clone(),
                data: p.m.clone(),
            });
            moments.push(TableEntry {
                name: format!("{}.adam_v", p.name),
                shape: p.value.shape.clone(),
                data: p.v.clone(),
            });
        }
        Checkpoint { digest, params: table, moments, step, rng }
    }

    /// Copy weights and moments back into `params`, matching by name.
    /// Every checkpoint entry must land and every parameter must be fed.
    pub fn restore_into(&self, params: &mut [&mut Param]) -> Result<(), CkptError> {
        let mut by_name: HashMap<&str, &TableEntry> =
            self.params.iter().map(|e| (e.name.as_str(), e)).collect();
        let moments: HashMap<&str, &TableEntry> =
            self.moments.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in params.iter_mut() {
            let e = by_name
                .remove(p.name.as_str())
                .ok_or_else(|| CkptError::MissingParam { name: p.name.clone() })?;
            if e.shape != p.value.shape {
                return Err(CkptError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape.clone(),
                    found: e.shape.clone(),
                });
            }
            p.value.data.copy_from_slice(&e.data);
            for (field, suffix) in [(&mut p.m, ".adam_m"), (&mut p.v, ".adam_v")] {
                let key = format!("{}{}", p.name, suffix);
                let me = moments
                    .get(key.as_str())
                    .ok_or_else(|| CkptError::MissingParam { name: key.clone() })?;
                if me.shape != p.value.shape {
                    return Err(CkptError::ShapeMismatch {
                        name: key,
                        expected: p.value.shape.clone(),
                        found: me.shape.clone(),
                    });
                }
                field.copy_from_slice(&me.data);
            }
            p.grad.fill(0.0);
        }
        if let Some(stray) = by_name.keys().next() {
            return Err(CkptError::UnexpectedParam { name: stray.to_string() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&self.digest);
        push_table(&mut out, &self.params);
        push_table(&mut out, &self.moments);
        out.extend_from_slice(&self.step.to_le_bytes());
        let mut blob = Vec::with_capacity(RNG_STATE_LEN + 8 + 8 + 4 + self.rng.perm.len() * 4);
        blob.extend_from_slice(&self.rng.rng);
        blob.extend_from_slice(&self.rng.epoch.to_le_bytes());
        blob.extend_from_slice(&self.rng.pos.to_le_bytes());
        blob.extend_from_slice(&(self.rng.perm.len() as u32).to_le_bytes());
        for &ix in &self.rng.perm {
            blob.extend_from_slice(&ix.to_le_bytes());
        }
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CkptError> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CkptError::BadMagic);
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("tail"));
        if crc32fast::hash(&bytes[MAGIC.len()..body_end]) != stored {
            return Err(CkptError::Corrupt);
        }
        let mut r = Reader { bytes: &bytes[..body_end], at: MAGIC.len() };
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("len checked"));
        if version != VERSION {
            return Err(CkptError::UnsupportedVersion { found: version });
        }
        let dtype = r.take(1, "element type")?[0];
        if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
            return Err(CkptError::BadDtype { found: dtype });
        }
        let digest: [u8; 32] = r.take(32, "settings digest")?.try_into().expect("len checked");
        let params = r.table(dtype)?;
        let moments = r.table(dtype)?;
        let step = r.u64("step counter")?;
        let blob_len = r.u32("sampler state length")? as usize;
        let blob_start = r.at;
        let rng_bytes: [u8; RNG_STATE_LEN] =
            r.take(RNG_STATE_LEN, "generator state")?.try_into().expect("len checked");
        let epoch = r.u64("pass counter")?;
        let pos = r.u64("sampler position")?;
        let perm_len = r.u32("permutation length")? as usize;
        let mut perm = Vec::with_capacity(perm_len);
        for _ in 0..perm_len {
            perm.push(r.u32("permutation entry")?);
        }
        if r.at - blob_start != blob_len || r.at != body_end {
            return Err(CkptError::Truncated { what: "sampler state" });
        }
        Ok(Checkpoint {
            digest,
            params,
            moments,
            step,
            rng: RngBlob { rng: rng_bytes, epoch, pos, perm },
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CkptError> {
        let wrap = |source| CkptError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(wrap)?;
        }
        std::fs::write(path, self.to_bytes()).map_err(wrap)
    }

    pub fn read(path: &Path) -> Result<Self, CkptError> {
        let bytes = std::fs::read(path)
            .map_err(|source| CkptError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
