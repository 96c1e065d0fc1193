//! Binary model container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "NCCM" | version | header length | header JSON (UTF-8)
//! tensor count | per tensor: name length, name, rows, cols, f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ncc_tensor::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{CompletionModel, TrainConfig};
use crate::encoders::TokenArtifacts;
use crate::providers::VocabProvider;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCCM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    artifacts: TokenArtifacts,
    vocab_provider: Option<VocabProvider>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits the container's u32 fields").to_le_bytes());
}

pub(crate) fn to_bytes(model: &CompletionModel<f32>) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        artifacts: model.token.artifacts().clone(),
        vocab_provider: model.vocab.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len());
    for (_, name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows());
        put_u32(&mut out, t.cols());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

pub(crate) fn from_bytes<S: Scalar>(buf: &[u8]) -> Result<CompletionModel<S>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if params.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        let rows = r.u32("tensor rows")?;
        let cols = r.u32("tensor cols")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(n, "tensor data")?
            .chunks_exact(4)
            .map(|c| S::from_f32(f32::from_le_bytes(c.try_into().expect("four bytes"))))
            .collect();
        params.add(name, Tensor::new(rows, cols, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    CompletionModel::assemble(header.config, header.artifacts.reindexed(), header.vocab_provider, params)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partially written file.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_model(model: &CompletionModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path, &to_bytes(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CompletionModel<f32>> {
    from_bytes(&fs::read(path)?)
}

impl CompletionModel<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_bytes(self)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        from_bytes(buf)
    }
}
