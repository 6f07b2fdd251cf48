//! Single-file checkpoints.
//!
//! ```text
//! "D2AE"                      4 bytes
//! version                     u32
//! metadata length             u64
//! metadata                    JSON
//! tensor count                u32
//! per tensor:
//!   name length               u32
//!   name                      UTF-8
//!   group tag                 u8   (0..=5 parameter groups, 255 statistics)
//!   rank                      u32
//!   dims                      u64 each
//!   values                    f32 each
//! optional probes section:
//!   "PRBS"                    4 bytes
//!   length                    u64
//!   probes                    JSON
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::ProbeModel;
use crate::autodiff::{Group, Tensor};
use crate::error::{Error, Result};
use crate::model::{D2AEModel, ModelConfig};
use crate::objective::TrainConfig;

pub const MAGIC: &[u8; 4] = b"D2AE";
pub const PROBES_MAGIC: &[u8; 4] = b"PRBS";
pub const VERSION: u32 = 1;
pub const STAT_TAG: u8 = 255;

const SIGMA_T: &str = "stats.sigma_t";
const SIGMA_P: &str = "stats.sigma_p";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

impl CheckpointMeta {
    pub fn for_model(model: &D2AEModel<f32>) -> Self {
        Self {
            model: model.config().clone(),
            train: None,
            epoch: 0,
            seed: model.config().seed,
            metrics: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: D2AEModel<f32>,
    pub probes: ProbeModel,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, tag: u8, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &D2AEModel<f32>, probes: Option<&ProbeModel>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if &meta.model != model.config() {
        return Err(Error::Checkpoint("metadata model config differs from the model".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let json = serde_json::to_vec(meta)?;
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let params = model.params();
    put_u32(&mut out, (params.len() + 2) as u32);
    for (_, p) in params.iter() {
        put_tensor(&mut out, p.name(), p.group().tag(), &p.value);
    }
    put_tensor(&mut out, SIGMA_T, STAT_TAG, &Tensor::from_vec(model.sigma_t.clone()));
    put_tensor(&mut out, SIGMA_P, STAT_TAG, &Tensor::from_vec(model.sigma_p.clone()));
    if let Some(p) = probes {
        let json = serde_json::to_vec(p)?;
        out.extend_from_slice(PROBES_MAGIC);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("{what} length {n} exceeds the file")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let meta_len = r.len("metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let mut model = D2AEModel::<f32>::new(meta.model.clone())?;
    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; model.params().len()];
    let (mut sigma_t, mut sigma_p) = (None, None);
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8(&name)?;
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor '{name}': implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}': shape {shape:?} overflows")))?;
        let raw = r
            .take(n, &name)
            .map_err(|_| Error::Checkpoint(format!("tensor '{name}': data shorter than shape {shape:?}")))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data)?;
        if tag == STAT_TAG {
            match name.as_str() {
                SIGMA_T => sigma_t = Some(t),
                SIGMA_P => sigma_p = Some(t),
                _ => return Err(Error::Checkpoint(format!("unknown statistics tensor '{name}'"))),
            }
            continue;
        }
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
        let group = model.params().get(id).group();
        if Group::from_tag(tag) != Some(group) {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': group tag {tag} does not match {}",
                group.name()
            )));
        }
        if seen[id.0] {
            return Err(Error::Checkpoint(format!("tensor '{name}' appears twice")));
        }
        seen[id.0] = true;
        model
            .params_mut()
            .set_value(id, t)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params().get(crate::autodiff::ParamId(i)).name();
        return Err(Error::Checkpoint(format!("missing tensor '{name}'")));
    }
    let stat = |t: Option<Tensor<f32>>, name: &str, dim: usize| -> Result<Vec<f32>> {
        let t = t.ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.shape() != [dim] {
            return Err(Error::Checkpoint(format!("tensor '{name}': expected [{dim}], got {:?}", t.shape())));
        }
        Ok(t.into_data())
    };
    model.sigma_t = stat(sigma_t, SIGMA_T, meta.model.feat_dim_t)?;
    model.sigma_p = stat(sigma_p, SIGMA_P, meta.model.feat_dim_p)?;

    let probes = if r.done() {
        ProbeModel::default()
    } else {
        if r.take(4, "probes magic")? != PROBES_MAGIC {
            return Err(Error::Checkpoint(format!("unexpected bytes after tensors at {}", r.pos - 4)));
        }
        let len = r.len("probes")?;
        let p = serde_json::from_slice(r.take(len, "probes")?)?;
        if !r.done() {
            return Err(Error::Checkpoint("trailing bytes after probes".into()));
        }
        p
    };
    Ok(Checkpoint { meta, model, probes })
}

/// Write, fsync, then move into place.
pub fn save(model: &D2AEModel<f32>, probes: Option<&ProbeModel>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, probes, meta)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> D2AEModel<f32> {
        D2AEModel::new(ModelConfig {
            n_id: 3,
            feat_dim_t: 4,
            feat_dim_p: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn starts_with_magic_and_round_trips() {
        let mut m = small();
        m.sigma_p = vec![0.5, 0.25, 0.125];
        let meta = CheckpointMeta::for_model(&m);
        let bytes = to_bytes(&m, None, &meta).unwrap();
        assert_eq!(&bytes[..4], b"D2AE");
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        assert!(ck.probes.is_empty());
        assert_eq!(ck.model.sigma_p, m.sigma_p);
        assert_eq!(to_bytes(&ck.model, None, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_other_versions() {
        let m = small();
        let mut bytes = to_bytes(&m, None, &CheckpointMeta::for_model(&m)).unwrap();
        bytes[4] = 9;
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
