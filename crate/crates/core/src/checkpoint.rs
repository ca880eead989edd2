//! Stage checkpoints.
//!
//! The tensor container is little-endian binary:
//!
//! ```text
//! "PWCK" | u32 version | u32 count |
//!   count × { u16 name_len | name (UTF-8) | u8 rank | rank × u32 dim | f32 data… } |
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! Metadata (stage, method, hashes, score snapshot) lives in a JSON sidecar
//! next to the container (`<file>.json`). Both files are written to a
//! temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ana::{AdapterStack, AnaConfig, PathOptions};
use crate::backbone::{BackboneConfig, FrozenCore, QueryBank};
use crate::metrics::ScoreMatrix;
use crate::tensor::Tensor;
use crate::trainer::{Method, ModelState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PWCK";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

/// Serializes named tensors into the container format.
pub fn encode_tensors<'a, I>(tensors: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container, verifying its trailing hash first.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 8 + HASH_LEN {
        return Err(Error::Checkpoint("container too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().ok_or_else(|| Error::Contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Paths,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: usize,
    pub method: Method,
    pub config_hash: String,
    pub kind: StateKind,
    pub backbone: BackboneConfig,
    pub ana: AnaConfig,
    pub pretrain_seed: u64,
    /// Hash recorded when the core was frozen, if it is.
    pub core_frozen_hash: Option<String>,
    /// Options of paths `1..`, in order (adapter-path methods only).
    pub path_options: Vec<PathOptions>,
    pub n_query_banks: usize,
    pub tensor_hashes: BTreeMap<String, String>,
    /// Hex SHA-256 trailer of the tensor container.
    pub container_hash: String,
    pub scores: Option<ScoreMatrix>,
}

#[derive(Clone, Debug)]
pub struct StageCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl StageCheckpoint {
    pub fn from_state(
        stage: usize,
        method: Method,
        config_hash: &str,
        state: &ModelState,
        ana: &AnaConfig,
        scores: Option<&ScoreMatrix>,
    ) -> Result<Self> {
        let core = state.core();
        let mut tensors: BTreeMap<String, Tensor> = core.params().map(|(n, t)| (n, t.clone())).collect();
        let (kind, path_options, n_query_banks, ana) = match state {
            ModelState::Paths { stack, .. } => {
                for (n, t) in stack.named_tensors() {
                    tensors.insert(n, t.clone());
                }
                let opts = stack.paths().iter().map(|p| p.options).collect();
                (StateKind::Paths, opts, stack.current() + 1, stack.ana.clone())
            }
            ModelState::Plain { queries, .. } => {
                for q in queries {
                    tensors.insert(q.param_name(), q.tokens.clone());
                }
                (StateKind::Plain, Vec::new(), queries.len(), ana.clone())
            }
        };
        let tensor_hashes = tensors.iter().map(|(n, t)| (n.clone(), t.hash_hex())).collect();
        let container = encode_tensors(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            stage,
            method,
            config_hash: config_hash.to_string(),
            kind,
            backbone: core.config().clone(),
            ana,
            pretrain_seed: core.pretrain_seed(),
            core_frozen_hash: core.frozen_hash().map(str::to_string),
            path_options,
            n_query_banks,
            tensor_hashes,
            container_hash: hex::encode(&container[container.len() - HASH_LEN..]),
            scores: scores.cloned(),
        };
        Ok(Self { meta, tensors })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_tensors(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Writes the container and its sidecar (sidecar last, so a present
    /// sidecar implies a complete container).
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)?;
        atomic_write(&meta_path(path), serde_json::to_string_pretty(&self.meta)?.as_bytes())
    }

    /// Loads and cross-checks container and sidecar. A config hash differing
    /// from `expected_config` is refused unless `force`.
    pub fn load(path: &Path, expected_config: Option<&str>, force: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mp = meta_path(path);
        let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        if let Some(expected) = expected_config {
            if expected != meta.config_hash && !force {
                return Err(Error::Checkpoint(format!(
                    "config hash {} does not match live config {expected} (use --force to override)",
                    meta.config_hash
                )));
            }
        }
        let decoded = decode_tensors(&bytes)?;
        if hex::encode(&bytes[bytes.len() - HASH_LEN..]) != meta.container_hash {
            return Err(Error::Checkpoint("sidecar does not describe this container".into()));
        }
        let tensors: BTreeMap<String, Tensor> = decoded.into_iter().collect();
        if tensors.len() != meta.tensor_hashes.len() {
            return Err(Error::Checkpoint("tensor count differs from sidecar".into()));
        }
        for (name, t) in &tensors {
            match meta.tensor_hashes.get(name) {
                Some(h) if *h == t.hash_hex() => {}
                _ => return Err(Error::Checkpoint(format!("hash mismatch for tensor {name}"))),
            }
        }
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the model state, re-freezing and re-verifying hashes.
    pub fn to_state(&self) -> Result<ModelState> {
        let m = &self.meta;
        let core_params: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("core.").map(|k| (k.to_string(), t.clone())))
            .collect();
        let mut core = FrozenCore::from_params(m.backbone.clone(), m.pretrain_seed, core_params)?;
        if let Some(h) = &m.core_frozen_hash {
            core.freeze();
            if core.frozen_hash() != Some(h.as_str()) {
                return Err(Error::FrozenTampered("core (checkpoint)".into()));
            }
        }
        let query = |i: usize| -> Result<QueryBank> {
            let name = format!("query.{i}");
            let tokens = self.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(QueryBank { modality: i, tokens: tokens.clone(), trainable: false })
        };
        match m.kind {
            StateKind::Paths => {
                let mut stack = AdapterStack::new(m.backbone.clone(), m.ana.clone(), query(0)?)?;
                stack.skeleton(&m.path_options)?;
                for (name, t) in &self.tensors {
                    if name.starts_with("path.") || (name.starts_with("query.") && name != "query.0") {
                        stack.load_tensor(name, t)?;
                    }
                }
                stack.refreeze(m.path_options.len())?;
                let n_stack = stack.named_tensors().len() + core.param_names().len();
                if n_stack != self.tensors.len() {
                    return Err(Error::Checkpoint("checkpoint holds tensors the stack does not use".into()));
                }
                Ok(ModelState::Paths { core, stack })
            }
            StateKind::Plain => {
                let queries = (0..m.n_query_banks).map(query).collect::<Result<Vec<_>>>()?;
                if core.param_names().len() + queries.len() != self.tensors.len() {
                    return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
                }
                Ok(ModelState::Plain { core, queries })
            }
        }
    }
}
