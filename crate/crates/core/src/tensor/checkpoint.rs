//! Parameter snapshots on disk: a text manifest plus a raw payload of
//! little-endian f64 values.
//!
//! Manifest layout (`<stem>.manifest`):
//!
//! ```text
//! format=projtune-checkpoint
//! version=1
//! payload=<stem file name>.bin
//! param id=<id> block=<label> shape=<d0>x<d1> offset=<byte offset> frozen=<bool>
//! ...
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{BlockLabel, ParamStore, Result, Tensor, TensorError};

const FORMAT: &str = "projtune-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub id: String,
    pub block: BlockLabel,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "manifest")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "bin")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|p| CheckpointEntry {
                    id: p.id.clone(),
                    block: p.block,
                    shape: p.tensor.shape().to_vec(),
                    frozen: p.frozen(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Only entries whose block satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(BlockLabel) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e.block)).cloned().collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Copies values back into matching parameters. Every entry must name an
    /// existing parameter of identical shape; frozen flags are left untouched.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.entries {
            let id = store
                .lookup(&e.id)
                .ok_or_else(|| TensorError::UnknownParameter(e.id.clone()))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "shape of `{}` is {:?}, checkpoint has {:?}",
                    e.id,
                    p.tensor.shape(),
                    e.shape
                )));
            }
            p.tensor.data_mut().copy_from_slice(&e.values);
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let payload = payload_path(stem);
        let payload_name = payload
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| bad("payload path is not valid UTF-8"))?
            .to_string();
        let mut manifest = format!("format={FORMAT}\nversion={VERSION}\npayload={payload_name}\n");
        let mut bytes = Vec::with_capacity(self.total_elements() * 8);
        for e in &self.entries {
            if e.id.is_empty() || e.id.chars().any(|c| c.is_whitespace() || c == '=') {
                return Err(bad(format!("parameter id `{}` cannot be written to a manifest", e.id)));
            }
            let shape: Vec<String> = e.shape.iter().map(ToString::to_string).collect();
            manifest.push_str(&format!(
                "param id={} block={} shape={} offset={} frozen={}\n",
                e.id,
                e.block,
                shape.join("x"),
                bytes.len(),
                e.frozen
            ));
            for v in &e.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(&payload)?.write_all(&bytes)?;
        fs::write(manifest_path(stem), manifest)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(manifest_path(stem))?;
        let mut lines = manifest.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}=`, found `{line}`")))
        };
        if header("format")? != FORMAT {
            return Err(bad("not a projtune checkpoint"));
        }
        let version: u32 = header("version")?.parse().map_err(|_| bad("bad version"))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let payload_name = header("payload")?;
        let payload_file = stem
            .parent()
            .map(|d| d.join(&payload_name))
            .unwrap_or_else(|| PathBuf::from(&payload_name));
        let bytes = fs::read(payload_file)?;

        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let rest = line
                .strip_prefix("param ")
                .ok_or_else(|| bad(format!("unexpected line `{line}`")))?;
            let mut id = None;
            let mut block = None;
            let mut shape = None;
            let mut offset = None;
            let mut frozen = None;
            for kv in rest.split_whitespace() {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad field `{kv}`")))?;
                match k {
                    "id" => id = Some(v.to_string()),
                    "block" => block = Some(v.parse::<BlockLabel>().map_err(bad)?),
                    "shape" => {
                        shape = Some(
                            v.split('x')
                                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape `{v}`"))))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    "offset" => offset = Some(v.parse::<usize>().map_err(|_| bad("bad offset"))?),
                    "frozen" => frozen = Some(v.parse::<bool>().map_err(|_| bad("bad frozen flag"))?),
                    _ => return Err(bad(format!("unknown field `{k}`"))),
                }
            }
            let (Some(id), Some(block), Some(shape), Some(offset), Some(frozen)) = (id, block, shape, offset, frozen)
            else {
                return Err(bad(format!("incomplete entry `{line}`")));
            };
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(bad(format!("payload too short for `{id}`")));
            }
            let values = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry {
                id,
                block,
                shape,
                frozen,
                values,
            });
        }
        Ok(Self { entries })
    }

    /// Rebuilds a standalone store from the snapshot.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let mut p = super::Parameter::new(
                e.id.clone(),
                e.block,
                Tensor::new(e.shape.clone(), e.values.clone())?,
            );
            p.set_frozen(e.frozen);
            store.insert(p)?;
        }
        Ok(store)
    }
}
