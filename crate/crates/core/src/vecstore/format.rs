//! KVD1 binary vector dumps and the per-workload `manifest.json`.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                        |
//! |--------|------|------------------------------|
//! | 0      | 4    | magic `KVD1`                 |
//! | 4      | 4    | u32 version (1)              |
//! | 8      | 1    | u8 role (0=Q, 1=K, 2=V)      |
//! | 9      | 3    | zero padding                 |
//! | 12     | 8    | u64 n                        |
//! | 20     | 4    | u32 d                        |
//! | 24     | 4    | zero padding                 |
//! | 28     | 4·n·d| f32 payload, row-major       |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{HeadWorkload, Role, VectorSet};
use crate::{Error, Result};

pub const KVD1_MAGIC: &[u8; 4] = b"KVD1";
pub const KVD1_VERSION: u32 = 1;
pub const KVD1_HEADER_LEN: usize = 28;

pub fn write_vectors<W: Write>(mut w: W, set: &VectorSet) -> std::io::Result<()> {
    let mut header = [0u8; KVD1_HEADER_LEN];
    header[0..4].copy_from_slice(KVD1_MAGIC);
    header[4..8].copy_from_slice(&KVD1_VERSION.to_le_bytes());
    header[8] = set.role().code();
    header[12..20].copy_from_slice(&(set.len() as u64).to_le_bytes());
    header[20..24].copy_from_slice(&(set.dim() as u32).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(set.payload_bytes());
    for x in set.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    field,
                    format!("truncated: got {filled} of {} bytes", buf.len()),
                ))
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::format(field, e.to_string())),
        }
    }
    Ok(())
}

pub fn read_vectors<R: Read>(mut r: R) -> Result<VectorSet> {
    let mut header = [0u8; KVD1_HEADER_LEN];
    read_full(&mut r, &mut header, "header")?;
    if &header[0..4] != KVD1_MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != KVD1_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let role = Role::from_code(header[8])
        .ok_or_else(|| Error::format("role", format!("unknown role code {}", header[8])))?;
    if header[9..12].iter().chain(&header[24..28]).any(|&b| b != 0) {
        return Err(Error::format("padding", "non-zero padding bytes"));
    }
    let n = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let d = u32::from_le_bytes(header[20..24].try_into().unwrap());
    if d == 0 {
        return Err(Error::format("d", "dimension must be at least 1"));
    }
    let bytes = n
        .checked_mul(d as u64)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::format("n", format!("n * d overflows (n = {n}, d = {d})")))?;
    let mut payload = vec![0u8; bytes];
    read_full(&mut r, &mut payload, "payload")?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::format("payload", e.to_string()))? != 0 {
        return Err(Error::format("payload", "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VectorSet::new(role, d as usize, data).map_err(|e| match e {
        Error::InvalidSpec { reason, .. } => Error::format("payload", reason),
        other => other,
    })
}

pub fn save_vectors(set: &VectorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_vectors(BufWriter::new(file), set).map_err(|e| Error::io(path, e))
}

pub fn load_vectors(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vectors(BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileRole {
    QueryPrefill,
    Key,
    Value,
    QueryDecode,
}

/// One dumped tensor. Query files belong to a head; key and value files
/// belong to a kv group and leave `head` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub head: Option<usize>,
    pub kv_group: usize,
    pub role: FileRole,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub d_head: usize,
    /// Free-form note, e.g. whether keys are pre- or post-RoPE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn count(&self, role: FileRole) -> usize {
        self.files.iter().filter(|f| f.role == role).count()
    }
}

/// Writes every head's queries and every group's keys/values as KVD1 files
/// into `dir`, followed by `manifest.json`. Returns the manifest path.
pub fn save_workload(
    dir: impl AsRef<Path>,
    heads: &[HeadWorkload],
    note: Option<String>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = heads
        .first()
        .ok_or_else(|| Error::spec("workload", "no heads to save"))?;
    let mut files = Vec::new();
    let mut groups: BTreeMap<usize, &HeadWorkload> = BTreeMap::new();
    for h in heads {
        for (role, set, tag) in [
            (FileRole::QueryPrefill, &h.prefill_queries, "qprefill"),
            (FileRole::QueryDecode, &h.decode_queries, "qdecode"),
        ] {
            let name = format!("head{}_{tag}.kvd", h.head_id);
            save_vectors(set, dir.join(&name))?;
            files.push(FileEntry {
                head: Some(h.head_id),
                kv_group: h.kv_group_id,
                role,
                path: name.into(),
            });
        }
        groups.entry(h.kv_group_id).or_insert(h);
    }
    for (g, h) in groups.iter() {
        for (role, set, tag) in [(FileRole::Key, &h.keys, "k"), (FileRole::Value, &h.values, "v")] {
            let name = format!("group{g}_{tag}.kvd");
            save_vectors(set, dir.join(&name))?;
            files.push(FileEntry {
                head: None,
                kv_group: *g,
                role,
                path: name.into(),
            });
        }
    }
    files.sort_by(|a, b| (a.role, a.head, a.kv_group).cmp(&(b.role, b.head, b.kv_group)));
    let manifest = Manifest {
        n_heads: heads.len(),
        n_kv_groups: groups.len(),
        d_head: first.d_head(),
        note,
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a manifest and its files. Heads of one kv group share a single
/// key/value allocation. Relative paths resolve against the manifest's
/// directory.
pub fn load_workload(manifest_path: impl AsRef<Path>) -> Result<Vec<HeadWorkload>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut keys: BTreeMap<usize, Arc<VectorSet>> = BTreeMap::new();
    let mut values: BTreeMap<usize, Arc<VectorSet>> = BTreeMap::new();
    let mut prefill: BTreeMap<usize, (usize, VectorSet)> = BTreeMap::new();
    let mut decode: BTreeMap<usize, VectorSet> = BTreeMap::new();
    for entry in &manifest.files {
        let set = load_vectors(resolve(&entry.path))?;
        if set.dim() != manifest.d_head {
            return Err(Error::DimensionMismatch {
                expected: manifest.d_head,
                got: set.dim(),
            });
        }
        let head = || {
            entry
                .head
                .ok_or_else(|| Error::format("head", "query file without a head id"))
        };
        match entry.role {
            FileRole::Key => {
                keys.insert(entry.kv_group, Arc::new(set));
            }
            FileRole::Value => {
                values.insert(entry.kv_group, Arc::new(set));
            }
            FileRole::QueryPrefill => {
                prefill.insert(head()?, (entry.kv_group, set));
            }
            FileRole::QueryDecode => {
                decode.insert(head()?, set);
            }
        }
    }
    if prefill.len() != manifest.n_heads {
        return Err(Error::format(
            "files",
            format!("{} prefill query files for {} heads", prefill.len(), manifest.n_heads),
        ));
    }
    let mut heads = Vec::with_capacity(prefill.len());
    for (head, (group, q)) in prefill {
        let k = keys
            .get(&group)
            .ok_or_else(|| Error::format("files", format!("no key file for kv group {group}")))?;
        let v = values
            .get(&group)
            .ok_or_else(|| Error::format("files", format!("no value file for kv group {group}")))?;
        let dq = match decode.remove(&head) {
            Some(dq) => dq,
            None => VectorSet::empty(Role::Query, manifest.d_head)?,
        };
        heads.push(HeadWorkload::new(head, group, q, k.clone(), v.clone(), dq)?);
    }
    Ok(heads)
}
