//! Append-only, versioned, path-addressed file store.
//!
//! Every agent of a project reads and writes the same workspace. A path's
//! history is a contiguous run of versions starting at 1; nothing is ever
//! rewritten or deleted, which is what lets failed explorations stay on the
//! record. Writers coordinate with optimistic concurrency: pass the version you
//! last read as `expected_version` and retry on [`WorkspaceError::VersionConflict`].
//!
//! On disk a workspace looks like:
//!
//! ```text
//! <root>/workspace.json              header (format, digest algorithm)
//! <root>/objects/<encoded path>/
//!     index.jsonl                    one FileVersion per line
//!     1.blob 2.blob ...              version contents
//! ```
//!
//! Log-style files grown with [`Workspace::append`] store only the appended
//! suffix in each blob; reads reassemble the full content, so every version
//! is still retrievable as complete bytes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;

pub const DIGEST_ALGORITHM: &str = "sha256";
const FORMAT: u32 = 1;
const MAX_PATH_LEN: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },
    #[error("version conflict on {path}: expected {expected}, latest is {latest}")]
    VersionConflict { path: String, expected: u32, latest: u32 },
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("{path} has no version {version} (latest is {latest})")]
    VersionOutOfRange { path: String, version: u32, latest: u32 },
    #[error("stored content of {path}@{version} does not match its digest")]
    Corrupt { path: String, version: u32 },
    #[error("workspace header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

/// Metadata of one immutable version of a path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileVersion {
    pub path: String,
    pub version: u32,
    pub author: String,
    pub created_at: u64,
    pub digest: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceSnapshot {
    pub project_id: String,
    pub digest_algorithm: String,
    pub files: BTreeMap<String, u32>,
    pub total_files: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexRecord {
    #[serde(flatten)]
    meta: FileVersion,
    /// Set when the blob holds only the bytes appended to version `base`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    digest: String,
}

#[derive(Default)]
struct PathEntry {
    dir: PathBuf,
    versions: Vec<IndexRecord>,
    /// Running hash of the latest content, kept for cheap appends.
    tail: Option<Sha256>,
}

/// Validates a workspace path, stripping one leading `/`.
pub fn normalize_path(raw: &str) -> Result<String> {
    let invalid = |reason| WorkspaceError::InvalidPath {
        path: raw.to_string(),
        reason,
    };
    let p = raw.strip_prefix('/').unwrap_or(raw);
    if p.is_empty() {
        return Err(invalid("empty path"));
    }
    if p.len() > MAX_PATH_LEN {
        return Err(invalid("path too long"));
    }
    if p.chars().any(|c| c.is_control() || c == '\\') {
        return Err(invalid("control character or backslash"));
    }
    for seg in p.split('/') {
        match seg {
            "" => return Err(invalid("empty segment")),
            "." => return Err(invalid("'.' segment")),
            ".." => return Err(invalid("'..' segment")),
            _ => {}
        }
    }
    Ok(p.to_string())
}

fn encode_dir_name(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    for b in path.bytes() {
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.len() > 180 || out.starts_with('.') {
        format!("h-{}", hex::encode(Sha256::digest(path.as_bytes())))
    } else {
        out
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A project's shared file store. Cheap to share behind an `Arc`.
pub struct Workspace {
    root: PathBuf,
    clock: Arc<Clock>,
    state: Mutex<BTreeMap<String, PathEntry>>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace").field("root", &self.root).finish()
    }
}

impl Workspace {
    /// Opens the workspace rooted at `root`, creating it if needed.
    pub fn open(root: impl Into<PathBuf>, clock: Arc<Clock>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        let header_path = root.join("workspace.json");
        if header_path.exists() {
            let header: Header =
                serde_json::from_slice(&fs::read(&header_path)?).map_err(|e| WorkspaceError::Header(e.to_string()))?;
            if header.digest != DIGEST_ALGORITHM || header.format != FORMAT {
                return Err(WorkspaceError::Header(format!(
                    "unsupported format {} / digest {}",
                    header.format, header.digest
                )));
            }
        } else {
            let header = Header {
                format: FORMAT,
                digest: DIGEST_ALGORITHM.to_string(),
            };
            fs::write(&header_path, serde_json::to_vec_pretty(&header).unwrap())?;
        }

        let mut paths = BTreeMap::new();
        for entry in fs::read_dir(root.join("objects"))? {
            let dir = entry?.path();
            let index = dir.join("index.jsonl");
            if !index.exists() {
                continue;
            }
            let text = fs::read_to_string(&index)?;
            let mut versions: Vec<IndexRecord> = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                // A torn final line from a crash mid-append is dropped.
                match serde_json::from_str::<IndexRecord>(line) {
                    Ok(rec) if rec.meta.version as usize == versions.len() + 1 => versions.push(rec),
                    _ => break,
                }
            }
            if let Some(first) = versions.first() {
                clock.observe(versions.last().unwrap().meta.created_at);
                paths.insert(
                    first.meta.path.clone(),
                    PathEntry {
                        dir,
                        versions,
                        tail: None,
                    },
                );
            }
        }
        Ok(Self {
            root,
            clock,
            state: Mutex::new(paths),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clock(&self) -> &Arc<Clock> {
        &self.clock
    }

    /// Writes a new version of `path`.
    ///
    /// With `expected_version = Some(n)` the write succeeds only if the
    /// current latest version is `n` (0 meaning "does not exist yet").
    pub fn write_file(
        &self,
        path: &str,
        content: &[u8],
        author: &str,
        expected_version: Option<u32>,
    ) -> Result<FileVersion> {
        let path = normalize_path(path)?;
        let mut state = self.state.lock().unwrap();
        let latest = state.get(&path).map_or(0, |e| e.versions.len() as u32);
        if let Some(expected) = expected_version {
            if expected != latest {
                return Err(WorkspaceError::VersionConflict { path, expected, latest });
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(content);
        self.commit(&mut state, &path, content, author, None, hasher, content.len() as u64)
    }

    /// Appends `suffix` to the latest content of `path` as a new version.
    pub fn append(&self, path: &str, suffix: &[u8], author: &str) -> Result<FileVersion> {
        let path = normalize_path(path)?;
        let mut state = self.state.lock().unwrap();
        let Some(latest) = state.get(&path).and_then(|e| e.versions.last()).cloned() else {
            let mut hasher = Sha256::new();
            hasher.update(suffix);
            return self.commit(&mut state, &path, suffix, author, None, hasher, suffix.len() as u64);
        };
        let base = latest.meta.version;
        let tail = match state.get(&path).and_then(|e| e.tail.clone()) {
            Some(t) => t,
            None => {
                let entry = &state[&path];
                let full = self.assemble(entry, &path, base)?;
                let mut h = Sha256::new();
                h.update(&full);
                h
            }
        };
        let mut hasher = tail;
        hasher.update(suffix);
        let size = latest.meta.size + suffix.len() as u64;
        self.commit(&mut state, &path, suffix, author, Some(base), hasher, size)
    }

    #[allow(clippy::too_many_arguments)]
    fn commit(
        &self,
        state: &mut BTreeMap<String, PathEntry>,
        path: &str,
        blob: &[u8],
        author: &str,
        base: Option<u32>,
        hasher: Sha256,
        size: u64,
    ) -> Result<FileVersion> {
        let entry = state.entry(path.to_string()).or_insert_with(|| PathEntry {
            dir: self.root.join("objects").join(encode_dir_name(path)),
            ..Default::default()
        });
        fs::create_dir_all(&entry.dir)?;
        let version = entry.versions.len() as u32 + 1;
        let digest = hex::encode(hasher.clone().finalize());
        let meta = FileVersion {
            path: path.to_string(),
            version,
            author: author.to_string(),
            created_at: self.clock.now(),
            digest,
            size,
        };
        let blob_path = entry.dir.join(format!("{version}.blob"));
        let tmp = entry.dir.join(format!("{version}.blob.tmp"));
        fs::write(&tmp, blob)?;
        fs::rename(&tmp, &blob_path)?;
        let record = IndexRecord {
            meta: meta.clone(),
            base,
        };
        let mut line = serde_json::to_vec(&record).expect("index record serializes");
        line.push(b'\n');
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(entry.dir.join("index.jsonl"))?;
        index.write_all(&line)?;
        entry.versions.push(record);
        entry.tail = Some(hasher);
        Ok(meta)
    }

    fn assemble(&self, entry: &PathEntry, path: &str, version: u32) -> Result<Vec<u8>> {
        let mut chain = Vec::new();
        let mut v = version;
        loop {
            let rec = &entry.versions[v as usize - 1];
            chain.push(v);
            match rec.base {
                Some(b) => v = b,
                None => break,
            }
        }
        let mut out = Vec::with_capacity(entry.versions[version as usize - 1].meta.size as usize);
        for v in chain.into_iter().rev() {
            let blob = fs::read(entry.dir.join(format!("{v}.blob"))).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    WorkspaceError::Corrupt {
                        path: path.to_string(),
                        version: v,
                    }
                } else {
                    e.into()
                }
            })?;
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    /// Reads `path` at `version` (default: latest).
    pub fn read_file(&self, path: &str, version: Option<u32>) -> Result<Vec<u8>> {
        let path = normalize_path(path)?;
        let state = self.state.lock().unwrap();
        let entry = state.get(&path).ok_or_else(|| WorkspaceError::NotFound(path.clone()))?;
        let latest = entry.versions.len() as u32;
        let v = version.unwrap_or(latest);
        if v == 0 || v > latest {
            return Err(WorkspaceError::VersionOutOfRange {
                path,
                version: v,
                latest,
            });
        }
        let content = self.assemble(entry, &path, v)?;
        if digest_hex(&content) != entry.versions[v as usize - 1].meta.digest {
            return Err(WorkspaceError::Corrupt { path, version: v });
        }
        Ok(content)
    }

    pub fn read_text(&self, path: &str, version: Option<u32>) -> Result<String> {
        let bytes = self.read_file(path, version)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// All versions of `path`, oldest first, without content.
    pub fn history(&self, path: &str) -> Result<Vec<FileVersion>> {
        let path = normalize_path(path)?;
        let state = self.state.lock().unwrap();
        let entry = state.get(&path).ok_or_else(|| WorkspaceError::NotFound(path.clone()))?;
        Ok(entry.versions.iter().map(|r| r.meta.clone()).collect())
    }

    /// Latest version number, or `None` if the path was never written.
    pub fn latest_version(&self, path: &str) -> Option<u32> {
        let path = normalize_path(path).ok()?;
        let state = self.state.lock().unwrap();
        state.get(&path).map(|e| e.versions.len() as u32)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.latest_version(path).is_some()
    }

    /// Sorted paths that start with `prefix`.
    pub fn list_files(&self, prefix: &str) -> Vec<String> {
        let prefix = prefix.strip_prefix('/').unwrap_or(prefix);
        let state = self.state.lock().unwrap();
        state
            .range(prefix.to_string()..)
            .take_while(|(p, _)| p.starts_with(prefix))
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn snapshot(&self, project_id: &str) -> WorkspaceSnapshot {
        let state = self.state.lock().unwrap();
        let files: BTreeMap<String, u32> = state
            .iter()
            .map(|(p, e)| (p.clone(), e.versions.len() as u32))
            .collect();
        WorkspaceSnapshot {
            project_id: project_id.to_string(),
            digest_algorithm: DIGEST_ALGORITHM.to_string(),
            total_files: files.len(),
            files,
        }
    }
}

/// Writes `bytes` to `path` atomically (temp file + rename).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(tmp, path)
}
