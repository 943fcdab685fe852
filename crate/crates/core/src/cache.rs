//! Content-addressed store for blobs and task results.
//!
//! ```text
//! cache/objects/<first2>/<digest>   file blobs, read-only
//! cache/trees/<digest>.json         directory manifests
//! cache/tasks/<fingerprint>.json    task results
//! cache/lock                        shared by runs, exclusive for gc
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{Digest, DigestWriter, Fingerprint};
use crate::planner::ArtifactKind;
use crate::tree::TreeManifest;
use crate::value::{PortType, Value};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("entry {fingerprint} references missing blob {digest}")]
    DanglingBlob { fingerprint: Fingerprint, digest: Digest },
    #[error("cache lock is held by another process")]
    LockHeld,
    #[error("unknown blob {0}")]
    UnknownBlob(Digest),
    #[error("malformed cache entry {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io { path: path.to_path_buf(), source }
}

/// A value output as stored on disk: `{"type": "integer", "value": 42}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedLiteral {
    #[serde(rename = "type")]
    pub ty: String,
    pub value: serde_json::Value,
}

impl TypedLiteral {
    pub fn new(value: &Value, ty: &PortType) -> Self {
        TypedLiteral { ty: ty.type_name(), value: value.to_json() }
    }

    pub fn to_value(&self) -> Option<Value> {
        let ty = PortType::parse(&self.ty, None).ok()?;
        Value::from_json(&self.value, &ty).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: Fingerprint,
    pub run_id: String,
    pub file_outputs: BTreeMap<String, Digest>,
    pub value_outputs: BTreeMap<String, TypedLiteral>,
    pub created: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Hit(CacheEntry),
    Miss,
    /// The entry exists but fails verification; callers treat it as a miss.
    Corrupt(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GcReport {
    pub removed_entries: Vec<Fingerprint>,
    pub removed_blobs: Vec<Digest>,
    pub removed_trees: Vec<Digest>,
}

/// Shared lock held for the duration of a run; gc cannot start meanwhile.
pub struct CacheLease {
    _file: File,
}

#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes `bytes` to `dest` through a temp file and an atomic rename.
pub(crate) fn write_atomic(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(dest).map_err(|e| e.error)?;
    Ok(())
}

/// Hard link when possible, copy otherwise. Replaces `dest`.
pub fn link_or_copy(src: &Path, dest: &Path) -> io::Result<()> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    match fs::symlink_metadata(dest) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(dest)?,
        Ok(_) => fs::remove_file(dest)?,
        Err(_) => {}
    }
    if fs::hard_link(src, dest).is_err() {
        fs::copy(src, dest)?;
    }
    Ok(())
}

fn set_readonly(path: &Path) -> io::Result<()> {
    let mut perms = fs::metadata(path)?.permissions();
    perms.set_readonly(true);
    fs::set_permissions(path, perms)
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        for sub in ["objects", "trees", "tasks", "tmp"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(CacheStore { root })
    }

    /// A read-only view that creates nothing; lookups in a missing store miss.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        CacheStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, d: &Digest) -> PathBuf {
        self.root.join("objects").join(d.prefix()).join(d.to_hex())
    }

    fn tree_path(&self, d: &Digest) -> PathBuf {
        self.root.join("trees").join(format!("{}.json", d.to_hex()))
    }

    fn entry_path(&self, f: &Fingerprint) -> PathBuf {
        self.root.join("tasks").join(format!("{}.json", f.0.to_hex()))
    }

    pub fn has_blob(&self, d: &Digest) -> bool {
        self.blob_path(d).is_file()
    }

    pub fn has_tree(&self, d: &Digest) -> bool {
        self.tree_path(d).is_file()
    }

    /// Streams content into the store under its SHA-256. Idempotent and safe
    /// under concurrent writers (temp file + atomic rename).
    pub fn put_blob<R: Read>(&self, mut content: R) -> Result<Digest, CacheError> {
        let tmp_dir = self.root.join("tmp");
        let mut tmp = tempfile::NamedTempFile::new_in(&tmp_dir).map_err(io_err(&tmp_dir))?;
        let mut hasher = DigestWriter::new();
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = content.read(&mut buf).map_err(io_err(tmp.path()))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            tmp.write_all(&buf[..n]).map_err(io_err(tmp.path()))?;
        }
        let digest = hasher.finish();
        let dest = self.blob_path(&digest);
        if dest.is_file() {
            return Ok(digest);
        }
        let parent = dest.parent().unwrap();
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        set_readonly(tmp.path()).map_err(io_err(tmp.path()))?;
        match tmp.persist_noclobber(&dest) {
            Ok(_) => Ok(digest),
            Err(_) if dest.is_file() => Ok(digest),
            Err(e) => Err(CacheError::Io { path: dest, source: e.error }),
        }
    }

    pub fn put_file(&self, path: &Path) -> Result<Digest, CacheError> {
        let f = File::open(path).map_err(io_err(path))?;
        self.put_blob(f)
    }

    /// Stores every file of a directory plus its manifest; returns the tree digest.
    pub fn put_tree(&self, dir: &Path) -> Result<Digest, CacheError> {
        let manifest = TreeManifest::scan(dir).map_err(io_err(dir))?;
        for e in &manifest.entries {
            let stored = self.put_file(&dir.join(&e.path))?;
            if stored != e.digest {
                return Err(CacheError::Malformed { path: dir.join(&e.path), message: "changed while storing".into() });
            }
        }
        let digest = manifest.digest();
        let path = self.tree_path(&digest);
        if !path.is_file() {
            let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
            write_atomic(&path, &json).map_err(io_err(&path))?;
        }
        Ok(digest)
    }

    pub fn put_artifact(&self, kind: ArtifactKind, path: &Path) -> Result<Digest, CacheError> {
        match kind {
            ArtifactKind::File => self.put_file(path),
            ArtifactKind::Directory => self.put_tree(path),
        }
    }

    pub fn tree(&self, d: &Digest) -> Result<Option<TreeManifest>, CacheError> {
        let path = self.tree_path(d);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| CacheError::Malformed { path, message: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CacheError::Io { path, source: e }),
        }
    }

    /// Re-hashes a blob or tree and checks it against its address.
    pub fn verify(&self, d: &Digest) -> bool {
        if let Ok(Some(tree)) = self.tree(d) {
            return tree.digest() == *d && tree.entries.iter().all(|e| self.verify_blob(&e.digest));
        }
        self.verify_blob(d)
    }

    fn verify_blob(&self, d: &Digest) -> bool {
        Digest::of_file(&self.blob_path(d)).map(|actual| actual == *d).unwrap_or(false)
    }

    /// Places a stored artifact at `dest` (hard link, or copy across filesystems).
    pub fn materialize(&self, d: &Digest, kind: ArtifactKind, dest: &Path) -> Result<(), CacheError> {
        match kind {
            ArtifactKind::File => {
                let src = self.blob_path(d);
                if !src.is_file() {
                    return Err(CacheError::UnknownBlob(*d));
                }
                link_or_copy(&src, dest).map_err(io_err(dest))
            }
            ArtifactKind::Directory => {
                let tree = self.tree(d)?.ok_or(CacheError::UnknownBlob(*d))?;
                if dest.exists() {
                    fs::remove_dir_all(dest).map_err(io_err(dest))?;
                }
                fs::create_dir_all(dest).map_err(io_err(dest))?;
                for e in &tree.entries {
                    self.materialize(&e.digest, ArtifactKind::File, &dest.join(&e.path))?;
                }
                Ok(())
            }
        }
    }

    fn artifact_present(&self, d: &Digest) -> bool {
        self.has_blob(d) || self.has_tree(d)
    }

    /// Last writer wins for a given fingerprint.
    pub fn put_entry(&self, e: &CacheEntry) -> Result<(), CacheError> {
        for d in e.file_outputs.values() {
            if !self.artifact_present(d) {
                return Err(CacheError::DanglingBlob { fingerprint: e.fingerprint, digest: *d });
            }
        }
        let path = self.entry_path(&e.fingerprint);
        let json = serde_json::to_vec_pretty(e).expect("entry serializes");
        write_atomic(&path, &json).map_err(io_err(&path))
    }

    pub fn get_entry(&self, f: &Fingerprint) -> Lookup {
        let path = self.entry_path(f);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Lookup::Miss,
            Err(e) => return Lookup::Corrupt(format!("cannot read {}: {e}", path.display())),
        };
        let entry: CacheEntry = match serde_json::from_slice(&bytes) {
            Ok(e) => e,
            Err(e) => return Lookup::Corrupt(format!("malformed entry {}: {e}", path.display())),
        };
        if entry.fingerprint != *f {
            return Lookup::Corrupt(format!("entry {} is filed under the wrong fingerprint", path.display()));
        }
        for (port, d) in &entry.file_outputs {
            if !self.artifact_present(d) {
                return Lookup::Corrupt(format!("output `{port}` references missing blob {d}"));
            }
            if !self.verify(d) {
                return Lookup::Corrupt(format!("output `{port}` blob {d} fails digest verification"));
            }
        }
        Lookup::Hit(entry)
    }

    pub fn entries(&self) -> Result<Vec<CacheEntry>, CacheError> {
        let dir = self.root.join("tasks");
        let mut out = Vec::new();
        for item in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = item.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let e: CacheEntry = serde_json::from_slice(&bytes)
                    .map_err(|e| CacheError::Malformed { path: path.clone(), message: e.to_string() })?;
                out.push(e);
            }
        }
        out.sort_by(|a, b| a.created.cmp(&b.created).then(a.fingerprint.cmp(&b.fingerprint)));
        Ok(out)
    }

    /// Digests of every stored blob.
    pub fn blobs(&self) -> Result<Vec<Digest>, CacheError> {
        let objects = self.root.join("objects");
        let mut out = Vec::new();
        for shard in fs::read_dir(&objects).map_err(io_err(&objects))? {
            let shard = shard.map_err(io_err(&objects))?.path();
            for blob in fs::read_dir(&shard).map_err(io_err(&shard))? {
                let name = blob.map_err(io_err(&shard))?.file_name();
                if let Ok(d) = name.to_string_lossy().parse::<Digest>() {
                    out.push(d);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Blobs whose content no longer matches their address.
    pub fn verify_all(&self) -> Result<Vec<Digest>, CacheError> {
        Ok(self.blobs()?.into_iter().filter(|d| !self.verify_blob(d)).collect())
    }

    fn lock_file(&self) -> Result<File, CacheError> {
        let path = self.root.join("lock");
        OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))
    }

    pub fn lease(&self) -> Result<CacheLease, CacheError> {
        let file = self.lock_file()?;
        file.lock_shared().map_err(io_err(&self.root.join("lock")))?;
        Ok(CacheLease { _file: file })
    }

    /// Removes entries not produced by (or linked from) a kept run, then
    /// blobs and trees no remaining entry references. Refuses while any run
    /// holds a lease.
    pub fn gc(&self, keep_runs: &BTreeSet<String>) -> Result<GcReport, CacheError> {
        self.gc_with_roots(keep_runs, &BTreeSet::new())
    }

    pub fn gc_with_roots(
        &self,
        keep_runs: &BTreeSet<String>,
        keep_fingerprints: &BTreeSet<Fingerprint>,
    ) -> Result<GcReport, CacheError> {
        let lock = self.lock_file()?;
        if lock.try_lock().is_err() {
            return Err(CacheError::LockHeld);
        }
        let mut report = GcReport::default();
        let mut live_artifacts = BTreeSet::new();
        for e in self.entries()? {
            if keep_runs.contains(&e.run_id) || keep_fingerprints.contains(&e.fingerprint) {
                live_artifacts.extend(e.file_outputs.values().copied());
            } else {
                let path = self.entry_path(&e.fingerprint);
                fs::remove_file(&path).map_err(io_err(&path))?;
                report.removed_entries.push(e.fingerprint);
            }
        }
        let mut live_blobs = BTreeSet::new();
        for d in &live_artifacts {
            match self.tree(d)? {
                Some(tree) => live_blobs.extend(tree.entries.iter().map(|e| e.digest)),
                None => {
                    live_blobs.insert(*d);
                }
            }
        }
        let trees_dir = self.root.join("trees");
        for item in fs::read_dir(&trees_dir).map_err(io_err(&trees_dir))? {
            let path = item.map_err(io_err(&trees_dir))?.path();
            let Some(d) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<Digest>().ok()) else {
                continue;
            };
            if !live_artifacts.contains(&d) {
                fs::remove_file(&path).map_err(io_err(&path))?;
                report.removed_trees.push(d);
            }
        }
        for d in self.blobs()? {
            if !live_blobs.contains(&d) {
                let path = self.blob_path(&d);
                fs::remove_file(&path).map_err(io_err(&path))?;
                report.removed_blobs.push(d);
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, CacheStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = CacheStore::open(dir.path().join("cache")).unwrap();
        (dir, s)
    }

    fn entry(s: &CacheStore, run: &str, seed: &str, content: &[u8]) -> CacheEntry {
        let d = s.put_blob(content).unwrap();
        CacheEntry {
            fingerprint: Fingerprint(Digest::of_bytes(seed)),
            run_id: run.into(),
            file_outputs: BTreeMap::from([("out".to_string(), d)]),
            value_outputs: BTreeMap::from([(
                "n".to_string(),
                TypedLiteral { ty: "integer".into(), value: serde_json::json!(3) },
            )]),
            created: now_timestamp(),
        }
    }

    #[test]
    fn empty_blob_digest_and_layout() {
        let (_d, s) = store();
        let d = s.put_blob(&b""[..]).unwrap();
        assert_eq!(d.to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert!(s.root().join("objects/e3").join(d.to_hex()).is_file());
    }

    #[test]
    fn idempotent_put() {
        let (_d, s) = store();
        let a = s.put_blob(&b"same"[..]).unwrap();
        let b = s.put_blob(&b"same"[..]).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.blobs().unwrap(), vec![a]);
        assert_ne!(a, s.put_blob(&b"other"[..]).unwrap());
    }

    #[test]
    fn entry_round_trip_and_miss() {
        let (_d, s) = store();
        let e = entry(&s, "r1", "fp", b"data");
        s.put_entry(&e).unwrap();
        assert_eq!(s.get_entry(&e.fingerprint), Lookup::Hit(e.clone()));
        assert_eq!(s.get_entry(&Fingerprint(Digest::of_bytes("nope"))), Lookup::Miss);
        let mut newer = e.clone();
        newer.run_id = "r2".into();
        s.put_entry(&newer).unwrap();
        assert_eq!(s.get_entry(&e.fingerprint), Lookup::Hit(newer));
    }

    #[test]
    fn deleted_blob_is_corrupt_miss() {
        let (_d, s) = store();
        let e = entry(&s, "r1", "fp", b"data");
        s.put_entry(&e).unwrap();
        fs::remove_file(s.blob_path(&e.file_outputs["out"])).unwrap();
        assert!(matches!(s.get_entry(&e.fingerprint), Lookup::Corrupt(_)));
    }

    #[test]
    fn put_entry_requires_blobs() {
        let (_d, s) = store();
        let mut e = entry(&s, "r1", "fp", b"data");
        e.file_outputs.insert("ghost".into(), Digest::of_bytes("never stored"));
        assert!(matches!(s.put_entry(&e), Err(CacheError::DanglingBlob { .. })));
    }

    #[test]
    fn tampered_blob_fails_verification() {
        let (_d, s) = store();
        let e = entry(&s, "r1", "fp", b"data");
        s.put_entry(&e).unwrap();
        let path = s.blob_path(&e.file_outputs["out"]);
        let mut perms = fs::metadata(&path).unwrap().permissions();
        #[allow(clippy::permissions_set_readonly_false)]
        perms.set_readonly(false);
        fs::set_permissions(&path, perms).unwrap();
        fs::write(&path, b"evil").unwrap();
        assert!(matches!(s.get_entry(&e.fingerprint), Lookup::Corrupt(_)));
        assert_eq!(s.verify_all().unwrap(), vec![e.file_outputs["out"]]);
    }

    #[test]
    fn gc_keeps_shared_blobs() {
        let (_d, s) = store();
        let a = entry(&s, "r1", "a", b"shared");
        let b = entry(&s, "r2", "b", b"shared");
        let c = entry(&s, "r2", "c", b"only-r2");
        for e in [&a, &b, &c] {
            s.put_entry(e).unwrap();
        }
        let report = s.gc(&BTreeSet::from(["r1".to_string(), "r2".to_string()])).unwrap();
        assert_eq!(report, GcReport::default());

        let report = s.gc(&BTreeSet::from(["r1".to_string()])).unwrap();
        assert_eq!(report.removed_entries.len(), 2);
        assert_eq!(report.removed_blobs, vec![c.file_outputs["out"]]);
        assert!(s.has_blob(&a.file_outputs["out"]));
        assert!(matches!(s.get_entry(&a.fingerprint), Lookup::Hit(_)));

        let report = s.gc(&BTreeSet::new()).unwrap();
        assert_eq!(report.removed_entries, vec![a.fingerprint]);
        assert!(s.blobs().unwrap().is_empty());
    }

    #[test]
    fn gc_refuses_while_leased() {
        let (_d, s) = store();
        let lease = s.lease().unwrap();
        assert!(matches!(s.gc(&BTreeSet::new()), Err(CacheError::LockHeld)));
        drop(lease);
        assert!(s.gc(&BTreeSet::new()).is_ok());
    }

    #[test]
    fn trees_round_trip() {
        let (dir, s) = store();
        let src = dir.path().join("src");
        fs::create_dir_all(src.join("sub")).unwrap();
        fs::write(src.join("sub/a.txt"), "a").unwrap();
        fs::write(src.join("b.txt"), "b").unwrap();
        let d = s.put_tree(&src).unwrap();
        assert_eq!(d, crate::tree::digest_dir(&src).unwrap());
        let dest = dir.path().join("dest");
        s.materialize(&d, ArtifactKind::Directory, &dest).unwrap();
        assert_eq!(fs::read_to_string(dest.join("sub/a.txt")).unwrap(), "a");
        assert!(s.verify(&d));
        let e = CacheEntry {
            fingerprint: Fingerprint(Digest::of_bytes("t")),
            run_id: "r".into(),
            file_outputs: BTreeMap::from([("dir".to_string(), d)]),
            value_outputs: BTreeMap::new(),
            created: now_timestamp(),
        };
        s.put_entry(&e).unwrap();
        assert!(s.gc(&BTreeSet::from(["r".to_string()])).unwrap().removed_blobs.is_empty());
        let report = s.gc(&BTreeSet::new()).unwrap();
        assert_eq!(report.removed_trees, vec![d]);
        assert_eq!(report.removed_blobs.len(), 2);
    }
}
