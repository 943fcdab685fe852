//! Directory artifacts are identified by a manifest of their regular files.
//!
//! The manifest is `flowforge-tree-v1\n` followed by the canonical encoding
//! of `[{"digest":..,"path":..}, ...]` sorted by `/`-separated relative path.
//! Empty subdirectories are not represented.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::digest::Digest;

const TREE_HEADER: &str = "flowforge-tree-v1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub path: String,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeManifest {
    pub entries: Vec<TreeEntry>,
}

impl TreeManifest {
    pub fn scan(root: &Path) -> io::Result<Self> {
        let mut files = Vec::new();
        collect(root, root, &mut files)?;
        files.sort();
        let entries = files
            .into_iter()
            .map(|(rel, abs)| Ok(TreeEntry { path: rel, digest: Digest::of_file(&abs)? }))
            .collect::<io::Result<Vec<_>>>()?;
        Ok(TreeManifest { entries })
    }

    pub fn encode(&self) -> String {
        let list = self
            .entries
            .iter()
            .map(|e| serde_json::json!({"digest": e.digest.to_hex(), "path": e.path}))
            .collect();
        format!("{TREE_HEADER}{}", canonical::encode(&serde_json::Value::Array(list)))
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(self.encode())
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let meta = std::fs::metadata(&path)?;
        if meta.is_dir() {
            collect(root, &path, out)?;
        } else if meta.is_file() {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.push((rel, path));
        }
    }
    Ok(())
}

pub fn digest_dir(root: &Path) -> io::Result<Digest> {
    Ok(TreeManifest::scan(root)?.digest())
}
