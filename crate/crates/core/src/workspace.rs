//! On-disk layout of a workspace.
//!
//! ```text
//! <root>/<task-id>/<path>              installed task outputs
//! <root>/.flowforge/cache/             content-addressed store (overridable)
//! <root>/.flowforge/stamps/<task-id>   fingerprint of the last installed result
//! <root>/.flowforge/runs/<run-id>/     journal, provenance, logs, pidfile
//! <root>/.flowforge/prov-index.json    digest -> producing task index
//! ```
//!
//! Opening a workspace never creates anything; `ensure` does.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{write_atomic, TypedLiteral};
use crate::digest::Fingerprint;
use crate::planner::ArtifactRef;

pub const STATE_DIR: &str = ".flowforge";

/// What the workspace holds for one task after it was executed or linked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub fingerprint: Fingerprint,
    /// Run whose provenance holds the record of this result.
    pub run_id: String,
    pub outputs: BTreeMap<String, ArtifactRef>,
    pub values: BTreeMap<String, TypedLiteral>,
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    cache: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        let root = absolute(root.into());
        let cache = root.join(STATE_DIR).join("cache");
        Workspace { root, cache }
    }

    pub fn with_cache_dir(mut self, cache: impl Into<PathBuf>) -> Self {
        self.cache = absolute(cache.into());
        self
    }

    pub fn ensure(&self) -> io::Result<()> {
        for dir in [self.runs_dir(), self.stamps_dir(), self.cache.clone()] {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn state_dir(&self) -> PathBuf {
        self.root.join(STATE_DIR)
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.state_dir().join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir().join(run_id)
    }

    pub fn stamps_dir(&self) -> PathBuf {
        self.state_dir().join("stamps")
    }

    pub fn index_path(&self) -> PathBuf {
        self.state_dir().join("prov-index.json")
    }

    pub fn task_dir(&self, task: &str) -> PathBuf {
        self.root.join(task)
    }

    pub fn output_path(&self, task: &str, rel: &str) -> PathBuf {
        self.task_dir(task).join(rel)
    }

    fn stamp_path(&self, task: &str) -> PathBuf {
        self.stamps_dir().join(task)
    }

    pub fn read_stamp(&self, task: &str) -> Option<Stamp> {
        let bytes = fs::read(self.stamp_path(task)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("ignoring malformed stamp for `{task}`: {e}");
                None
            }
        }
    }

    pub fn write_stamp(&self, task: &str, stamp: &Stamp) -> io::Result<()> {
        write_atomic(&self.stamp_path(task), &serde_json::to_vec_pretty(stamp).expect("stamp serializes"))
    }

    pub fn clear_stamp(&self, task: &str) -> io::Result<()> {
        match fs::remove_file(self.stamp_path(task)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Tasks that currently have a stamp, in id order.
    pub fn stamped_tasks(&self) -> Vec<String> {
        let mut ids: Vec<String> = fs::read_dir(self.stamps_dir())
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    /// `<UTC timestamp>-<random suffix>`; sorts by creation time.
    pub fn new_run_id() -> String {
        let ts = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let tag = uuid::Uuid::new_v4().simple().to_string();
        format!("{ts}-{}", &tag[..6])
    }

    /// Run ids, oldest first.
    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = fs::read_dir(self.runs_dir())
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.path().is_dir())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect()
            })
            .unwrap_or_default();
        ids.sort();
        ids
    }

    pub fn latest_run(&self) -> Option<String> {
        self.run_ids().pop()
    }

    /// Resolves `latest` and unique prefixes of run ids.
    pub fn find_run(&self, query: &str) -> Option<String> {
        if query == "latest" {
            return self.latest_run();
        }
        let ids = self.run_ids();
        if ids.iter().any(|i| i == query) {
            return Some(query.to_string());
        }
        let matches: Vec<&String> = ids.iter().filter(|i| i.starts_with(query)).collect();
        match matches.as_slice() {
            [one] => Some(one.to_string()),
            _ => None,
        }
    }
}
