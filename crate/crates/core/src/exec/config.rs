//! Named executor configurations.
//!
//! ```toml
//! [batch.mock]
//! kind = "mock"
//! spool = "spool"          # relative to the config file
//! runner = "embedded"      # or "external": a separate simbatch process
//! concurrency = 4
//! template = "job.template"
//!
//! [batch.cluster]
//! kind = "slurm"
//! template = "slurm.template"
//!
//! [remote.loopback]
//! kind = "loopback"
//! root = "remote-root"
//! ```
//!
//! Without a file, `batch:mock` and `remote:loopback` are available with
//! directories under the engine's state directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::{
    BatchAdapter, BatchExecutor, ExecError, Executor, JobTemplate, LocalExecutor, LoopbackTransport, MockBatch,
    RemoteExecutor, SlurmAdapter,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    Mock,
    Slurm,
    Loopback,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Runner {
    Embedded,
    External,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    kind: ExecutorKind,
    spool: Option<PathBuf>,
    runner: Option<Runner>,
    concurrency: Option<usize>,
    template: Option<PathBuf>,
    root: Option<PathBuf>,
    poll_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFormat {
    #[serde(default)]
    batch: BTreeMap<String, Entry>,
    #[serde(default)]
    remote: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone, Default)]
pub struct ExecutorConfig {
    file: FileFormat,
    base_dir: PathBuf,
}

impl ExecutorConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExecError> {
        let file = toml::from_str(text).map_err(|e| ExecError::Unknown(format!("invalid executor configuration: {e}")))?;
        Ok(ExecutorConfig { file, base_dir: base_dir.to_path_buf() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path).map_err(super::io_error(path))?;
        ExecutorConfig::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Builds the executor named by `selector` (`local`, `batch:<name>`,
    /// `remote:<name>`). `state_dir` hosts default spool and remote roots;
    /// `transfer_log` receives remote staging records.
    pub fn build(
        &self,
        selector: &str,
        state_dir: &Path,
        jobs: usize,
        transfer_log: Option<&Path>,
    ) -> Result<Box<dyn Executor>, ExecError> {
        let unknown = || ExecError::Unknown(selector.to_string());
        let (family, name) = match selector.split_once(':') {
            None if selector == "local" => return Ok(Box::new(LocalExecutor)),
            None => return Err(unknown()),
            Some(pair) => pair,
        };
        let table = match family {
            "batch" => &self.file.batch,
            "remote" => &self.file.remote,
            _ => return Err(unknown()),
        };
        let entry = match (table.get(name), family, name) {
            (Some(e), _, _) => e.clone(),
            (None, "batch", "mock") => Entry {
                kind: ExecutorKind::Mock,
                spool: None,
                runner: None,
                concurrency: None,
                template: None,
                root: None,
                poll_ms: None,
            },
            (None, "remote", "loopback") => Entry {
                kind: ExecutorKind::Loopback,
                spool: None,
                runner: None,
                concurrency: None,
                template: None,
                root: None,
                poll_ms: None,
            },
            _ => return Err(unknown()),
        };
        let template = match &entry.template {
            Some(p) => JobTemplate::from_file(&self.resolve(p)).map_err(super::io_error(p))?,
            None => JobTemplate::default(),
        };
        match (family, entry.kind) {
            ("batch", ExecutorKind::Mock) => {
                let spool = entry.spool.as_deref().map(|p| self.resolve(p)).unwrap_or_else(|| state_dir.join("spool"));
                let mut mock = MockBatch::new(&spool).map_err(super::io_error(&spool))?.with_template(template);
                if entry.runner.as_ref() != Some(&Runner::External) {
                    mock = mock.with_embedded_runner(entry.concurrency.unwrap_or(jobs));
                }
                Ok(Box::new(self.batch(Arc::new(mock), &entry)))
            }
            ("batch", ExecutorKind::Slurm) => {
                let dir = state_dir.join("slurm");
                std::fs::create_dir_all(&dir).map_err(super::io_error(&dir))?;
                Ok(Box::new(self.batch(Arc::new(SlurmAdapter::new(template, dir)), &entry)))
            }
            ("remote", ExecutorKind::Loopback) => {
                let root = entry
                    .root
                    .as_deref()
                    .map(|p| self.resolve(p))
                    .unwrap_or_else(|| state_dir.join("remote").join(name));
                let transport = LoopbackTransport::new(&root).map_err(super::io_error(&root))?;
                let mut exec = RemoteExecutor::new(name, Box::new(transport));
                if let Some(log) = transfer_log {
                    exec = exec.with_log_file(log);
                }
                Ok(Box::new(exec))
            }
            _ => Err(ExecError::Unknown(format!("{selector}: kind {:?} is not a {family} executor", entry.kind))),
        }
    }

    fn batch(&self, adapter: Arc<dyn BatchAdapter>, entry: &Entry) -> BatchExecutor {
        let exec = BatchExecutor::new(adapter);
        match entry.poll_ms {
            Some(ms) => exec.with_poll_interval(std::time::Duration::from_millis(ms)),
            None => exec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown() {
        let d = tempfile::tempdir().unwrap();
        let cfg = ExecutorConfig::default();
        assert_eq!(cfg.build("local", d.path(), 1, None).unwrap().name(), "local");
        assert_eq!(cfg.build("remote:loopback", d.path(), 1, None).unwrap().name(), "remote:loopback");
        assert_eq!(cfg.build("batch:mock", d.path(), 1, None).unwrap().name(), "batch:mock");
        assert!(cfg.build("batch:nope", d.path(), 1, None).is_err());
        assert!(cfg.build("ssh", d.path(), 1, None).is_err());
    }

    #[test]
    fn parses_file() {
        let d = tempfile::tempdir().unwrap();
        let cfg = ExecutorConfig::from_toml(
            "[batch.q]\nkind = \"mock\"\nspool = \"sp\"\nrunner = \"external\"\n[remote.far]\nkind = \"loopback\"\nroot = \"far\"\n",
            d.path(),
        )
        .unwrap();
        assert_eq!(cfg.build("batch:q", d.path(), 1, None).unwrap().name(), "batch:mock");
        assert!(d.path().join("sp").is_dir());
        assert_eq!(cfg.build("remote:far", d.path(), 1, None).unwrap().name(), "remote:far");
        assert!(d.path().join("far").is_dir());
        assert!(ExecutorConfig::from_toml("[batch.q]\nkind = \"ftp\"\n", d.path()).is_err());
    }
}
