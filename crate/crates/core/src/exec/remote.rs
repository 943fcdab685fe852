//! Remote execution: stage inputs to a remote root, run there, stage the
//! declared outputs, the value manifest and the logs back.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{collect_outcome, exit_code_of, io_error, ExecError, Executor, Outcome, TaskSpec, VALUE_MANIFEST};

/// Paths given to a transport are relative to its remote root.
pub trait Transport: Send + Sync {
    fn name(&self) -> String;
    fn host(&self) -> String;
    fn put(&self, local: &Path, remote: &str) -> io::Result<u64>;
    fn get(&self, remote: &str, local: &Path) -> io::Result<u64>;
    fn exists(&self, remote: &str) -> bool;
    fn mkdir(&self, remote: &str) -> io::Result<()>;
    /// Runs `argv` in `cwd`; stdout and stderr go to remote files. A missing
    /// program yields exit code 127 with the reason on stderr.
    fn exec(&self, cwd: &str, argv: &[String], stdout: &str, stderr: &str) -> io::Result<i32>;
    fn remove_all(&self, remote: &str) -> io::Result<()>;
}

/// A "remote" that is a second directory tree on this machine. Transfers
/// copy bytes, so nothing is shared with the submitting side.
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    root: PathBuf,
}

impl LoopbackTransport {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(LoopbackTransport { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn at(&self, remote: &str) -> io::Result<PathBuf> {
        let rel = Path::new(remote);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("remote path `{remote}` escapes the root")));
        }
        Ok(self.root.join(rel))
    }
}

fn copy_tree(src: &Path, dest: &Path) -> io::Result<u64> {
    if src.is_dir() {
        fs::create_dir_all(dest)?;
        let mut total = 0;
        for item in fs::read_dir(src)? {
            let item = item?;
            total += copy_tree(&item.path(), &dest.join(item.file_name()))?;
        }
        Ok(total)
    } else {
        if let Some(p) = dest.parent() {
            fs::create_dir_all(p)?;
        }
        if dest.exists() {
            fs::remove_file(dest)?;
        }
        let n = fs::copy(src, dest)?;
        let mut perms = fs::metadata(dest)?.permissions();
        #[allow(clippy::permissions_set_readonly_false)]
        perms.set_readonly(false);
        fs::set_permissions(dest, perms)?;
        Ok(n)
    }
}

impl Transport for LoopbackTransport {
    fn name(&self) -> String {
        "loopback".into()
    }

    fn host(&self) -> String {
        format!("loopback:{}", super::hostname())
    }

    fn put(&self, local: &Path, remote: &str) -> io::Result<u64> {
        copy_tree(local, &self.at(remote)?)
    }

    fn get(&self, remote: &str, local: &Path) -> io::Result<u64> {
        copy_tree(&self.at(remote)?, local)
    }

    fn exists(&self, remote: &str) -> bool {
        self.at(remote).map(|p| p.exists()).unwrap_or(false)
    }

    fn mkdir(&self, remote: &str) -> io::Result<()> {
        fs::create_dir_all(self.at(remote)?)
    }

    fn exec(&self, cwd: &str, argv: &[String], stdout: &str, stderr: &str) -> io::Result<i32> {
        let (program, args) =
            argv.split_first().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let out_path = self.at(stdout)?;
        let err_path = self.at(stderr)?;
        let spawned = Command::new(program)
            .args(args)
            .current_dir(self.at(cwd)?)
            .stdin(Stdio::null())
            .stdout(fs::File::create(&out_path)?)
            .stderr(fs::File::create(&err_path)?)
            .status();
        match spawned {
            Ok(status) => Ok(exit_code_of(status)),
            Err(e) if matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied) => {
                let mut f = OpenOptions::new().append(true).open(&err_path)?;
                writeln!(f, "{program}: {e}")?;
                Ok(127)
            }
            Err(e) => Err(e),
        }
    }

    fn remove_all(&self, remote: &str) -> io::Result<()> {
        let p = self.at(remote)?;
        if p.exists() {
            fs::remove_dir_all(p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferDirection {
    In,
    Out,
}

/// One staged file. `path` is relative to the task directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub task: String,
    pub direction: TransferDirection,
    pub path: String,
    pub bytes: u64,
}

pub struct RemoteExecutor {
    transport: Box<dyn Transport>,
    label: String,
    log: Mutex<Vec<TransferEntry>>,
    log_file: Option<PathBuf>,
}

impl RemoteExecutor {
    pub fn new(label: impl Into<String>, transport: Box<dyn Transport>) -> Self {
        RemoteExecutor { transport, label: label.into(), log: Mutex::new(Vec::new()), log_file: None }
    }

    /// Also append every transfer as a JSON line to `path`.
    pub fn with_log_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.log_file = Some(path.into());
        self
    }

    pub fn transfers(&self) -> Vec<TransferEntry> {
        self.log.lock().unwrap().clone()
    }

    fn record(&self, entry: TransferEntry) -> Result<(), ExecError> {
        let mut log = self.log.lock().unwrap();
        if let Some(path) = &self.log_file {
            let mut line = serde_json::to_string(&entry).expect("entry serializes");
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_error(path))?;
            f.write_all(line.as_bytes()).map_err(io_error(path))?;
        }
        log.push(entry);
        Ok(())
    }

    fn transport_err(what: &str, e: io::Error) -> ExecError {
        ExecError::Transport(format!("{what}: {e}"))
    }

    fn run(&self, spec: &TaskSpec, rdir: &str) -> Result<Outcome, ExecError> {
        self.transport.mkdir(rdir).map_err(|e| Self::transport_err("create remote task directory", e))?;
        for input in &spec.inputs {
            let remote = format!("{rdir}/work/{}", input.rel_path);
            match &input.source {
                Some(src) => {
                    let bytes =
                        self.transport.put(src, &remote).map_err(|e| Self::transport_err(&input.rel_path, e))?;
                    self.record(TransferEntry {
                        task: spec.task_id.clone(),
                        direction: TransferDirection::In,
                        path: input.rel_path.clone(),
                        bytes,
                    })?;
                }
                None => self.transport.mkdir(&remote).map_err(|e| Self::transport_err(&input.rel_path, e))?,
            }
        }
        self.transport.mkdir(&format!("{rdir}/work")).map_err(|e| Self::transport_err("create workdir", e))?;
        let code = self
            .transport
            .exec(&format!("{rdir}/work"), &spec.full_argv(), &format!("{rdir}/stdout"), &format!("{rdir}/stderr"))
            .map_err(|e| Self::transport_err("remote exec", e))?;

        for (remote, local) in [("stdout", &spec.stdout), ("stderr", &spec.stderr)] {
            self.transport
                .get(&format!("{rdir}/{remote}"), local)
                .map_err(|e| Self::transport_err(&format!("stage out {remote}"), e))?;
        }
        if code == 0 {
            let mut wanted: Vec<(String, String)> = Vec::new();
            for (port, out) in &spec.outputs {
                if let Some(path) = &out.path {
                    wanted.push((port.clone(), path.clone()));
                }
            }
            if spec.has_value_outputs() {
                let port = spec.outputs.iter().find(|(_, o)| o.path.is_none()).map(|(p, _)| p.clone()).unwrap();
                wanted.push((port, VALUE_MANIFEST.to_string()));
            }
            for (port, path) in &wanted {
                let remote = format!("{rdir}/work/{path}");
                if !self.transport.exists(&remote) {
                    return Err(ExecError::MissingOutput(port.clone()));
                }
            }
            for (_, path) in wanted {
                let remote = format!("{rdir}/work/{path}");
                let bytes = self
                    .transport
                    .get(&remote, &spec.workdir.join(&path))
                    .map_err(|e| Self::transport_err(&format!("stage out {path}"), e))?;
                self.record(TransferEntry {
                    task: spec.task_id.clone(),
                    direction: TransferDirection::Out,
                    path,
                    bytes,
                })?;
            }
        }
        collect_outcome(spec, code, self.transport.host())
    }
}

impl Executor for RemoteExecutor {
    fn name(&self) -> String {
        format!("remote:{}", self.label)
    }

    fn execute(&self, spec: &TaskSpec) -> Result<Outcome, ExecError> {
        let rdir = format!("{}-{}", spec.task_id, uuid::Uuid::new_v4().simple());
        let result = self.run(spec, &rdir);
        if let Err(e) = self.transport.remove_all(&rdir) {
            log::warn!("cannot clean remote directory {rdir}: {e}");
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::testutil::{file, integer, spec};
    use crate::exec::{LocalExecutor, StagedInput};

    fn remote(d: &Path) -> RemoteExecutor {
        RemoteExecutor::new("loopback", Box::new(LoopbackTransport::new(d.join("remote")).unwrap()))
    }

    #[test]
    fn matches_local_and_logs_transfers() {
        let d = tempfile::tempdir().unwrap();
        let a = d.path().join("a.txt");
        let b = d.path().join("b.txt");
        fs::write(&a, "A").unwrap();
        fs::write(&b, "B").unwrap();
        let mk = |sub: &str| {
            let root = d.path().join(sub);
            let mut s = spec(
                &root,
                &["sh", "-c", r#"cat inputs/x/a.txt inputs/y/b.txt > cat.txt; echo '{"n": 2}' > outputs.json"#],
                &[("c", file(), Some("cat.txt")), ("n", integer(), None)],
            );
            s.inputs = vec![
                StagedInput { rel_path: "inputs/x/a.txt".into(), source: Some(a.clone()) },
                StagedInput { rel_path: "inputs/y/b.txt".into(), source: Some(b.clone()) },
            ];
            s
        };
        let local = LocalExecutor.execute(&mk("l")).unwrap();
        let r = remote(d.path());
        let rem = r.execute(&mk("r")).unwrap();
        assert_eq!(local.outputs, rem.outputs);
        assert_eq!(local.values, rem.values);
        let paths: Vec<(TransferDirection, String)> = r.transfers().into_iter().map(|t| (t.direction, t.path)).collect();
        assert_eq!(
            paths,
            [
                (TransferDirection::In, "inputs/x/a.txt".to_string()),
                (TransferDirection::In, "inputs/y/b.txt".to_string()),
                (TransferDirection::Out, "cat.txt".to_string()),
                (TransferDirection::Out, "outputs.json".to_string()),
            ]
        );
        assert_eq!(fs::read_dir(d.path().join("remote")).unwrap().count(), 0);
    }

    #[test]
    fn missing_remote_program_exits_127() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["no-such-program-xyz"], &[]);
        let o = remote(d.path()).execute(&s).unwrap();
        assert_eq!(o.exit_code, 127);
        assert!(fs::read_to_string(&o.stderr).unwrap().contains("no-such-program-xyz"));
    }

    #[test]
    fn missing_remote_output() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["true"], &[("o", file(), Some("o.txt"))]);
        let r = remote(d.path());
        assert!(matches!(r.execute(&s), Err(ExecError::MissingOutput(_))));
        assert!(r.transfers().is_empty());
        assert!(!s.workdir.join("o.txt").exists());
    }

    #[test]
    fn refuses_escaping_paths() {
        let d = tempfile::tempdir().unwrap();
        let t = LoopbackTransport::new(d.path().join("r")).unwrap();
        assert!(t.put(&d.path().join("x"), "../x").is_err());
        assert!(!t.exists("/etc"));
    }
}
