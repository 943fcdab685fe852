use std::fs::File;
use std::process::{Command, Stdio};

use super::{collect_outcome, exit_code_of, hostname, io_error, stage_inputs_into, ExecError, Executor, Outcome, TaskSpec};

/// Runs tasks as child processes of the engine.
#[derive(Debug, Clone, Default)]
pub struct LocalExecutor;

impl LocalExecutor {
    pub fn new() -> Self {
        LocalExecutor
    }
}

pub(crate) fn run_command(spec: &TaskSpec) -> Result<i32, ExecError> {
    let argv = spec.full_argv();
    let (program, args) = argv.split_first().ok_or_else(|| ExecError::Spawn {
        program: String::new(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
    })?;
    let stdout = File::create(&spec.stdout).map_err(io_error(&spec.stdout))?;
    let stderr = File::create(&spec.stderr).map_err(io_error(&spec.stderr))?;
    let status = Command::new(program)
        .args(args)
        .current_dir(&spec.workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status()
        .map_err(|source| ExecError::Spawn { program: program.clone(), source })?;
    Ok(exit_code_of(status))
}

impl Executor for LocalExecutor {
    fn name(&self) -> String {
        "local".into()
    }

    fn execute(&self, spec: &TaskSpec) -> Result<Outcome, ExecError> {
        stage_inputs_into(spec, &spec.workdir)?;
        let code = run_command(spec)?;
        collect_outcome(spec, code, hostname())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use crate::exec::testutil::{file, integer, spec};
    use crate::exec::StagedInput;
    use crate::value::Value;

    #[test]
    fn writes_file_output() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["sh", "-c", "echo hi > out.txt"], &[("msg", file(), Some("out.txt"))]);
        let o = LocalExecutor.execute(&s).unwrap();
        assert!(o.success());
        assert_eq!(o.outputs["msg"].digest, Digest::of_bytes("hi\n"));
        assert_eq!(o.outputs["msg"].name, "out.txt");
    }

    #[test]
    fn nonzero_exit() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["sh", "-c", "echo boom >&2; exit 3"], &[("msg", file(), Some("out.txt"))]);
        let o = LocalExecutor.execute(&s).unwrap();
        assert_eq!(o.exit_code, 3);
        assert!(o.outputs.is_empty());
        assert_eq!(std::fs::read_to_string(&o.stderr).unwrap(), "boom\n");
    }

    #[test]
    fn missing_output() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["true"], &[("msg", file(), Some("out.txt"))]);
        assert!(matches!(LocalExecutor.execute(&s), Err(ExecError::MissingOutput(p)) if p == "msg"));
    }

    #[test]
    fn value_manifest() {
        let d = tempfile::tempdir().unwrap();
        let ok = spec(d.path(), &["sh", "-c", r#"echo '{"n": 7}' > outputs.json"#], &[("n", integer(), None)]);
        assert_eq!(LocalExecutor.execute(&ok).unwrap().values["n"], Value::Integer(7));
        let bad = spec(d.path(), &["sh", "-c", r#"echo '{"n": 7.5}' > outputs.json"#], &[("n", integer(), None)]);
        assert!(matches!(LocalExecutor.execute(&bad), Err(ExecError::BadValue { .. })));
        let absent = spec(d.path(), &["sh", "-c", "rm -f outputs.json"], &[("n", integer(), None)]);
        assert!(matches!(LocalExecutor.execute(&absent), Err(ExecError::MissingOutput(_))));
    }

    #[test]
    fn spawn_failure_and_wrapper() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path(), &["definitely-not-a-program-xyz"], &[]);
        assert!(matches!(LocalExecutor.execute(&s), Err(ExecError::Spawn { .. })));
        let mut w = spec(d.path(), &["sh", "-c", "echo $FOO > out.txt"], &[("o", file(), Some("out.txt"))]);
        w.wrapper = vec!["env".into(), "FOO=bar".into()];
        assert_eq!(LocalExecutor.execute(&w).unwrap().outputs["o"].digest, Digest::of_bytes("bar\n"));
    }

    #[test]
    fn stages_inputs() {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("src.txt");
        std::fs::write(&src, "payload").unwrap();
        let mut s = spec(d.path(), &["cp", "inputs/x/src.txt", "copy.txt"], &[("o", file(), Some("copy.txt"))]);
        s.inputs = vec![StagedInput { rel_path: "inputs/x/src.txt".into(), source: Some(src) }];
        assert_eq!(LocalExecutor.execute(&s).unwrap().outputs["o"].digest, Digest::of_bytes("payload"));
    }
}
