use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FLOWFORGE: &str = env!("CARGO_BIN_EXE_flowforge");

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    flowforge::fixtures::install(&dir.path().join("wf")).unwrap();
    let wf = dir.path().join("wf");
    (dir, wf)
}

fn ff(work: &Path, args: &[&str]) -> Output {
    Command::new(FLOWFORGE).arg("--workdir").arg(work).args(args).output().unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return out;
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
                out.insert(p, Vec::new());
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dry_run_changes_nothing() {
    let (dir, wf) = setup();
    let work = dir.path().join("work");
    let usecase = wf.join("usecase.wf");
    let u = usecase.to_str().unwrap();

    let o = ff(&work, &["run", u, "-p", "domain_size=2.0", "--dry-run"]);
    assert!(o.status.success());
    assert!(!work.exists());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().filter(|l| l.starts_with("execute")).count(), 6);

    assert!(ff(&work, &["run", u, "-p", "domain_size=2.0"]).status.success());
    let before = snapshot(&work);
    let o = ff(&work, &["run", u, "-p", "domain_size=3.0", "--dry-run", "--policy", "recompute"]);
    assert!(o.status.success());
    assert_eq!(snapshot(&work), before);
}

#[test]
fn exit_codes() {
    let (dir, wf) = setup();
    let work = dir.path().join("work");
    let cycle = wf.join("negative/cycle.wf");
    assert_eq!(ff(&work, &["validate", cycle.to_str().unwrap()]).status.code(), Some(2));
    let usecase = wf.join("usecase.wf");
    let u = usecase.to_str().unwrap();
    assert_eq!(ff(&work, &["validate", u]).status.code(), Some(0));
    assert_eq!(ff(&work, &["run", u]).status.code(), Some(2), "missing required param");
    assert_eq!(ff(&work, &["run", u, "-p", "domain_size=big"]).status.code(), Some(2));
    assert_eq!(ff(&work, &["run", u, "-p", "domain_size=2.0", "--executor", "ssh"]).status.code(), Some(2));
    let failing = wf.join("twochain.wf");
    assert_eq!(ff(&work, &["run", failing.to_str().unwrap(), "-p", "fail_b1=true"]).status.code(), Some(1));
}

#[test]
fn cache_gc_keeps_latest_run_linkable() {
    let (dir, wf) = setup();
    let work = dir.path().join("work");
    let usecase = wf.join("usecase.wf");
    let u = usecase.to_str().unwrap();
    for ds in ["1.0", "2.0"] {
        let o = ff(&work, &["run", u, "-p", &format!("domain_size={ds}"), "--policy", "recompute"]);
        assert!(o.status.success());
    }
    let entries = |work: &Path| -> usize {
        let o = ff(work, &["cache", "ls", "--json"]);
        serde_json::from_slice::<Vec<serde_json::Value>>(&o.stdout).unwrap().len()
    };
    assert_eq!(entries(&work), 12);
    assert!(ff(&work, &["cache", "gc", "--keep-last", "1"]).status.success());
    assert_eq!(entries(&work), 6);
    let o = ff(&work, &["run", u, "-p", "domain_size=2.0", "--policy", "link", "--json"]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["tasks"].as_object().unwrap().values().all(|t| t["state"] == "cached"), "{r}");
}

#[test]
fn example_configs_load() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples");
    let dir = tempfile::tempdir().unwrap();
    let examples = dir.path().join("examples");
    fs::create_dir_all(&examples).unwrap();
    for f in ["executors.toml", "envs.toml", "slurm.template"] {
        fs::copy(docs.join(f), examples.join(f)).unwrap();
    }
    let cfg = flowforge::exec::ExecutorConfig::from_file(&examples.join("executors.toml")).unwrap();
    let state = dir.path().join("state");
    for name in ["batch:mock", "batch:desk", "batch:cluster", "remote:loopback"] {
        cfg.build(name, &state, 2, None).unwrap();
    }
    let envs = flowforge::EnvRegistry::from_file(&examples.join("envs.toml")).unwrap();
    let r = envs.resolve(&flowforge::EnvSpec::Image("example/sim:2".into()), dir.path()).unwrap();
    assert_eq!(r.wrapper, ["apptainer", "exec", "docker://example/sim:2"]);
}
