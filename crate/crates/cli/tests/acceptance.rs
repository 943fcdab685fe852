//! End-to-end acceptance checks, one line per criterion.
//!
//! Expected task sets come from reading the fixture JSON directly, not from
//! the engine's planner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value as Json;

const FLOWFORGE: &str = env!("CARGO_BIN_EXE_flowforge");
const SIMBATCH: &str = env!("CARGO_BIN_EXE_simbatch");
const DS: &str = "domain_size=2.0";
const USECASE_TASKS: usize = 6;
/// Delay per stand-in step in the monitoring check.
const MONITOR_DELAY: &str = "0.6";
const MONITOR_TIMEOUT: Duration = Duration::from_secs(40);
const STATUS_POLL: Duration = Duration::from_millis(40);
const CONCURRENCY_LIMIT: usize = 2;
const FINGERPRINT_ROWS: usize = 20;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Sandbox {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        flowforge::fixtures::install(&root.join("wf")).unwrap();
        Sandbox { _dir: dir, root }
    }

    fn wf(&self, rel: &str) -> PathBuf {
        self.root.join("wf").join(rel)
    }

    fn work(&self) -> PathBuf {
        self.root.join("work")
    }

    fn command(&self, args: &[&str]) -> Command {
        let mut c = Command::new(FLOWFORGE);
        c.current_dir(&self.root).arg("--workdir").arg(self.work()).args(args);
        c
    }

    fn ff(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    fn ff_ok(&self, args: &[&str]) -> Result<String, String> {
        let o = self.ff(args);
        ensure!(
            o.status.success(),
            "`flowforge {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        );
        Ok(String::from_utf8(o.stdout).unwrap())
    }

    /// Runs the workflow and returns the run id.
    fn run(&self, wf: &str, extra: &[&str]) -> Result<String, String> {
        let path = self.wf(wf);
        let mut args = vec!["run", path.to_str().unwrap()];
        args.extend_from_slice(extra);
        Ok(self.ff_ok(&args)?.trim().to_string())
    }

    fn run_dir(&self, id: &str) -> PathBuf {
        self.work().join(".flowforge/runs").join(id)
    }

    fn journal(&self, id: &str) -> Vec<Json> {
        fs::read_to_string(self.run_dir(id).join("events.ndjson"))
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    fn started(&self, id: &str) -> Vec<String> {
        self.journal(id)
            .iter()
            .filter(|e| e["kind"] == "task-started")
            .map(|e| e["task"].as_str().unwrap().to_string())
            .collect()
    }

    fn prov(&self, id: &str) -> Json {
        serde_json::from_str(&fs::read_to_string(self.run_dir(id).join("provenance.json")).unwrap()).unwrap()
    }
}

fn record<'a>(prov: &'a Json, task: &str) -> Option<&'a Json> {
    prov["tasks"].as_array()?.iter().find(|r| r["task"] == task)
}

fn output_digests(prov: &Json) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for r in prov["tasks"].as_array().into_iter().flatten() {
        for (port, a) in r["output_files"].as_object().into_iter().flatten() {
            out.insert(format!("{}.{port}", r["task"].as_str().unwrap()), a["digest"].as_str().unwrap().to_string());
        }
    }
    out
}

fn sha256_file(p: &Path) -> String {
    flowforge::Digest::of_bytes(fs::read(p).unwrap()).to_string()
}

// ------------------------------------------------------------ fixture oracle

/// Dependency structure read straight from a workflow file.
struct Shape {
    /// task -> upstream tasks
    deps: BTreeMap<String, BTreeSet<String>>,
    /// param name -> tasks reading it
    readers: BTreeMap<String, BTreeSet<String>>,
    /// task -> (file input ports, file output paths, has value outputs)
    files: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>, bool)>,
}

impl Shape {
    fn read(path: &Path) -> Shape {
        let doc: Json = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        let mut shape = Shape { deps: BTreeMap::new(), readers: BTreeMap::new(), files: BTreeMap::new() };
        for p in doc["processes"].as_array().unwrap() {
            let id = p["id"].as_str().unwrap().to_string();
            let mut deps = BTreeSet::new();
            let mut file_in = BTreeSet::new();
            for (port, decl) in p["inputs"].as_object().into_iter().flatten() {
                let from = decl["from"].as_str().unwrap();
                let (head, _) = from.split_once('.').unwrap();
                if head == "params" {
                    shape.readers.entry(from[7..].to_string()).or_default().insert(id.clone());
                } else {
                    deps.insert(head.to_string());
                }
                if decl["type"] == "file" {
                    file_in.insert(port.clone());
                }
            }
            let mut file_out = BTreeSet::new();
            let mut values = false;
            for decl in p["outputs"].as_object().into_iter().flatten().map(|(_, d)| d) {
                if decl["type"] == "file" {
                    file_out.insert(decl["path"].as_str().unwrap().to_string());
                } else {
                    values = true;
                }
            }
            shape.files.insert(id.clone(), (file_in, file_out, values));
            shape.deps.insert(id, deps);
        }
        shape
    }

    fn tasks(&self) -> BTreeSet<String> {
        self.deps.keys().cloned().collect()
    }

    /// `seeds` plus everything reachable downstream of them.
    fn downstream(&self, seeds: &BTreeSet<String>) -> BTreeSet<String> {
        let mut out = seeds.clone();
        loop {
            let more: Vec<String> = self
                .deps
                .iter()
                .filter(|(t, ds)| !out.contains(*t) && ds.iter().any(|d| out.contains(d)))
                .map(|(t, _)| t.clone())
                .collect();
            if more.is_empty() {
                return out;
            }
            out.extend(more);
        }
    }

    fn is_linear_extension(&self, order: &[String]) -> bool {
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        pos.len() == self.deps.len()
            && self.deps.iter().all(|(t, ds)| {
                ds.iter().all(|d| matches!((pos.get(d.as_str()), pos.get(t.as_str())), (Some(a), Some(b)) if a < b))
            })
    }
}

// ------------------------------------------------------------ criteria

fn c1_end_to_end() -> Check {
    let s = Sandbox::new();
    let id = s.run("usecase.wf", &["-p", DS, "--policy", "recompute", "-j", "2"])?;
    let order = s.started(&id);
    ensure!(order.len() == USECASE_TASKS, "{} task-started events", order.len());
    let shape = Shape::read(&s.wf("usecase.wf"));
    ensure!(shape.is_linear_extension(&order), "start order {order:?} violates the dependency order");
    let dofs = record(&s.prov(&id), "simulate").ok_or("no simulate record")?["value_outputs"]["num_dofs"]["value"].clone();
    ensure!(dofs.is_i64(), "num_dofs missing: {dofs}");
    let pdf = fs::read_to_string(s.work().join("paper/paper.pdf")).map_err(|e| e.to_string())?;
    ensure!(pdf.contains(&format!("num_dofs = {dofs}")), "paper.pdf lacks num_dofs = {dofs}");
    Ok(format!("6 starts in order {}; num_dofs = {dofs} in paper.pdf", order.join(",")))
}

fn c2_update_minimality() -> Check {
    let s = Sandbox::new();
    let shape = Shape::read(&s.wf("usecase.wf"));
    let run = |s: &Sandbox| -> Result<BTreeSet<String>, String> {
        let id = s.run("usecase.wf", &["-p", DS, "--policy", "update", "-j", "2"])?;
        Ok(s.started(&id).into_iter().collect())
    };
    let first = run(&s)?;
    ensure!(first == shape.tasks(), "first run executed {first:?}");
    let again = run(&s)?;
    ensure!(again.is_empty(), "rerun executed {again:?}");

    let mut lines = vec!["rerun 0".to_string()];
    for (param, file, comment) in [("postproc_script", "scripts/postproc.sh", "#"), ("geometry", "geometry.geo", "//")] {
        let path = s.wf(file);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("{text}\n{comment} perturbed\n")).unwrap();
        let expected = shape.downstream(&shape.readers[param]);
        let got = run(&s)?;
        ensure!(got == expected, "after editing {file}: executed {got:?}, oracle {expected:?}");
        lines.push(format!("{file} -> {{{}}}", got.into_iter().collect::<Vec<_>>().join(",")));
    }
    Ok(lines.join("; "))
}

fn c3_link() -> Check {
    let s = Sandbox::new();
    let r1 = s.run("usecase.wf", &["-p", DS, "--policy", "recompute"])?;
    let r2 = s.run("usecase.wf", &["-p", DS, "--policy", "link"])?;
    let starts = s.started(&r2);
    ensure!(starts.is_empty(), "link run started {starts:?}");
    let (p1, p2) = (s.prov(&r1), s.prov(&r2));
    let recs = p2["tasks"].as_array().ok_or("no task records")?;
    ensure!(recs.len() == USECASE_TASKS, "{} provenance records", recs.len());
    for r in recs {
        ensure!(r["action"] == "link-cached", "{} action {}", r["task"], r["action"]);
        ensure!(r["cached_from"] == r1.as_str(), "{} cached_from {}", r["task"], r["cached_from"]);
    }
    ensure!(output_digests(&p1) == output_digests(&p2), "output digests differ from run 1");
    Ok(format!("0 executions, 6 link-cached records, {} output digests equal", output_digests(&p2).len()))
}

fn c4_recompute() -> Check {
    let s = Sandbox::new();
    s.run("usecase.wf", &["-p", DS, "--policy", "recompute"])?;
    let r2 = s.run("usecase.wf", &["-p", DS, "--policy", "recompute"])?;
    let n = s.started(&r2).len();
    ensure!(n == USECASE_TASKS, "second run executed {n}");
    Ok(format!("second run executed {n}"))
}

fn c5_typed_interfaces() -> Check {
    let s = Sandbox::new();
    let mut seen = Vec::new();
    for wf in ["negative/float_to_int.wf", "negative/format_mismatch.wf"] {
        let path = s.wf(wf);
        let path = path.to_str().unwrap();
        let v = s.ff(&["validate", path]);
        ensure!(v.status.code() == Some(2), "validate {wf} exited {:?}", v.status.code());
        let r = s.ff(&["run", path, "--policy", "recompute"]);
        ensure!(r.status.code() == Some(2), "run {wf} exited {:?}", r.status.code());
        seen.push(String::from_utf8_lossy(&v.stderr).lines().next().unwrap_or("").to_string());
    }
    ensure!(!s.work().join(".flowforge/runs").exists(), "a run directory was created");
    Ok(format!("both rejected with exit 2, no runs: {}", seen.join(" | ")))
}

fn c6_composition() -> Check {
    let mono = Sandbox::new();
    let comp = Sandbox::new();
    let m = mono.prov(&mono.run("usecase.wf", &["-p", DS, "--policy", "recompute"])?);
    let c = comp.prov(&comp.run("usecase_composed.wf", &["-p", DS, "--policy", "recompute"])?);
    let pdf = |p: &Json, task: &str| record(p, task).map(|r| r["output_files"]["pdf"]["digest"].clone());
    ensure!(pdf(&m, "paper").is_some() && pdf(&m, "paper") == pdf(&c, "paper"), "paper.pdf digests differ");
    let env = |p: &Json, task: &str| record(p, task).map(|r| r["env"]["spec"].clone()).unwrap_or(Json::Null);
    let (mesh, convert) = (env(&c, "meshing.mesh"), env(&c, "meshing.convert"));
    ensure!(!mesh.is_null() && mesh != convert, "sub-workflow envs not distinct: {mesh} vs {convert}");
    ensure!(mesh == env(&m, "mesh") && convert == env(&m, "convert"), "sub-workflow envs differ from monolithic");
    Ok(format!("paper.pdf {} in both; meshing.mesh {mesh} / meshing.convert {convert}", pdf(&c, "paper").unwrap()))
}

fn set_manifest_version(src: &Path, dst: &Path, task: &str, version: &str) {
    let mut doc: Json = serde_json::from_str(&fs::read_to_string(src).unwrap()).unwrap();
    let p = doc["processes"].as_array_mut().unwrap().iter_mut().find(|p| p["id"] == task).unwrap();
    p["env"]["manifest"][0]["version"] = Json::from(version);
    fs::write(dst, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}

fn c7_environment() -> Check {
    let s = Sandbox::new();
    let shape = Shape::read(&s.wf("usecase.wf"));
    s.run("usecase.wf", &["-p", DS, "--policy", "update"])?;
    set_manifest_version(&s.wf("usecase.wf"), &s.wf("usecase_bumped.wf"), "simulate", "2019.2");
    let path = s.wf("usecase_bumped.wf");
    let preview: BTreeMap<String, Json> =
        serde_json::from_str(&s.ff_ok(&["run", path.to_str().unwrap(), "-p", DS, "--dry-run", "--json"])?).unwrap();
    let expected = shape.downstream(&BTreeSet::from(["simulate".to_string()]));
    for (task, a) in &preview {
        let want = if expected.contains(task) { "execute" } else { "skip-up-to-date" };
        ensure!(a["action"] == want, "preview {task}: {} (want {want})", a["action"]);
    }
    let id = s.run("usecase_bumped.wf", &["-p", DS, "--policy", "update"])?;
    let got: BTreeSet<String> = s.started(&id).into_iter().collect();
    ensure!(got == expected, "executed {got:?}, oracle {expected:?}");
    Ok(format!("fenics 2019.1 -> 2019.2 executes {{{}}}, rest skipped", got.into_iter().collect::<Vec<_>>().join(",")))
}

struct Killer(Child);

impl Drop for Killer {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn c8_executors() -> Check {
    let mut digests = BTreeMap::new();
    let mut transfers_ok = String::new();
    for exec in ["local", "batch:mock", "remote:loopback"] {
        let s = Sandbox::new();
        let mut extra = vec!["-p", DS, "--policy", "recompute", "-j", "2", "--executor", exec];
        let cfg = s.root.join("executors.toml");
        let _runner = if exec == "batch:mock" {
            fs::write(&cfg, "[batch.mock]\nkind = \"mock\"\nspool = \"spool\"\nrunner = \"external\"\npoll_ms = 20\n").unwrap();
            fs::create_dir_all(s.root.join("spool")).unwrap();
            extra.extend(["--exec-config", cfg.to_str().unwrap()]);
            let child = Command::new(SIMBATCH)
                .arg("--spool")
                .arg(s.root.join("spool"))
                .args(["--concurrency", "2"])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .map_err(|e| e.to_string())?;
            Some(Killer(child))
        } else {
            None
        };
        let id = s.run("usecase.wf", &extra)?;
        let prov = s.prov(&id);
        ensure!(prov["executor"] == exec, "provenance executor {}", prov["executor"]);
        digests.insert(exec, output_digests(&prov));
        if exec == "remote:loopback" {
            transfers_ok = check_transfers(&s, &id)?;
        }
    }
    let local = &digests["local"];
    ensure!(local.len() >= USECASE_TASKS, "only {} output files", local.len());
    for (exec, d) in &digests {
        ensure!(d == local, "{exec} output digests differ from local");
    }
    Ok(format!("{} output digests identical across local, batch:mock, remote:loopback; {transfers_ok}", local.len()))
}

/// Every declared file input is staged in, every declared file output is
/// staged out, and nothing else moves apart from the value-output record of
/// tasks that declare value outputs.
fn check_transfers(s: &Sandbox, id: &str) -> Check {
    let shape = Shape::read(&s.wf("usecase.wf"));
    let mut actual: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>)> = BTreeMap::new();
    let mut count = 0;
    for line in fs::read_to_string(s.run_dir(id).join("transfers.ndjson")).map_err(|e| e.to_string())?.lines() {
        let t: Json = serde_json::from_str(line).unwrap();
        let entry = actual.entry(t["task"].as_str().unwrap().to_string()).or_default();
        let path = t["path"].as_str().unwrap();
        match t["direction"].as_str() {
            Some("in") => {
                let port = path.strip_prefix("inputs/").and_then(|r| r.split('/').next()).unwrap_or(path);
                entry.0.insert(port.to_string());
            }
            Some("out") => {
                entry.1.insert(path.to_string());
            }
            other => return Err(format!("transfer direction {other:?}")),
        }
        count += 1;
    }
    for (task, (ins, outs, values)) in &shape.files {
        let mut outs = outs.clone();
        if *values {
            outs.insert("outputs.json".into());
        }
        let got = actual.remove(task).unwrap_or_default();
        ensure!(got.0 == *ins, "{task} staged in {:?}, declared {ins:?}", got.0);
        ensure!(got.1 == outs, "{task} staged out {:?}, declared {outs:?}", got.1);
    }
    ensure!(actual.is_empty(), "transfers for undeclared tasks {:?}", actual.keys());
    Ok(format!("{count} transfers match the declared ports"))
}

fn c9_monitoring() -> Check {
    let s = Sandbox::new();
    let path = s.wf("usecase.wf");
    let out = s
        .command(&["run", path.to_str().unwrap(), "-p", DS, "--policy", "recompute", "-j", "1", "--detach"])
        .env("STANDIN_DELAY", MONITOR_DELAY)
        .output()
        .unwrap();
    ensure!(out.status.success(), "detach failed: {}", String::from_utf8_lossy(&out.stderr));
    let id = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let deadline = Instant::now() + MONITOR_TIMEOUT;
    let mut mid = None;
    let last = loop {
        ensure!(Instant::now() < deadline, "run did not finish within {MONITOR_TIMEOUT:?}");
        let o = s.ff(&["status", &id, "--json"]);
        if o.status.success() {
            let st: Json = serde_json::from_slice(&o.stdout).unwrap();
            if st["terminal"] == true {
                break st;
            }
            let (done, pending) = (st["done"].as_u64().unwrap(), st["pending"].as_u64().unwrap());
            let running = st["running"].as_array().unwrap().len() as u64;
            ensure!(running <= 1, "jobs=1 but {running} running");
            ensure!(done + running + pending == USECASE_TASKS as u64, "split {done}/{running}/{pending}");
            if running == 1 && done >= 1 && mid.is_none() {
                mid = Some((done, pending, st["running"][0].clone()));
            }
        }
        std::thread::sleep(STATUS_POLL);
    };
    let (done, pending, task) = mid.ok_or("never observed a mid-run snapshot")?;
    ensure!(last["done"] == USECASE_TASKS && last["state"] == "succeeded", "final status {last}");
    Ok(format!("mid-run {done} done / 1 running ({task}) / {pending} pending; final succeeded with done=6"))
}

fn c10_provenance() -> Check {
    let s = Sandbox::new();
    let id = s.run("usecase.wf", &["-p", DS, "--policy", "recompute"])?;
    let lineage = |digest: &str| -> Result<BTreeSet<String>, String> {
        let l: Json = serde_json::from_str(&s.ff_ok(&["prov", "lineage", digest, "--json"])?).unwrap();
        Ok(l["tasks"].as_array().unwrap().iter().map(|t| t["task"].as_str().unwrap().to_string()).collect())
    };
    let paper = lineage(&sha256_file(&s.work().join("paper/paper.pdf")))?;
    ensure!(paper == Shape::read(&s.wf("usecase.wf")).tasks(), "paper.pdf lineage {paper:?}");
    let mesh = lineage(&sha256_file(&s.work().join("mesh/mesh.msh")))?;
    ensure!(mesh == BTreeSet::from(["mesh".to_string()]), "mesh.msh lineage {mesh:?}");

    let composed = s.wf("usecase_composed.wf");
    let usecase = s.wf("usecase.wf");
    let dots = [
        ("workflow", s.ff_ok(&["graph", usecase.to_str().unwrap()])?),
        ("composed", s.ff_ok(&["graph", composed.to_str().unwrap()])?),
        ("flat", s.ff_ok(&["graph", "--flat", composed.to_str().unwrap()])?),
        ("run", s.ff_ok(&["prov", "export", &id, "--format", "dot"])?),
    ];
    for (what, text) in &dots {
        graphviz_rust::parse(text).map_err(|e| format!("{what} DOT rejected: {e}"))?;
    }
    Ok(format!("paper.pdf lineage {} tasks, mesh.msh lineage {{mesh}}; {} DOT exports parse", paper.len(), dots.len()))
}

fn timed_parallel(jobs: &str) -> Result<(Duration, usize), String> {
    let s = Sandbox::new();
    let t0 = Instant::now();
    let id = s.run("parallel.wf", &["--policy", "recompute", "-j", jobs])?;
    let wall = t0.elapsed();
    let (mut now, mut peak) = (0usize, 0usize);
    for e in s.journal(&id) {
        match e["kind"].as_str() {
            Some("task-started") => {
                now += 1;
                peak = peak.max(now);
            }
            Some("task-finished") => now = now.saturating_sub(1),
            _ => {}
        }
    }
    Ok((wall, peak))
}

fn c11_concurrency() -> Check {
    let (t2, peak2) = timed_parallel("2")?;
    ensure!(peak2 <= CONCURRENCY_LIMIT, "jobs=2 peak {peak2} running");
    let (t1, peak1) = timed_parallel("1")?;
    let (t4, peak4) = timed_parallel("4")?;
    ensure!(peak1 == 1, "jobs=1 peak {peak1}");
    ensure!(t4 < t1, "jobs=4 took {t4:?}, jobs=1 took {t1:?}");
    Ok(format!(
        "jobs=2 peak {peak2} ({:.2}s); jobs=4 {:.2}s (peak {peak4}) < jobs=1 {:.2}s",
        t2.as_secs_f64(),
        t4.as_secs_f64(),
        t1.as_secs_f64()
    ))
}

fn c12_fingerprints() -> Check {
    let table =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/fingerprints.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().filter(|l| !l.is_empty()).map(|l| l.split('\t').collect()).collect();
    ensure!(rows.len() == FINGERPRINT_ROWS, "{} recorded rows", rows.len());
    let s = Sandbox::new();
    let cases: String = rows.iter().map(|r| format!("{}\t{}\t{}\n", r[0], r[1], r[2])).collect();
    let oracle = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../tools/fingerprint_oracle.py");
    let mut child = Command::new("python3")
        .arg(&oracle)
        .arg(s.root.join("wf"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| format!("python3: {e}"))?;
    std::io::Write::write_all(&mut child.stdin.take().unwrap(), cases.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    ensure!(out.status.success(), "oracle exited {:?}", out.status.code());
    let recomputed: Vec<String> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| l.rsplit('\t').next().unwrap().to_string()).collect();
    ensure!(recomputed.len() == rows.len(), "oracle printed {} rows", recomputed.len());
    for (r, fp) in rows.iter().zip(&recomputed) {
        ensure!(r[3] == fp, "{} {} {}: recorded {} oracle {fp}", r[0], r[1], r[2], r[3]);
        let loaded = flowforge::load_workflow(&s.wf(r[0])).map_err(|e| e.to_string())?;
        let params = loaded.parse_params(&r[2].split_whitespace().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let g = loaded.graph(&params, &flowforge::EnvRegistry::builtin()).map_err(|e| e.to_string())?;
        let t = g.tasks[r[1]].resolve(&BTreeMap::new()).map_err(|e| e.to_string())?;
        let engine = flowforge::planner::task_fingerprint(&t).map_err(|e| e.to_string())?.to_string();
        ensure!(engine == *fp, "{} {}: engine {engine} oracle {fp}", r[0], r[1]);
    }
    Ok(format!("{} recorded fingerprints = reference SHA-256 = engine", rows.len()))
}

fn c13_capabilities() -> Check {
    let s = Sandbox::new();
    let text = s.ff_ok(&["capabilities"])?;
    let expected = [
        ("scheduling", "3/3"),
        ("monitoring", "2/2"),
        ("visualization", "2/3"),
        ("provenance", "2/2"),
        ("environment", "3/3"),
        ("composition", "3/3"),
        ("interfaces", "3/3"),
        ("up-to-dateness", "R,L,U"),
    ];
    for (name, level) in expected {
        let line = text.lines().find(|l| l.starts_with(&format!("{name}:"))).ok_or(format!("no {name} line"))?;
        ensure!(line.split_whitespace().nth(1) == Some(level), "{line}");
    }
    ensure!(text.contains("remote"), "scheduling level does not mention remote execution");
    Ok(expected.iter().map(|(n, l)| format!("{n} {l}")).collect::<Vec<_>>().join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("use-case end-to-end", c1_end_to_end),
        ("update policy minimality", c2_update_minimality),
        ("link policy", c3_link),
        ("recompute policy", c4_recompute),
        ("typed interfaces", c5_typed_interfaces),
        ("composition", c6_composition),
        ("environment sensitivity", c7_environment),
        ("executor equivalence", c8_executors),
        ("monitoring", c9_monitoring),
        ("provenance and lineage", c10_provenance),
        ("concurrency bound", c11_concurrency),
        ("fingerprint oracle", c12_fingerprints),
        ("capabilities self-report", c13_capabilities),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let t0 = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {failed} failed, {:.1}s", t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
