use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowforge::cache::CacheStore;
use flowforge::exec::ExecutorConfig;
use flowforge::provenance::{provenance_dot, workflow_dot, ProvStore};
use flowforge::runstate::{self, TaskState, PID_FILE};
use flowforge::scheduler::{self, plan_preview, Policy, RunOptions};
use flowforge::{load_workflow, CapabilityMatrix, Digest, EnvRegistry, LoadError, Workspace};

/// Exit status for invalid workflows and bad invocations.
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "flowforge", version, about = "Run typed file-and-value workflows with caching and provenance")]
struct Cli {
    #[command(flatten)]
    place: Place,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Place {
    /// Workspace directory holding task outputs and engine state.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Cache directory (default: <workdir>/.flowforge/cache).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
}

impl Place {
    fn workspace(&self) -> Workspace {
        let ws = Workspace::open(&self.workdir);
        match &self.cache {
            Some(c) => ws.with_cache_dir(c),
            None => ws,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a workflow file without running anything.
    Validate { workflow: PathBuf },
    /// Print the workflow as a GraphViz digraph.
    Graph {
        workflow: PathBuf,
        /// Show sub-workflows inlined.
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a workflow.
    Run(RunArgs),
    /// Progress of a run (default: the latest).
    Status {
        run: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Captured output of one task.
    Logs {
        run: String,
        task: String,
        #[arg(long)]
        stderr: bool,
    },
    /// Provenance queries.
    #[command(subcommand)]
    Prov(ProvCmd),
    /// Inspect or collect the result cache.
    #[command(subcommand)]
    Cache(CacheCmd),
    /// Requirement levels this engine supports.
    Capabilities {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    workflow: PathBuf,
    /// Workflow parameter as NAME=VALUE (repeatable).
    #[arg(long = "param", short = 'p')]
    params: Vec<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Update)]
    policy: PolicyArg,
    /// Tasks executing at once (default: number of CPUs).
    #[arg(long, short = 'j')]
    jobs: Option<usize>,
    /// local, batch:<name> or remote:<name>.
    #[arg(long, default_value = "local")]
    executor: String,
    /// Keep running independent tasks after a failure.
    #[arg(long)]
    keep_going: bool,
    /// Start the run in the background and print its id.
    #[arg(long)]
    detach: bool,
    /// Print what would be done; change nothing.
    #[arg(long)]
    dry_run: bool,
    /// Environment provider configuration (TOML).
    #[arg(long)]
    env_config: Option<PathBuf>,
    /// Batch and remote executor configuration (TOML).
    #[arg(long)]
    exec_config: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long, hide = true)]
    run_id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Recompute,
    Link,
    Update,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Recompute => Policy::Recompute,
            PolicyArg::Link => Policy::Link,
            PolicyArg::Update => Policy::Update,
        }
    }
}

#[derive(Subcommand)]
enum ProvCmd {
    /// Provenance document of a run.
    Export {
        run: String,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tasks and artifacts that produced an artifact.
    Lineage {
        digest: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Subcommand)]
enum CacheCmd {
    /// List cached task results.
    Ls {
        #[arg(long)]
        json: bool,
    },
    /// Remove results not used by the kept runs, then unreferenced blobs.
    Gc {
        /// Run to keep (repeatable; default: every run in the workspace).
        #[arg(long)]
        keep: Vec<String>,
        /// Keep only the N most recent runs.
        #[arg(long, conflicts_with = "keep")]
        keep_last: Option<usize>,
    },
}

/// Failure that maps to a particular exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Exit(EXIT_INVALID, e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            eprintln!("flowforge: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let place = cli.place;
    match cli.command {
        Cmd::Validate { workflow } => validate(&workflow),
        Cmd::Graph { workflow, flat, out } => graph(&workflow, flat, out.as_deref()),
        Cmd::Run(args) => run(&place, args),
        Cmd::Status { run, json } => status(&place.workspace(), run.as_deref(), json),
        Cmd::Logs { run, task, stderr } => logs(&place.workspace(), &run, &task, stderr),
        Cmd::Prov(ProvCmd::Export { run, format, out }) => export(&place.workspace(), &run, format, out.as_deref()),
        Cmd::Prov(ProvCmd::Lineage { digest, json }) => lineage(&place.workspace(), &digest, json),
        Cmd::Cache(CacheCmd::Ls { json }) => cache_ls(&place.workspace(), json),
        Cmd::Cache(CacheCmd::Gc { keep, keep_last }) => cache_gc(&place.workspace(), keep, keep_last),
        Cmd::Capabilities { json } => {
            let m = CapabilityMatrix::current();
            if json {
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                print!("{m}");
            }
            Ok(0)
        }
    }
}

fn load(path: &Path) -> Result<flowforge::LoadedWorkflow> {
    load_workflow(path).map_err(|e| match e {
        LoadError::Io { .. } => anyhow!(e),
        other => invalid(other),
    })
}

fn validate(path: &Path) -> Result<u8> {
    let wf = load(path)?;
    println!("{}: ok ({} processes, {} params)", path.display(), wf.flat.processes.len(), wf.flat.params.len());
    Ok(0)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn graph(path: &Path, flat: bool, out: Option<&Path>) -> Result<u8> {
    let wf = load(path)?;
    let text = if flat { workflow_dot(&wf.flat) } else { workflow_dot(&wf.def) };
    write_or_print(out, &text)?;
    Ok(0)
}

fn envs(args: &RunArgs) -> Result<EnvRegistry> {
    match &args.env_config {
        Some(p) => EnvRegistry::from_file(p).map_err(invalid),
        None => Ok(EnvRegistry::builtin()),
    }
}

fn run(place: &Place, args: RunArgs) -> Result<u8> {
    let wf = load(&args.workflow)?;
    let params = wf.parse_params(&args.params).map_err(invalid)?;
    let g = wf.graph(&params, &envs(&args)?).map_err(invalid)?;
    let ws = place.workspace();
    let policy: Policy = args.policy.into();
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }

    if args.dry_run {
        let cache = CacheStore::at(ws.cache_dir());
        let plan = plan_preview(&g, policy, &cache, &ws).map_err(invalid)?;
        if args.json {
            println!("{}", serde_json::to_string_pretty(&plan)?);
        } else {
            for id in g.topo_order() {
                println!("{:<16} {id}", plan[&id].label());
            }
        }
        return Ok(0);
    }

    let exec_config = match &args.exec_config {
        Some(p) => ExecutorConfig::from_file(p).map_err(invalid)?,
        None => ExecutorConfig::default(),
    };
    let run_id = args.run_id.clone().unwrap_or_else(Workspace::new_run_id);

    if args.detach {
        return detach(&ws, &run_id);
    }

    ws.ensure().with_context(|| format!("preparing workspace {}", ws.root().display()))?;
    let run_dir = ws.run_dir(&run_id);
    fs::create_dir_all(&run_dir)?;
    let transfer_log = run_dir.join("transfers.ndjson");
    let executor = exec_config
        .build(&args.executor, &ws.state_dir(), jobs, Some(&transfer_log))
        .map_err(invalid)?;
    let mut opts = RunOptions::new(policy, jobs, wf.info.clone());
    opts.keep_going = args.keep_going;
    opts.run_id = Some(run_id);
    let result = scheduler::run(&g, &opts, &ws, executor.as_ref())?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        println!("{}", result.run_id);
        let counts: Vec<String> = result.counts().iter().map(|(s, n)| format!("{n} {}", s.as_str())).collect();
        eprintln!(
            "run {} {} in {:.2}s: {}",
            result.run_id,
            if result.exit_status() == 0 { "succeeded" } else { "failed" },
            result.wall_time.as_secs_f64(),
            counts.join(", ")
        );
        for (id, t) in &result.tasks {
            if matches!(t.state, TaskState::Failed) {
                let why = t.error.clone().unwrap_or_else(|| format!("exit code {}", t.exit_code.unwrap_or(-1)));
                eprintln!("  {id}: failed ({why}); see `flowforge logs {} {id} --stderr`", result.run_id);
            }
        }
    }
    Ok(result.exit_status() as u8)
}

/// Re-executes this command without `--detach`, pinned to `run_id`.
fn detach(ws: &Workspace, run_id: &str) -> Result<u8> {
    let run_dir = ws.run_dir(run_id);
    fs::create_dir_all(&run_dir)?;
    let mut argv: Vec<String> = std::env::args().skip(1).filter(|a| a != "--detach").collect();
    argv.push("--run-id".into());
    argv.push(run_id.into());
    let log = fs::File::create(run_dir.join("engine.log"))?;
    let child = Command::new(std::env::current_exe()?)
        .args(&argv)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(log)
        .spawn()
        .context("starting background run")?;
    fs::write(run_dir.join(PID_FILE), format!("{}\n", child.id()))?;
    println!("{run_id}");
    Ok(0)
}

fn find_run(ws: &Workspace, query: &str) -> Result<String> {
    ws.find_run(query).ok_or_else(|| anyhow!("no run matching `{query}` in {}", ws.root().display()))
}

fn status(ws: &Workspace, run: Option<&str>, json: bool) -> Result<u8> {
    let id = find_run(ws, run.unwrap_or("latest"))?;
    let s = runstate::status(&ws.run_dir(&id))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(0);
    }
    let state = match (s.state, s.interrupted) {
        (Some(st), _) => format!("{st:?}").to_lowercase(),
        (None, true) => "interrupted".into(),
        (None, false) => "running".into(),
    };
    println!("run       {}", s.run_id);
    println!("workflow  {}", s.workflow);
    println!("state     {state}");
    println!("tasks     {} total, {} done, {} running, {} pending", s.total, s.done, s.running.len(), s.pending);
    if !s.running.is_empty() {
        println!("running   {}", s.running.join(", "));
    }
    for (st, n) in &s.counts {
        println!("  {:<20}{n}", st.as_str());
    }
    println!("elapsed   {:.1}s", s.elapsed_secs);
    Ok(0)
}

fn logs(ws: &Workspace, run: &str, task: &str, stderr: bool) -> Result<u8> {
    let id = find_run(ws, run)?;
    let ext = if stderr { "stderr" } else { "stdout" };
    let path = ws.run_dir(&id).join("logs").join(format!("{task}.{ext}"));
    let bytes = fs::read(&path).with_context(|| format!("no {ext} log for `{task}` in run {id}"))?;
    std::io::stdout().write_all(&bytes)?;
    Ok(0)
}

fn export(ws: &Workspace, run: &str, format: Format, out: Option<&Path>) -> Result<u8> {
    let id = find_run(ws, run)?;
    let doc = ProvStore::new(ws.clone()).load(&id)?;
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&doc)? + "\n",
        Format::Dot => provenance_dot(&doc),
    };
    write_or_print(out, &text)?;
    Ok(0)
}

fn lineage(ws: &Workspace, digest: &str, json: bool) -> Result<u8> {
    let d: Digest = digest.parse().map_err(|e| invalid(format!("`{digest}` is not a digest: {e}")))?;
    let l = ProvStore::new(ws.clone()).lineage(&d)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&l)?);
    } else if l.is_empty() {
        eprintln!("no recorded producer of {digest}");
    } else {
        for t in &l.tasks {
            match &t.cached_from {
                Some(from) => println!("{}\t{}\tlinked from {from}", t.task, t.run),
                None => println!("{}\t{}", t.task, t.run),
            }
        }
    }
    Ok(0)
}

fn cache_ls(ws: &Workspace, json: bool) -> Result<u8> {
    let cache = CacheStore::at(ws.cache_dir());
    let entries = if cache.root().is_dir() { cache.entries()? } else { Vec::new() };
    if json {
        println!("{}", serde_json::to_string_pretty(&entries)?);
    } else {
        for e in &entries {
            println!("{}  {}  {} file(s), {} value(s)", e.fingerprint, e.run_id, e.file_outputs.len(), e.value_outputs.len());
        }
    }
    Ok(0)
}

fn cache_gc(ws: &Workspace, keep: Vec<String>, keep_last: Option<usize>) -> Result<u8> {
    let runs = ws.run_ids();
    let kept: BTreeSet<String> = if !keep.is_empty() {
        keep.iter().map(|k| find_run(ws, k)).collect::<Result<_>>()?
    } else if let Some(n) = keep_last {
        runs.iter().rev().take(n).cloned().collect()
    } else {
        runs.iter().cloned().collect()
    };
    let store = ProvStore::new(ws.clone());
    let mut fingerprints = BTreeSet::new();
    for id in &kept {
        match store.load(id) {
            Ok(doc) => fingerprints.extend(doc.tasks.iter().map(|r| r.fingerprint)),
            Err(e) => log::warn!("run {id}: {e}"),
        }
    }
    for id in ws.stamped_tasks() {
        if let Some(s) = ws.read_stamp(&id) {
            if kept.contains(&s.run_id) {
                fingerprints.insert(s.fingerprint);
            }
        }
    }
    let cache = CacheStore::at(ws.cache_dir());
    if !cache.root().is_dir() {
        bail!("no cache at {}", cache.root().display());
    }
    let report = cache.gc_with_roots(&kept, &fingerprints)?;
    println!(
        "removed {} entries, {} blobs, {} trees",
        report.removed_entries.len(),
        report.removed_blobs.len(),
        report.removed_trees.len()
    );
    Ok(0)
}
