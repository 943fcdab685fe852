//! Python module `flowforge`: load and check workflows, run them in a
//! workspace, and query run status and provenance. Structured results are
//! returned as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use engine::cache::CacheStore;
use engine::exec::ExecutorConfig;
use engine::provenance::{provenance_dot, workflow_dot, ProvStore};
use engine::scheduler::{self, Policy, RunOptions};
use engine::value::Value;
use engine::{CapabilityMatrix, Digest, EnvRegistry, LoadedWorkflow};

pyo3::create_exception!(flowforge, FlowforgeError, PyRuntimeError);

fn err(e: impl std::fmt::Display) -> PyErr {
    FlowforgeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn policy(name: &str) -> PyResult<Policy> {
    name.parse().map_err(|e: String| PyValueError::new_err(e))
}

/// A parsed, validated and flattened workflow file.
#[pyclass(module = "flowforge", frozen)]
struct Workflow {
    inner: LoadedWorkflow,
}

#[pymethods]
impl Workflow {
    #[getter]
    fn name(&self) -> String {
        self.inner.def.name.clone()
    }

    /// Process ids after sub-workflows are inlined, in file order.
    #[getter]
    fn processes(&self) -> Vec<String> {
        self.inner.flat.processes.iter().map(|p| p.id.clone()).collect()
    }

    /// Param name to declared type.
    #[getter]
    fn params(&self) -> BTreeMap<String, String> {
        self.inner.flat.params.iter().map(|(k, p)| (k.clone(), p.ty.to_string())).collect()
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.info.digest.to_hex()
    }

    #[pyo3(signature = (flat = false))]
    fn dot(&self, flat: bool) -> String {
        if flat {
            workflow_dot(&self.inner.flat)
        } else {
            workflow_dot(&self.inner.def)
        }
    }

    /// Builds the task graph. Values may be Python scalars or, as on the
    /// command line, text.
    #[pyo3(signature = (params = None, env_config = None))]
    fn graph(&self, params: Option<&Bound<'_, PyDict>>, env_config: Option<PathBuf>) -> PyResult<TaskGraph> {
        let mut values = BTreeMap::new();
        if let Some(d) = params {
            let json = d.py().import("json")?;
            for (k, v) in d.iter() {
                let name: String = k.extract()?;
                let decl = self
                    .inner
                    .flat
                    .params
                    .get(&name)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown param `{name}`")))?;
                let value = match v.extract::<String>() {
                    Ok(text) => Value::parse_text(&text, &decl.ty),
                    Err(_) => {
                        let text: String = json.call_method1("dumps", (v,))?.extract()?;
                        let j: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
                        Value::from_json(&j, &decl.ty)
                    }
                }
                .map_err(|e| PyValueError::new_err(format!("param `{name}`: {e}")))?;
                values.insert(name, value);
            }
        }
        let envs = match env_config {
            Some(p) => EnvRegistry::from_file(&p).map_err(err)?,
            None => EnvRegistry::builtin(),
        };
        let g = self.inner.graph(&values, &envs).map_err(err)?;
        Ok(TaskGraph { inner: g, workflow: self.inner.info.clone() })
    }

    fn __repr__(&self) -> String {
        format!("<Workflow {} ({} processes)>", self.inner.def.name, self.inner.flat.processes.len())
    }
}

/// Executable tasks of a workflow with bound params.
#[pyclass(module = "flowforge", frozen)]
struct TaskGraph {
    inner: engine::TaskGraph,
    workflow: engine::runstate::WorkflowInfo,
}

#[pymethods]
impl TaskGraph {
    #[getter]
    fn tasks(&self) -> Vec<String> {
        self.inner.tasks.keys().cloned().collect()
    }

    #[getter]
    fn edges(&self) -> Vec<(String, String)> {
        self.inner.edges.iter().cloned().collect()
    }

    fn topo_order(&self) -> Vec<String> {
        self.inner.topo_order()
    }

    fn ready(&self, completed: Vec<String>) -> Vec<String> {
        engine::planner::ready_set(&self.inner, &completed.into_iter().collect()).into_iter().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.tasks.len()
    }
}

/// A directory holding task outputs and engine state.
#[pyclass(module = "flowforge", frozen)]
struct Workspace {
    inner: engine::Workspace,
}

#[pymethods]
impl Workspace {
    #[new]
    #[pyo3(signature = (path, cache = None))]
    fn new(path: PathBuf, cache: Option<PathBuf>) -> Self {
        let ws = engine::Workspace::open(path);
        Workspace { inner: match cache { Some(c) => ws.with_cache_dir(c), None => ws } }
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    /// Runs the graph and returns the run result as a dict.
    #[pyo3(signature = (graph, policy = "update", jobs = 1, executor = "local", keep_going = false, exec_config = None))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        graph: &TaskGraph,
        policy: &str,
        jobs: usize,
        executor: &str,
        keep_going: bool,
        exec_config: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let policy = self::policy(policy)?;
        let config = match exec_config {
            Some(p) => ExecutorConfig::from_file(&p).map_err(err)?,
            None => ExecutorConfig::default(),
        };
        let ws = &self.inner;
        let result = py
            .detach(|| -> Result<scheduler::RunResult, String> {
                ws.ensure().map_err(|e| e.to_string())?;
                let run_id = engine::Workspace::new_run_id();
                let run_dir = ws.run_dir(&run_id);
                std::fs::create_dir_all(&run_dir).map_err(|e| e.to_string())?;
                let exec = config
                    .build(executor, &ws.state_dir(), jobs.max(1), Some(&run_dir.join("transfers.ndjson")))
                    .map_err(|e| e.to_string())?;
                let mut opts = RunOptions::new(policy, jobs, graph.workflow.clone());
                opts.keep_going = keep_going;
                opts.run_id = Some(run_id);
                scheduler::run(&graph.inner, &opts, ws, exec.as_ref()).map_err(|e| e.to_string())
            })
            .map_err(err)?;
        to_py(py, &result)
    }

    /// Task id to the action a run would take; changes nothing.
    #[pyo3(signature = (graph, policy = "update"))]
    fn plan(&self, graph: &TaskGraph, policy: &str) -> PyResult<BTreeMap<String, String>> {
        let cache = CacheStore::at(self.inner.cache_dir());
        let plan = scheduler::plan_preview(&graph.inner, self::policy(policy)?, &cache, &self.inner).map_err(err)?;
        Ok(plan.into_iter().map(|(k, a)| (k, a.label().to_string())).collect())
    }

    fn runs(&self) -> Vec<String> {
        self.inner.run_ids()
    }

    #[pyo3(signature = (run = "latest"))]
    fn status<'py>(&self, py: Python<'py>, run: &str) -> PyResult<Bound<'py, PyAny>> {
        let id = self.find(run)?;
        to_py(py, &engine::runstate::status(&self.inner.run_dir(&id)).map_err(err)?)
    }

    #[pyo3(signature = (run = "latest"))]
    fn provenance<'py>(&self, py: Python<'py>, run: &str) -> PyResult<Bound<'py, PyAny>> {
        let id = self.find(run)?;
        to_py(py, &ProvStore::new(self.inner.clone()).load(&id).map_err(err)?)
    }

    #[pyo3(signature = (run = "latest"))]
    fn provenance_dot(&self, run: &str) -> PyResult<String> {
        let id = self.find(run)?;
        Ok(provenance_dot(&ProvStore::new(self.inner.clone()).load(&id).map_err(err)?))
    }

    fn lineage<'py>(&self, py: Python<'py>, digest: &str) -> PyResult<Bound<'py, PyAny>> {
        let d: Digest = digest.parse().map_err(|e| PyValueError::new_err(format!("{e}")))?;
        to_py(py, &ProvStore::new(self.inner.clone()).lineage(&d).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("<Workspace {}>", self.inner.root().display())
    }
}

impl Workspace {
    fn find(&self, run: &str) -> PyResult<String> {
        self.inner.find_run(run).ok_or_else(|| err(format!("no run matching `{run}`")))
    }
}

#[pyfunction]
fn load_workflow(path: PathBuf) -> PyResult<Workflow> {
    engine::load_workflow(&path).map(|inner| Workflow { inner }).map_err(err)
}

/// Lowercase hex SHA-256 of `data`.
#[pyfunction]
fn digest_bytes(data: &[u8]) -> String {
    Digest::of_bytes(data).to_hex()
}

#[pyfunction]
fn capabilities<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &CapabilityMatrix::current())
}

#[pymodule]
fn flowforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowforgeError", m.py().get_type::<FlowforgeError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Workflow>()?;
    m.add_class::<TaskGraph>()?;
    m.add_class::<Workspace>()?;
    m.add_function(wrap_pyfunction!(load_workflow, m)?)?;
    m.add_function(wrap_pyfunction!(digest_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(capabilities, m)?)?;
    Ok(())
}
