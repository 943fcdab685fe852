//! flowforge: a workflow engine for typed file-and-value task graphs.
//!
//! A workflow file is parsed into a [`model::WorkflowDef`], flattened and
//! validated, turned into a [`planner::TaskGraph`] and run by
//! [`scheduler::run`] on one of the [`exec`] backends. Results are kept in a
//! content-addressed [`cache`], every run is journaled in [`runstate`] and
//! described by a [`provenance`] document.

pub mod cache;
pub mod canonical;
pub mod capabilities;
pub mod digest;
pub mod envprov;
pub mod exec;
pub mod fixtures;
pub mod loader;
pub mod model;
pub mod planner;
pub mod provenance;
pub mod runstate;
pub mod scheduler;
pub mod tree;
pub mod value;
pub mod workspace;

pub use cache::CacheStore;
pub use capabilities::CapabilityMatrix;
pub use digest::{Digest, Fingerprint};
pub use envprov::{EnvRegistry, ResolvedEnv};
pub use loader::{load_workflow, LoadError, LoadedWorkflow};
pub use exec::{Executor, LocalExecutor};
pub use model::{parse_workflow, EnvSpec, FlatWorkflow, WorkflowDef};
pub use planner::{build_graph, TaskGraph, TaskInstance};
pub use scheduler::{plan_preview, run, Policy, RunOptions, RunResult, TaskAction};
pub use value::{PortType, Value};
pub use workspace::Workspace;
