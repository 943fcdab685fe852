//! Recorded fingerprints of fixture tasks. The table was produced by
//! `tools/fingerprint_oracle.py`, which implements the documented encoding
//! independently of the engine; regenerate it with that script whenever a
//! fixture file changes.

use std::collections::BTreeMap;

use flowforge::planner::task_fingerprint;
use flowforge::{fixtures, load_workflow, EnvRegistry};

const TABLE: &str = include_str!("data/fingerprints.tsv");

#[test]
fn recorded_fingerprints_match() {
    let dir = tempfile::tempdir().unwrap();
    fixtures::install(dir.path()).unwrap();
    let mut checked = 0;
    for line in TABLE.lines().filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let (wf, task, params, expected) = (cols[0], cols[1], cols[2], cols[3]);
        let loaded = load_workflow(&dir.path().join(wf)).unwrap();
        let pairs: Vec<&str> = params.split_whitespace().collect();
        let values = loaded.parse_params(&pairs).unwrap();
        let g = loaded.graph(&values, &EnvRegistry::builtin()).unwrap();
        let t = g.tasks[task].resolve(&BTreeMap::new()).unwrap();
        assert_eq!(task_fingerprint(&t).unwrap().to_string(), expected, "{wf} {task} {params}");
        checked += 1;
    }
    assert_eq!(checked, 20);
}
