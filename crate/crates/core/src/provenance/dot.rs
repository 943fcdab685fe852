//! GraphViz export. Processes are boxes; every connection is an edge
//! labelled with the consuming port, solid for files and dashed for values.

use std::collections::BTreeSet;
use std::fmt::Write;

use super::{ProvAction, ProvenanceDoc};
use crate::model::{Reference, WorkflowDef};

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn header(name: &str) -> String {
    format!("digraph {} {{\n  rankdir=LR;\n  node [shape=box];\n", quote(name))
}

fn edge(out: &mut String, from: &str, to: &str, label: &str, dashed: bool) {
    let style = if dashed { ", style=dashed" } else { "" };
    let _ = writeln!(out, "  {} -> {} [label={}{style}];", quote(from), quote(to), quote(label));
}

/// DOT for a workflow definition. Subworkflow processes appear as single
/// nodes; flatten first to see their contents.
pub fn workflow_dot(def: &WorkflowDef) -> String {
    let mut out = header(&def.name);
    for p in &def.processes {
        let _ = writeln!(out, "  {};", quote(&p.id));
    }
    for p in &def.processes {
        for (port, input) in &p.inputs {
            if let Reference::Output { process, .. } = &input.from {
                edge(&mut out, process, &p.id, port, !input.ty.is_artifact());
            }
        }
    }
    out.push_str("}\n");
    out
}

/// DOT for one run: executed, linked and skipped tasks, with linked tasks
/// annotated `cached` and skipped ones `up-to-date`.
pub fn provenance_dot(doc: &ProvenanceDoc) -> String {
    let mut out = header(&doc.run_id);
    let mut nodes = BTreeSet::new();
    for r in &doc.tasks {
        nodes.insert(r.task.clone());
        let (note, extra) = match (r.action, r.state.is_success()) {
            (ProvAction::LinkCached, _) => ("cached", ", style=dashed"),
            (_, false) => ("failed", ", color=red"),
            _ => ("executed", ""),
        };
        let label = format!("{}\n{note}", r.task);
        let _ = writeln!(out, "  {} [label={}{extra}];", quote(&r.task), quote(&label));
    }
    for s in &doc.skipped {
        nodes.insert(s.task.clone());
        let label = format!("{}\nup-to-date", s.task);
        let _ = writeln!(out, "  {} [label={}, style=dotted];", quote(&s.task), quote(&label));
    }
    for r in &doc.tasks {
        for (port, up) in &r.upstream {
            if !nodes.contains(&up.task) {
                let _ = writeln!(out, "  {} [style=dotted];", quote(&up.task));
                nodes.insert(up.task.clone());
            }
            let dashed = !r.input_files.contains_key(port);
            edge(&mut out, &up.task, &r.task, port, dashed);
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_workflow;

    #[test]
    fn empty_workflow() {
        let def = parse_workflow(r#"{"name":"e"}"#).unwrap();
        assert_eq!(workflow_dot(&def), "digraph \"e\" {\n  rankdir=LR;\n  node [shape=box];\n}\n");
    }

    #[test]
    fn dashed_value_edges() {
        let def = parse_workflow(
            r#"{"name":"w","processes":[
                {"id":"simulate","command":["x"],"outputs":{"num_dofs":{"type":"integer"},"r":{"type":"file","path":"r"}}},
                {"id":"macros","command":["x"],"inputs":{"num_dofs":{"type":"integer","from":"simulate.num_dofs"},"r":{"type":"file","from":"simulate.r"}}}]}"#,
        )
        .unwrap();
        let text = workflow_dot(&def);
        assert!(text.contains("\"simulate\" -> \"macros\" [label=\"num_dofs\", style=dashed];"));
        assert!(text.contains("\"simulate\" -> \"macros\" [label=\"r\"];"));
    }

    #[test]
    fn quoting() {
        assert_eq!(quote("a\"b\\c"), "\"a\\\"b\\\\c\"");
    }
}
