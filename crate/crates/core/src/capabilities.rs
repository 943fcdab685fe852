//! Self-assessed support levels for common workflow-tool requirements.

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Level {
    pub requirement: &'static str,
    pub achieved: u8,
    pub max: u8,
    pub note: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CapabilityMatrix {
    pub levels: Vec<Level>,
    pub policies: Vec<&'static str>,
}

impl CapabilityMatrix {
    pub fn current() -> Self {
        let l = |requirement, achieved, max, note| Level { requirement, achieved, max, note };
        CapabilityMatrix {
            levels: vec![
                l("scheduling", 3, 3, "local, batch:<name> and remote:<name> with stage-in/stage-out"),
                l("monitoring", 2, 2, "event journal and `status` at any time"),
                l("visualization", 2, 3, "GraphViz DOT export of workflows and runs"),
                l("provenance", 2, 2, "per-run provenance documents and lineage queries"),
                l("environment", 3, 3, "per-process environments resolved to wrappers"),
                l("composition", 3, 3, "sub-workflows with their own per-process environments"),
                l("interfaces", 3, 3, "typed file and value ports checked before execution"),
                l("editable format", 3, 3, "JSON or YAML workflow files"),
            ],
            policies: vec!["R", "L", "U"],
        }
    }

    pub fn level(&self, requirement: &str) -> Option<&Level> {
        self.levels.iter().find(|l| l.requirement == requirement)
    }

    pub fn within_bounds(&self) -> bool {
        self.levels.iter().all(|l| l.achieved <= l.max)
    }
}

impl fmt::Display for CapabilityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.levels {
            writeln!(f, "{}: {}/{}  ({})", l.requirement, l.achieved, l.max, l.note)?;
        }
        writeln!(f, "up-to-dateness: {}", self.policies.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_levels() {
        let m = CapabilityMatrix::current();
        assert!(m.within_bounds());
        let text = m.to_string();
        assert!(text.contains("up-to-dateness: R,L,U"));
        assert!(text.contains("interfaces: 3/3"));
        assert!(text.contains("visualization: 2/3"));
    }
}
