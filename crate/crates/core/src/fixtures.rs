//! Workflow files shipped with the engine: the six-step use case (also in a
//! composed form), small scheduling fixtures and a corpus of invalid
//! workflows.

use std::fs;
use std::io;
use std::path::Path;

/// `(relative path, contents)` of every shipped fixture file.
pub const FILES: &[(&str, &str)] = &[
    ("bin/envwrap", include_str!("../../../workflows/bin/envwrap")),
    ("geometry.geo", include_str!("../../../workflows/geometry.geo")),
    ("meshing.wf", include_str!("../../../workflows/meshing.wf")),
    ("negative/corrupt.msh", include_str!("../../../workflows/negative/corrupt.msh")),
    ("negative/corrupt_mesh.wf", include_str!("../../../workflows/negative/corrupt_mesh.wf")),
    ("negative/cycle.wf", include_str!("../../../workflows/negative/cycle.wf")),
    ("negative/dangling.wf", include_str!("../../../workflows/negative/dangling.wf")),
    ("negative/dup_id.wf", include_str!("../../../workflows/negative/dup_id.wf")),
    ("negative/float_to_int.wf", include_str!("../../../workflows/negative/float_to_int.wf")),
    ("negative/format_mismatch.wf", include_str!("../../../workflows/negative/format_mismatch.wf")),
    ("negative/self_include.wf", include_str!("../../../workflows/negative/self_include.wf")),
    ("parallel.wf", include_str!("../../../workflows/parallel.wf")),
    ("scripts/convert.sh", include_str!("../../../workflows/scripts/convert.sh")),
    ("scripts/macros.sh", include_str!("../../../workflows/scripts/macros.sh")),
    ("scripts/mesh.sh", include_str!("../../../workflows/scripts/mesh.sh")),
    ("scripts/paper.sh", include_str!("../../../workflows/scripts/paper.sh")),
    ("scripts/postproc.sh", include_str!("../../../workflows/scripts/postproc.sh")),
    ("scripts/simulate.sh", include_str!("../../../workflows/scripts/simulate.sh")),
    ("twochain.wf", include_str!("../../../workflows/twochain.wf")),
    ("usecase.wf", include_str!("../../../workflows/usecase.wf")),
    ("usecase_composed.wf", include_str!("../../../workflows/usecase_composed.wf")),
];

pub fn get(path: &str) -> Option<&'static str> {
    FILES.iter().find(|(p, _)| *p == path).map(|(_, c)| *c)
}

/// Writes all fixtures below `dir`; `bin/` entries are made executable.
pub fn install(dir: &Path) -> io::Result<()> {
    for (rel, text) in FILES {
        let dest = dir.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&dest, text)?;
        #[cfg(unix)]
        if rel.starts_with("bin/") {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&dest, fs::Permissions::from_mode(0o755))?;
        }
    }
    Ok(())
}
