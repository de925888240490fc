//! Teacher-student process supervision on multi-step arithmetic.
//!
//! A softmax student reduces expressions one redex at a time, a rule-based
//! teacher turns failed traces into viewpoints (additive logit biases with a
//! readable principle), viewpoints are scored by their effect on a probe set,
//! and guided behaviour is periodically distilled back into the student.

pub mod distill;
pub mod expr;
pub mod meta;
pub mod rng;
pub mod run;
pub mod student;
pub mod teacher;
pub mod trace;
pub mod viewpoint;

use std::io::{self, Write};
use std::path::Path;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
