//! Acquisition manifest: which files make up one recorded or simulated
//! sequence. Relative paths are resolved against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{format_shortest, path_label, read_text, KeyValues};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub poses: PathBuf,
    pub observations: PathBuf,
    /// Directory of `frame_NNNNN.pgm` images, if frames were written.
    pub frames: Option<PathBuf>,
    pub depth_mm: f64,
    /// Free text on a single line.
    pub notes: String,
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    if m.notes.contains('\n') {
        return Err(Error::InvalidParameter(
            "manifest notes must be a single line".into(),
        ));
    }
    let mut s = String::new();
    let _ = writeln!(s, "format_version = {MANIFEST_FORMAT_VERSION}");
    let _ = writeln!(s, "poses = {}", m.poses.display());
    let _ = writeln!(s, "observations = {}", m.observations.display());
    if let Some(f) = &m.frames {
        let _ = writeln!(s, "frames = {}", f.display());
    }
    let _ = writeln!(s, "depth_mm = {}", format_shortest(m.depth_mm));
    let _ = writeln!(s, "notes = {}", m.notes);
    Ok(std::fs::write(path, s)?)
}

/// Paths in the result are as written in the file. Every referenced file
/// must exist, or `MissingFile` is returned.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut kv = KeyValues::parse(&read_text(path)?, &path_label(path))?;
    kv.expect_version(MANIFEST_FORMAT_VERSION)?;
    let poses = PathBuf::from(kv.take("poses")?.1);
    let observations = PathBuf::from(kv.take("observations")?.1);
    let frames = kv.take_opt("frames").map(|(_, v)| PathBuf::from(v));
    let depth_mm = kv.take_f64("depth_mm")?;
    let notes = kv.take_opt("notes").map(|(_, v)| v).unwrap_or_default();
    kv.finish()?;
    let m = Manifest {
        poses,
        observations,
        frames,
        depth_mm,
        notes,
    };
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [Some(&m.poses), Some(&m.observations), m.frames.as_ref()]
        .into_iter()
        .flatten()
    {
        let full = base.join(p);
        if !full.exists() {
            return Err(Error::MissingFile(full));
        }
    }
    Ok(m)
}
