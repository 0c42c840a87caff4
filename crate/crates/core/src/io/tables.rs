//! CSV tables. Each file starts with an exact header line; rows must have
//! exactly the header's column count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{
    format_shortest, format_sig9, parse_error, parse_finite, parse_uint, path_label, read_text,
};
use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::phantom::PhantomModel;
use crate::sim::LandmarkObservation;

pub const PHANTOM_HEADER: &str = "id,x_mm,y_mm,z_mm";
pub const POSES_HEADER: &str = "frame,r00,r01,r02,tx_mm,r10,r11,r12,ty_mm,r20,r21,r22,tz_mm";
pub const OBSERVATIONS_HEADER: &str = "frame,landmark_id,u_px,v_px";

/// Largest Frobenius change accepted when snapping a pose rotation onto SO(3).
const MAX_ORTHO_CORRECTION: f64 = 1e-3;
/// Rotations already this close to orthonormal are kept bit-for-bit.
const KEEP_AS_IS_TOL: f64 = 1e-12;

/// Data rows with their 1-based line numbers, after checking the header.
fn rows(text: &str, path: &str, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let columns = header.split(',').count();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut saw_header = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<String> = record.iter().map(str::to_string).collect();
        if !saw_header {
            if fields.join(",") != header {
                return Err(parse_error(
                    path,
                    line,
                    format!("expected header {header:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        if fields.len() != columns {
            return Err(parse_error(
                path,
                line,
                format!("expected {columns} columns, got {}", fields.len()),
            ));
        }
        out.push((line, fields));
    }
    if !saw_header {
        return Err(parse_error(path, 1, "empty file (missing header)"));
    }
    Ok(out)
}

pub fn phantom_to_csv(phantom: &PhantomModel) -> String {
    let mut s = format!("{PHANTOM_HEADER}\n");
    for (id, p) in phantom.landmarks().iter().enumerate() {
        let _ = writeln!(
            s,
            "{id},{},{},{}",
            format_sig9(p.x),
            format_sig9(p.y),
            format_sig9(p.z)
        );
    }
    s
}

/// Ids must be unique and cover `0..n`; rows may come in any order.
pub fn phantom_from_csv(text: &str, path: &str) -> Result<PhantomModel> {
    let mut by_id = BTreeMap::new();
    for (line, f) in rows(text, path, PHANTOM_HEADER)? {
        let id: u32 = parse_uint(path, line, "id", &f[0])?;
        let p = Point3::new(
            parse_finite(path, line, "x_mm", &f[1])?,
            parse_finite(path, line, "y_mm", &f[2])?,
            parse_finite(path, line, "z_mm", &f[3])?,
        );
        if by_id.insert(id, (line, p)).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_string(),
                line,
                id,
            });
        }
    }
    if by_id.is_empty() {
        return Err(parse_error(path, 2, "phantom has no landmarks"));
    }
    for (expected, (&id, &(line, _))) in by_id.iter().enumerate() {
        if id as usize != expected {
            return Err(parse_error(
                path,
                line,
                format!("landmark ids must be 0..n without gaps; missing {expected}"),
            ));
        }
    }
    PhantomModel::from_landmarks(by_id.into_values().map(|(_, p)| p).collect())
}

pub fn poses_to_csv(poses: &BTreeMap<u32, RigidTransform>) -> String {
    let mut s = format!("{POSES_HEADER}\n");
    for (frame, pose) in poses {
        let (r, t) = (pose.rotation(), pose.translation());
        let _ = write!(s, "{frame}");
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(s, ",{}", format_shortest(r[(i, j)]));
            }
            let _ = write!(s, ",{}", format_shortest(t[i]));
        }
        s.push('\n');
    }
    s
}

pub fn poses_from_csv(text: &str, path: &str) -> Result<BTreeMap<u32, RigidTransform>> {
    let mut poses = BTreeMap::new();
    for (line, f) in rows(text, path, POSES_HEADER)? {
        let frame: u32 = parse_uint(path, line, "frame", &f[0])?;
        let mut values = [0.0; 12];
        for (k, v) in values.iter_mut().enumerate() {
            *v = parse_finite(
                path,
                line,
                POSES_HEADER.split(',').nth(k + 1).unwrap(),
                &f[k + 1],
            )?;
        }
        let m = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let t = Vector3::new(values[3], values[7], values[11]);
        let r = nearest_rotation(&m).map_err(|reason| Error::NonRigidPose {
            path: path.to_string(),
            line,
            frame,
            reason,
        })?;
        if poses
            .insert(frame, RigidTransform::new_unchecked(r, t))
            .is_some()
        {
            return Err(parse_error(path, line, format!("duplicate frame {frame}")));
        }
    }
    Ok(poses)
}

/// Closest proper rotation in the Frobenius sense.
fn nearest_rotation(m: &Matrix3<f64>) -> std::result::Result<Matrix3<f64>, String> {
    let det = m.determinant();
    if det <= 0.0 {
        return Err(format!("determinant {det} is not positive"));
    }
    if crate::geometry::orthonormality_error(m) <= KEEP_AS_IS_TOL {
        return Ok(*m);
    }
    let svd = m.svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    let correction = (r - m).norm();
    if correction > MAX_ORTHO_CORRECTION {
        return Err(format!(
            "orthonormal correction {correction:.3e} exceeds {MAX_ORTHO_CORRECTION:e}"
        ));
    }
    Ok(r)
}

pub fn observations_to_csv(observations: &[LandmarkObservation]) -> String {
    let mut s = format!("{OBSERVATIONS_HEADER}\n");
    for o in observations {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            o.frame,
            o.landmark_id,
            format_sig9(o.u),
            format_sig9(o.v)
        );
    }
    s
}

/// Keeps file order. A repeated `(frame, landmark_id)` pair is an error.
pub fn observations_from_csv(text: &str, path: &str) -> Result<Vec<LandmarkObservation>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, f) in rows(text, path, OBSERVATIONS_HEADER)? {
        let o = LandmarkObservation {
            frame: parse_uint(path, line, "frame", &f[0])?,
            landmark_id: parse_uint(path, line, "landmark_id", &f[1])?,
            u: parse_finite(path, line, "u_px", &f[2])?,
            v: parse_finite(path, line, "v_px", &f[3])?,
        };
        if !seen.insert((o.frame, o.landmark_id)) {
            return Err(parse_error(
                path,
                line,
                format!(
                    "landmark {} observed twice in frame {}",
                    o.landmark_id, o.frame
                ),
            ));
        }
        out.push(o);
    }
    Ok(out)
}

pub fn save_phantom(path: &Path, phantom: &PhantomModel) -> Result<()> {
    Ok(std::fs::write(path, phantom_to_csv(phantom))?)
}

pub fn load_phantom(path: &Path) -> Result<PhantomModel> {
    phantom_from_csv(&read_text(path)?, &path_label(path))
}

pub fn save_poses(path: &Path, poses: &BTreeMap<u32, RigidTransform>) -> Result<()> {
    Ok(std::fs::write(path, poses_to_csv(poses))?)
}

pub fn load_poses(path: &Path) -> Result<BTreeMap<u32, RigidTransform>> {
    poses_from_csv(&read_text(path)?, &path_label(path))
}

pub fn save_observations(path: &Path, observations: &[LandmarkObservation]) -> Result<()> {
    Ok(std::fs::write(path, observations_to_csv(observations))?)
}

pub fn load_observations(path: &Path) -> Result<Vec<LandmarkObservation>> {
    observations_from_csv(&read_text(path)?, &path_label(path))
}
