use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;

use super::{format_shortest, parse_error, path_label, read_text, KeyValues};
use crate::calib::{calibration_matrix, CalibrationParams, CalibrationResult};
use crate::error::Result;
use crate::geometry::{Homogeneous4, EULER_CONVENTION};

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

/// Stored matrix may differ from the one rebuilt from the angles by this much.
const MATRIX_CONSISTENCY_TOL: f64 = 1e-9;

/// What a calibration file holds. The optimizer's error trace is not kept.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredCalibration {
    pub params: CalibrationParams,
    pub matrix: Homogeneous4,
    /// Registered mean squared residual at the solution, mm².
    pub final_error: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Imaging depth the calibration was acquired at, if known.
    pub depth_mm: Option<f64>,
}

impl StoredCalibration {
    pub fn from_result(result: &CalibrationResult, depth_mm: Option<f64>) -> Self {
        Self {
            params: result.params,
            matrix: result.matrix,
            final_error: result.final_error,
            iterations: result.iterations,
            converged: result.converged,
            depth_mm,
        }
    }

    /// A known calibration, e.g. simulator ground truth.
    pub fn from_params(params: CalibrationParams, depth_mm: Option<f64>) -> Self {
        Self {
            params,
            matrix: calibration_matrix(&params),
            final_error: 0.0,
            iterations: 0,
            converged: true,
            depth_mm,
        }
    }
}

pub fn calibration_to_string(c: &StoredCalibration) -> String {
    let p = &c.params;
    let mut s = String::from("# IVUS probe calibration: image (px) to sensor (mm)\n");
    let _ = writeln!(s, "format_version = {CALIBRATION_FORMAT_VERSION}");
    let _ = writeln!(s, "euler_convention = {EULER_CONVENTION}");
    for (key, v) in [
        ("roll_rad", p.roll),
        ("pitch_rad", p.pitch),
        ("yaw_rad", p.yaw),
        ("tx_mm", p.tx),
        ("ty_mm", p.ty),
        ("tz_mm", p.tz),
        ("scale_mm_per_px", p.scale),
    ] {
        let _ = writeln!(s, "{key} = {}", format_shortest(v));
    }
    let m = c.matrix.matrix();
    let entries: Vec<String> = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| format_shortest(m[(i, j)]))
        .collect();
    let _ = writeln!(s, "matrix_row_major = {}", entries.join(" "));
    let _ = writeln!(s, "final_error_mm2 = {}", format_shortest(c.final_error));
    let _ = writeln!(s, "iterations = {}", c.iterations);
    let _ = writeln!(s, "converged = {}", c.converged);
    if let Some(d) = c.depth_mm {
        let _ = writeln!(s, "depth_mm = {}", format_shortest(d));
    }
    s
}

pub fn calibration_from_str(text: &str, path: &str) -> Result<StoredCalibration> {
    let mut kv = KeyValues::parse(text, path)?;
    kv.expect_version(CALIBRATION_FORMAT_VERSION)?;
    let (line, convention) = kv.take("euler_convention")?;
    if convention != EULER_CONVENTION {
        return Err(parse_error(
            path,
            line,
            format!("unsupported Euler convention {convention:?} (expected {EULER_CONVENTION})"),
        ));
    }
    let params = CalibrationParams {
        roll: kv.take_f64("roll_rad")?,
        pitch: kv.take_f64("pitch_rad")?,
        yaw: kv.take_f64("yaw_rad")?,
        tx: kv.take_f64("tx_mm")?,
        ty: kv.take_f64("ty_mm")?,
        tz: kv.take_f64("tz_mm")?,
        scale: kv.take_f64("scale_mm_per_px")?,
    };
    if let Err(e) = params.validate() {
        return Err(parse_error(path, 0, e.to_string()));
    }
    let (mline, entries) = kv.take_f64s("matrix_row_major", 16)?;
    let matrix = Homogeneous4::from_matrix(Matrix4::from_row_slice(&entries))
        .map_err(|e| parse_error(path, mline, e.to_string()))?;
    let rebuilt = calibration_matrix(&params);
    let diff = (rebuilt.matrix() - matrix.matrix()).amax();
    if diff > MATRIX_CONSISTENCY_TOL * rebuilt.matrix().amax().max(1.0) {
        return Err(parse_error(
            path,
            mline,
            format!("matrix disagrees with the stored parameters by {diff:.3e}"),
        ));
    }
    let final_error = kv.take_f64("final_error_mm2")?;
    let iterations = kv.take_uint("iterations")?;
    let (cline, ctext) = kv.take("converged")?;
    let converged = match ctext.as_str() {
        "true" => true,
        "false" => false,
        other => {
            return Err(parse_error(
                path,
                cline,
                format!("converged: expected true or false, got {other:?}"),
            ))
        }
    };
    let depth_mm = match kv.take_opt("depth_mm") {
        Some((line, v)) => Some(super::parse_finite(path, line, "depth_mm", &v)?),
        None => None,
    };
    kv.finish()?;
    Ok(StoredCalibration {
        params,
        matrix,
        final_error,
        iterations,
        converged,
        depth_mm,
    })
}

pub fn save_calibration(path: &Path, c: &StoredCalibration) -> Result<()> {
    Ok(std::fs::write(path, calibration_to_string(c))?)
}

pub fn load_calibration(path: &Path) -> Result<StoredCalibration> {
    calibration_from_str(&read_text(path)?, &path_label(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> StoredCalibration {
        let params = CalibrationParams {
            roll: 0.1,
            pitch: -0.2 / 3.0,
            yaw: 0.3,
            tx: 1.0 / 7.0,
            ty: -2.0,
            tz: 3.5,
            scale: 0.13,
        };
        StoredCalibration {
            final_error: 1.25e-11,
            iterations: 4321,
            converged: true,
            depth_mm: Some(90.0),
            ..StoredCalibration::from_params(params, None)
        }
    }

    #[test]
    fn identity_params_store_identity_matrix() {
        let c = StoredCalibration::from_params(CalibrationParams::IDENTITY, None);
        let loaded = calibration_from_str(&calibration_to_string(&c), "c").unwrap();
        assert_eq!(loaded.matrix, Homogeneous4::identity());
        assert_eq!(loaded, c);
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let text = calibration_to_string(&c);
        assert!(text.contains("euler_convention = ZYX-extrinsic-rzryrx\n"));
        let loaded = calibration_from_str(&text, "c").unwrap();
        assert_eq!(loaded, c);
        assert_eq!(calibration_to_string(&loaded), text);
    }

    #[test]
    fn missing_scale_is_a_parse_error() {
        let text: String = calibration_to_string(&sample())
            .lines()
            .filter(|l| !l.starts_with("scale_mm_per_px"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            calibration_from_str(&text, "c"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn version_and_matrix_are_checked() {
        let text = calibration_to_string(&sample());
        let v2 = text.replace("format_version = 1", "format_version = 2");
        assert!(matches!(
            calibration_from_str(&v2, "c"),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1,
                ..
            })
        ));
        let tampered = text.replace("yaw_rad = 0.3", "yaw_rad = 0.31");
        assert!(matches!(
            calibration_from_str(&tampered, "c"),
            Err(Error::Parse { .. })
        ));
        let extra = format!("{text}color = blue\n");
        assert!(matches!(
            calibration_from_str(&extra, "c"),
            Err(Error::Parse { .. })
        ));
    }
}
