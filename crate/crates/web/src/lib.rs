//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export returns a JSON string; the plain functions behind them are
//! usable (and tested) natively.

use ivuscal_core::sim::{render_frame, sensor_pose, ImageGeometry};
use ivuscal_core::{
    build_phantom, calibration_matrix, default_phantom, landmark_rmse, paste_frames, plan_volume,
    random_calibration, simulate_acquisition, solve, AcquisitionSpec, CalibrationBounds,
    CalibrationParams, CalibrationProblem, Compounding, FrameImage, OptimizerConfig, PhantomSpec,
    RigidTransform,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Error traces longer than this are thinned before they reach the page.
const MAX_TRACE_POINTS: usize = 400;

#[derive(Debug, Serialize)]
pub struct ParamsView {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub tx_mm: f64,
    pub ty_mm: f64,
    pub tz_mm: f64,
    pub scale_mm_per_px: f64,
}

impl From<&CalibrationParams> for ParamsView {
    fn from(p: &CalibrationParams) -> Self {
        Self {
            roll_deg: p.roll.to_degrees(),
            pitch_deg: p.pitch.to_degrees(),
            yaw_deg: p.yaw.to_degrees(),
            tx_mm: p.tx,
            ty_mm: p.ty,
            tz_mm: p.tz,
            scale_mm_per_px: p.scale,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CalibrationRun {
    pub ground_truth: ParamsView,
    pub estimate: ParamsView,
    pub rmse_mm: f64,
    pub final_error_mm2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub poses: usize,
    pub observations: usize,
    /// `(iteration, error)` pairs, thinned.
    pub error_trace: Vec<(usize, f64)>,
}

/// Simulates the default 150-pose sweep for `seed` and calibrates from the
/// identity start.
pub fn run_calibration(
    seed: u32,
    noise_px: f64,
    noise_pose_mm: f64,
) -> Result<CalibrationRun, String> {
    let phantom = default_phantom();
    let gt = random_calibration(&CalibrationBounds::default(), seed as u64)
        .map_err(|e| e.to_string())?;
    let spec = AcquisitionSpec {
        pixel_noise_sigma: noise_px,
        pose_translation_noise_sigma: noise_pose_mm,
        seed: seed as u64,
        ..AcquisitionSpec::default()
    };
    let seq = simulate_acquisition(&phantom, &gt, &spec).map_err(|e| e.to_string())?;
    let problem = CalibrationProblem::new(phantom, seq.observations.clone(), seq.poses.clone())
        .map_err(|e| e.to_string())?;
    let config = OptimizerConfig {
        epsilon: 1e-8,
        ..OptimizerConfig::default()
    };
    let result =
        solve(&problem, &config, &CalibrationParams::IDENTITY).map_err(|e| e.to_string())?;
    let rmse_mm = landmark_rmse(&problem, &result.params).map_err(|e| e.to_string())?;
    let stride = result.error_trace.len().div_ceil(MAX_TRACE_POINTS).max(1);
    let mut error_trace: Vec<(usize, f64)> = result
        .error_trace
        .iter()
        .copied()
        .enumerate()
        .step_by(stride)
        .collect();
    if let Some(&last) = result.error_trace.last() {
        if error_trace.last().map(|p| p.0) != Some(result.error_trace.len() - 1) {
            error_trace.push((result.error_trace.len() - 1, last));
        }
    }
    Ok(CalibrationRun {
        ground_truth: (&gt).into(),
        estimate: (&result.params).into(),
        rmse_mm,
        final_error_mm2: result.final_error,
        iterations: result.iterations,
        converged: result.converged,
        poses: seq.poses.len(),
        observations: seq.observations.len(),
        error_trace,
    })
}

#[derive(Debug, Serialize)]
pub struct PhantomLayout {
    pub cavity_radius_mm: f64,
    pub cluster_angles_deg: Vec<f64>,
    /// Needle tips `[x, y, z]` in mm, ordered by landmark id.
    pub landmarks: Vec<[f64; 3]>,
}

/// `angles` is a comma-separated list of cluster azimuths in degrees.
pub fn phantom_layout(angles: &str, radius_mm: f64) -> Result<PhantomLayout, String> {
    let cluster_angles_deg = angles
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| format!("not an angle: {a:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = PhantomSpec {
        cluster_angles_deg: cluster_angles_deg.clone(),
        cavity_radius_mm: radius_mm,
        ..PhantomSpec::default()
    };
    let phantom = build_phantom(&spec).map_err(|e| e.to_string())?;
    Ok(PhantomLayout {
        cavity_radius_mm: radius_mm,
        cluster_angles_deg,
        landmarks: phantom
            .landmarks()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct SliceView {
    /// Image columns follow world y, rows follow world z.
    pub width: usize,
    pub height: usize,
    pub spacing_mm: f64,
    /// Maximum intensity along world x, row-major, 0..=255.
    pub pixels: Vec<u8>,
    /// True tips of the 90° cluster as `[column, row]`.
    pub tips_px: Vec<[f64; 2]>,
    pub volume_dims: [usize; 3],
    pub frames: usize,
}

/// Sweeps ±6° around the 90° needle cluster of the default phantom, pastes
/// the rendered frames at `spacing_mm` and returns a maximum-intensity
/// projection of the volume.
pub fn reconstruct_projection(seed: u32, spacing_mm: f64) -> Result<SliceView, String> {
    if !(spacing_mm.is_finite() && spacing_mm >= 0.1) {
        return Err("spacing must be at least 0.1 mm".into());
    }
    let phantom = default_phantom();
    let bounds = CalibrationBounds {
        scale: (0.2, 0.2),
        ..CalibrationBounds::default()
    };
    let gt = random_calibration(&bounds, seed as u64).map_err(|e| e.to_string())?;
    let image = ImageGeometry {
        width: 200,
        height: 300,
        depth_mm: 60.0,
        ..ImageGeometry::default()
    };
    let world = RigidTransform::identity();
    let count = 48;
    let frames: Vec<FrameImage> = (0..=count)
        .map(|k| {
            let angle = (84.0 + 12.0 * k as f64 / count as f64).to_radians();
            let pose = sensor_pose(&world, angle, &gt, image.width);
            FrameImage {
                image: render_frame(&phantom, &world, &gt, &pose, &image),
                pose,
            }
        })
        .collect();
    let calib = calibration_matrix(&gt);
    let plan = plan_volume(&frames, &calib, spacing_mm, 2.0).map_err(|e| e.to_string())?;
    let volume = paste_frames(&frames, &calib, &plan, Compounding::Max).volume;

    let [nx, ny, nz] = volume.dims;
    let mut pixels = vec![0u8; ny * nz];
    for k in 0..nz {
        for j in 0..ny {
            let mut best = 0f32;
            for i in 0..nx {
                best = best.max(volume.data[volume.index(i, j, k)]);
            }
            pixels[k * ny + j] = best.round().clamp(0.0, 255.0) as u8;
        }
    }
    let tips_px = phantom
        .landmarks()
        .iter()
        .filter(|p| (p.y.atan2(p.x).to_degrees() - 90.0).abs() < 1e-6)
        .map(|p| {
            [
                (p.y - volume.origin.y) / volume.spacing,
                (p.z - volume.origin.z) / volume.spacing,
            ]
        })
        .collect();
    Ok(SliceView {
        width: ny,
        height: nz,
        spacing_mm,
        pixels,
        tips_px,
        volume_dims: volume.dims,
        frames: frames.len(),
    })
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate_and_calibrate(
    seed: u32,
    noise_px: f64,
    noise_pose_mm: f64,
) -> Result<String, JsError> {
    to_json(run_calibration(seed, noise_px, noise_pose_mm))
}

#[wasm_bindgen]
pub fn phantom_view(angles: &str, radius_mm: f64) -> Result<String, JsError> {
    to_json(phantom_layout(angles, radius_mm))
}

#[wasm_bindgen]
pub fn reconstruct_slice(seed: u32, spacing_mm: f64) -> Result<String, JsError> {
    to_json(reconstruct_projection(seed, spacing_mm))
}
