//! Synthetic tracked acquisitions with a known calibration.
//!
//! The probe sits on the cavity axis and rotates about it. At azimuth `φ` the
//! image plane contains the axis: `u` runs along +z (axial), `v` runs
//! radially outward along `(cos φ, sin φ, 0)`, and the transducer is at the
//! top-center pixel `(width / 2, 0)`. The sensor pose for a frame is whatever
//! rigid transform makes `pose · C_gt` reproduce that image placement inside
//! the tracker (world) frame, so the sensor orbits the axis at a fixed radius.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calib::{calibration_matrix, CalibrationParams};
use crate::error::{Error, Result};
use crate::geometry::{compose, rot_z, Homogeneous4, Point3, RigidTransform};
use crate::image::GrayImage;
use crate::phantom::PhantomModel;

/// A needle tip annotated at pixel `(u, v)` in `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub frame: u32,
    pub landmark_id: u32,
    pub u: f64,
    pub v: f64,
}

/// Which visible landmarks become observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnnotationMode {
    /// One observation per landmark, in the frame where it lies closest to
    /// the image plane (earliest frame on ties).
    #[default]
    CentralSlice,
    /// Every (frame, landmark) pair that passes the visibility test.
    AllVisible,
}

/// Image extent and the elevational slab within which a point counts as seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    pub depth_mm: f64,
    pub slab_half_thickness_mm: f64,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            width: 680,
            height: 480,
            depth_mm: 90.0,
            slab_half_thickness_mm: 1.0,
        }
    }
}

impl ImageGeometry {
    /// `(u, v, w)` in pixels, `w` along the image normal; `scale` in mm/px.
    pub fn is_visible(&self, uvw: &Vector3<f64>, scale: f64) -> bool {
        let (u, v, w) = (uvw.x, uvw.y, uvw.z);
        (w * scale).abs() <= self.slab_half_thickness_mm
            && u >= 0.0
            && u <= (self.width - 1) as f64
            && v >= 0.0
            && v <= (self.height - 1) as f64
            && v * scale <= self.depth_mm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub pose_count: usize,
    pub sweep_start_deg: f64,
    /// Probe rotation covered by the non-aligned poses, degrees.
    pub sweep_deg: f64,
    pub image: ImageGeometry,
    pub pixel_noise_sigma: f64,
    pub pose_translation_noise_sigma: f64,
    pub pose_rotation_noise_sigma_deg: f64,
    pub annotation: AnnotationMode,
    /// Tracker frame placement relative to the phantom; drawn from `seed` if `None`.
    pub world_from_phantom: Option<RigidTransform>,
    pub seed: u64,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            pose_count: 150,
            sweep_start_deg: 0.0,
            sweep_deg: 360.0,
            image: ImageGeometry::default(),
            pixel_noise_sigma: 0.0,
            pose_translation_noise_sigma: 0.0,
            pose_rotation_noise_sigma_deg: 0.0,
            annotation: AnnotationMode::CentralSlice,
            world_from_phantom: None,
            seed: 0,
        }
    }
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.pose_count == 0 {
            return bad("pose_count must be >= 1".into());
        }
        let sigmas = [
            self.pixel_noise_sigma,
            self.pose_translation_noise_sigma,
            self.pose_rotation_noise_sigma_deg,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad(format!(
                "noise sigmas must be finite and >= 0, got {sigmas:?}"
            ));
        }
        let img = &self.image;
        if !(img.slab_half_thickness_mm.is_finite() && img.slab_half_thickness_mm > 0.0) {
            return bad("slab half thickness must be > 0".into());
        }
        if img.width < 2 || img.height < 2 || img.depth_mm.is_nan() || img.depth_mm <= 0.0 {
            return bad("image must be at least 2x2 pixels with positive depth".into());
        }
        if !(self.sweep_deg.is_finite() && self.sweep_start_deg.is_finite()) {
            return bad("sweep angles must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSequence {
    /// Sensor-to-world pose per frame.
    pub poses: BTreeMap<u32, RigidTransform>,
    pub observations: Vec<LandmarkObservation>,
    pub ground_truth: Option<CalibrationParams>,
    pub world_from_phantom: RigidTransform,
    /// Probe azimuth of each frame, degrees, in frame order.
    pub pose_angles_deg: Vec<f64>,
}

/// Probe azimuths in radians: one per distinct landmark azimuth (up to
/// `pose_count`), the rest spread evenly over the sweep; sorted ascending.
pub fn pose_angles(phantom: &PhantomModel, spec: &AcquisitionSpec) -> Vec<f64> {
    let mut angles = phantom.azimuths(1e-6);
    angles.truncate(spec.pose_count);
    let n_sweep = spec.pose_count - angles.len();
    let start = spec.sweep_start_deg.to_radians();
    let span = spec.sweep_deg.to_radians();
    angles.extend((0..n_sweep).map(|j| start + span * j as f64 / n_sweep as f64));
    angles.sort_by(f64::total_cmp);
    angles
}

/// Pixel-to-phantom map of the image plane at probe azimuth `angle` (rad).
pub fn image_to_phantom(angle: f64, scale: f64, width: usize) -> Homogeneous4 {
    // Columns: u -> +z, v -> +x, normal -> +y (right-handed), then rotate about z.
    let axes = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0);
    let rz = rot_z(angle);
    let origin = Vector3::new(0.0, 0.0, -scale * width as f64 / 2.0);
    Homogeneous4::from_parts(&(rz * axes * scale), &(rz * origin))
}

/// Sensor pose placing the image plane at `angle` for calibration `gt`.
pub fn sensor_pose(
    world_from_phantom: &RigidTransform,
    angle: f64,
    gt: &CalibrationParams,
    width: usize,
) -> RigidTransform {
    // pose = W · M(φ) · C⁻¹, written out so the rotation stays exactly rigid.
    let m = image_to_phantom(angle, gt.scale, width);
    let m_rot = m.linear() / gt.scale;
    let c_rot = gt.rotation();
    let rotation = m_rot * c_rot.transpose();
    let translation = m.translation_part() - rotation * gt.translation();
    world_from_phantom.then_after(&RigidTransform::new_unchecked(rotation, translation))
}

/// Image coordinates `(u, v, w)` in pixels of a world point under `pose · C`.
pub fn world_to_image(pose: &RigidTransform, gt: &CalibrationParams, p: &Point3) -> Vector3<f64> {
    let in_sensor = pose.inverse().apply(p).coords - gt.translation();
    gt.rotation().transpose() * in_sensor / gt.scale
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

fn small_rotation(rng: &mut ChaCha8Rng, sigma_rad: f64) -> Matrix3<f64> {
    if sigma_rad == 0.0 {
        return Matrix3::identity();
    }
    let n = Normal::new(0.0, sigma_rad).expect("finite sigma");
    let axis_angle = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    UnitQuaternion::from_scaled_axis(axis_angle)
        .to_rotation_matrix()
        .into_inner()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Synthesizes a tracked acquisition of `phantom` under calibration `gt`.
///
/// Observations are generated from the exact poses; pose noise is applied
/// afterwards in the sensor frame so it only corrupts the recorded poses.
pub fn simulate_acquisition(
    phantom: &PhantomModel,
    gt: &CalibrationParams,
    spec: &AcquisitionSpec,
) -> Result<TrackedSequence> {
    spec.validate()?;
    gt.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world_from_phantom = match spec.world_from_phantom {
        Some(w) => w,
        None => {
            let rotation = random_rotation(&mut rng);
            let translation = Vector3::new(
                rng.random_range(-100.0..=100.0),
                rng.random_range(-100.0..=100.0),
                rng.random_range(-100.0..=100.0),
            );
            RigidTransform::new_unchecked(rotation, translation)
        }
    };
    let angles = pose_angles(phantom, spec);
    let poses: Vec<RigidTransform> = angles
        .iter()
        .map(|&a| sensor_pose(&world_from_phantom, a, gt, spec.image.width))
        .collect();
    let world_tips: Vec<Point3> = phantom
        .landmarks()
        .iter()
        .map(|p| world_from_phantom.apply(p))
        .collect();

    // (frame, landmark, uvw)
    let mut candidates = Vec::new();
    for (frame, pose) in poses.iter().enumerate() {
        for (id, tip) in world_tips.iter().enumerate() {
            let uvw = world_to_image(pose, gt, tip);
            if spec.image.is_visible(&uvw, gt.scale) {
                candidates.push((frame as u32, id as u32, uvw));
            }
        }
    }
    if spec.annotation == AnnotationMode::CentralSlice {
        let mut central: BTreeMap<u32, (u32, u32, Vector3<f64>)> = BTreeMap::new();
        for c in candidates {
            let keep = central
                .get(&c.1)
                .is_none_or(|best| c.2.z.abs() < best.2.z.abs());
            if keep {
                central.insert(c.1, c);
            }
        }
        candidates = central.into_values().collect();
        candidates.sort_by_key(|c| (c.0, c.1));
    }
    if candidates.is_empty() {
        return Err(Error::NoVisibleLandmarks);
    }

    let pixel_noise = Normal::new(0.0, spec.pixel_noise_sigma).expect("validated sigma");
    let observations = candidates
        .into_iter()
        .map(|(frame, landmark_id, uvw)| {
            let (du, dv) = if spec.pixel_noise_sigma > 0.0 {
                (pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            LandmarkObservation {
                frame,
                landmark_id,
                u: uvw.x + du,
                v: uvw.y + dv,
            }
        })
        .collect();

    let rot_sigma = spec.pose_rotation_noise_sigma_deg.to_radians();
    let poses = poses
        .into_iter()
        .enumerate()
        .map(|(frame, pose)| {
            let dr = small_rotation(&mut rng, rot_sigma);
            let dt = gaussian_vec(&mut rng, spec.pose_translation_noise_sigma);
            let noise = RigidTransform::new_unchecked(dr, dt);
            (frame as u32, pose.then_after(&noise))
        })
        .collect();

    Ok(TrackedSequence {
        poses,
        observations,
        ground_truth: Some(*gt),
        world_from_phantom,
        pose_angles_deg: angles.iter().map(|a| a.to_degrees()).collect(),
    })
}

/// Inclusive sampling ranges for [`random_calibration`]; angles in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBounds {
    pub roll: (f64, f64),
    pub pitch: (f64, f64),
    pub yaw: (f64, f64),
    pub tx: (f64, f64),
    pub ty: (f64, f64),
    pub tz: (f64, f64),
    pub scale: (f64, f64),
}

impl CalibrationBounds {
    pub fn symmetric(angle_deg: f64, translation_mm: f64, scale: (f64, f64)) -> Self {
        let a = angle_deg.to_radians();
        let t = translation_mm;
        Self {
            roll: (-a, a),
            pitch: (-a, a),
            yaw: (-a, a),
            tx: (-t, t),
            ty: (-t, t),
            tz: (-t, t),
            scale,
        }
    }

    pub fn point(p: &CalibrationParams) -> Self {
        Self {
            roll: (p.roll, p.roll),
            pitch: (p.pitch, p.pitch),
            yaw: (p.yaw, p.yaw),
            tx: (p.tx, p.tx),
            ty: (p.ty, p.ty),
            tz: (p.tz, p.tz),
            scale: (p.scale, p.scale),
        }
    }

    fn ranges(&self) -> [(f64, f64); 7] {
        [
            self.roll, self.pitch, self.yaw, self.tx, self.ty, self.tz, self.scale,
        ]
    }
}

impl Default for CalibrationBounds {
    /// ±20°, ±10 mm, scale in [0.5, 1.5].
    fn default() -> Self {
        Self::symmetric(20.0, 10.0, (0.5, 1.5))
    }
}

/// Uniform draw within `bounds`, deterministic per `seed`.
pub fn random_calibration(bounds: &CalibrationBounds, seed: u64) -> Result<CalibrationParams> {
    let ranges = bounds.ranges();
    for (lo, hi) in ranges {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParameter(format!("bad bound ({lo}, {hi})")));
        }
    }
    if bounds.scale.0 <= 0.0 {
        return Err(Error::InvalidParameter("scale bounds must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [0.0; 7];
    for (slot, (lo, hi)) in out.iter_mut().zip(ranges) {
        *slot = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
    }
    Ok(CalibrationParams::from_array(out))
}

pub const BLOB_SIGMA_PX: f64 = 2.0;

/// Black frame with a Gaussian blob (σ = 2 px, peak 255) at every landmark
/// visible from `pose` under calibration `gt`.
pub fn render_frame(
    phantom: &PhantomModel,
    world_from_phantom: &RigidTransform,
    gt: &CalibrationParams,
    pose: &RigidTransform,
    image: &ImageGeometry,
) -> GrayImage {
    let mut frame = GrayImage::new(image.width, image.height);
    let radius = (4.0 * BLOB_SIGMA_PX).ceil() as i64;
    let two_var = 2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX;
    for tip in phantom.landmarks() {
        let uvw = world_to_image(pose, gt, &world_from_phantom.apply(tip));
        if !image.is_visible(&uvw, gt.scale) {
            continue;
        }
        let (cu, cv) = (uvw.x.round() as i64, uvw.y.round() as i64);
        for v in (cv - radius).max(0)..=(cv + radius).min(image.height as i64 - 1) {
            for u in (cu - radius).max(0)..=(cu + radius).min(image.width as i64 - 1) {
                let d2 = (u as f64 - uvw.x).powi(2) + (v as f64 - uvw.y).powi(2);
                let value = (255.0 * (-d2 / two_var).exp()).round() as u8;
                let (u, v) = (u as usize, v as usize);
                if value > frame.get(u, v) {
                    frame.set(u, v, value);
                }
            }
        }
    }
    frame
}

/// `pose · C` for every frame, the image-to-world map used by reconstruction.
pub fn image_to_world(pose: &RigidTransform, calib: &Homogeneous4) -> Homogeneous4 {
    compose(&pose.to_homogeneous(), calib)
}

/// Image-to-world maps of a whole sequence under `gt`.
pub fn image_to_world_maps(seq: &TrackedSequence, gt: &CalibrationParams) -> Vec<Homogeneous4> {
    let c = calibration_matrix(gt);
    seq.poses.values().map(|p| image_to_world(p, &c)).collect()
}
