//! Freehand volume reconstruction by forward nearest-voxel pasting.
//!
//! Every pixel `(u, v)` of a frame lands at `pose · C · (u, v, 0, 1)` and is
//! accumulated into the voxel whose center is nearest. There is no hole
//! filling. Frames are pasted sequentially in the order given for every
//! compounding mode, so results are deterministic.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{compose, Homogeneous4, Point3, RigidTransform};
use crate::image::GrayImage;

/// How several pixel contributions to one voxel are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compounding {
    #[default]
    Mean,
    Max,
    Latest,
}

impl fmt::Display for Compounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compounding::Mean => "mean",
            Compounding::Max => "max",
            Compounding::Latest => "latest",
        })
    }
}

impl FromStr for Compounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Compounding::Mean),
            "max" => Ok(Compounding::Max),
            "latest" => Ok(Compounding::Latest),
            other => Err(Error::InvalidParameter(format!(
                "unknown compounding mode {other:?} (expected mean, max or latest)"
            ))),
        }
    }
}

/// A tracked 2D frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub image: GrayImage,
    /// Sensor-to-world pose when the frame was captured.
    pub pose: RigidTransform,
}

/// Grid placement: `origin` is the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumePlan {
    pub dims: [usize; 3],
    pub origin: Point3,
    pub spacing: f64,
}

impl VolumePlan {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Axis-aligned scalar grid, stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    /// Isotropic voxel size, mm.
    pub spacing: f64,
    /// World position of the center of voxel `(0, 0, 0)`, mm.
    pub origin: Point3,
    pub compounding: Compounding,
    pub data: Vec<f32>,
    /// Number of pixels that landed in each voxel.
    pub weight: Vec<u32>,
}

impl VoxelVolume {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Intensity-weighted mean voxel position; `None` if the volume is dark.
    pub fn intensity_centroid(&self) -> Option<Point3> {
        let [nx, ny, _] = self.dims;
        let mut acc = Vector3::zeros();
        let mut total = 0.0;
        for (idx, &d) in self.data.iter().enumerate() {
            if d > 0.0 {
                let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                acc += self.voxel_center(i, j, k).coords * d as f64;
                total += d as f64;
            }
        }
        (total > 0.0).then(|| Point3::from(acc / total))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasteOutcome {
    pub volume: VoxelVolume,
    pub dropped_pixels: u64,
    /// Sum of all pixel intensities offered for pasting.
    pub total_intensity: u64,
    /// Sum of the intensities of dropped pixels.
    pub dropped_intensity: u64,
}

/// Axis-aligned box around every frame's pixel footprint mapped through
/// `pose · calib`, grown by `padding` mm on each side.
pub fn plan_volume(
    frames: &[FrameImage],
    calib: &Homogeneous4,
    spacing: f64,
    padding: f64,
) -> Result<VolumePlan> {
    if frames.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "spacing must be > 0, got {spacing}"
        )));
    }
    if !(padding.is_finite() && padding >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "padding must be >= 0, got {padding}"
        )));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for frame in frames {
        let map = compose(&frame.pose.to_homogeneous(), calib);
        let (w, h) = (frame.image.width as f64, frame.image.height as f64);
        for (u, v) in [
            (-0.5, -0.5),
            (w - 0.5, -0.5),
            (-0.5, h - 0.5),
            (w - 0.5, h - 0.5),
        ] {
            let p = map.apply(&Point3::new(u, v, 0.0)).coords;
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    lo.add_scalar_mut(-padding);
    hi.add_scalar_mut(padding);
    let center = (lo + hi) / 2.0;
    let mut dims = [1usize; 3];
    let mut origin = Vector3::zeros();
    for axis in 0..3 {
        let cells = ((hi[axis] - lo[axis]) / spacing - 1e-9).ceil();
        dims[axis] = (cells as usize).max(1);
        origin[axis] = center[axis] - (dims[axis] - 1) as f64 * spacing / 2.0;
    }
    Ok(VolumePlan {
        dims,
        origin: Point3::from(origin),
        spacing,
    })
}

/// Pastes every pixel of every frame into the grid described by `plan`.
/// Pixels falling outside the grid are dropped and counted.
pub fn paste_frames(
    frames: &[FrameImage],
    calib: &Homogeneous4,
    plan: &VolumePlan,
    compounding: Compounding,
) -> PasteOutcome {
    let n = plan.voxel_count();
    let [nx, ny, nz] = plan.dims;
    let mut sum = vec![
        0f64;
        if compounding == Compounding::Mean {
            n
        } else {
            0
        }
    ];
    let mut data = vec![0f32; n];
    let mut weight = vec![0u32; n];
    let (mut dropped_pixels, mut total, mut dropped) = (0u64, 0u64, 0u64);
    let inv = 1.0 / plan.spacing;

    for frame in frames {
        let map = compose(&frame.pose.to_homogeneous(), calib);
        let lin = map.linear();
        let (col_u, col_v) = (lin.column(0).into_owned(), lin.column(1).into_owned());
        let base = map.translation_part() - plan.origin.coords;
        let img = &frame.image;
        for v in 0..img.height {
            let row = base + col_v * v as f64;
            for u in 0..img.width {
                let value = img.pixels[v * img.width + u];
                total += value as u64;
                let g = (row + col_u * u as f64) * inv;
                let (i, j, k) = (g.x.round(), g.y.round(), g.z.round());
                let inside = i >= 0.0
                    && j >= 0.0
                    && k >= 0.0
                    && (i as usize) < nx
                    && (j as usize) < ny
                    && (k as usize) < nz;
                if !inside {
                    dropped_pixels += 1;
                    dropped += value as u64;
                    continue;
                }
                let idx = i as usize + nx * (j as usize + ny * k as usize);
                weight[idx] += 1;
                match compounding {
                    Compounding::Mean => sum[idx] += value as f64,
                    Compounding::Max => data[idx] = data[idx].max(value as f32),
                    Compounding::Latest => data[idx] = value as f32,
                }
            }
        }
    }
    if compounding == Compounding::Mean {
        for ((d, s), w) in data.iter_mut().zip(&sum).zip(&weight) {
            if *w > 0 {
                *d = (*s / *w as f64) as f32;
            }
        }
    }

    PasteOutcome {
        volume: VoxelVolume {
            dims: plan.dims,
            spacing: plan.spacing,
            origin: plan.origin,
            compounding,
            data,
            weight,
        },
        dropped_pixels,
        total_intensity: total,
        dropped_intensity: dropped,
    }
}
