//! Spatial calibration of a tracked intravascular ultrasound probe from a
//! needle phantom, with a synthetic acquisition simulator and freehand volume
//! reconstruction.

pub mod calib;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod phantom;
pub mod recon;
pub mod sim;

pub use calib::{
    calibration_matrix, landmark_rmse, objective_gradient, project_landmarks, registered_error,
    solve, solve_multistart, CalibrationParams, CalibrationProblem, CalibrationResult,
    OptimizerConfig, RegistrationMethod,
};
pub use error::{Error, Result};
pub use geometry::{Homogeneous4, Point3, RigidTransform};
pub use image::GrayImage;
pub use phantom::{build_phantom, default_phantom, PhantomModel, PhantomSpec};
pub use recon::{
    paste_frames, plan_volume, Compounding, FrameImage, PasteOutcome, VolumePlan, VoxelVolume,
};
pub use sim::{
    random_calibration, simulate_acquisition, AcquisitionSpec, CalibrationBounds,
    LandmarkObservation, TrackedSequence,
};
