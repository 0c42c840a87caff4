//! Image-to-sensor calibration by gradient descent on the registered
//! landmark error.
//!
//! Each iteration rebuilds the calibration matrix from seven parameters,
//! projects the annotated needle tips into the tracker frame, rigidly
//! registers them onto the phantom model, evaluates the mean squared residual
//! and takes one Adam step. The registration is held fixed while
//! differentiating; with the closed-form Kabsch registration it is optimal for
//! the current parameters, so the fixed-registration gradient is also the
//! gradient of the registered error itself.

mod adam;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::geometry::{
    euler_to_rotation, icp_align, kabsch_align, rot_x, rot_y, rot_z, Homogeneous4, Point3,
    RigidTransform,
};
use crate::phantom::PhantomModel;
use crate::sim::LandmarkObservation;

/// The seven unknowns of the calibration matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    /// mm per pixel.
    pub scale: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl CalibrationParams {
    pub const IDENTITY: Self = Self {
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || self.scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "calibration parameters must be finite with scale > 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// `[roll, pitch, yaw, tx, ty, tz, scale]`
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.roll, self.pitch, self.yaw, self.tx, self.ty, self.tz, self.scale,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            roll: a[0],
            pitch: a[1],
            yaw: a[2],
            tx: a[3],
            ty: a[4],
            tz: a[5],
            scale: a[6],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_rotation(self.roll, self.pitch, self.yaw)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }
}

/// `[[s·Rz(yaw)·Ry(pitch)·Rx(roll), t], [0, 1]]`
pub fn calibration_matrix(params: &CalibrationParams) -> Homogeneous4 {
    Homogeneous4::from_parts(&(params.rotation() * params.scale), &params.translation())
}

/// How projected landmarks are registered onto the phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegistrationMethod {
    /// Closed-form alignment on the known landmark labels.
    Kabsch,
    /// Nearest-neighbour ICP against every phantom landmark, ignoring labels.
    Icp { max_iters: usize, tol: f64 },
}

#[derive(Debug, Clone)]
struct Sample {
    pose: RigidTransform,
    pixel: Vector3<f64>,
    phantom: Point3,
}

/// Validated calibration input: phantom, annotated tips and tracked poses.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    phantom: PhantomModel,
    observations: Vec<LandmarkObservation>,
    poses: BTreeMap<u32, RigidTransform>,
    samples: Vec<Sample>,
}

impl CalibrationProblem {
    pub fn new(
        phantom: PhantomModel,
        observations: Vec<LandmarkObservation>,
        poses: BTreeMap<u32, RigidTransform>,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(observations.len());
        let mut landmarks = BTreeSet::new();
        let mut frames = BTreeSet::new();
        for obs in &observations {
            let phantom_point = *phantom
                .landmark(obs.landmark_id)
                .ok_or(Error::UnknownLandmark(obs.landmark_id))?;
            let pose = *poses
                .get(&obs.frame)
                .ok_or(Error::UnknownFrame(obs.frame))?;
            if !(obs.u.is_finite() && obs.v.is_finite()) {
                return Err(Error::InvalidProblem(format!(
                    "non-finite pixel for frame {} landmark {}",
                    obs.frame, obs.landmark_id
                )));
            }
            landmarks.insert(obs.landmark_id);
            frames.insert(obs.frame);
            samples.push(Sample {
                pose,
                pixel: Vector3::new(obs.u, obs.v, 0.0),
                phantom: phantom_point,
            });
        }
        if landmarks.len() < 3 {
            return Err(Error::InvalidProblem(format!(
                "need observations of at least 3 distinct landmarks, got {}",
                landmarks.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::InvalidProblem(format!(
                "need observations from at least 2 distinct poses, got {}",
                frames.len()
            )));
        }
        Ok(Self {
            phantom,
            observations,
            poses,
            samples,
        })
    }

    pub fn phantom(&self) -> &PhantomModel {
        &self.phantom
    }

    pub fn observations(&self) -> &[LandmarkObservation] {
        &self.observations
    }

    pub fn poses(&self) -> &BTreeMap<u32, RigidTransform> {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same observations with every pose replaced by `g · pose`.
    pub fn with_world_transform(&self, g: &RigidTransform) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|(&f, p)| (f, g.then_after(p)))
            .collect();
        Self::new(self.phantom.clone(), self.observations.clone(), poses)
            .expect("re-posing keeps a valid problem valid")
    }
}

/// Tracker-frame position of every observation paired with its phantom tip,
/// in observation order.
pub fn project_landmarks(
    problem: &CalibrationProblem,
    params: &CalibrationParams,
) -> Vec<(Point3, Point3)> {
    let c = calibration_matrix(params);
    problem
        .samples
        .iter()
        .map(|s| (s.pose.apply(&c.apply(&Point3::from(s.pixel))), s.phantom))
        .collect()
}

/// Mean squared distance between `registration(worldᵢ)` and `phantomᵢ`.
pub fn registered_mse(world: &[Point3], phantom: &[Point3], registration: &RigidTransform) -> f64 {
    crate::geometry::mean_squared_residual(registration, world, phantom)
}

fn register(
    problem: &CalibrationProblem,
    world: &[Point3],
    phantom: &[Point3],
    method: RegistrationMethod,
) -> Result<RigidTransform> {
    match method {
        RegistrationMethod::Kabsch => kabsch_align(world, phantom),
        RegistrationMethod::Icp { max_iters, tol } => {
            icp_align(world, problem.phantom.landmarks(), max_iters, tol)
        }
    }
}

/// Registered landmark error (mm²) and the registration that produced it.
pub fn registered_error(
    problem: &CalibrationProblem,
    params: &CalibrationParams,
) -> Result<(f64, RigidTransform)> {
    registered_error_with(problem, params, RegistrationMethod::Kabsch)
}

pub fn registered_error_with(
    problem: &CalibrationProblem,
    params: &CalibrationParams,
    method: RegistrationMethod,
) -> Result<(f64, RigidTransform)> {
    let (world, phantom): (Vec<_>, Vec<_>) = project_landmarks(problem, params).into_iter().unzip();
    let reg = register(problem, &world, &phantom, method)?;
    Ok((registered_mse(&world, &phantom, &reg), reg))
}

/// Root mean square landmark distance after registration, in mm.
pub fn landmark_rmse(problem: &CalibrationProblem, params: &CalibrationParams) -> Result<f64> {
    Ok(registered_error(problem, params)?.0.sqrt())
}

/// `∂R/∂roll, ∂R/∂pitch, ∂R/∂yaw` for `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
fn rotation_jacobians(params: &CalibrationParams) -> [Matrix3<f64>; 3] {
    let (sr, cr) = params.roll.sin_cos();
    let (sp, cp) = params.pitch.sin_cos();
    let (sy, cy) = params.yaw.sin_cos();
    let (rx, ry, rz) = (rot_x(params.roll), rot_y(params.pitch), rot_z(params.yaw));
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    let dry = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let drz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

/// Gradient of the landmark MSE with respect to
/// `[roll, pitch, yaw, tx, ty, tz, scale]` at a fixed registration.
pub fn gradient_at_registration(
    problem: &CalibrationProblem,
    params: &CalibrationParams,
    registration: &RigidTransform,
) -> [f64; 7] {
    let rot = params.rotation();
    let s = params.scale;
    let [d_roll, d_pitch, d_yaw] = rotation_jacobians(params).map(|d| d * s);
    let t = params.translation();

    let mut g = [0.0; 7];
    for sample in &problem.samples {
        let in_sensor = rot * sample.pixel * s + t;
        let world = sample.pose.apply(&Point3::from(in_sensor));
        let residual = registration.apply(&world) - sample.phantom;
        // Residual pulled back into the sensor frame.
        let a = (registration.rotation() * sample.pose.rotation()).transpose() * residual;
        g[0] += a.dot(&(d_roll * sample.pixel));
        g[1] += a.dot(&(d_pitch * sample.pixel));
        g[2] += a.dot(&(d_yaw * sample.pixel));
        g[3] += a.x;
        g[4] += a.y;
        g[5] += a.z;
        g[6] += a.dot(&(rot * sample.pixel));
    }
    let k = 2.0 / problem.samples.len() as f64;
    g.map(|v| v * k)
}

/// Analytic gradient of [`registered_error`] with the registration held at
/// its value for `params`.
pub fn objective_gradient(
    problem: &CalibrationProblem,
    params: &CalibrationParams,
) -> Result<[f64; 7]> {
    let (_, reg) = registered_error(problem, params)?;
    Ok(gradient_at_registration(problem, params, &reg))
}

/// Optimizer coordinates: the three angles, the sensor-frame position of the
/// mean annotated pixel, and `ln(scale)`.
///
/// The same family of matrices as the seven parameters, but the translation
/// is anchored at the landmarks instead of the image corner. Pixel columns sit
/// hundreds of pixels from the corner, so anchoring there couples every small
/// rotation to a large translation and stalls the descent.
#[derive(Debug, Clone, Copy)]
struct Chart {
    anchor: Vector3<f64>,
}

impl Chart {
    fn new(problem: &CalibrationProblem) -> Self {
        let n = problem.samples.len() as f64;
        Self {
            anchor: problem
                .samples
                .iter()
                .map(|s| s.pixel)
                .sum::<Vector3<f64>>()
                / n,
        }
    }

    fn encode(&self, p: &CalibrationParams) -> SVector<f64, 7> {
        let c = p.rotation() * self.anchor * p.scale + p.translation();
        SVector::from([p.roll, p.pitch, p.yaw, c.x, c.y, c.z, p.scale.ln()])
    }

    fn decode(&self, theta: &SVector<f64, 7>) -> CalibrationParams {
        let mut p = CalibrationParams {
            roll: theta[0],
            pitch: theta[1],
            yaw: theta[2],
            scale: theta[6].exp(),
            ..CalibrationParams::IDENTITY
        };
        let t = Vector3::new(theta[3], theta[4], theta[5]) - p.rotation() * self.anchor * p.scale;
        (p.tx, p.ty, p.tz) = (t.x, t.y, t.z);
        p
    }

    /// Chain rule from the seven-parameter gradient to chart coordinates.
    fn pull_back(&self, p: &CalibrationParams, g: &[f64; 7]) -> SVector<f64, 7> {
        let g_t = Vector3::new(g[3], g[4], g[5]);
        let jac = rotation_jacobians(p);
        let mut out = SVector::<f64, 7>::zeros();
        for k in 0..3 {
            out[k] = g[k] - p.scale * g_t.dot(&(jac[k] * self.anchor));
            out[3 + k] = g[3 + k];
        }
        out[6] = p.scale * (g[6] - g_t.dot(&(p.rotation() * self.anchor)));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Stop once the registered error (mm²) falls to or below this.
    pub epsilon: f64,
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub registration: RegistrationMethod,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epsilon: 1e-4,
            max_iters: 10_000,
            plateau_window: 200,
            plateau_rel_tol: 1e-9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            registration: RegistrationMethod::Kabsch,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.plateau_rel_tol >= 0.0) {
            return bad("adam_eps must be > 0 and plateau_rel_tol >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Lowest-error iterate seen.
    pub params: CalibrationParams,
    pub matrix: Homogeneous4,
    /// Registered error of `params`, mm².
    pub final_error: f64,
    pub iterations: usize,
    /// `final_error <= epsilon`.
    pub converged: bool,
    /// Error of the iterate evaluated at each iteration.
    pub error_trace: Vec<f64>,
}

/// Runs the calibration loop from `init`. Deterministic.
pub fn solve(
    problem: &CalibrationProblem,
    config: &OptimizerConfig,
    init: &CalibrationParams,
) -> Result<CalibrationResult> {
    config.validate()?;
    init.validate()?;
    let chart = Chart::new(problem);
    let mut theta = chart.encode(init);
    let mut adam = Adam::<7>::new(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut trace = Vec::new();
    let mut best_trace: Vec<f64> = Vec::new();
    let mut best = (*init, f64::INFINITY);

    for iter in 0..config.max_iters {
        let params = chart.decode(&theta);
        let (error, reg) = registered_error_with(problem, &params, config.registration)?;
        trace.push(error);
        if !error.is_finite() {
            break;
        }
        if error < best.1 {
            best = (params, error);
        }
        best_trace.push(best.1);
        if best.1 <= config.epsilon {
            break;
        }
        if config.plateau_window > 0 && iter >= config.plateau_window {
            let old = best_trace[iter - config.plateau_window];
            if old > 0.0 && (old - best.1) / old < config.plateau_rel_tol {
                break;
            }
        }

        let g = gradient_at_registration(problem, &params, &reg);
        adam.step(&mut theta, &chart.pull_back(&params, &g));
    }

    let (params, final_error) = best;
    Ok(CalibrationResult {
        params,
        matrix: calibration_matrix(&params),
        final_error,
        iterations: trace.len(),
        converged: final_error <= config.epsilon,
        error_trace: trace,
    })
}

/// Runs [`solve`] from `init` and then from up to `restarts` jittered starts,
/// keeping the lowest final error. Stops early once a run converges.
pub fn solve_multistart(
    problem: &CalibrationProblem,
    config: &OptimizerConfig,
    init: &CalibrationParams,
    restarts: usize,
    seed: u64,
) -> Result<CalibrationResult> {
    let mut best = solve(problem, config, init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..restarts {
        if best.converged {
            break;
        }
        let angle = 20f64.to_radians();
        let start = CalibrationParams {
            roll: init.roll + rng.random_range(-angle..=angle),
            pitch: init.pitch + rng.random_range(-angle..=angle),
            yaw: init.yaw + rng.random_range(-angle..=angle),
            tx: init.tx + rng.random_range(-10.0..=10.0),
            ty: init.ty + rng.random_range(-10.0..=10.0),
            tz: init.tz + rng.random_range(-10.0..=10.0),
            scale: init.scale * rng.random_range(-0.4f64..=0.4).exp(),
        };
        let run = solve(problem, config, &start)?;
        if run.final_error < best.final_error {
            best = run;
        }
    }
    Ok(best)
}
