//! `ivuscal`: generate phantoms, simulate tracked acquisitions, calibrate,
//! evaluate and reconstruct volumes.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ivuscal_core::io::{self, Manifest, StoredCalibration};
use ivuscal_core::sim::{render_frame, sensor_pose, AnnotationMode, ImageGeometry};
use ivuscal_core::{
    build_phantom, landmark_rmse, paste_frames, plan_volume, random_calibration,
    simulate_acquisition, solve_multistart, AcquisitionSpec, CalibrationBounds, CalibrationParams,
    CalibrationProblem, Compounding, Error, FrameImage, OptimizerConfig, PhantomSpec,
    RegistrationMethod,
};

#[derive(Parser)]
#[command(
    name = "ivuscal",
    version,
    about = "Spatial calibration of a tracked IVUS probe"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a needle phantom as CSV (default: 3 clusters of 5 needles).
    PhantomGen(PhantomGenArgs),
    /// Simulate a tracked rotational sweep with a random ground-truth calibration.
    Simulate(SimulateArgs),
    /// Estimate the calibration from annotated landmarks and tracked poses.
    Calibrate(CalibrateArgs),
    /// Recompute landmark RMSE for a stored calibration.
    Evaluate(EvaluateArgs),
    /// Paste tracked frames into a voxel volume.
    Reconstruct(ReconstructArgs),
}

#[derive(clap::Args)]
struct PhantomGenArgs {
    /// Output CSV; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cluster azimuths in degrees, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![60.0, 90.0, 120.0])]
    angles: Vec<f64>,
    /// Cavity radius in mm.
    #[arg(long, default_value_t = 65.0, value_parser = positive)]
    radius_mm: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Annotate {
    /// One observation per landmark, from the frame closest to it.
    Central,
    /// Every frame in which a landmark lies inside the imaging slab.
    All,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Phantom CSV.
    #[arg(long)]
    phantom: PathBuf,
    /// Seeds the ground truth, world offset and noise.
    #[arg(long)]
    seed: u64,
    /// Number of sweep poses (one extra pose is added per cluster azimuth).
    #[arg(long, default_value_t = 150, value_parser = clap::value_parser!(u32).range(1..))]
    poses: u32,
    /// Sweep extent in degrees.
    #[arg(long, default_value_t = 360.0)]
    sweep_deg: f64,
    /// Sweep start azimuth in degrees.
    #[arg(long, default_value_t = 0.0)]
    sweep_start_deg: f64,
    /// Pixel noise standard deviation (px) on annotated landmarks.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise_px: f64,
    /// Pose translation noise standard deviation (mm).
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise_pose_mm: f64,
    /// Pose rotation noise standard deviation (degrees).
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise_pose_deg: f64,
    /// Imaging depth (mm); landmarks deeper than this are not visible.
    #[arg(long, default_value_t = 90.0, value_parser = positive)]
    depth_mm: f64,
    #[arg(long, default_value_t = 680, value_parser = clap::value_parser!(u32).range(2..))]
    image_width: u32,
    #[arg(long, default_value_t = 480, value_parser = clap::value_parser!(u32).range(2..))]
    image_height: u32,
    /// Ground-truth angles are drawn from ±this many degrees.
    #[arg(long, default_value_t = 20.0, value_parser = non_negative)]
    angle_range_deg: f64,
    /// Ground-truth translations are drawn from ±this many mm.
    #[arg(long, default_value_t = 10.0, value_parser = non_negative)]
    translation_range_mm: f64,
    /// Ground-truth scale range lower end (mm/px).
    #[arg(long, default_value_t = 0.5, value_parser = positive)]
    scale_min: f64,
    /// Ground-truth scale range upper end (mm/px).
    #[arg(long, default_value_t = 1.5, value_parser = positive)]
    scale_max: f64,
    #[arg(long, value_enum, default_value_t = Annotate::Central)]
    annotate: Annotate,
    /// Also render PGM frames into <out-dir>/frames.
    #[arg(long)]
    frames: bool,
    /// Output directory for poses.csv, observations.csv and manifest.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Ground-truth calibration file (default <out-dir>/ground_truth.cal).
    #[arg(long)]
    gt_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    phantom: PathBuf,
    #[arg(long)]
    observations: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.05, value_parser = positive)]
    lr: f64,
    /// Stop once the mean squared residual (mm²) is at or below this.
    #[arg(long, default_value_t = 1e-4, value_parser = non_negative)]
    epsilon: f64,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    max_iters: u64,
    /// Extra jittered starts tried when the first run does not converge.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
    /// Seeds the restart jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Register with iterative closest point instead of index pairing.
    #[arg(long)]
    icp: bool,
    /// Exit with code 3 if the run does not converge.
    #[arg(long)]
    strict: bool,
    /// Imaging depth recorded in the output (mm).
    #[arg(long, default_value_t = 90.0, value_parser = positive)]
    depth_mm: f64,
    /// Output calibration file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    phantom: PathBuf,
    #[arg(long)]
    observations: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Depth reported in the output line; defaults to the one stored in the calibration.
    #[arg(long, value_parser = positive)]
    depth_mm: Option<f64>,
}

#[derive(clap::Args)]
struct ReconstructArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Directory with frame_NNNNN.pgm for every pose.
    #[arg(long)]
    frames: PathBuf,
    /// Voxel size (mm).
    #[arg(long, default_value_t = 0.25, value_parser = positive)]
    spacing_mm: f64,
    #[arg(long, value_enum, default_value_t = Compound::Mean)]
    compound: Compound,
    /// Margin around the frames' bounding box (mm).
    #[arg(long, default_value_t = 5.0, value_parser = non_negative)]
    padding_mm: f64,
    /// Refuse to allocate volumes larger than this.
    #[arg(long, default_value_t = 200_000_000)]
    max_voxels: usize,
    /// Writes <out>.meta and <out>.raw.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Compound {
    Mean,
    Max,
    Latest,
}

impl From<Compound> for Compounding {
    fn from(c: Compound) -> Self {
        match c {
            Compound::Mean => Compounding::Mean,
            Compound::Max => Compounding::Max,
            Compound::Latest => Compounding::Latest,
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Data(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::InvalidSpec(_) => Failure::Usage(e.to_string()),
            Error::DegenerateGeometry(_) => Failure::Numerical(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (code, msg) = match self {
            Failure::Usage(m) => (1, m.clone()),
            Failure::Data(e) => (2, e.to_string()),
            Failure::Numerical(m) => (3, m.clone()),
        };
        eprintln!("ivuscal: {msg}");
        ExitCode::from(code)
    }
}

fn io_err(e: std::io::Error) -> Failure {
    Failure::Data(Error::Io(e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reconstruct(a) => reconstruct(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn phantom_gen(a: PhantomGenArgs) -> Result<(), Failure> {
    let spec = PhantomSpec {
        cluster_angles_deg: a.angles,
        cavity_radius_mm: a.radius_mm,
        ..PhantomSpec::default()
    };
    let phantom = build_phantom(&spec)?;
    match a.out {
        Some(path) => {
            io::save_phantom(&path, &phantom)?;
            println!("wrote {} landmarks to {}", phantom.len(), path.display());
        }
        None => print!("{}", io::phantom_to_csv(&phantom)),
    }
    Ok(())
}

/// Ground truth and acquisition draw from separate streams of the same seed.
const GROUND_TRUTH_SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    if a.scale_min > a.scale_max {
        return Err(Failure::Usage(
            "--scale-min must not exceed --scale-max".into(),
        ));
    }
    let phantom = io::load_phantom(&a.phantom)?;
    let bounds = CalibrationBounds::symmetric(
        a.angle_range_deg,
        a.translation_range_mm,
        (a.scale_min, a.scale_max),
    );
    let gt = random_calibration(&bounds, a.seed ^ GROUND_TRUTH_SEED_SALT)?;
    let image = ImageGeometry {
        width: a.image_width as usize,
        height: a.image_height as usize,
        depth_mm: a.depth_mm,
        ..ImageGeometry::default()
    };
    let spec = AcquisitionSpec {
        pose_count: a.poses as usize,
        sweep_start_deg: a.sweep_start_deg,
        sweep_deg: a.sweep_deg,
        image,
        pixel_noise_sigma: a.noise_px,
        pose_translation_noise_sigma: a.noise_pose_mm,
        pose_rotation_noise_sigma_deg: a.noise_pose_deg,
        annotation: match a.annotate {
            Annotate::Central => AnnotationMode::CentralSlice,
            Annotate::All => AnnotationMode::AllVisible,
        },
        world_from_phantom: None,
        seed: a.seed,
    };
    let seq = simulate_acquisition(&phantom, &gt, &spec)?;

    std::fs::create_dir_all(&a.out_dir).map_err(io_err)?;
    io::save_poses(&a.out_dir.join("poses.csv"), &seq.poses)?;
    io::save_observations(&a.out_dir.join("observations.csv"), &seq.observations)?;
    let frames_dir = a.frames.then(|| PathBuf::from("frames"));
    if let Some(dir) = &frames_dir {
        let dir = a.out_dir.join(dir);
        std::fs::create_dir_all(&dir).map_err(io_err)?;
        for (frame, angle) in seq.poses.keys().zip(&seq.pose_angles_deg) {
            // Render from the true placement; only the recorded poses are noisy.
            let pose = sensor_pose(
                &seq.world_from_phantom,
                angle.to_radians(),
                &gt,
                image.width,
            );
            let img = render_frame(&phantom, &seq.world_from_phantom, &gt, &pose, &image);
            io::write_pgm(&dir.join(frame_file_name(*frame)), &img)?;
        }
    }
    let gt_out = a
        .gt_out
        .unwrap_or_else(|| a.out_dir.join("ground_truth.cal"));
    io::save_calibration(
        &gt_out,
        &StoredCalibration::from_params(gt, Some(a.depth_mm)),
    )?;
    io::save_manifest(
        &a.out_dir.join("manifest.txt"),
        &Manifest {
            poses: "poses.csv".into(),
            observations: "observations.csv".into(),
            frames: frames_dir,
            depth_mm: a.depth_mm,
            notes: format!("simulated, seed {}", a.seed),
        },
    )?;
    println!(
        "poses: {}\nobservations: {}\nground truth: {}",
        seq.poses.len(),
        seq.observations.len(),
        gt_out.display()
    );
    Ok(())
}

fn frame_file_name(frame: u32) -> String {
    format!("frame_{frame:05}.pgm")
}

fn load_problem(
    phantom: &Path,
    observations: &Path,
    poses: &Path,
) -> Result<CalibrationProblem, Failure> {
    let phantom = io::load_phantom(phantom)?;
    let observations = io::load_observations(observations)?;
    let poses = io::load_poses(poses)?;
    Ok(CalibrationProblem::new(phantom, observations, poses)?)
}

fn calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    let problem = load_problem(&a.phantom, &a.observations, &a.poses)?;
    let config = OptimizerConfig {
        learning_rate: a.lr,
        epsilon: a.epsilon,
        max_iters: a.max_iters as usize,
        registration: if a.icp {
            RegistrationMethod::Icp {
                max_iters: 50,
                tol: 1e-12,
            }
        } else {
            RegistrationMethod::Kabsch
        },
        ..OptimizerConfig::default()
    };
    let result = solve_multistart(
        &problem,
        &config,
        &CalibrationParams::IDENTITY,
        a.restarts,
        a.seed,
    )?;
    let rmse = landmark_rmse(&problem, &result.params)?;
    io::save_calibration(
        &a.out,
        &StoredCalibration::from_result(&result, Some(a.depth_mm)),
    )?;
    let p = &result.params;
    println!("iterations: {}", result.iterations);
    println!("final_error_mm2: {:e}", result.final_error);
    println!("rmse_mm: {rmse:e}");
    println!("converged: {}", result.converged);
    println!(
        "params: roll {:.6} rad, pitch {:.6} rad, yaw {:.6} rad, t ({:.4}, {:.4}, {:.4}) mm, scale {:.6} mm/px",
        p.roll, p.pitch, p.yaw, p.tx, p.ty, p.tz, p.scale
    );
    if a.strict && !result.converged {
        return Err(Failure::Numerical(format!(
            "did not converge: error {:e} mm² > epsilon {:e} after {} iterations",
            result.final_error, a.epsilon, result.iterations
        )));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let calib = io::load_calibration(&a.calib)?;
    let problem = load_problem(&a.phantom, &a.observations, &a.poses)?;
    let rmse = landmark_rmse(&problem, &calib.params)?;
    let depth = a.depth_mm.or(calib.depth_mm).unwrap_or(f64::NAN);
    println!(
        "{},{},{}",
        io::format_shortest(depth),
        io::format_shortest(rmse),
        problem.len()
    );
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<(), Failure> {
    let calib = io::load_calibration(&a.calib)?;
    let poses = io::load_poses(&a.poses)?;
    let frames = load_frames(&a.frames, &poses)?;
    let plan = plan_volume(&frames, &calib.matrix, a.spacing_mm, a.padding_mm)?;
    let voxels = plan
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if voxels.is_none_or(|n| n > a.max_voxels) {
        return Err(Failure::Usage(format!(
            "volume of {:?} voxels exceeds --max-voxels {}; increase --spacing-mm",
            plan.dims, a.max_voxels
        )));
    }
    let outcome = paste_frames(&frames, &calib.matrix, &plan, a.compound.into());
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let (meta, raw) = io::save_volume(&outcome.volume, &a.out)?;
    let [nx, ny, nz] = plan.dims;
    println!("frames: {}", frames.len());
    println!("dims: {nx} {ny} {nz}");
    println!("dropped_pixels: {}", outcome.dropped_pixels);
    println!("wrote {} and {}", meta.display(), raw.display());
    Ok(())
}

fn load_frames(
    dir: &Path,
    poses: &BTreeMap<u32, ivuscal_core::RigidTransform>,
) -> Result<Vec<FrameImage>, Failure> {
    poses
        .iter()
        .map(|(frame, pose)| {
            let image = io::read_pgm(&dir.join(frame_file_name(*frame)))?;
            Ok(FrameImage { image, pose: *pose })
        })
        .collect()
}
