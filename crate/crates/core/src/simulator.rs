//! Synthetic freehand sweeps with exact ground truth.
//!
//! A probe moves at constant speed along a straight line, a single circular
//! arc (C) or two opposing arcs (S) in the horizontal plane of world space.
//! The image plane is either perpendicular to the direction of travel
//! (out-of-plane motion) or parallel to it (in-plane motion). Frames are
//! slices of a procedural intensity volume, so consecutive frames decorrelate
//! with motion the way speckle does.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, TAU};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Frame, Scan};
use crate::exec::Execution;
use crate::geometry::RigidTransform;
use crate::seed::derive_seed;

/// Total heading change of a C sweep.
pub const C_SHAPE_TURN: f64 = FRAC_PI_2;
/// Heading change of each of the two arcs of an S sweep.
pub const S_SHAPE_TURN: f64 = FRAC_PI_3;
pub const DEFAULT_FPS: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("a trajectory needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("trajectory length must be positive, got {0} mm")]
    InvalidLength(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryShape {
    Line,
    CShape,
    SShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Image-plane normal along the direction of travel.
    Perpendicular,
    /// Direction of travel lies in the image plane.
    Parallel,
}

impl TrajectoryShape {
    pub fn name(self) -> &'static str {
        match self {
            TrajectoryShape::Line => "line",
            TrajectoryShape::CShape => "c_shape",
            TrajectoryShape::SShape => "s_shape",
        }
    }
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::Perpendicular => "perpendicular",
            Orientation::Parallel => "parallel",
        }
    }
}

/// Gaussian per-frame pose jitter, applied in the image-plane frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseNoise {
    pub translation_mm: f64,
    pub rotation_rad: f64,
}

/// Where the sweep starts in world space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Placement {
    pub origin: [f64; 3],
    /// Initial direction of travel, radians about world z.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    pub orientation: Orientation,
    pub length_mm: f64,
    pub n_frames: usize,
    #[serde(default)]
    pub noise: PoseNoise,
    #[serde(default)]
    pub placement: Placement,
}

/// Metadata stored with simulated scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub shape: TrajectoryShape,
    pub orientation: Orientation,
    pub length_mm: f64,
}

/// Heading and position after travelling `ds` along an arc of curvature `k`.
fn advance(x: f64, y: f64, heading: f64, k: f64, ds: f64) -> (f64, f64, f64) {
    if k.abs() < 1e-12 {
        return (x + ds * heading.cos(), y + ds * heading.sin(), heading);
    }
    let h1 = heading + k * ds;
    (
        x + (h1.sin() - heading.sin()) / k,
        y + (heading.cos() - h1.cos()) / k,
        h1,
    )
}

/// Planar state (x, y, heading) at arc length `s` along the sweep.
fn planar_state(shape: TrajectoryShape, length: f64, heading0: f64, s: f64) -> (f64, f64, f64) {
    match shape {
        TrajectoryShape::Line => advance(0.0, 0.0, heading0, 0.0, s),
        TrajectoryShape::CShape => advance(0.0, 0.0, heading0, C_SHAPE_TURN / length, s),
        TrajectoryShape::SShape => {
            let half = length / 2.0;
            let k = S_SHAPE_TURN / half;
            if s <= half {
                advance(0.0, 0.0, heading0, k, s)
            } else {
                let (x, y, h) = advance(0.0, 0.0, heading0, k, half);
                advance(x, y, h, -k, s - half)
            }
        }
    }
}

/// Image-plane axes in world space before the heading rotation.
/// Columns are the image x (width), image y (depth) and image normal.
fn base_orientation(orientation: Orientation) -> Matrix3<f64> {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    match orientation {
        Orientation::Perpendicular => Matrix3::from_columns(&[-y, -z, x]),
        Orientation::Parallel => Matrix3::from_columns(&[x, -z, y]),
    }
}

fn small_random_transform<R: Rng>(rng: &mut R, noise: &PoseNoise) -> RigidTransform {
    if noise.translation_mm == 0.0 && noise.rotation_rad == 0.0 {
        return RigidTransform::identity();
    }
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    let rot = Vector3::new(g(), g(), g()) * noise.rotation_rad;
    let t = Vector3::new(g(), g(), g()) * noise.translation_mm;
    let angle = rot.norm();
    if angle == 0.0 {
        RigidTransform::from_translation(t)
    } else {
        RigidTransform::from_axis_angle(&rot, angle, t)
    }
}

/// World<-image pose of the image plane at arc length `s`.
fn plane_pose(spec: &TrajectorySpec, s: f64) -> RigidTransform {
    let (x, y, heading) = planar_state(spec.shape, spec.length_mm, spec.placement.heading, s);
    let rot = RigidTransform::rotation_z(heading).rotation() * base_orientation(spec.orientation);
    let o = spec.placement.origin;
    RigidTransform::new(rot, Vector3::new(o[0] + x, o[1] + y, o[2]))
        .expect("heading rotation times a proper base frame is proper")
}

/// Per-frame world<-tool poses for a sweep whose image plane follows `spec`.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    calib: &RigidTransform,
    seed: u64,
) -> Result<Vec<RigidTransform>, SimError> {
    if spec.n_frames < 2 {
        return Err(SimError::TooFewFrames(spec.n_frames));
    }
    if !(spec.length_mm > 0.0 && spec.length_mm.is_finite()) {
        return Err(SimError::InvalidLength(spec.length_mm));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = spec.length_mm / (spec.n_frames - 1) as f64;
    let tool_from_image = calib.inverse();
    Ok((0..spec.n_frames)
        .map(|k| {
            let jitter = small_random_transform(&mut rng, &spec.noise);
            plane_pose(spec, k as f64 * step)
                .compose(&jitter)
                .compose(&tool_from_image)
        })
        .collect())
}

/// Fixed calibration with a 10 degree rotation about a seeded axis and a
/// 20 mm offset in a seeded direction.
pub fn default_calibration(seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n: f64 = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let axis = unit();
    let offset = unit() * 20.0;
    RigidTransform::from_axis_angle(&axis, 10f64.to_radians(), offset)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    frequency: Vector3<f64>,
    phase: f64,
    amplitude: f64,
}

/// Smooth random texture: a squashed sum of random 3D sinusoids.
///
/// Wave numbers are drawn with magnitude in `[2, 4] / smoothness`, so the
/// intensity correlation along any direction falls below 0.5 within one
/// `smoothness` length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralVolume {
    pub seed: u64,
    pub band_count: usize,
    pub smoothness: f64,
    waves: Vec<Wave>,
    inv_sigma: f64,
}

impl ProceduralVolume {
    pub fn new(seed: u64, band_count: usize, smoothness: f64) -> Result<Self, SimError> {
        if band_count == 0 {
            return Err(SimError::InvalidConfig("band_count must be > 0".into()));
        }
        if !(smoothness > 0.0 && smoothness.is_finite()) {
            return Err(SimError::InvalidConfig(format!("smoothness {smoothness}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let waves: Vec<Wave> = (0..band_count)
            .map(|_| {
                let dir = loop {
                    let d = Vector3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    );
                    if d.norm() > 1e-6 {
                        break d.normalize();
                    }
                };
                let magnitude = rng.random_range(2.0..4.0) / smoothness;
                Wave {
                    frequency: dir * magnitude,
                    phase: rng.random_range(0.0..TAU),
                    amplitude: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let var: f64 = waves.iter().map(|w| w.amplitude * w.amplitude / 2.0).sum();
        Ok(Self {
            seed,
            band_count,
            smoothness,
            waves,
            inv_sigma: 1.0 / var.sqrt(),
        })
    }

    fn squash(&self, raw: f64) -> f32 {
        ((0.5 + 0.5 * (raw * self.inv_sigma).tanh()) as f32).clamp(0.0, 1.0)
    }

    /// Intensity in `[0, 1]` at a world position (mm).
    pub fn sample(&self, p: &Point3<f64>) -> f32 {
        let raw: f64 = self
            .waves
            .iter()
            .map(|w| w.amplitude * (w.frequency.dot(&p.coords) + w.phase).cos())
            .sum();
        self.squash(raw)
    }
}

/// Renders the `height x width` slice seen by a probe at `world_from_tool`:
/// pixel (u, v) samples the volume at `world_from_tool * calib * (u s, v s, 0)`.
pub fn render_frame(
    volume: &ProceduralVolume,
    world_from_tool: &RigidTransform,
    calib: &RigidTransform,
    width: usize,
    height: usize,
    spacing: f64,
) -> Vec<f32> {
    let world_from_image = world_from_tool.compose(calib);
    let r = world_from_image.rotation();
    let origin = world_from_image.translation();
    let ax: Vector3<f64> = r.column(0) * spacing;
    let ay: Vector3<f64> = r.column(1) * spacing;

    // cos(phi0 + u a + v b) = Re(exp(i(phi0 + v b)) * exp(i u a)), with each
    // factor evaluated directly rather than by recurrence.
    let n = volume.waves.len();
    let mut cu = vec![0.0; n * width];
    let mut su = vec![0.0; n * width];
    for (k, w) in volume.waves.iter().enumerate() {
        let a = w.frequency.dot(&ax);
        for u in 0..width {
            let (s, c) = (a * u as f64).sin_cos();
            cu[k * width + u] = c * w.amplitude;
            su[k * width + u] = s * w.amplitude;
        }
    }
    let mut pixels = vec![0f32; width * height];
    let mut row = vec![0.0f64; width];
    for v in 0..height {
        row.iter_mut().for_each(|x| *x = 0.0);
        for (k, w) in volume.waves.iter().enumerate() {
            let phase = w.frequency.dot(origin) + w.phase + w.frequency.dot(&ay) * v as f64;
            let (zi, zr) = phase.sin_cos();
            let (c, s) = (&cu[k * width..(k + 1) * width], &su[k * width..(k + 1) * width]);
            for u in 0..width {
                row[u] += zr * c[u] - zi * s[u];
            }
        }
        for u in 0..width {
            pixels[v * width + u] = volume.squash(row[u]);
        }
    }
    pixels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub scans_per_subject: usize,
    /// Cycled over the scans of each subject.
    pub specs: Vec<TrajectorySpec>,
    /// When set, each scan's travel length is drawn uniformly from this range.
    pub length_range_mm: Option<[f64; 2]>,
    pub height: usize,
    pub width: usize,
    pub pixel_spacing: f64,
    pub fps: f64,
    pub band_count: usize,
    pub smoothness_mm: f64,
    pub seed: u64,
}

impl DatasetConfig {
    /// One spec per shape and orientation.
    pub fn standard_specs(length_mm: f64, n_frames: usize) -> Vec<TrajectorySpec> {
        let mut out = Vec::new();
        for orientation in [Orientation::Perpendicular, Orientation::Parallel] {
            for shape in [TrajectoryShape::Line, TrajectoryShape::CShape, TrajectoryShape::SShape] {
                out.push(TrajectorySpec {
                    shape,
                    orientation,
                    length_mm,
                    n_frames,
                    noise: PoseNoise::default(),
                    placement: Placement::default(),
                });
            }
        }
        out
    }

    /// Subject and scan counts of the volunteer study: 38 forearms with the
    /// three shapes in two orientations each (228 scans).
    pub fn full_layout(seed: u64) -> Self {
        Self {
            n_subjects: 38,
            scans_per_subject: 6,
            seed,
            ..Self::default()
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_subjects: 5,
            scans_per_subject: 6,
            specs: Self::standard_specs(150.0, 100),
            length_range_mm: Some([100.0, 200.0]),
            height: 64,
            width: 80,
            pixel_spacing: 0.5,
            fps: DEFAULT_FPS,
            band_count: 64,
            smoothness_mm: 3.0,
            seed: 0,
        }
    }
}

fn validate_config(cfg: &DatasetConfig) -> Result<(), SimError> {
    let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
    if cfg.n_subjects == 0 || cfg.scans_per_subject == 0 {
        return bad("need at least one subject and one scan per subject");
    }
    if cfg.specs.is_empty() {
        return bad("no trajectory specs");
    }
    if cfg.height == 0 || cfg.width == 0 {
        return bad("zero frame dimension");
    }
    if !(cfg.pixel_spacing > 0.0) || !(cfg.fps > 0.0) {
        return bad("pixel spacing and fps must be positive");
    }
    if let Some([lo, hi]) = cfg.length_range_mm {
        if !(lo > 0.0 && hi >= lo) {
            return bad("length range must satisfy 0 < lo <= hi");
        }
    }
    Ok(())
}

/// Calibration shared by every scan of a dataset generated with `seed`.
pub fn dataset_calibration(seed: u64) -> RigidTransform {
    default_calibration(derive_seed(seed, &[0xCA1B]))
}

/// Generates one scan per (subject, scan index). Each subject gets its own
/// volume; sweeps start at seeded positions and headings.
pub fn simulate_dataset(cfg: &DatasetConfig, exec: Execution) -> Result<Vec<Scan>, SimError> {
    validate_config(cfg)?;
    let calib = dataset_calibration(cfg.seed);
    let mut scans = Vec::with_capacity(cfg.n_subjects * cfg.scans_per_subject);
    for subject in 0..cfg.n_subjects {
        let volume = ProceduralVolume::new(
            derive_seed(cfg.seed, &[1, subject as u64]),
            cfg.band_count,
            cfg.smoothness_mm,
        )?;
        for k in 0..cfg.scans_per_subject {
            let scan_seed = derive_seed(cfg.seed, &[2, subject as u64, k as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(scan_seed);
            let mut spec = cfg.specs[k % cfg.specs.len()].clone();
            if let Some([lo, hi]) = cfg.length_range_mm {
                spec.length_mm = if hi > lo { rng.random_range(lo..hi) } else { lo };
            }
            spec.placement = Placement {
                origin: [
                    spec.placement.origin[0] + rng.random_range(-40.0..40.0),
                    spec.placement.origin[1] + rng.random_range(-40.0..40.0),
                    spec.placement.origin[2] + rng.random_range(-10.0..10.0),
                ],
                heading: spec.placement.heading + rng.random_range(0.0..TAU),
            };
            let poses = generate_trajectory(&spec, &calib, rng.random())?;
            let scan = simulate_scan(&spec, &volume, &calib, poses, cfg, subject, k, exec);
            scans.push(scan);
        }
    }
    Ok(scans)
}

#[allow(clippy::too_many_arguments)]
fn simulate_scan(
    spec: &TrajectorySpec,
    volume: &ProceduralVolume,
    calib: &RigidTransform,
    poses: Vec<RigidTransform>,
    cfg: &DatasetConfig,
    subject: usize,
    k: usize,
    exec: Execution,
) -> Scan {
    let pixels = exec.map(&poses, |pose| {
        render_frame(volume, pose, calib, cfg.width, cfg.height, cfg.pixel_spacing)
    });
    let frames = pixels
        .into_iter()
        .enumerate()
        .map(|(index, pixels)| Frame {
            index,
            timestamp: index as f64 / cfg.fps,
            pixels,
        })
        .collect();
    Scan {
        subject_id: format!("subj{subject:02}"),
        scan_label: format!(
            "{k:02}_{}_{}",
            spec.shape.name(),
            spec.orientation.name()
        ),
        height: cfg.height,
        width: cfg.width,
        fps: cfg.fps,
        pixel_spacing: cfg.pixel_spacing,
        calib: *calib,
        frames,
        world_from_tool: poses,
        acquisition: Some(Acquisition {
            shape: spec.shape,
            orientation: spec.orientation,
            length_mm: spec.length_mm,
        }),
    }
}
