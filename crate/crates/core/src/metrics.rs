//! Reconstruction metrics: per-sequence frame error, accumulated pixel
//! error, swept-volume Dice overlap and final drift.
//!
//! Chains are lists of `T_{ref<-k}` (tool space of a common reference frame)
//! for the localized frames of one scan, as produced by
//! [`crate::reconstruct::reconstruct`].

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Scan;
use crate::exec::Execution;
use crate::geometry::{corner_points, GeometryError, PointSet, RigidTransform};
use crate::reconstruct::{reconstruct, Predictor, ReconstructError, ReconstructedScan};
use crate::simulator::Orientation;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{what}: chains differ in length ({pred} vs {gt})")]
    LengthMismatch {
        what: &'static str,
        pred: usize,
        gt: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("swept volume is degenerate (zero voxels)")]
    DegenerateVolume,
    #[error("invalid voxel size {0}")]
    InvalidVoxel(f64),
    #[error("voxel grid of {0} cells exceeds the limit")]
    GridTooLarge(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
}

/// Upper bound on voxel-grid cells, about 256 MiB of occupancy flags.
pub const MAX_VOXELS: usize = 1 << 27;

fn check_chains(what: &'static str, pred: &[RigidTransform], gt: &[RigidTransform]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            what,
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty(what));
    }
    Ok(())
}

/// Mean distance between `pred * calib * p` and `gt * calib * p` over `points`.
fn mean_point_distance(pred: &RigidTransform, gt: &RigidTransform, calib: &RigidTransform, points: &PointSet) -> f64 {
    let a = pred.compose(calib);
    let b = gt.compose(calib);
    points
        .points
        .iter()
        .map(|p| (a.apply_point(p) - b.apply_point(p)).norm())
        .sum::<f64>()
        / points.len() as f64
}

/// Mean corner distance between predicted and ground-truth placements of a
/// frame, in tool space.
pub fn frame_error(pred: &RigidTransform, gt: &RigidTransform, calib: &RigidTransform, corners: &PointSet) -> f64 {
    mean_point_distance(pred, gt, calib, corners)
}

/// Image-space pixel positions every `stride` pixels along each axis; the
/// last row and column are always included. `stride = 1` is the full grid.
pub fn pixel_grid(width: usize, height: usize, spacing: f64, stride: usize) -> Result<PointSet, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::InvalidDimensions { width, height });
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(GeometryError::InvalidSpacing(spacing));
    }
    let axis = |n: usize| {
        let mut v: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        if *v.last().unwrap() != n - 1 {
            v.push(n - 1);
        }
        v
    };
    let (xs, ys) = (axis(width), axis(height));
    let points = ys
        .iter()
        .flat_map(|&v| xs.iter().map(move |&u| Point3::new(u as f64 * spacing, v as f64 * spacing, 0.0)))
        .collect();
    Ok(PointSet::new(points))
}

/// Pixel distance between predicted and ground-truth chains, pooled over all
/// (frame, pixel) pairs.
pub fn accumulated_error(
    pred_chain: &[RigidTransform],
    gt_chain: &[RigidTransform],
    calib: &RigidTransform,
    grid: &PointSet,
) -> Result<f64, MetricsError> {
    check_chains("accumulated error", pred_chain, gt_chain)?;
    if grid.is_empty() {
        return Err(MetricsError::Empty("pixel grid"));
    }
    let total: f64 = pred_chain
        .iter()
        .zip(gt_chain)
        .map(|(p, g)| mean_point_distance(p, g, calib, grid))
        .sum();
    Ok(total / pred_chain.len() as f64)
}

/// [`frame_error`] at the last frame of the chains.
pub fn final_drift(
    pred_chain: &[RigidTransform],
    gt_chain: &[RigidTransform],
    calib: &RigidTransform,
    corners: &PointSet,
) -> Result<f64, MetricsError> {
    check_chains("final drift", pred_chain, gt_chain)?;
    Ok(frame_error(
        pred_chain.last().unwrap(),
        gt_chain.last().unwrap(),
        calib,
        corners,
    ))
}

/// Eight vertices: the four corners of one frame, then the same corners of
/// the next frame. Corner order is `(0,0), (W,0), (0,H), (W,H)`, so vertex
/// `v` has bit 0 = width side, bit 1 = height side, bit 2 = next frame.
pub type Hexahedron = [Point3<f64>; 8];

/// Five-tetrahedron split: one corner tetrahedron per odd-parity vertex
/// around the central tetrahedron of the even-parity vertices.
pub const HEX_TETRAHEDRA: [[usize; 4]; 5] = [
    [0, 3, 5, 6],
    [1, 0, 3, 5],
    [2, 0, 3, 6],
    [4, 0, 5, 6],
    [7, 3, 5, 6],
];

/// Hexahedra swept between consecutive frames of a chain.
pub fn swept_hexahedra(chain: &[RigidTransform], calib: &RigidTransform, corners: &PointSet) -> Vec<Hexahedron> {
    let placed: Vec<PointSet> = chain.iter().map(|t| t.compose(calib).apply(corners)).collect();
    placed
        .windows(2)
        .map(|w| std::array::from_fn(|v| w[v / 4].points[v % 4]))
        .collect()
}

/// Axis-aligned grid; voxel `(i, j, k)` has its center at
/// `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3<f64>,
    pub voxel: f64,
    pub dims: [usize; 3],
}

impl VoxelGrid {
    /// Smallest grid covering every vertex of `hexes`.
    pub fn covering<'a, I>(hexes: I, voxel: f64) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = &'a Hexahedron>,
    {
        if !(voxel > 0.0 && voxel.is_finite()) {
            return Err(MetricsError::InvalidVoxel(voxel));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for h in hexes {
            for p in h {
                lo = lo.inf(&p.coords);
                hi = hi.sup(&p.coords);
            }
        }
        if !lo.iter().all(|v| v.is_finite()) {
            return Err(MetricsError::Empty("hexahedra"));
        }
        let dims: [usize; 3] = std::array::from_fn(|a| (((hi[a] - lo[a]) / voxel).ceil() as usize).max(1));
        let cells = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match cells {
            Some(n) if n <= MAX_VOXELS => Ok(Self {
                origin: Point3::from(lo),
                voxel,
                dims,
            }),
            _ => Err(MetricsError::GridTooLarge(cells.unwrap_or(usize::MAX))),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin.coords + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel
    }

    /// Index range of voxel centers within `[lo, hi]` along axis `a`.
    fn span(&self, a: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let o = self.origin[a];
        let start = ((lo - o) / self.voxel - 0.5).ceil().max(0.0) as usize;
        let end = (((hi - o) / self.voxel - 0.5).floor() + 1.0).max(0.0) as usize;
        start.min(self.dims[a])..end.min(self.dims[a])
    }

    /// Flags every voxel whose center lies in one of the tetrahedra of `hexes`.
    pub fn rasterize(&self, hexes: &[Hexahedron]) -> Vec<bool> {
        let mut occ = vec![false; self.len()];
        for h in hexes {
            for tet in HEX_TETRAHEDRA {
                self.fill_tetrahedron(&tet.map(|v| h[v].coords), &mut occ);
            }
        }
        occ
    }

    fn fill_tetrahedron(&self, v: &[Vector3<f64>; 4], occ: &mut [bool]) {
        let m = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
        let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let det = m.determinant();
        if scale == 0.0 || det.abs() <= 1e-12 * scale.powi(3) {
            return;
        }
        let inv = m.try_inverse().expect("non-singular tetrahedron");
        let lo = v.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
        let hi = v.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        const EPS: f64 = 1e-12;
        let (ri, rj, rk) = (self.span(0, lo.x, hi.x), self.span(1, lo.y, hi.y), self.span(2, lo.z, hi.z));
        for k in rk {
            for j in rj.clone() {
                for i in ri.clone() {
                    let b = inv * (self.center(i, j, k) - v[0]);
                    if b.x >= -EPS && b.y >= -EPS && b.z >= -EPS && b.x + b.y + b.z <= 1.0 + EPS {
                        occ[(k * self.dims[1] + j) * self.dims[0] + i] = true;
                    }
                }
            }
        }
    }
}

/// `2 |A n B| / (|A| + |B|)` of two voxelized hexahedron unions on a
/// shared grid covering both.
pub fn dice_of_hexahedra(a: &[Hexahedron], b: &[Hexahedron], voxel: f64) -> Result<f64, MetricsError> {
    let grid = VoxelGrid::covering(a.iter().chain(b), voxel)?;
    let (oa, ob) = (grid.rasterize(a), grid.rasterize(b));
    let na = oa.iter().filter(|&&x| x).count();
    let nb = ob.iter().filter(|&&x| x).count();
    if na + nb == 0 {
        return Err(MetricsError::DegenerateVolume);
    }
    let both = oa.iter().zip(&ob).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Dice overlap of the volumes swept by the predicted and ground-truth
/// chains. Both are expressed in the image coordinates of the reference
/// frame before voxelization. Fails with [`MetricsError::DegenerateVolume`]
/// when the ground-truth sweep occupies no voxel (for example when the image
/// plane contains the direction of travel).
pub fn volume_dice(
    pred_chain: &[RigidTransform],
    gt_chain: &[RigidTransform],
    calib: &RigidTransform,
    width: usize,
    height: usize,
    spacing: f64,
    voxel_mm: f64,
) -> Result<f64, MetricsError> {
    check_chains("volume dice", pred_chain, gt_chain)?;
    if pred_chain.len() < 2 {
        return Err(MetricsError::Empty("volume dice needs two frames"));
    }
    let corners = corner_points(width, height, spacing)?;
    let to_image = calib.inverse();
    let local = |c: &[RigidTransform]| -> Vec<RigidTransform> { c.iter().map(|t| to_image.compose(t)).collect() };
    let a = swept_hexahedra(&local(pred_chain), calib, &corners);
    let b = swept_hexahedra(&local(gt_chain), calib, &corners);
    let grid = VoxelGrid::covering(a.iter().chain(&b), voxel_mm)?;
    let ob = grid.rasterize(&b);
    let nb = ob.iter().filter(|&&x| x).count();
    if nb == 0 {
        return Err(MetricsError::DegenerateVolume);
    }
    let oa = grid.rasterize(&a);
    let na = oa.iter().filter(|&&x| x).count();
    let both = oa.iter().zip(&ob).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub frame_err_mm: f64,
    pub acc_err_mm: f64,
    /// `None` when the swept volume is degenerate or Dice was not requested.
    pub dice: Option<f64>,
    pub drift_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frame_err_mm: Stat,
    pub acc_err_mm: Stat,
    pub drift_mm: Stat,
    pub dice: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_ref: String,
    pub per_scan: BTreeMap<String, ScanMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn from_scans(config_ref: impl Into<String>, per_scan: BTreeMap<String, ScanMetrics>) -> Result<Self, MetricsError> {
        let col = |f: fn(&ScanMetrics) -> Option<f64>| -> Vec<f64> { per_scan.values().filter_map(f).collect() };
        let need = |s: Option<Stat>| s.ok_or(MetricsError::Empty("metrics report"));
        let aggregate = Aggregate {
            frame_err_mm: need(Stat::of(&col(|m| Some(m.frame_err_mm))))?,
            acc_err_mm: need(Stat::of(&col(|m| Some(m.acc_err_mm))))?,
            drift_mm: need(Stat::of(&col(|m| Some(m.drift_mm))))?,
            dice: Stat::of(&col(|m| m.dice)),
        };
        Ok(Self {
            config_ref: config_ref.into(),
            per_scan,
            aggregate,
        })
    }
}

/// Which scans receive a Dice value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceFilter {
    /// Every scan with a non-degenerate swept volume.
    #[default]
    All,
    /// Only scans acquired with the image plane across the direction of travel.
    PerpendicularOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// Pixel stride of the accumulated-error grid.
    pub pixel_stride: usize,
    pub voxel_mm: f64,
    pub dice: DiceFilter,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            pixel_stride: 4,
            voxel_mm: 1.0,
            dice: DiceFilter::All,
        }
    }
}

/// All four metrics of one reconstructed scan.
pub fn evaluate_reconstruction(rec: &ReconstructedScan, scan: &Scan, opts: &MetricOptions) -> Result<ScanMetrics, MetricsError> {
    let corners = corner_points(scan.width, scan.height, scan.pixel_spacing)?;
    let grid = pixel_grid(scan.width, scan.height, scan.pixel_spacing, opts.pixel_stride)?;
    let gt_chain = rec.ground_truth_chain(scan);
    let gt_steps = rec.ground_truth_steps(scan);
    let frame_errs: Vec<f64> = rec
        .step_predictions
        .iter()
        .zip(&gt_steps)
        .map(|(p, g)| frame_error(p, g, &scan.calib, &corners))
        .collect();
    let frame_err_mm = Stat::of(&frame_errs).ok_or(MetricsError::Empty("chained sequences"))?.mean;
    let acc_err_mm = accumulated_error(&rec.transforms_from_ref, &gt_chain, &scan.calib, &grid)?;
    let drift_mm = final_drift(&rec.transforms_from_ref, &gt_chain, &scan.calib, &corners)?;
    let wanted = match opts.dice {
        DiceFilter::All => true,
        DiceFilter::PerpendicularOnly => scan
            .acquisition
            .as_ref()
            .is_some_and(|a| a.orientation == Orientation::Perpendicular),
        DiceFilter::None => false,
    };
    let dice = if wanted {
        match volume_dice(
            &rec.transforms_from_ref,
            &gt_chain,
            &scan.calib,
            scan.width,
            scan.height,
            scan.pixel_spacing,
            opts.voxel_mm,
        ) {
            Ok(d) => Some(d),
            Err(MetricsError::DegenerateVolume) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(ScanMetrics {
        frame_err_mm,
        acc_err_mm,
        dice,
        drift_mm,
    })
}

/// Reconstructs and evaluates every scan. Scans are processed in parallel
/// when `exec` allows; each reconstruction then runs sequentially.
pub fn evaluate_dataset<P: Predictor + ?Sized>(
    predictor: &P,
    scans: &[&Scan],
    opts: &MetricOptions,
    exec: Execution,
) -> Result<(MetricsReport, Vec<ReconstructedScan>), MetricsError> {
    let results = exec.try_map_range(scans.len(), |n| -> Result<_, MetricsError> {
        let scan = scans[n];
        let rec = reconstruct(predictor, &scan.id(), scan, Execution::Sequential)?;
        let m = evaluate_reconstruction(&rec, scan, opts)?;
        Ok((rec, m))
    })?;
    let mut per_scan = BTreeMap::new();
    let mut recs = Vec::with_capacity(results.len());
    for (rec, m) in results {
        per_scan.insert(rec.scan_ref.clone(), m);
        recs.push(rec);
    }
    Ok((MetricsReport::from_scans(predictor.describe(), per_scan)?, recs))
}

/// Accumulated error of every chain prefix `[0, n]`, `n >= 1`.
pub fn prefix_accumulated_errors(
    pred_chain: &[RigidTransform],
    gt_chain: &[RigidTransform],
    calib: &RigidTransform,
    grid: &PointSet,
) -> Result<Vec<f64>, MetricsError> {
    check_chains("prefix accumulated error", pred_chain, gt_chain)?;
    let per_frame: Vec<f64> = pred_chain
        .iter()
        .zip(gt_chain)
        .map(|(p, g)| mean_point_distance(p, g, calib, grid))
        .collect();
    let mut sum = per_frame[0];
    Ok(per_frame[1..]
        .iter()
        .enumerate()
        .map(|(n, e)| {
            sum += e;
            sum / (n + 2) as f64
        })
        .collect())
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
            e += 1;
        }
        let avg = (s + e) as f64 / 2.0 + 1.0;
        for &i in &idx[s..=e] {
            r[i] = avg;
        }
        s = e + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
