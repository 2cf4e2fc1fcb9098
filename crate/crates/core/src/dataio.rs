//! On-disk formats: scans, dataset splits, checkpoints, metric reports and
//! exported trajectories.
//!
//! A scan is a directory holding
//!
//! * `meta.json` - dimensions, fps, spacing, calibration (4x4 row-major),
//!   identifiers, format version and SHA-256 digests of the payloads;
//! * `frames.f32` - little-endian float32 pixels, frame-major, row-major
//!   within a frame;
//! * `poses.f64` - one 4x4 row-major little-endian float64 world<-tool
//!   matrix per frame.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeometryError, RigidTransform};
use crate::metrics::MetricsReport;
use crate::model::{AdamState, ModelParams, ModelSpec, TrainConfig, TrainedModel};
use crate::reconstruct::ReconstructedScan;
use crate::sampling::TaskSet;
use crate::simulator::Acquisition;

pub const SCAN_FORMAT_VERSION: &str = "1.0";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FSCKPT\0\0";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("unsupported format version {found} (supported major {supported})")]
    Version { found: String, supported: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("cannot split {subjects} subjects into {splits} non-empty splits")]
    TooFewSubjects { subjects: usize, splits: usize },
    #[error("split ratios must be positive and finite")]
    InvalidRatios,
    #[error("invalid transform: {0}")]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// One B-mode frame; `pixels` is row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub subject_id: String,
    pub scan_label: String,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// mm per pixel, isotropic.
    pub pixel_spacing: f64,
    /// Image space to tool space.
    pub calib: RigidTransform,
    pub frames: Vec<Frame>,
    pub world_from_tool: Vec<RigidTransform>,
    pub acquisition: Option<Acquisition>,
}

impl Scan {
    pub fn id(&self) -> String {
        format!("{}-{}", self.subject_id, self.scan_label)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidScan(m));
        if self.frames.len() < 2 {
            return bad(format!("needs at least 2 frames, has {}", self.frames.len()));
        }
        if self.frames.len() != self.world_from_tool.len() {
            return Err(DataError::Shape(format!(
                "{} frames but {} poses",
                self.frames.len(),
                self.world_from_tool.len()
            )));
        }
        if self.height == 0 || self.width == 0 {
            return bad("zero frame dimension".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {}", self.fps));
        }
        if !(self.pixel_spacing > 0.0 && self.pixel_spacing.is_finite()) {
            return bad(format!("pixel spacing {}", self.pixel_spacing));
        }
        let npx = self.height * self.width;
        for (k, f) in self.frames.iter().enumerate() {
            if f.pixels.len() != npx {
                return Err(DataError::Shape(format!(
                    "frame {k} has {} pixels, expected {npx}",
                    f.pixels.len()
                )));
            }
            if k > 0 && f.index <= self.frames[k - 1].index {
                return bad(format!("frame indices not increasing at {k}"));
            }
            if f.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("frame {k} has intensities outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanMeta {
    format_version: String,
    subject_id: String,
    scan_label: String,
    n_frames: usize,
    height: usize,
    width: usize,
    fps: f64,
    pixel_spacing: f64,
    calib: RigidTransform,
    frame_indices: Vec<usize>,
    #[serde(default)]
    acquisition: Option<Acquisition>,
    frames_sha256: String,
    poses_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_major(found: &str, supported: &str) -> Result<(), DataError> {
    let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
    if major(found) != major(supported) {
        return Err(DataError::Version {
            found: found.to_string(),
            supported: supported.to_string(),
        });
    }
    Ok(())
}

pub fn write_scan(scan: &Scan, dir: &Path) -> Result<(), DataError> {
    scan.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut frames = Vec::with_capacity(scan.len() * scan.height * scan.width * 4);
    for f in &scan.frames {
        for v in &f.pixels {
            frames.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut poses = Vec::with_capacity(scan.len() * 128);
    for p in &scan.world_from_tool {
        poses.extend_from_slice(&p.to_le_bytes());
    }
    let meta = ScanMeta {
        format_version: SCAN_FORMAT_VERSION.into(),
        subject_id: scan.subject_id.clone(),
        scan_label: scan.scan_label.clone(),
        n_frames: scan.len(),
        height: scan.height,
        width: scan.width,
        fps: scan.fps,
        pixel_spacing: scan.pixel_spacing,
        calib: scan.calib,
        frame_indices: scan.frames.iter().map(|f| f.index).collect(),
        acquisition: scan.acquisition.clone(),
        frames_sha256: sha256_hex(&frames),
        poses_sha256: sha256_hex(&poses),
    };
    let p = dir.join("frames.f32");
    fs::write(&p, &frames).map_err(io_err(&p))?;
    let p = dir.join("poses.f64");
    fs::write(&p, &poses).map_err(io_err(&p))?;
    write_json(&dir.join("meta.json"), &meta)
}

pub fn read_scan(dir: &Path) -> Result<Scan, DataError> {
    let meta: ScanMeta = read_json(&dir.join("meta.json"))?;
    check_major(&meta.format_version, SCAN_FORMAT_VERSION)?;
    if meta.frame_indices.len() != meta.n_frames {
        return Err(DataError::Shape(format!(
            "meta lists {} frame indices for {} frames",
            meta.frame_indices.len(),
            meta.n_frames
        )));
    }
    let npx = meta.height * meta.width;

    let fp = dir.join("frames.f32");
    let frames_raw = fs::read(&fp).map_err(io_err(&fp))?;
    if frames_raw.len() != meta.n_frames * npx * 4 {
        return Err(DataError::Shape(format!(
            "frames.f32 holds {} bytes, metadata implies {} frames of {}x{} ({} bytes)",
            frames_raw.len(),
            meta.n_frames,
            meta.height,
            meta.width,
            meta.n_frames * npx * 4
        )));
    }
    let pp = dir.join("poses.f64");
    let poses_raw = fs::read(&pp).map_err(io_err(&pp))?;
    if poses_raw.len() != meta.n_frames * 128 {
        return Err(DataError::Shape(format!(
            "poses.f64 holds {} bytes, expected {}",
            poses_raw.len(),
            meta.n_frames * 128
        )));
    }
    if sha256_hex(&frames_raw) != meta.frames_sha256 {
        return Err(DataError::Checksum(fp));
    }
    if sha256_hex(&poses_raw) != meta.poses_sha256 {
        return Err(DataError::Checksum(pp));
    }

    let frames = if npx == 0 {
        Vec::new()
    } else {
        frames_raw
            .chunks_exact(npx * 4)
            .zip(&meta.frame_indices)
            .map(|(chunk, &index)| Frame {
                index,
                timestamp: index as f64 / meta.fps,
                pixels: chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect()
    };
    let world_from_tool = poses_raw
        .chunks_exact(128)
        .map(RigidTransform::from_le_bytes)
        .collect::<Result<Vec<_>, _>>()?;

    let scan = Scan {
        subject_id: meta.subject_id,
        scan_label: meta.scan_label,
        height: meta.height,
        width: meta.width,
        fps: meta.fps,
        pixel_spacing: meta.pixel_spacing,
        calib: meta.calib,
        frames,
        world_from_tool,
        acquisition: meta.acquisition,
    };
    scan.validate()?;
    Ok(scan)
}

/// Writes scans under `dir/scans/<scan id>/` plus an index `dir/dataset.json`.
pub fn write_dataset(dir: &Path, scans: &[Scan]) -> Result<(), DataError> {
    let root = dir.join("scans");
    for s in scans {
        write_scan(s, &root.join(s.id()))?;
    }
    let ids: Vec<String> = scans.iter().map(Scan::id).collect();
    write_json(&dir.join("dataset.json"), &ids)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scan>, DataError> {
    let ids: Vec<String> = read_json(&dir.join("dataset.json"))?;
    ids.iter()
        .map(|id| read_scan(&dir.join("scans").join(id)))
        .collect()
}

/// Scan identifiers grouped into subject-disjoint partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn select<'a>(&self, part: SplitPart, scans: &'a [Scan]) -> Vec<&'a Scan> {
        let ids: BTreeSet<&str> = self.part(part).iter().map(String::as_str).collect();
        scans.iter().filter(|s| ids.contains(s.id().as_str())).collect()
    }

    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

/// Splits `(scan_id, subject_id)` pairs by subject into train/validation/test
/// with subject counts as close to `ratios` as possible (largest remainder,
/// every split non-empty). Deterministic for a given seed.
pub fn split_dataset<'a, I>(scans: I, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, DataError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(DataError::InvalidRatios);
    }
    let mut by_subject: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (scan, subject) in scans {
        by_subject.entry(subject).or_default().push(scan);
    }
    let n = by_subject.len();
    if n < 3 {
        return Err(DataError::TooFewSubjects {
            subjects: n,
            splits: 3,
        });
    }
    let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).max(1)).collect();
    while counts.iter().sum::<usize>() > n {
        // Take from the split furthest above its exact share.
        let k = (0..3)
            .filter(|&k| counts[k] > 1)
            .max_by(|&a, &b| (counts[a] as f64 - exact[a]).total_cmp(&(counts[b] as f64 - exact[b])))
            .unwrap();
        counts[k] -= 1;
    }
    while counts.iter().sum::<usize>() < n {
        let k = (0..3)
            .max_by(|&a, &b| {
                (exact[a] - counts[a] as f64)
                    .total_cmp(&(exact[b] - counts[b] as f64))
                    .then(b.cmp(&a))
            })
            .unwrap();
        counts[k] += 1;
    }

    let mut parts: [Vec<String>; 3] = Default::default();
    let mut cursor = 0;
    for (k, &c) in counts.iter().enumerate() {
        for s in &subjects[cursor..cursor + c] {
            parts[k].extend(by_subject[s].iter().map(|id| id.to_string()));
        }
        cursor += c;
    }
    for p in parts.iter_mut() {
        p.sort();
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

/// [`split_dataset`] over scans, keyed by [`Scan::id`] and grouped by subject.
pub fn split_scans(scans: &[Scan], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, DataError> {
    let ids: Vec<String> = scans.iter().map(Scan::id).collect();
    split_dataset(
        ids.iter().zip(scans).map(|(id, s)| (id.as_str(), s.subject_id.as_str())),
        ratios,
        seed,
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    tasks: TaskSet,
    config: TrainConfig,
    adam_step: u64,
    n_params: usize,
}

/// Binary checkpoint: magic, version (u32), header length (u64), JSON header,
/// then parameters, Adam first and second moments as little-endian f64, and
/// a trailing SHA-256 digest of everything before it.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DataError> {
    let n = ckpt.model.params.values.len();
    if ckpt.optimizer.m.len() != n || ckpt.optimizer.v.len() != n {
        return Err(DataError::Shape(format!(
            "optimizer state length {} / {} does not match {n} parameters",
            ckpt.optimizer.m.len(),
            ckpt.optimizer.v.len()
        )));
    }
    let header = CheckpointHeader {
        spec: ckpt.model.params.spec.clone(),
        tasks: ckpt.model.tasks.clone(),
        config: ckpt.config.clone(),
        adam_step: ckpt.optimizer.step,
        n_params: n,
    };
    let header = serde_json::to_vec(&header).map_err(json_err(path))?;
    let mut buf = Vec::with_capacity(64 + header.len() + 24 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for vec in [&ckpt.model.params.values, &ckpt.optimizer.m, &ckpt.optimizer.v] {
        for v in vec.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: &str| DataError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            found: version.to_string(),
            supported: CHECKPOINT_VERSION.to_string(),
        });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > body.len() {
        return Err(corrupt("header length exceeds file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..20 + hlen]).map_err(json_err(path))?;
    let n = header.n_params;
    let expected = header.spec.param_count();
    if n != expected {
        return Err(DataError::Shape(format!(
            "checkpoint stores {n} parameters but its model spec implies {expected}"
        )));
    }
    let payload = &body[20 + hlen..];
    if payload.len() != 3 * n * 8 {
        return Err(DataError::Shape(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            3 * n * 8
        )));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_values(header.spec, floats[..n].to_vec())
        .map_err(|e| DataError::Shape(e.to_string()))?;
    Ok(Checkpoint {
        model: TrainedModel {
            params,
            tasks: header.tasks,
        },
        optimizer: AdamState {
            m: floats[n..2 * n].to_vec(),
            v: floats[2 * n..].to_vec(),
            step: header.adam_step,
        },
        config: header.config,
    })
}

/// Loads a checkpoint and rejects it unless its model shape equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<Checkpoint, DataError> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model.params.spec != expected {
        return Err(DataError::Shape(format!(
            "checkpoint model {:?} does not match expected {:?}",
            ckpt.model.params.spec, expected
        )));
    }
    Ok(ckpt)
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<(), DataError> {
    write_json(path, report)
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport, DataError> {
    read_json(path)
}

/// One row per scan followed by `mean` and `std` rows; missing Dice is empty.
pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<(), DataError> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("scan_id,frame_err_mm,acc_err_mm,dice,drift_mm\n");
    for (id, m) in &report.per_scan {
        out.push_str(&format!(
            "{id},{},{},{},{}\n",
            m.frame_err_mm,
            m.acc_err_mm,
            opt(m.dice),
            m.drift_mm
        ));
    }
    let a = &report.aggregate;
    out.push_str(&format!(
        "mean,{},{},{},{}\n",
        a.frame_err_mm.mean,
        a.acc_err_mm.mean,
        opt(a.dice.map(|d| d.mean)),
        a.drift_mm.mean
    ));
    out.push_str(&format!(
        "std,{},{},{},{}\n",
        a.frame_err_mm.std,
        a.acc_err_mm.std,
        opt(a.dice.map(|d| d.std)),
        a.drift_mm.std
    ));
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    format_version: String,
    scan_ref: String,
    model_ref: String,
    interval: usize,
    frame_indices: Vec<usize>,
    transforms_from_ref: Vec<RigidTransform>,
    step_predictions: Vec<RigidTransform>,
    unlocalized: Vec<usize>,
}

/// Writes `trajectory.json` (localized poses) and `corners.csv` (one line per
/// corner per localized frame, reference-frame tool space, mm).
pub fn write_trajectory(
    rec: &ReconstructedScan,
    calib: &RigidTransform,
    corners: &crate::geometry::PointSet,
    dir: &Path,
) -> Result<(), DataError> {
    if rec.frame_indices.is_empty() {
        return Err(DataError::InvalidScan("empty reconstruction".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file = TrajectoryFile {
        format_version: SCAN_FORMAT_VERSION.into(),
        scan_ref: rec.scan_ref.clone(),
        model_ref: rec.model_ref.clone(),
        interval: rec.interval,
        frame_indices: rec.frame_indices.clone(),
        transforms_from_ref: rec.transforms_from_ref.clone(),
        step_predictions: rec.step_predictions.clone(),
        unlocalized: rec.unlocalized.clone(),
    };
    write_json(&dir.join("trajectory.json"), &file)?;
    let mut csv = String::from("frame_index,corner,x_mm,y_mm,z_mm\n");
    for (idx, t) in rec.frame_indices.iter().zip(&rec.transforms_from_ref) {
        let placed = t.compose(calib).apply(corners);
        for (c, p) in placed.points.iter().enumerate() {
            csv.push_str(&format!("{idx},{c},{},{},{}\n", p.x, p.y, p.z));
        }
    }
    let p = dir.join("corners.csv");
    fs::write(&p, csv).map_err(io_err(&p))
}

pub fn read_trajectory(dir: &Path) -> Result<ReconstructedScan, DataError> {
    let f: TrajectoryFile = read_json(&dir.join("trajectory.json"))?;
    check_major(&f.format_version, SCAN_FORMAT_VERSION)?;
    if f.frame_indices.len() != f.transforms_from_ref.len() {
        return Err(DataError::Shape("frame index / transform count mismatch".into()));
    }
    Ok(ReconstructedScan {
        scan_ref: f.scan_ref,
        model_ref: f.model_ref,
        interval: f.interval,
        frame_indices: f.frame_indices,
        transforms_from_ref: f.transforms_from_ref,
        step_predictions: f.step_predictions,
        unlocalized: f.unlocalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::testutil::random_transform;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_scan(n: usize, h: usize, w: usize, seed: u64) -> Scan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Scan {
            subject_id: "s0".into(),
            scan_label: "line_perp".into(),
            height: h,
            width: w,
            fps: 20.0,
            pixel_spacing: 0.5,
            calib: random_transform(&mut rng),
            frames: (0..n)
                .map(|i| Frame {
                    index: i,
                    timestamp: i as f64 / 20.0,
                    pixels: (0..h * w).map(|_| rng.random::<f32>()).collect(),
                })
                .collect(),
            world_from_tool: (0..n).map(|_| random_transform(&mut rng)).collect(),
            acquisition: None,
        }
    }

    #[test]
    fn scan_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scan = tiny_scan(2, 4, 4, 1);
        write_scan(&scan, dir.path()).unwrap();
        let back = read_scan(dir.path()).unwrap();
        assert_eq!(back, scan);
        for (a, b) in back.frames.iter().zip(&scan.frames) {
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let scan = tiny_scan(10, 4, 4, 2);
        write_scan(&scan, dir.path()).unwrap();
        let raw = fs::read(dir.path().join("frames.f32")).unwrap();
        fs::write(dir.path().join("frames.f32"), &raw[..9 * 16 * 4]).unwrap();
        assert!(matches!(read_scan(dir.path()), Err(DataError::Shape(_))));
    }

    #[test]
    fn checksum_and_version_detected() {
        let dir = tempfile::tempdir().unwrap();
        let scan = tiny_scan(3, 4, 5, 3);
        write_scan(&scan, dir.path()).unwrap();
        let mut raw = fs::read(dir.path().join("poses.f64")).unwrap();
        raw[5] ^= 0x40;
        fs::write(dir.path().join("poses.f64"), &raw).unwrap();
        assert!(matches!(read_scan(dir.path()), Err(DataError::Checksum(_))));

        write_scan(&scan, dir.path()).unwrap();
        let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        fs::write(dir.path().join("meta.json"), meta.replace("\"1.0\"", "\"2.0\"")).unwrap();
        assert!(matches!(read_scan(dir.path()), Err(DataError::Version { .. })));
    }

    #[test]
    fn invalid_scans_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut scan = tiny_scan(3, 2, 2, 4);
        scan.world_from_tool.pop();
        assert!(write_scan(&scan, dir.path()).is_err());
        let mut scan = tiny_scan(3, 2, 2, 4);
        scan.frames[1].pixels[0] = 1.5;
        assert!(write_scan(&scan, dir.path()).is_err());
        let scan = tiny_scan(1, 2, 2, 4);
        assert!(write_scan(&scan, dir.path()).is_err());
    }

    #[test]
    #[ignore = "writes ~530 MB; run explicitly"]
    fn full_resolution_scan_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let mut scan = tiny_scan(2, 2, 2, 5);
        scan.height = 480;
        scan.width = 640;
        scan.frames = (0..430)
            .map(|i| Frame {
                index: i,
                timestamp: i as f64 / 20.0,
                pixels: vec![0.5; 480 * 640],
            })
            .collect();
        scan.world_from_tool = vec![RigidTransform::identity(); 430];
        write_scan(&scan, dir.path()).unwrap();
        assert_eq!(read_scan(dir.path()).unwrap().len(), 430);
    }

    fn keys(subjects: usize, per: usize) -> Vec<(String, String)> {
        (0..subjects)
            .flat_map(|s| (0..per).map(move |k| (format!("s{s}-scan{k}"), format!("s{s}"))))
            .collect()
    }

    #[test]
    fn split_by_subject() {
        let k = keys(5, 6);
        let it = || k.iter().map(|(a, b)| (a.as_str(), b.as_str()));
        let split = split_dataset(it(), [3.0, 1.0, 1.0], 7).unwrap();
        assert_eq!(split.train.len(), 18);
        assert_eq!(split.validation.len(), 6);
        assert_eq!(split.test.len(), 6);
        assert_eq!(split, split_dataset(it(), [3.0, 1.0, 1.0], 7).unwrap());

        let one = keys(1, 3);
        let r = split_dataset(one.iter().map(|(a, b)| (a.as_str(), b.as_str())), [3.0, 1.0, 1.0], 0);
        assert!(matches!(r, Err(DataError::TooFewSubjects { .. })));
        assert!(matches!(split_dataset(it(), [3.0, 0.0, 1.0], 0), Err(DataError::InvalidRatios)));
    }

    proptest! {
        #[test]
        fn splits_are_subject_disjoint(seed in any::<u64>(), subjects in 3usize..30, per in 1usize..5) {
            let k = keys(subjects, per);
            let split = split_dataset(k.iter().map(|(a, b)| (a.as_str(), b.as_str())), [3.0, 1.0, 1.0], seed).unwrap();
            let subj = |ids: &[String]| -> BTreeSet<String> {
                ids.iter().map(|id| id.split('-').next().unwrap().to_string()).collect()
            };
            let (a, b, c) = (subj(&split.train), subj(&split.validation), subj(&split.test));
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
            prop_assert_eq!(split.train.len() + split.validation.len() + split.test.len(), subjects * per);
        }

        #[test]
        fn random_scans_round_trip(seed in any::<u64>(), n in 2usize..5, h in 1usize..6, w in 1usize..6) {
            let dir = tempfile::tempdir().unwrap();
            let scan = tiny_scan(n, h, w, seed);
            write_scan(&scan, dir.path()).unwrap();
            prop_assert_eq!(read_scan(dir.path()).unwrap(), scan);
        }
    }
}
