//! Scan reconstruction by chaining main-task predictions of overlapping
//! sequences.
//!
//! Sequence `n + 1` starts `j* - i*` frames after sequence `n`, so its
//! `i*`-th frame is the `j*`-th frame of its predecessor. With
//! `F_k = T_{ref<-k}` the pose of localized frame `k` relative to the first
//! reference frame, each prediction `T_{j<-i}` extends the chain by
//! `F_j = F_i * T_{j<-i}^-1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Scan;
use crate::exec::Execution;
use crate::geometry::{ground_truth_relative, RigidTransform};
use crate::model::{ModelError, TrainedModel};
use crate::sampling::{check_pair, sequence_at, Pair, SamplingError, SequenceSample};

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("scan {scan}: {reason}")]
    Incompatible { scan: String, reason: String },
}

/// 0-based start indices of the chained sequences.
pub fn chain_schedule(scan_len: usize, m: usize, main: Pair) -> Result<Vec<usize>, SamplingError> {
    check_pair(m, main)?;
    if scan_len < m {
        return Err(SamplingError::ScanTooShort { frames: scan_len, m });
    }
    let step = main.1 - main.0;
    Ok((0..=scan_len - m).step_by(step).collect())
}

/// Anything that produces `T_{j*<-i*}` for a sequence.
pub trait Predictor: Sync {
    fn seq_len(&self) -> usize;
    fn main_pair(&self) -> Pair;
    fn predict_main(&self, sample: &SequenceSample<'_>) -> Result<RigidTransform, ModelError>;
    fn describe(&self) -> String;
}

impl Predictor for TrainedModel {
    fn seq_len(&self) -> usize {
        self.tasks.seq_len
    }

    fn main_pair(&self) -> Pair {
        self.tasks.main
    }

    fn predict_main(&self, sample: &SequenceSample<'_>) -> Result<RigidTransform, ModelError> {
        TrainedModel::predict_main(self, sample.frames)
    }

    fn describe(&self) -> String {
        let (i, j) = self.tasks.main;
        format!(
            "{}-m{}-main{}_{}-tau{}",
            self.params.spec.variant.name(),
            self.tasks.seq_len,
            i,
            j,
            self.tasks.tau()
        )
    }
}

fn gt_main(sample: &SequenceSample<'_>) -> RigidTransform {
    let (i, j) = sample.main_pair;
    ground_truth_relative(&sample.gt_poses[i - 1], &sample.gt_poses[j - 1])
}

/// Returns the ground-truth main transform of every sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OraclePredictor {
    pub seq_len: usize,
    pub main: Pair,
}

impl Predictor for OraclePredictor {
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn main_pair(&self) -> Pair {
        self.main
    }
    fn predict_main(&self, sample: &SequenceSample<'_>) -> Result<RigidTransform, ModelError> {
        Ok(gt_main(sample))
    }
    fn describe(&self) -> String {
        "oracle".into()
    }
}

/// Always predicts no motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityPredictor {
    pub seq_len: usize,
    pub main: Pair,
}

impl Predictor for IdentityPredictor {
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn main_pair(&self) -> Pair {
        self.main
    }
    fn predict_main(&self, _: &SequenceSample<'_>) -> Result<RigidTransform, ModelError> {
        Ok(RigidTransform::identity())
    }
    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Ground truth followed by a fixed error transform: `error * T_gt`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedOracle {
    pub seq_len: usize,
    pub main: Pair,
    pub error: RigidTransform,
}

impl Predictor for PerturbedOracle {
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn main_pair(&self) -> Pair {
        self.main
    }
    fn predict_main(&self, sample: &SequenceSample<'_>) -> Result<RigidTransform, ModelError> {
        Ok(self.error.compose(&gt_main(sample)))
    }
    fn describe(&self) -> String {
        "perturbed-oracle".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedScan {
    pub scan_ref: String,
    pub model_ref: String,
    /// `j* - i*`.
    pub interval: usize,
    /// 0-based scan indices of the localized frames. The first entry is the
    /// reference frame (the `i*`-th frame of the first sequence).
    pub frame_indices: Vec<usize>,
    /// `T_{ref<-k}` for every localized frame; the first is the identity.
    pub transforms_from_ref: Vec<RigidTransform>,
    /// Main-task prediction of every chained sequence, in schedule order.
    pub step_predictions: Vec<RigidTransform>,
    /// Frames before the reference and after the last localized frame.
    pub unlocalized: Vec<usize>,
}

impl ReconstructedScan {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    /// Ground-truth `T_{ref<-k}` at the localized frames of `scan`.
    pub fn ground_truth_chain(&self, scan: &Scan) -> Vec<RigidTransform> {
        let world_from_ref = &scan.world_from_tool[self.frame_indices[0]];
        self.frame_indices
            .iter()
            .map(|&k| ground_truth_relative(&scan.world_from_tool[k], world_from_ref))
            .collect()
    }

    /// Ground-truth `T_{j*<-i*}` of every chained sequence.
    pub fn ground_truth_steps(&self, scan: &Scan) -> Vec<RigidTransform> {
        self.frame_indices
            .windows(2)
            .map(|w| ground_truth_relative(&scan.world_from_tool[w[0]], &scan.world_from_tool[w[1]]))
            .collect()
    }
}

/// Runs `predictor` over the chain schedule of `scan` and composes the
/// main-task predictions. Inference may run in parallel; composition is a
/// sequential fold in schedule order.
pub fn reconstruct<P: Predictor + ?Sized>(
    predictor: &P,
    scan_id: &str,
    scan: &Scan,
    exec: Execution,
) -> Result<ReconstructedScan, ReconstructError> {
    let m = predictor.seq_len();
    let main = predictor.main_pair();
    let starts = chain_schedule(scan.len(), m, main)?;
    let preds = exec.try_map_range(starts.len(), |n| {
        predictor.predict_main(&sequence_at(scan_id, scan, starts[n], m, main))
    })?;
    let interval = main.1 - main.0;
    let first = starts[0] + main.0 - 1;
    let mut frame_indices = vec![first];
    let mut chain = vec![RigidTransform::identity()];
    for (s, p) in starts.iter().zip(&preds) {
        let next = chain.last().unwrap().compose(&p.inverse());
        chain.push(next);
        frame_indices.push(s + main.1 - 1);
    }
    let last = *frame_indices.last().unwrap();
    let unlocalized = (0..first).chain(last + 1..scan.len()).collect();
    Ok(ReconstructedScan {
        scan_ref: scan_id.to_string(),
        model_ref: predictor.describe(),
        interval,
        frame_indices,
        transforms_from_ref: chain,
        step_predictions: preds,
        unlocalized,
    })
}
