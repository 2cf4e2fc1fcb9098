//! Sub-sequence sampling and the main/auxiliary task sets.
//!
//! Frame positions inside a sequence are 1-based (`1..=M`), matching the
//! usual `(i*, j*)` notation; positions inside a scan are 0-based.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Frame, Scan};
use crate::geometry::{ground_truth_relative, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("sequence length must be at least 2, got {0}")]
    SequenceTooShort(usize),
    #[error("invalid pair ({i}, {j}) for sequence length {m}")]
    InvalidPair { i: usize, j: usize, m: usize },
    #[error("tau = {tau} exceeds the {available} available auxiliary pairs")]
    TooManyTasks { tau: usize, available: usize },
    #[error("scan has {frames} frames, fewer than the sequence length {m}")]
    ScanTooShort { frames: usize, m: usize },
}

/// An ordered frame pair `(i, j)`, `i < j`, 1-based within a sequence.
pub type Pair = (usize, usize);

/// All `C(M, 2)` pairs with `i < j` in lexicographic order.
pub fn enumerate_pairs(m: usize) -> Result<Vec<Pair>, SamplingError> {
    if m < 2 {
        return Err(SamplingError::SequenceTooShort(m));
    }
    Ok((1..m)
        .flat_map(|i| (i + 1..=m).map(move |j| (i, j)))
        .collect())
}

/// A composition triple: tasks `(i, k)`, `(k, j)` and `(i, j)` are all
/// present. Fields hold task indices into [`TaskSet::pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub i: usize,
    pub k: usize,
    pub j: usize,
    pub first: usize,
    pub second: usize,
    pub direct: usize,
}

/// Main pair plus `tau` auxiliary pairs. Prediction heads follow
/// [`TaskSet::pairs`]: main first, then auxiliary in sampled order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub seq_len: usize,
    pub main: Pair,
    pub auxiliary: Vec<Pair>,
}

impl TaskSet {
    pub fn tau(&self) -> usize {
        self.auxiliary.len()
    }

    pub fn len(&self) -> usize {
        self.auxiliary.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pairs(&self) -> Vec<Pair> {
        std::iter::once(self.main)
            .chain(self.auxiliary.iter().copied())
            .collect()
    }

    pub fn index_of(&self, pair: Pair) -> Option<usize> {
        if pair == self.main {
            return Some(0);
        }
        self.auxiliary.iter().position(|&p| p == pair).map(|k| k + 1)
    }

    /// Every triple `i < k < j` whose three pairs are all tasks, in
    /// lexicographic `(i, k, j)` order.
    pub fn triples(&self) -> Vec<Triple> {
        let m = self.seq_len;
        let mut lookup = vec![None; (m + 1) * (m + 1)];
        for (idx, (i, j)) in self.pairs().into_iter().enumerate() {
            lookup[i * (m + 1) + j] = Some(idx);
        }
        let at = |i: usize, j: usize| lookup[i * (m + 1) + j];
        let mut out = Vec::new();
        for i in 1..=m {
            for k in i + 1..=m {
                let Some(first) = at(i, k) else { continue };
                for j in k + 1..=m {
                    if let (Some(second), Some(direct)) = (at(k, j), at(i, j)) {
                        out.push(Triple {
                            i,
                            k,
                            j,
                            first,
                            second,
                            direct,
                        });
                    }
                }
            }
        }
        out
    }

    /// Draws a fresh auxiliary set of the same size, keeping the main pair.
    pub fn resampled(&self, seed: u64) -> Result<TaskSet, SamplingError> {
        make_task_set(self.seq_len, self.main, self.tau(), seed)
    }
}

pub fn check_pair(m: usize, (i, j): Pair) -> Result<(), SamplingError> {
    if !(1 <= i && i < j && j <= m) {
        return Err(SamplingError::InvalidPair { i, j, m });
    }
    Ok(())
}

/// Draws `tau` auxiliary pairs uniformly without replacement from every pair
/// except `main`.
pub fn make_task_set(m: usize, main: Pair, tau: usize, seed: u64) -> Result<TaskSet, SamplingError> {
    let candidates: Vec<Pair> = enumerate_pairs(m)?
        .into_iter()
        .filter(|&p| p != main)
        .collect();
    check_pair(m, main)?;
    if tau > candidates.len() {
        return Err(SamplingError::TooManyTasks {
            tau,
            available: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let auxiliary = index::sample(&mut rng, candidates.len(), tau)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    Ok(TaskSet {
        seq_len: m,
        main,
        auxiliary,
    })
}

/// `M` consecutive frames of one scan with their ground-truth poses.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSample<'a> {
    pub scan_ref: &'a str,
    /// 0-based index of the first frame in the scan.
    pub start_index: usize,
    pub main_pair: Pair,
    pub frames: &'a [Frame],
    pub gt_poses: &'a [RigidTransform],
}

impl SequenceSample<'_> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Scan index of the 1-based sequence position `m`.
    pub fn scan_index(&self, m: usize) -> usize {
        self.start_index + m - 1
    }
}

/// Valid 0-based start indices for length-`m` sequences in a scan.
pub fn valid_starts(scan_len: usize, m: usize) -> Result<std::ops::RangeInclusive<usize>, SamplingError> {
    if m < 2 {
        return Err(SamplingError::SequenceTooShort(m));
    }
    if scan_len < m {
        return Err(SamplingError::ScanTooShort { frames: scan_len, m });
    }
    Ok(0..=scan_len - m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// `count` uniformly random start indices (with replacement).
    Random { count: usize, seed: u64 },
    /// Starts spaced by `stride` from the beginning of the scan.
    Strided { stride: usize },
}

pub fn sequence_at<'a>(scan_id: &'a str, scan: &'a Scan, start: usize, m: usize, main: Pair) -> SequenceSample<'a> {
    SequenceSample {
        scan_ref: scan_id,
        start_index: start,
        main_pair: main,
        frames: &scan.frames[start..start + m],
        gt_poses: &scan.world_from_tool[start..start + m],
    }
}

pub fn sample_sequences<'a>(
    scan_id: &'a str,
    scan: &'a Scan,
    m: usize,
    main: Pair,
    mode: SamplingMode,
) -> Result<Vec<SequenceSample<'a>>, SamplingError> {
    check_pair(m, main)?;
    let starts = valid_starts(scan.len(), m)?;
    let idx: Vec<usize> = match mode {
        SamplingMode::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|_| rng.random_range(starts.clone())).collect()
        }
        SamplingMode::Strided { stride } => starts.step_by(stride.max(1)).collect(),
    };
    Ok(idx
        .into_iter()
        .map(|s| sequence_at(scan_id, scan, s, m, main))
        .collect())
}

/// Ground-truth `T_{j<-i}` for every task, in head order.
pub fn gt_for_tasks(sample: &SequenceSample<'_>, tasks: &TaskSet) -> Vec<RigidTransform> {
    tasks
        .pairs()
        .into_iter()
        .map(|(i, j)| ground_truth_relative(&sample.gt_poses[i - 1], &sample.gt_poses[j - 1]))
        .collect()
}
