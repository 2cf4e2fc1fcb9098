//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_and_grad, Activation, Example, ModelError, ModelParams, ModelSpec, Objective, Variant};
use crate::dataio::Frame;
use crate::exec::Execution;
use crate::geometry::{corner_points, RigidTransform};
use crate::losses::{LossContext, LossSpace, LossWeights};
use crate::sampling::make_task_set;
use nalgebra::Vector3;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the tensor.
    pub rel_error: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.rel_error <= tol)
    }
}

/// Frames 8x10, three frames per sequence, main pair (1,3) with both
/// remaining pairs as auxiliary tasks, hidden size 16.
pub fn tiny_spec(variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        seq_len: 3,
        n_tasks: 3,
        frame_height: 8,
        frame_width: 10,
        conv_channels: [4, 6, 8],
        hidden: 16,
        encoder_activation: Activation::default(),
    }
}

fn small_motion(rng: &mut ChaCha8Rng) -> RigidTransform {
    let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = v();
    let t = v() * 2.0;
    RigidTransform::from_axis_angle(&axis, 0.05, t)
}

/// Compares analytic and central-difference gradients of the batch loss
/// (all three loss terms enabled) for every parameter tensor of `spec`.
pub fn gradcheck(spec: &ModelSpec, seed: u64, eps: f64) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(spec.clone(), rng.random())?;
    let tasks = make_task_set(spec.seq_len, (1, spec.seq_len), spec.n_tasks - 1, rng.random())?;
    let corners = corner_points(spec.frame_width, spec.frame_height, 0.5)
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    let calib = small_motion(&mut rng);
    let weights = LossWeights {
        multi_task: 1.0,
        consistency: 1.0,
        accumulated: 1.0,
    };
    let objective = Objective::new(LossContext::new(calib, corners, LossSpace::Tool), weights, &tasks)?;
    let npx = spec.frame_height * spec.frame_width;
    let frames: Vec<Vec<Frame>> = (0..2)
        .map(|_| {
            (0..spec.seq_len)
                .map(|i| Frame {
                    index: i,
                    timestamp: i as f64 / 20.0,
                    pixels: (0..npx).map(|_| rng.random::<f32>()).collect(),
                })
                .collect()
        })
        .collect();
    let batch: Vec<Example<'_>> = frames
        .iter()
        .map(|f| Example {
            frames: f,
            targets: (0..spec.n_tasks).map(|_| small_motion(&mut rng)).collect(),
        })
        .collect();
    let (_, analytic) = batch_loss_and_grad(&params, &batch, &objective, Execution::Sequential)?;

    let mut probe = params.clone();
    let mut loss_at = |k: usize, v: f64| -> Result<f64, ModelError> {
        let old = probe.values[k];
        probe.values[k] = v;
        let (l, _) = batch_loss_and_grad(&probe, &batch, &objective, Execution::Sequential)?;
        probe.values[k] = old;
        Ok(l)
    };
    let mut tensors = Vec::new();
    for t in spec.layout() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in t.range() {
            let x = params.values[k];
            let numeric = (loss_at(k, x + eps)? - loss_at(k, x - eps)?) / (2.0 * eps);
            let a = analytic[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        tensors.push(TensorCheck {
            name: t.name.clone(),
            len: t.len(),
            rel_error,
            max_abs_diff: max_abs,
        });
    }
    Ok(GradCheckReport {
        variant: spec.variant,
        seed,
        tensors,
    })
}
