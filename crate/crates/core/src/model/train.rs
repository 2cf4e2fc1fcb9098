//! Minibatch training with Adam, per-epoch validation and best-epoch
//! selection on validation frame error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, batch_loss_and_grad, Activation, clip_global_norm, AdamConfig, AdamState, Example, ModelError, ModelParams,
    ModelSpec, Objective, TrainedModel, Variant,
};
use crate::dataio::{Checkpoint, Scan};
use crate::exec::Execution;
use crate::geometry::{corner_points, Pose6DoF};
use crate::losses::{LossContext, LossSpace, LossWeights};
use crate::metrics::frame_error;
use crate::reconstruct::chain_schedule;
use crate::sampling::{gt_for_tasks, make_task_set, sequence_at, Pair, TaskSet};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seq_len: usize,
    pub main: Pair,
    pub tau: usize,
    pub hidden: usize,
    pub conv_channels: [usize; 3],
    pub encoder_activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub loss_weights: LossWeights,
    pub loss_space: LossSpace,
    pub clip_norm: f64,
    /// Draw a fresh auxiliary task set at the start of every epoch.
    pub resample_tasks_per_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FeedForward,
            seq_len: 5,
            main: (2, 4),
            tau: 8,
            hidden: 64,
            conv_channels: [8, 16, 16],
            encoder_activation: Activation::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            steps_per_epoch: 50,
            loss_weights: LossWeights::MULTI_TASK,
            loss_space: LossSpace::Tool,
            clip_norm: 10.0,
            resample_tasks_per_epoch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sequence length, main pair, task count, hidden size and optimizer
    /// settings of the full-size recurrent configuration.
    pub fn full_scale() -> Self {
        Self {
            variant: Variant::Recurrent,
            seq_len: 20,
            main: (6, 10),
            tau: 79,
            hidden: 1024,
            learning_rate: 1e-4,
            batch_size: 32,
            ..Self::default()
        }
    }

    /// Single adjacent-pair predictor with the same encoder and budget.
    pub fn baseline(&self) -> Self {
        Self {
            seq_len: 2,
            main: (1, 2),
            tau: 0,
            loss_weights: LossWeights::MULTI_TASK,
            resample_tasks_per_epoch: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.into()));
        self.loss_weights.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("batch size, epochs and steps per epoch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn model_spec(&self, frame_height: usize, frame_width: usize) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            seq_len: self.seq_len,
            n_tasks: self.tau + 1,
            frame_height,
            frame_width,
            conv_channels: self.conv_channels,
            hidden: self.hidden,
            encoder_activation: self.encoder_activation,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_frame_err_mm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation frame error (the
    /// last epoch when there is no validation data).
    pub best: TrainedModel,
    pub best_epoch: usize,
    /// State after the final step, for resuming.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

const BATCH_STREAM: u64 = 0xBA7C;
const INIT_STREAM: u64 = 0x1217;
const TASK_STREAM: u64 = 0x7A5C;

/// Owns the parameters and optimizer state between steps.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: Vec<&'a Scan>,
    val: Vec<&'a Scan>,
    exec: Execution,
    context: LossContext,
    objective: Objective,
    model: TrainedModel,
    adam: AdamState,
}

fn shared_context(cfg: &TrainConfig, scans: &[&Scan]) -> Result<LossContext, ModelError> {
    let first = scans
        .first()
        .ok_or_else(|| ModelError::NoData("no training scans".into()))?;
    for s in scans {
        if s.height != first.height || s.width != first.width || s.pixel_spacing != first.pixel_spacing || s.calib != first.calib {
            return Err(ModelError::Shape(format!(
                "scan {} differs from {} in frame geometry or calibration",
                s.id(),
                first.id()
            )));
        }
    }
    let corners = corner_points(first.width, first.height, first.pixel_spacing)
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    Ok(LossContext::new(first.calib, corners, cfg.loss_space))
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, train: &[&'a Scan], val: &[&'a Scan], exec: Execution) -> Result<Self, ModelError> {
        cfg.validate()?;
        let context = shared_context(&cfg, train)?;
        let first = train[0];
        let tasks = make_task_set(cfg.seq_len, cfg.main, cfg.tau, derive_seed(cfg.seed, &[TASK_STREAM]))?;
        let spec = cfg.model_spec(first.height, first.width);
        let params = ModelParams::init(spec, derive_seed(cfg.seed, &[INIT_STREAM]))?;
        let adam = AdamState::new(params.values.len());
        let model = TrainedModel::new(params, tasks)?;
        Self::assemble(cfg, train, val, exec, context, model, adam)
    }

    /// Continues from a checkpoint; the next step is `ckpt.optimizer.step + 1`.
    pub fn resume(ckpt: Checkpoint, train: &[&'a Scan], val: &[&'a Scan], exec: Execution) -> Result<Self, ModelError> {
        ckpt.config.validate()?;
        let context = shared_context(&ckpt.config, train)?;
        let first = train[0];
        let expected = ckpt.config.model_spec(first.height, first.width);
        if ckpt.model.params.spec != expected {
            return Err(ModelError::Shape(format!(
                "checkpoint model {:?} does not match data and config ({expected:?})",
                ckpt.model.params.spec
            )));
        }
        Self::assemble(ckpt.config, train, val, exec, context, ckpt.model, ckpt.optimizer)
    }

    fn assemble(
        cfg: TrainConfig,
        train: &[&'a Scan],
        val: &[&'a Scan],
        exec: Execution,
        context: LossContext,
        model: TrainedModel,
        adam: AdamState,
    ) -> Result<Self, ModelError> {
        let usable: Vec<&Scan> = train.iter().copied().filter(|s| s.len() >= cfg.seq_len).collect();
        if usable.is_empty() {
            return Err(ModelError::NoData(format!("no training scan has {} frames", cfg.seq_len)));
        }
        let val = val.iter().copied().filter(|s| s.len() >= cfg.seq_len).collect();
        let objective = Objective::new(context.clone(), cfg.loss_weights, &model.tasks)?;
        Ok(Self {
            cfg,
            train: usable,
            val,
            exec,
            context,
            objective,
            model,
            adam,
        })
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.adam.clone(),
            config: self.cfg.clone(),
        }
    }

    /// The minibatch of the 1-based step `step`; a pure function of the seed.
    fn batch(&self, step: u64) -> Vec<Example<'a>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[BATCH_STREAM, step]));
        let m = self.cfg.seq_len;
        (0..self.cfg.batch_size)
            .map(|_| {
                let scan = self.train[rng.random_range(0..self.train.len())];
                let start = rng.random_range(0..=scan.len() - m);
                let sample = sequence_at("", scan, start, m, self.cfg.main);
                Example {
                    frames: sample.frames,
                    targets: gt_for_tasks(&sample, &self.model.tasks),
                }
            })
            .collect()
    }

    fn set_tasks(&mut self, tasks: TaskSet) -> Result<(), ModelError> {
        self.objective = Objective::new(self.context.clone(), self.cfg.loss_weights, &tasks)?;
        self.model.tasks = tasks;
        Ok(())
    }

    /// One Adam update; returns the minibatch loss before the update.
    pub fn step(&mut self) -> Result<f64, ModelError> {
        let step = self.adam.step + 1;
        let batch = self.batch(step);
        let (loss, mut grad) = batch_loss_and_grad(&self.model.params, &batch, &self.objective, self.exec)?;
        let norm = clip_global_norm(&mut grad, self.cfg.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(ModelError::Diverged {
                step: step as usize,
                last_good: Box::new(self.model.clone()),
            });
        }
        adam_step(&mut self.model.params.values, &grad, &mut self.adam, &self.cfg.adam());
        Ok(loss)
    }

    /// Mean loss and mean per-scan frame error over the chained sequences
    /// of the validation scans.
    pub fn validate(&self) -> Result<Option<(f64, f64)>, ModelError> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (m, main) = (self.cfg.seq_len, self.cfg.main);
        let mut jobs = Vec::new();
        for (k, scan) in self.val.iter().enumerate() {
            for s in chain_schedule(scan.len(), m, main)? {
                jobs.push((k, s));
            }
        }
        let corners = &self.context.corners;
        let results = self.exec.try_map_range(jobs.len(), |n| -> Result<(f64, f64), ModelError> {
            let (k, s) = jobs[n];
            let scan = self.val[k];
            let sample = sequence_at("", scan, s, m, main);
            let out = self.model.params.forward(sample.frames)?;
            let gts = gt_for_tasks(&sample, &self.model.tasks);
            let (loss, _) = self.objective.evaluate(&out, &gts)?;
            let pred = Pose6DoF::from_slice(&out[..6]).to_transform();
            Ok((loss, frame_error(&pred, &gts[0], &scan.calib, corners)))
        })?;
        let mut loss = 0.0;
        let mut per_scan = vec![(0.0, 0usize); self.val.len()];
        for (&(k, _), (l, e)) in jobs.iter().zip(&results) {
            loss += l;
            per_scan[k].0 += e;
            per_scan[k].1 += 1;
        }
        let frame = per_scan.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / per_scan.len() as f64;
        Ok(Some((loss / jobs.len() as f64, frame)))
    }

    /// Trains for the remaining steps of the configured budget, validating at
    /// every epoch boundary. `log` sees each epoch record as it completes.
    pub fn run(mut self, log: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome, ModelError> {
        let per_epoch = self.cfg.steps_per_epoch as u64;
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, TrainedModel)> = None;
        while self.adam.step < self.cfg.total_steps() {
            let epoch = (self.adam.step / per_epoch) as usize + 1;
            if self.cfg.resample_tasks_per_epoch && self.adam.step % per_epoch == 0 && epoch > 1 {
                let tasks = self.model.tasks.resampled(derive_seed(self.cfg.seed, &[TASK_STREAM, epoch as u64]))?;
                self.set_tasks(tasks)?;
            }
            let mut sum = 0.0;
            let mut count = 0;
            while self.adam.step < epoch as u64 * per_epoch {
                sum += self.step()?;
                count += 1;
            }
            let val = self.validate()?;
            let record = EpochRecord {
                epoch,
                step: self.adam.step,
                train_loss: sum / count as f64,
                val_loss: val.map(|v| v.0),
                val_frame_err_mm: val.map(|v| v.1),
            };
            log(&record);
            history.push(record);
            let score = val.map_or(f64::NEG_INFINITY, |v| v.1);
            if best.as_ref().is_none_or(|(b, _, _)| score < *b || score == f64::NEG_INFINITY) {
                best = Some((score, epoch, self.model.clone()));
            }
        }
        let (_, best_epoch, best) = match best {
            Some(b) => b,
            None => (0.0, 0, self.model.clone()),
        };
        Ok(TrainOutcome {
            best,
            best_epoch,
            last: self.checkpoint(),
            history,
        })
    }
}

/// Trains a fresh model; see [`Trainer`].
pub fn train(
    cfg: &TrainConfig,
    train_scans: &[&Scan],
    val_scans: &[&Scan],
    exec: Execution,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    Trainer::new(cfg.clone(), train_scans, val_scans, exec)?.run(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_dataset, DatasetConfig, Orientation, TrajectoryShape};

    fn tiny_data(n_subjects: usize, scans: usize, frames: usize) -> Vec<Scan> {
        let mut cfg = DatasetConfig {
            n_subjects,
            scans_per_subject: scans,
            height: 8,
            width: 10,
            pixel_spacing: 1.0,
            band_count: 16,
            length_range_mm: None,
            ..DatasetConfig::default()
        };
        cfg.specs = DatasetConfig::standard_specs(frames as f64, frames);
        cfg.specs.retain(|s| s.shape == TrajectoryShape::Line && s.orientation == Orientation::Perpendicular);
        simulate_dataset(&cfg, Execution::Sequential).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            seq_len: 3,
            main: (1, 3),
            tau: 2,
            hidden: 8,
            conv_channels: [3, 4, 4],
            batch_size: 4,
            epochs: 2,
            steps_per_epoch: 5,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn history_is_reproducible() {
        let data = tiny_data(1, 2, 12);
        let refs: Vec<&Scan> = data.iter().collect();
        let mut cfg = tiny_cfg();
        cfg.epochs = 10;
        cfg.steps_per_epoch = 1;
        let a = train(&cfg, &refs, &refs[1..], Execution::Parallel, &mut |_| {}).unwrap();
        let b = train(&cfg, &refs, &refs[1..], Execution::Sequential, &mut |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history.len(), 10);
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.val_frame_err_mm.unwrap().total_cmp(&y.val_frame_err_mm.unwrap()))
            .unwrap();
        assert_eq!(best.epoch, a.best_epoch);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = tiny_data(1, 2, 12);
        let refs: Vec<&Scan> = data.iter().collect();
        let cfg = tiny_cfg();
        let mut full = Trainer::new(cfg.clone(), &refs, &[], Execution::Sequential).unwrap();
        for _ in 0..3 {
            full.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        crate::dataio::save_checkpoint(&full.checkpoint(), &path).unwrap();
        let next = full.step().unwrap();
        let ckpt = crate::dataio::load_checkpoint(&path).unwrap();
        let mut resumed = Trainer::resume(ckpt, &refs, &[], Execution::Sequential).unwrap();
        assert_eq!(resumed.step().unwrap().to_bits(), next.to_bits());
        assert_eq!(resumed.model(), full.model());
    }

    #[test]
    fn rejects_mismatched_checkpoint_and_bad_config() {
        let data = tiny_data(1, 1, 12);
        let refs: Vec<&Scan> = data.iter().collect();
        let t = Trainer::new(tiny_cfg(), &refs, &[], Execution::Sequential).unwrap();
        let mut ck = t.checkpoint();
        ck.config.hidden = 9;
        assert!(matches!(
            Trainer::resume(ck, &refs, &[], Execution::Sequential),
            Err(ModelError::Shape(_))
        ));
        let mut cfg = tiny_cfg();
        cfg.loss_weights = LossWeights {
            multi_task: 0.0,
            consistency: 1.0,
            accumulated: 0.0,
        };
        assert!(Trainer::new(cfg, &refs, &[], Execution::Sequential).is_err());
        assert!(matches!(
            Trainer::new(tiny_cfg(), &[], &[], Execution::Sequential),
            Err(ModelError::NoData(_))
        ));
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let data = tiny_data(1, 1, 12);
        let refs: Vec<&Scan> = data.iter().collect();
        let mut t = Trainer::new(tiny_cfg(), &refs, &[], Execution::Sequential).unwrap();
        t.step().unwrap();
        let good = t.model().clone();
        t.model.params.values[0] = f64::NAN;
        match t.step() {
            Err(ModelError::Diverged { step, last_good }) => {
                assert_eq!(step, 2);
                assert!(last_good.params.values[0].is_nan());
                assert_eq!(last_good.params.values[1..], good.params.values[1..]);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn task_resampling_keeps_main_head() {
        let data = tiny_data(1, 1, 12);
        let refs: Vec<&Scan> = data.iter().collect();
        let mut cfg = tiny_cfg();
        cfg.seq_len = 5;
        cfg.main = (2, 4);
        cfg.tau = 3;
        cfg.resample_tasks_per_epoch = true;
        cfg.epochs = 3;
        cfg.steps_per_epoch = 1;
        let out = train(&cfg, &refs, &[], Execution::Sequential, &mut |_| {}).unwrap();
        assert_eq!(out.last.model.tasks.main, (2, 4));
        assert_eq!(out.last.model.tasks.tau(), 3);
    }
}
