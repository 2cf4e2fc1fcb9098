//! Sequence models that map `M` frames to `(tau + 1)` six-parameter
//! transforms, with exact reverse-mode gradients.
//!
//! * Feed-forward: the `M` frames are stacked as input channels of a
//!   three-layer strided convolutional encoder (leaky ReLU or tanh) with
//!   global average pooling, followed by a two-layer perceptron.
//! * Recurrent: the same encoder is applied per time step to the current
//!   frame stacked with its predecessor, and a gated memory cell consumes the
//!   resulting features in time order. The output layer reads the final
//!   hidden state only.
//!
//! All parameters live in one flat `f64` vector whose tensor layout is a pure
//! function of [`ModelSpec`].

mod adam;
mod gradcheck;
mod layers;
mod train;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Frame;
use crate::exec::Execution;
use crate::geometry::{Pose6DoF, RigidTransform};
use crate::losses::{total_loss_with_grad, LossContext, LossError, LossWeights, PredictionSet};
use crate::sampling::{TaskSet, Triple};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, tiny_spec, GradCheckReport, TensorCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use layers::{Activation, CellShape, ConvShape, LEAKY_SLOPE};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    InvalidSpec(String),
    #[error("non-finite recurrent state at time step {step}")]
    NonFiniteState { step: usize },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<TrainedModel>,
    },
    #[error("no training data: {0}")]
    NoData(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampling(#[from] crate::sampling::SamplingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FeedForward,
    Recurrent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::FeedForward => "feedforward",
            Variant::Recurrent => "recurrent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub seq_len: usize,
    /// `tau + 1`.
    pub n_tasks: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub conv_channels: [usize; 3],
    /// Perceptron width (feed-forward) or memory-cell size (recurrent).
    pub hidden: usize,
    #[serde(default)]
    pub encoder_activation: Activation,
}

/// Name, shape and position of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ModelSpec {
    pub fn output_width(&self) -> usize {
        6 * self.n_tasks
    }

    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::FeedForward => self.seq_len,
            Variant::Recurrent => 2,
        }
    }

    pub fn conv_shapes(&self) -> [ConvShape; 3] {
        let mut h = self.frame_height;
        let mut w = self.frame_width;
        let mut cin = self.input_channels();
        std::array::from_fn(|k| {
            let s = ConvShape {
                cin,
                cout: self.conv_channels[k],
                h,
                w,
            };
            h = s.out_h();
            w = s.out_w();
            cin = s.cout;
            s
        })
    }

    pub fn feature_len(&self) -> usize {
        self.conv_channels[2]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.seq_len < 2 {
            return bad(format!("sequence length must be >= 2, got {}", self.seq_len));
        }
        if self.n_tasks == 0 {
            return bad("at least one task".into());
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return bad("zero frame dimension".into());
        }
        if self.conv_channels.contains(&0) || self.hidden == 0 {
            return bad("zero-width layer".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, shape: Vec<usize>| {
            let t = TensorInfo {
                name: name.to_string(),
                shape,
                offset,
            };
            offset += t.len();
            out.push(t);
        };
        for (k, s) in self.conv_shapes().iter().enumerate() {
            push(&format!("encoder.conv{}.weight", k + 1), vec![s.cout, s.cin, 3, 3]);
            push(&format!("encoder.conv{}.bias", k + 1), vec![s.cout]);
        }
        let f = self.feature_len();
        let h = self.hidden;
        match self.variant {
            Variant::FeedForward => {
                push("head.fc1.weight", vec![h, f]);
                push("head.fc1.bias", vec![h]);
            }
            Variant::Recurrent => {
                push("head.cell.input_weight", vec![4 * h, f]);
                push("head.cell.hidden_weight", vec![4 * h, h]);
                push("head.cell.bias", vec![4 * h]);
            }
        }
        push("output.weight", vec![self.output_width(), h]);
        push("output.bias", vec![self.output_width()]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(TensorInfo::len).sum()
    }
}

/// Parameter ranges resolved from the layout.
struct Slots {
    conv: [(Range<usize>, Range<usize>); 3],
    fc1: (Range<usize>, Range<usize>),
    cell: (Range<usize>, Range<usize>, Range<usize>),
    out: (Range<usize>, Range<usize>),
}

impl Slots {
    fn new(spec: &ModelSpec) -> Self {
        let l = spec.layout();
        let r = |k: usize| l[k].range();
        let conv = [(r(0), r(1)), (r(2), r(3)), (r(4), r(5))];
        match spec.variant {
            Variant::FeedForward => Slots {
                conv,
                fc1: (r(6), r(7)),
                cell: (0..0, 0..0, 0..0),
                out: (r(8), r(9)),
            },
            Variant::Recurrent => Slots {
                conv,
                fc1: (0..0, 0..0),
                cell: (r(6), r(7), r(8)),
                out: (r(9), r(10)),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(Self {
            spec,
            values: vec![0.0; n],
        })
    }

    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(ModelError::Shape(format!(
                "{} values for a model with {} parameters",
                values.len(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, values })
    }

    /// Seeded uniform fan-in initialization. Biases start at zero except the
    /// forget gate of the memory cell (+1); the output layer is scaled down
    /// so initial predictions start near identity.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let mut p = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = p.spec.layout();
        for t in &layout {
            if t.name.ends_with("bias") {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if t.name.starts_with("output") {
                bound *= 0.1;
            }
            for v in &mut p.values[t.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        if p.spec.variant == Variant::Recurrent {
            let h = p.spec.hidden;
            let slots = Slots::new(&p.spec);
            let bias = &mut p.values[slots.cell.2];
            bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec
            .layout()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.range()])
    }

    fn check_frames(&self, frames: &[Frame]) -> Result<(), ModelError> {
        let s = &self.spec;
        if frames.len() != s.seq_len {
            return Err(ModelError::Shape(format!(
                "expected {} frames, got {}",
                s.seq_len,
                frames.len()
            )));
        }
        let npx = s.frame_height * s.frame_width;
        if let Some(f) = frames.iter().find(|f| f.pixels.len() != npx) {
            return Err(ModelError::Shape(format!(
                "frame {} has {} pixels, model expects {}x{}",
                f.index,
                f.pixels.len(),
                s.frame_height,
                s.frame_width
            )));
        }
        Ok(())
    }

    /// Raw outputs, `6 (tau + 1)` values in head order.
    pub fn forward(&self, frames: &[Frame]) -> Result<Vec<f64>, ModelError> {
        self.check_frames(frames)?;
        Ok(match self.spec.variant {
            Variant::FeedForward => self.forward_ff(frames).output,
            Variant::Recurrent => self.forward_rec(frames)?.output,
        })
    }

    pub fn predict(&self, frames: &[Frame]) -> Result<PredictionSet, ModelError> {
        Ok(PredictionSet::from_outputs(&self.forward(frames)?))
    }

    /// Loss of one sequence and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        frames: &[Frame],
        gts: &[RigidTransform],
        objective: &Objective,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_frames(frames)?;
        if gts.len() != self.spec.n_tasks {
            return Err(ModelError::Shape(format!(
                "{} ground-truth transforms for {} tasks",
                gts.len(),
                self.spec.n_tasks
            )));
        }
        let mut grad = vec![0.0; self.values.len()];
        let loss = match self.spec.variant {
            Variant::FeedForward => {
                let cache = self.forward_ff(frames);
                let (loss, dout) = objective.evaluate(&cache.output, gts)?;
                self.backward_ff(&cache, &dout, &mut grad);
                loss
            }
            Variant::Recurrent => {
                let cache = self.forward_rec(frames)?;
                let (loss, dout) = objective.evaluate(&cache.output, gts)?;
                self.backward_rec(&cache, &dout, &mut grad);
                loss
            }
        };
        Ok((loss, grad))
    }

    fn encode(&self, slots: &Slots, input: Vec<f64>) -> EncoderCache {
        let shapes = self.spec.conv_shapes();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (k, s) in shapes.iter().enumerate() {
            let mut out = vec![0.0; s.out_len()];
            let x = if k == 0 { &input } else { &acts[k - 1] };
            s.forward(
                x,
                &self.values[slots.conv[k].0.clone()],
                &self.values[slots.conv[k].1.clone()],
                &mut out,
            );
            self.spec.encoder_activation.apply_in_place(&mut out);
            acts.push(out);
        }
        let last = &shapes[2];
        let area = (last.out_h() * last.out_w()) as f64;
        let features = acts[2]
            .chunks_exact(last.out_h() * last.out_w())
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect();
        EncoderCache {
            input,
            acts,
            features,
        }
    }

    fn encode_backward(&self, slots: &Slots, cache: &EncoderCache, dfeat: &[f64], grad: &mut [f64]) {
        let shapes = self.spec.conv_shapes();
        let last = &shapes[2];
        let area = last.out_h() * last.out_w();
        let mut dact: Vec<f64> = dfeat
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / area as f64, area))
            .collect();
        for k in (0..3).rev() {
            let s = &shapes[k];
            let dpre = self.spec.encoder_activation.backward(&cache.acts[k], &dact);
            let x = if k == 0 { &cache.input } else { &cache.acts[k - 1] };
            let (wr, br) = (slots.conv[k].0.clone(), slots.conv[k].1.clone());
            let mut dw = vec![0.0; wr.len()];
            let mut db = vec![0.0; br.len()];
            if k > 0 {
                let mut dx = vec![0.0; x.len()];
                s.backward(x, &self.values[wr.clone()], &dpre, &mut dw, &mut db, Some(&mut dx));
                dact = dx;
            } else {
                s.backward(x, &self.values[wr.clone()], &dpre, &mut dw, &mut db, None);
            }
            add_into(&mut grad[wr], &dw);
            add_into(&mut grad[br], &db);
        }
    }

    fn forward_ff(&self, frames: &[Frame]) -> FeedForwardCache {
        let slots = Slots::new(&self.spec);
        let input: Vec<f64> = frames
            .iter()
            .flat_map(|f| f.pixels.iter().map(|&v| v as f64 - 0.5))
            .collect();
        let enc = self.encode(&slots, input);
        let (f, h, o) = (self.spec.feature_len(), self.spec.hidden, self.spec.output_width());
        let mut hidden = vec![0.0; h];
        layers::dense_forward(
            f,
            h,
            &self.values[slots.fc1.0.clone()],
            &self.values[slots.fc1.1.clone()],
            &enc.features,
            &mut hidden,
        );
        layers::tanh_in_place(&mut hidden);
        let mut output = vec![0.0; o];
        layers::dense_forward(
            h,
            o,
            &self.values[slots.out.0.clone()],
            &self.values[slots.out.1.clone()],
            &hidden,
            &mut output,
        );
        FeedForwardCache {
            encoder: enc,
            hidden,
            output,
        }
    }

    fn backward_ff(&self, cache: &FeedForwardCache, dout: &[f64], grad: &mut [f64]) {
        let slots = Slots::new(&self.spec);
        let (f, h, o) = (self.spec.feature_len(), self.spec.hidden, self.spec.output_width());
        let mut dhidden = vec![0.0; h];
        {
            let (wr, br) = (slots.out.0.clone(), slots.out.1.clone());
            let (mut dw, mut db) = (vec![0.0; wr.len()], vec![0.0; br.len()]);
            layers::dense_backward(h, o, &self.values[wr.clone()], &cache.hidden, dout, &mut dw, &mut db, Some(&mut dhidden));
            add_into(&mut grad[wr], &dw);
            add_into(&mut grad[br], &db);
        }
        let dpre = layers::tanh_backward(&cache.hidden, &dhidden);
        let mut dfeat = vec![0.0; f];
        {
            let (wr, br) = (slots.fc1.0.clone(), slots.fc1.1.clone());
            let (mut dw, mut db) = (vec![0.0; wr.len()], vec![0.0; br.len()]);
            layers::dense_backward(f, h, &self.values[wr.clone()], &cache.encoder.features, &dpre, &mut dw, &mut db, Some(&mut dfeat));
            add_into(&mut grad[wr], &dw);
            add_into(&mut grad[br], &db);
        }
        self.encode_backward(&slots, &cache.encoder, &dfeat, grad);
    }

    fn forward_rec(&self, frames: &[Frame]) -> Result<RecurrentCache, ModelError> {
        let slots = Slots::new(&self.spec);
        let h = self.spec.hidden;
        let cell = CellShape {
            nin: self.spec.feature_len(),
            hidden: h,
        };
        let (wx, wh, b) = (
            &self.values[slots.cell.0.clone()],
            &self.values[slots.cell.1.clone()],
            &self.values[slots.cell.2.clone()],
        );
        let mut encoders = Vec::with_capacity(frames.len());
        let mut steps: Vec<layers::CellStep> = Vec::with_capacity(frames.len());
        let zeros = vec![0.0; h];
        for (m, frame) in frames.iter().enumerate() {
            let prev = &frames[m.saturating_sub(1)];
            let input: Vec<f64> = frame
                .pixels
                .iter()
                .chain(&prev.pixels)
                .map(|&v| v as f64 - 0.5)
                .collect();
            let enc = self.encode(&slots, input);
            let (hp, cp) = match steps.last() {
                Some(s) => (&s.hidden, &s.cell),
                None => (&zeros, &zeros),
            };
            let step = cell.forward(wx, wh, b, &enc.features, hp, cp);
            if step.hidden.iter().chain(&step.cell).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteState { step: m + 1 });
            }
            encoders.push(enc);
            steps.push(step);
        }
        let o = self.spec.output_width();
        let mut output = vec![0.0; o];
        layers::dense_forward(
            h,
            o,
            &self.values[slots.out.0.clone()],
            &self.values[slots.out.1.clone()],
            &steps.last().unwrap().hidden,
            &mut output,
        );
        Ok(RecurrentCache {
            encoders,
            steps,
            output,
        })
    }

    fn backward_rec(&self, cache: &RecurrentCache, dout: &[f64], grad: &mut [f64]) {
        let slots = Slots::new(&self.spec);
        let h = self.spec.hidden;
        let o = self.spec.output_width();
        let cell = CellShape {
            nin: self.spec.feature_len(),
            hidden: h,
        };
        let mut dh = vec![0.0; h];
        {
            let (wr, br) = (slots.out.0.clone(), slots.out.1.clone());
            let (mut dw, mut db) = (vec![0.0; wr.len()], vec![0.0; br.len()]);
            let last = &cache.steps.last().unwrap().hidden;
            layers::dense_backward(h, o, &self.values[wr.clone()], last, dout, &mut dw, &mut db, Some(&mut dh));
            add_into(&mut grad[wr], &dw);
            add_into(&mut grad[br], &db);
        }
        let (wxr, whr, br) = (slots.cell.0.clone(), slots.cell.1.clone(), slots.cell.2.clone());
        let mut dwx = vec![0.0; wxr.len()];
        let mut dwh = vec![0.0; whr.len()];
        let mut db = vec![0.0; br.len()];
        let mut dc = vec![0.0; h];
        let zeros = vec![0.0; h];
        for m in (0..cache.steps.len()).rev() {
            let (hp, cp) = if m == 0 {
                (&zeros, &zeros)
            } else {
                (&cache.steps[m - 1].hidden, &cache.steps[m - 1].cell)
            };
            let (dx, dh_prev, dc_prev) = cell.backward(
                &cache.steps[m],
                &self.values[wxr.clone()],
                &self.values[whr.clone()],
                &cache.encoders[m].features,
                hp,
                cp,
                &dh,
                &dc,
                &mut dwx,
                &mut dwh,
                &mut db,
            );
            self.encode_backward(&slots, &cache.encoders[m], &dx, grad);
            dh = dh_prev;
            dc = dc_prev;
        }
        add_into(&mut grad[wxr], &dwx);
        add_into(&mut grad[whr], &dwh);
        add_into(&mut grad[br], &db);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct EncoderCache {
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    features: Vec<f64>,
}

struct FeedForwardCache {
    encoder: EncoderCache,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

struct RecurrentCache {
    encoders: Vec<EncoderCache>,
    steps: Vec<layers::CellStep>,
    output: Vec<f64>,
}

/// Loss configuration shared by all sequences of a batch.
#[derive(Debug, Clone)]
pub struct Objective {
    pub context: LossContext,
    pub weights: LossWeights,
    pub triples: Vec<Triple>,
}

impl Objective {
    pub fn new(context: LossContext, weights: LossWeights, tasks: &TaskSet) -> Result<Self, ModelError> {
        weights.validate()?;
        let triples = tasks.triples();
        if weights.needs_triples() && triples.is_empty() {
            return Err(LossError::NoTriple.into());
        }
        Ok(Self {
            context,
            weights,
            triples,
        })
    }

    /// Loss and gradient with respect to the raw output vector.
    pub fn evaluate(&self, output: &[f64], gts: &[RigidTransform]) -> Result<(f64, Vec<f64>), ModelError> {
        let poses: Vec<Pose6DoF> = output.chunks_exact(6).map(Pose6DoF::from_slice).collect();
        let (loss, grads) =
            total_loss_with_grad(&poses, gts, &self.triples, &self.context, &self.weights)?;
        Ok((loss, grads.into_iter().flatten().collect()))
    }
}

/// One training sequence: `M` frames and the ground truth of every task.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub frames: &'a [Frame],
    pub targets: Vec<RigidTransform>,
}

/// Mean loss and mean gradient over a batch. Per-sequence gradients may be
/// computed in parallel; they are summed in batch order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[Example<'_>],
    objective: &Objective,
    exec: Execution,
) -> Result<(f64, Vec<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::NoData("empty batch".into()));
    }
    let parts = exec.map(batch, |ex| params.loss_and_grad(ex.frames, &ex.targets, objective));
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        add_into(&mut grad, &g);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Parameters plus the frozen task set they were trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub tasks: TaskSet,
}

impl TrainedModel {
    pub fn new(params: ModelParams, tasks: TaskSet) -> Result<Self, ModelError> {
        if params.spec.n_tasks != tasks.len() || params.spec.seq_len != tasks.seq_len {
            return Err(ModelError::Shape(format!(
                "model has {} heads over {} frames, task set has {} tasks over {}",
                params.spec.n_tasks,
                params.spec.seq_len,
                tasks.len(),
                tasks.seq_len
            )));
        }
        Ok(Self { params, tasks })
    }

    /// Predicted `T_{j*<-i*}` for a sequence.
    pub fn predict_main(&self, frames: &[Frame]) -> Result<RigidTransform, ModelError> {
        let out = self.params.forward(frames)?;
        Ok(Pose6DoF::from_slice(&out[..6]).to_transform())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::corner_points;
    use crate::geometry::testutil::random_transform;
    use crate::losses::LossSpace;
    use crate::sampling::make_task_set;

    fn frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Frame {
                index: i,
                timestamp: i as f64 / 20.0,
                pixels: (0..h * w).map(|_| rng.random::<f32>()).collect(),
            })
            .collect()
    }

    fn spec(variant: Variant, m: usize, tasks: usize) -> ModelSpec {
        ModelSpec {
            variant,
            seq_len: m,
            n_tasks: tasks,
            frame_height: 8,
            frame_width: 10,
            conv_channels: [3, 4, 5],
            hidden: 6,
            encoder_activation: Activation::default(),
        }
    }

    #[test]
    fn output_widths() {
        let full = ModelSpec {
            variant: Variant::FeedForward,
            seq_len: 20,
            n_tasks: 80,
            frame_height: 16,
            frame_width: 20,
            conv_channels: [2, 2, 2],
            hidden: 4,
            encoder_activation: Activation::default(),
        };
        let p = ModelParams::init(full, 0).unwrap();
        assert_eq!(p.forward(&frames(20, 16, 20, 0)).unwrap().len(), 480);

        let base = ModelParams::init(spec(Variant::FeedForward, 2, 1), 0).unwrap();
        assert_eq!(base.forward(&frames(2, 8, 10, 0)).unwrap().len(), 6);

        let rec = ModelParams::init(spec(Variant::Recurrent, 4, 3), 0).unwrap();
        assert_eq!(rec.forward(&frames(4, 8, 10, 0)).unwrap().len(), 18);
    }

    #[test]
    fn full_hidden_size_builds() {
        let mut s = spec(Variant::Recurrent, 3, 2);
        s.hidden = 1024;
        let p = ModelParams::init(s, 1).unwrap();
        assert_eq!(p.tensor("head.cell.hidden_weight").unwrap().len(), 4096 * 1024);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            ModelParams::init(spec(Variant::Recurrent, 1, 1), 0),
            Err(ModelError::InvalidSpec(_))
        ));
        let p = ModelParams::init(spec(Variant::FeedForward, 3, 2), 0).unwrap();
        assert!(matches!(p.forward(&frames(2, 8, 10, 0)), Err(ModelError::Shape(_))));
        assert!(matches!(p.forward(&frames(3, 8, 9, 0)), Err(ModelError::Shape(_))));
        assert!(ModelParams::from_values(p.spec.clone(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_weights_predict_identity() {
        for v in [Variant::FeedForward, Variant::Recurrent] {
            let p = ModelParams::zeros(spec(v, 3, 3)).unwrap();
            let out = p.forward(&frames(3, 8, 10, 1)).unwrap();
            assert!(out.iter().all(|&x| x == 0.0));
            for t in p.predict(&frames(3, 8, 10, 1)).unwrap().transforms() {
                assert_eq!(t, RigidTransform::identity());
            }
        }
    }

    #[test]
    fn frame_order_matters() {
        for v in [Variant::FeedForward, Variant::Recurrent] {
            let p = ModelParams::init(spec(v, 4, 2), 3).unwrap();
            let f = frames(4, 8, 10, 2);
            let mut r = f.clone();
            r.reverse();
            let a = p.forward(&f).unwrap();
            let b = p.forward(&r).unwrap();
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9), "{v:?}");
            assert_eq!(a, p.forward(&f).unwrap());
        }
    }

    fn objective(tasks: &TaskSet, weights: LossWeights) -> Objective {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = LossContext::new(random_transform(&mut rng), corner_points(10, 8, 0.5).unwrap(), LossSpace::Tool);
        Objective::new(ctx, weights, tasks).unwrap()
    }

    #[test]
    fn heads_outside_active_losses_get_no_gradient() {
        // Accumulated-only: the direct (1,3) head never enters the loss.
        let tasks = make_task_set(3, (1, 3), 2, 0).unwrap();
        let w = LossWeights {
            multi_task: 0.0,
            consistency: 0.0,
            accumulated: 1.0,
        };
        let obj = objective(&tasks, w);
        let p = ModelParams::init(spec(Variant::FeedForward, 3, 3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gts: Vec<_> = (0..3).map(|_| random_transform(&mut rng)).collect();
        let (_, g) = p.loss_and_grad(&frames(3, 8, 10, 3), &gts, &obj).unwrap();
        let out_w = p.spec.layout().into_iter().find(|t| t.name == "output.weight").unwrap();
        let hidden = p.spec.hidden;
        let head = tasks.index_of((1, 3)).unwrap();
        let rows = &g[out_w.offset + head * 6 * hidden..out_w.offset + (head + 1) * 6 * hidden];
        assert!(rows.iter().all(|&x| x == 0.0));
        let other = tasks.index_of((1, 2)).unwrap();
        let rows = &g[out_w.offset + other * 6 * hidden..out_w.offset + (other + 1) * 6 * hidden];
        assert!(rows.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn duplicated_examples_count_twice() {
        let tasks = make_task_set(3, (1, 3), 2, 0).unwrap();
        let obj = objective(&tasks, LossWeights::MULTI_TASK);
        let p = ModelParams::init(spec(Variant::Recurrent, 3, 3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fa = frames(3, 8, 10, 8);
        let fb = frames(3, 8, 10, 9);
        let a = Example {
            frames: &fa,
            targets: (0..3).map(|_| random_transform(&mut rng)).collect(),
        };
        let b = Example {
            frames: &fb,
            targets: (0..3).map(|_| random_transform(&mut rng)).collect(),
        };
        let (_, ga) = p.loss_and_grad(a.frames, &a.targets, &obj).unwrap();
        let (_, gb) = p.loss_and_grad(b.frames, &b.targets, &obj).unwrap();
        let (_, g) = batch_loss_and_grad(&p, &[a.clone(), a.clone(), b.clone()], &obj, Execution::Parallel).unwrap();
        for k in 0..g.len() {
            let expect = (2.0 * ga[k] + gb[k]) / 3.0;
            assert!((g[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
        let (_, s) = batch_loss_and_grad(&p, &[a.clone(), a, b], &obj, Execution::Sequential).unwrap();
        assert_eq!(g, s);
    }
}
