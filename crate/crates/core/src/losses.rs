//! Corner-point losses for predicted inter-frame transforms.
//!
//! Every loss compares point sets obtained by mapping the image corners
//! into tool space through the calibration and then through a (predicted,
//! composed or ground-truth) `T_{j<-i}`. `D(a, b)` is the mean over points
//! and over the x, y, z coordinates of the squared differences.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose6DoF, PointSet, RigidTransform, RotationJet};
use crate::sampling::{TaskSet, Triple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("point sets differ in size ({0} vs {1})")]
    CountMismatch(usize, usize),
    #[error("{what}: expected {expected} entries, got {actual}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("task set contains no (i,k), (k,j), (i,j) triple")]
    NoTriple,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// Space in which point distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    #[default]
    Tool,
    /// Points are mapped back through `calib^-1` first.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub multi_task: f64,
    pub consistency: f64,
    pub accumulated: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::MULTI_TASK
    }
}

impl LossWeights {
    pub const MULTI_TASK: LossWeights = LossWeights {
        multi_task: 1.0,
        consistency: 0.0,
        accumulated: 0.0,
    };
    pub const WITH_CONSISTENCY: LossWeights = LossWeights {
        multi_task: 1.0,
        consistency: 1.0,
        accumulated: 0.0,
    };
    pub const WITH_ACCUMULATED: LossWeights = LossWeights {
        multi_task: 1.0,
        consistency: 0.0,
        accumulated: 1.0,
    };

    /// Non-negative, finite, and at least one ground-truth-supervised term;
    /// consistency alone admits trivial solutions.
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.multi_task, self.consistency, self.accumulated];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::InvalidWeights(format!("{self:?} must be finite and >= 0")));
        }
        if self.multi_task + self.accumulated <= 0.0 {
            return Err(LossError::InvalidWeights(
                "multi_task + accumulated must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_triples(&self) -> bool {
        self.consistency > 0.0 || self.accumulated > 0.0
    }
}

/// Calibration and image corners shared by all loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    pub calib: RigidTransform,
    pub corners: PointSet,
    pub space: LossSpace,
    tool_points: Vec<Vector3<f64>>,
    calib_inv: RigidTransform,
}

impl LossContext {
    pub fn new(calib: RigidTransform, corners: PointSet, space: LossSpace) -> Self {
        let tool_points = corners
            .points
            .iter()
            .map(|p| calib.apply_point(p).coords)
            .collect();
        Self {
            calib_inv: calib.inverse(),
            calib,
            corners,
            space,
            tool_points,
        }
    }

    /// Corners of frame `i` in its own tool space.
    pub fn tool_points(&self) -> &[Vector3<f64>] {
        &self.tool_points
    }

    fn to_output(&self, q: Vector3<f64>) -> Vector3<f64> {
        match self.space {
            LossSpace::Tool => q,
            LossSpace::Image => self.calib_inv.apply_point(&Point3::from(q)).coords,
        }
    }

    /// Maps a gradient with respect to output-space points back to tool space.
    fn pull_back(&self, g: Vector3<f64>) -> Vector3<f64> {
        match self.space {
            LossSpace::Tool => g,
            LossSpace::Image => self.calib.rotation() * g,
        }
    }

    /// `T * calib * corners`, in the loss space.
    pub fn project(&self, t: &RigidTransform) -> Vec<Vector3<f64>> {
        self.tool_points
            .iter()
            .map(|b| self.to_output(t.rotation() * b + t.translation()))
            .collect()
    }
}

/// One 6-DoF pose per task, in the frozen head order of the task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub poses: Vec<Pose6DoF>,
}

impl PredictionSet {
    /// Splits a flat `6 (tau + 1)` output vector into poses.
    pub fn from_outputs(values: &[f64]) -> Self {
        Self {
            poses: values.chunks_exact(6).map(Pose6DoF::from_slice).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn transforms(&self) -> Vec<RigidTransform> {
        self.poses.iter().map(Pose6DoF::to_transform).collect()
    }

    /// Checks the prediction count against a task set.
    pub fn aligned_with(&self, tasks: &TaskSet) -> Result<(), LossError> {
        check_len("predictions", tasks.len(), self.poses.len())
    }
}

/// Mean over points and coordinates of the squared differences.
pub fn point_mse(a: &PointSet, b: &PointSet) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::CountMismatch(a.len(), b.len()));
    }
    let va: Vec<_> = a.points.iter().map(|p| p.coords).collect();
    let vb: Vec<_> = b.points.iter().map(|p| p.coords).collect();
    Ok(mse(&va, &vb))
}

fn mse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).norm_squared())
        .sum::<f64>()
        / (3 * a.len()) as f64
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), LossError> {
    if expected != actual {
        return Err(LossError::Misaligned {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Average of `D(T_gt p, T_pred p)` over all tasks.
pub fn multi_task_loss(
    preds: &[RigidTransform],
    gts: &[RigidTransform],
    ctx: &LossContext,
) -> Result<f64, LossError> {
    check_len("ground truth", preds.len(), gts.len())?;
    if preds.is_empty() {
        return Err(LossError::Misaligned {
            what: "predictions",
            expected: 1,
            actual: 0,
        });
    }
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| mse(&ctx.project(g), &ctx.project(p)))
        .sum();
    Ok(total / preds.len() as f64)
}

fn triples_for(tasks: &TaskSet, n: usize) -> Result<Vec<Triple>, LossError> {
    check_len("predictions", tasks.len(), n)?;
    let triples = tasks.triples();
    if triples.is_empty() {
        return Err(LossError::NoTriple);
    }
    Ok(triples)
}

/// Average over available triples of `D(T_ij p, (T_kj * T_ik) p)`; uses no
/// ground truth.
pub fn consistency_loss(
    preds: &[RigidTransform],
    tasks: &TaskSet,
    ctx: &LossContext,
) -> Result<f64, LossError> {
    let triples = triples_for(tasks, preds.len())?;
    let total: f64 = triples
        .iter()
        .map(|t| {
            let composed = preds[t.second].compose(&preds[t.first]);
            mse(&ctx.project(&preds[t.direct]), &ctx.project(&composed))
        })
        .sum();
    Ok(total / triples.len() as f64)
}

/// Average over available triples of `D(T_gt_ij p, (T_kj * T_ik) p)`.
pub fn accumulated_loss(
    preds: &[RigidTransform],
    gts: &[RigidTransform],
    tasks: &TaskSet,
    ctx: &LossContext,
) -> Result<f64, LossError> {
    check_len("ground truth", preds.len(), gts.len())?;
    let triples = triples_for(tasks, preds.len())?;
    let total: f64 = triples
        .iter()
        .map(|t| {
            let composed = preds[t.second].compose(&preds[t.first]);
            mse(&ctx.project(&gts[t.direct]), &ctx.project(&composed))
        })
        .sum();
    Ok(total / triples.len() as f64)
}

/// Weighted sum of the enabled losses.
pub fn total_loss(
    preds: &[RigidTransform],
    gts: &[RigidTransform],
    tasks: &TaskSet,
    ctx: &LossContext,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    weights.validate()?;
    let mut total = 0.0;
    if weights.multi_task > 0.0 {
        total += weights.multi_task * multi_task_loss(preds, gts, ctx)?;
    }
    if weights.consistency > 0.0 {
        total += weights.consistency * consistency_loss(preds, tasks, ctx)?;
    }
    if weights.accumulated > 0.0 {
        total += weights.accumulated * accumulated_loss(preds, gts, tasks, ctx)?;
    }
    Ok(total)
}

struct PoseEval {
    jet: RotationJet,
    t: Vector3<f64>,
}

impl PoseEval {
    fn new(p: &Pose6DoF) -> Self {
        Self {
            jet: p.rotation_jet(),
            t: Vector3::from(p.translation),
        }
    }

    fn apply(&self, b: &Vector3<f64>) -> Vector3<f64> {
        self.jet.rotation * b + self.t
    }

    /// Adds `g . d(R b + t)/d(pose)` into `grad`.
    fn accumulate(&self, b: &Vector3<f64>, g: &Vector3<f64>, grad: &mut [f64; 6]) {
        for k in 0..3 {
            grad[k] += g.dot(&(self.jet.partials[k] * b));
            grad[3 + k] += g[k];
        }
    }
}

/// [`total_loss`] evaluated on raw 6-DoF predictions together with its exact
/// gradient with respect to every pose parameter. `triples` must be
/// `tasks.triples()` when consistency or accumulated terms are enabled.
pub fn total_loss_with_grad(
    poses: &[Pose6DoF],
    gts: &[RigidTransform],
    triples: &[Triple],
    ctx: &LossContext,
    weights: &LossWeights,
) -> Result<(f64, Vec<[f64; 6]>), LossError> {
    weights.validate()?;
    check_len("ground truth", poses.len(), gts.len())?;
    if weights.needs_triples() && triples.is_empty() {
        return Err(LossError::NoTriple);
    }
    let base = ctx.tool_points();
    let n_pts = base.len() as f64;
    let evals: Vec<PoseEval> = poses.iter().map(PoseEval::new).collect();
    let mut grad = vec![[0.0; 6]; poses.len()];
    let mut total = 0.0;

    let gt_points = |idx: usize| -> Vec<Vector3<f64>> { ctx.project(&gts[idx]) };

    if weights.multi_task > 0.0 {
        let scale = weights.multi_task / poses.len() as f64;
        for (idx, ev) in evals.iter().enumerate() {
            let target = gt_points(idx);
            for (b, q) in base.iter().zip(&target) {
                let p = ctx.to_output(ev.apply(b));
                let d = p - q;
                total += scale * d.norm_squared() / (3.0 * n_pts);
                let g = ctx.pull_back(d * (2.0 * scale / (3.0 * n_pts)));
                ev.accumulate(b, &g, &mut grad[idx]);
            }
        }
    }

    let composed_terms = [
        (weights.consistency, false),
        (weights.accumulated, true),
    ];
    for (w, against_gt) in composed_terms {
        if w <= 0.0 {
            continue;
        }
        let scale = w / triples.len() as f64;
        for tr in triples {
            let (first, second, direct) = (&evals[tr.first], &evals[tr.second], &evals[tr.direct]);
            let target = if against_gt { Some(gt_points(tr.direct)) } else { None };
            for (n, b) in base.iter().enumerate() {
                let u = first.apply(b);
                let composed = ctx.to_output(second.apply(&u));
                let reference = match &target {
                    Some(t) => t[n],
                    None => ctx.to_output(direct.apply(b)),
                };
                let d = composed - reference;
                total += scale * d.norm_squared() / (3.0 * n_pts);
                let g = ctx.pull_back(d * (2.0 * scale / (3.0 * n_pts)));
                second.accumulate(&u, &g, &mut grad[tr.second]);
                let gu = second.jet.rotation.transpose() * g;
                first.accumulate(b, &gu, &mut grad[tr.first]);
                if !against_gt {
                    direct.accumulate(b, &(-g), &mut grad[tr.direct]);
                }
            }
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::corner_points;
    use crate::geometry::testutil::random_transform;
    use crate::sampling::make_task_set;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(seed: u64) -> LossContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LossContext::new(
            random_transform(&mut rng),
            corner_points(80, 64, 0.5).unwrap(),
            LossSpace::Tool,
        )
    }

    fn random_pose<R: Rng>(rng: &mut R, scale: f64) -> Pose6DoF {
        Pose6DoF::new(
            std::array::from_fn(|_| rng.random_range(-0.3..0.3) * scale),
            std::array::from_fn(|_| rng.random_range(-5.0..5.0) * scale),
        )
    }

    /// Independent per-point, per-coordinate accumulation.
    fn naive_mse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for n in 0..a.len() {
            for c in 0..3 {
                acc += (a[n][c] - b[n][c]).powi(2);
                count += 1;
            }
        }
        acc / count as f64
    }

    fn hand_points(t: &RigidTransform, c: &LossContext) -> Vec<Vector3<f64>> {
        c.corners
            .points
            .iter()
            .map(|p| t.compose(&c.calib).apply_point(p).coords)
            .collect()
    }

    #[test]
    fn point_mse_cases() {
        let a = PointSet::new(vec![Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(point_mse(&a, &a).unwrap(), 0.0);
        let b = PointSet::new(vec![Point3::new(2.0, 2.0, 3.0)]);
        assert!((point_mse(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            point_mse(&a, &PointSet::default()),
            Err(LossError::CountMismatch(1, 0))
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = |rng: &mut ChaCha8Rng| Point3::new(rng.random(), rng.random::<f64>() * 3.0, rng.random());
        let x: Vec<_> = (0..17).map(|_| r(&mut rng)).collect();
        let y: Vec<_> = (0..17).map(|_| r(&mut rng)).collect();
        let naive = naive_mse(
            &x.iter().map(|p| p.coords).collect::<Vec<_>>(),
            &y.iter().map(|p| p.coords).collect::<Vec<_>>(),
        );
        let fast = point_mse(&PointSet::new(x), &PointSet::new(y)).unwrap();
        assert!((naive - fast).abs() < 1e-12);
    }

    #[test]
    fn multi_task_cases() {
        let c = ctx(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts: Vec<_> = (0..3).map(|_| random_transform(&mut rng)).collect();
        assert_eq!(multi_task_loss(&gts, &gts, &c).unwrap(), 0.0);

        let preds: Vec<_> = (0..3).map(|_| random_transform(&mut rng)).collect();
        let hand: f64 = (0..3)
            .map(|k| naive_mse(&hand_points(&gts[k], &c), &hand_points(&preds[k], &c)))
            .sum::<f64>()
            / 3.0;
        assert!((multi_task_loss(&preds, &gts, &c).unwrap() - hand).abs() < 1e-12 * hand.max(1.0));

        let single = multi_task_loss(&preds[..1], &gts[..1], &c).unwrap();
        let direct = naive_mse(&hand_points(&gts[0], &c), &hand_points(&preds[0], &c));
        assert!((single - direct).abs() < 1e-12 * direct.max(1.0));
        assert!(multi_task_loss(&preds, &gts[..2], &c).is_err());
    }

    #[test]
    fn consistency_cases() {
        let c = ctx(3);
        let tasks = make_task_set(4, (1, 4), 5, 0).unwrap();
        // Exactly compositional: powers of one step.
        let step = Pose6DoF::new([0.01, -0.02, 0.03], [1.0, 0.5, -0.2]).to_transform();
        let power = |n: usize| (0..n).fold(RigidTransform::identity(), |acc, _| acc.compose(&step));
        let preds: Vec<_> = tasks.pairs().iter().map(|&(i, j)| power(j - i)).collect();
        assert!(consistency_loss(&preds, &tasks, &c).unwrap() < 1e-20);

        let mut broken = preds.clone();
        let idx = tasks.index_of((1, 3)).unwrap();
        broken[idx] = RigidTransform::identity();
        assert!(consistency_loss(&broken, &tasks, &c).unwrap() > 0.0);

        // Hand enumeration of the four M=4 triples.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<_> = (0..6).map(|_| random_transform(&mut rng)).collect();
        let at = |i, j| preds[tasks.index_of((i, j)).unwrap()];
        let mut hand = 0.0;
        for (i, k, j) in [(1, 2, 3), (1, 2, 4), (1, 3, 4), (2, 3, 4)] {
            let composed = at(k, j).compose(&at(i, k));
            hand += naive_mse(&hand_points(&at(i, j), &c), &hand_points(&composed, &c));
        }
        hand /= 4.0;
        let got = consistency_loss(&preds, &tasks, &c).unwrap();
        assert!((got - hand).abs() < 1e-12 * hand);

        let baseline = make_task_set(2, (1, 2), 0, 0).unwrap();
        assert_eq!(
            consistency_loss(&preds[..1], &baseline, &c),
            Err(LossError::NoTriple)
        );
    }

    #[test]
    fn accumulated_cases() {
        let c = ctx(5);
        let tasks = make_task_set(3, (1, 3), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<_> = (0..3).map(|_| random_transform(&mut rng)).collect();
        let gt = |i: usize, j: usize| crate::geometry::ground_truth_relative(&w[i - 1], &w[j - 1]);
        let gts: Vec<_> = tasks.pairs().iter().map(|&(i, j)| gt(i, j)).collect();
        assert!(accumulated_loss(&gts, &gts, &tasks, &c).unwrap() < 1e-18);

        // Exact first step, erroneous second step.
        let err = Pose6DoF::new([0.02, 0.0, -0.01], [0.3, -0.2, 0.1]).to_transform();
        let mut preds = gts.clone();
        let (i12, i23) = (tasks.index_of((1, 2)).unwrap(), tasks.index_of((2, 3)).unwrap());
        preds[i23] = gts[i23].compose(&err);
        let composed = preds[i23].compose(&preds[i12]);
        let oracle = naive_mse(&hand_points(&gt(1, 3), &c), &hand_points(&composed, &c));
        let got = accumulated_loss(&preds, &gts, &tasks, &c).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle);

        // Direct prediction equal to ground truth: accumulated == consistency.
        let cons = consistency_loss(&preds, &tasks, &c).unwrap();
        assert!((got - cons).abs() < 1e-12 * got);
    }

    #[test]
    fn total_loss_weights() {
        let c = ctx(7);
        let tasks = make_task_set(4, (2, 4), 5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<_> = (0..6).map(|_| random_transform(&mut rng)).collect();
        let gts: Vec<_> = (0..6).map(|_| random_transform(&mut rng)).collect();
        let mt = multi_task_loss(&preds, &gts, &c).unwrap();
        let cs = consistency_loss(&preds, &tasks, &c).unwrap();
        let ac = accumulated_loss(&preds, &gts, &tasks, &c).unwrap();
        let t = |w| total_loss(&preds, &gts, &tasks, &c, &w).unwrap();
        assert_eq!(t(LossWeights::MULTI_TASK), mt);
        assert!((t(LossWeights::WITH_CONSISTENCY) - (mt + cs)).abs() < 1e-9 * mt);
        assert!((t(LossWeights::WITH_ACCUMULATED) - (mt + ac)).abs() < 1e-9 * mt);
        let bad = LossWeights {
            multi_task: 0.0,
            consistency: 1.0,
            accumulated: 0.0,
        };
        assert!(matches!(
            total_loss(&preds, &gts, &tasks, &c, &bad),
            Err(LossError::InvalidWeights(_))
        ));
        let neg = LossWeights {
            multi_task: 1.0,
            consistency: -1.0,
            accumulated: 0.0,
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn image_space_matches_tool_space() {
        let c = ctx(9);
        let ci = LossContext::new(c.calib, c.corners.clone(), LossSpace::Image);
        let tasks = make_task_set(3, (1, 3), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let poses: Vec<_> = (0..3).map(|_| random_pose(&mut rng, 1.0)).collect();
        let gts: Vec<_> = (0..3).map(|_| random_pose(&mut rng, 1.0).to_transform()).collect();
        let w = LossWeights {
            multi_task: 1.0,
            consistency: 0.5,
            accumulated: 2.0,
        };
        let (a, ga) = total_loss_with_grad(&poses, &gts, &tasks.triples(), &c, &w).unwrap();
        let (b, gb) = total_loss_with_grad(&poses, &gts, &tasks.triples(), &ci, &w).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
        for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
            assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for space in [LossSpace::Tool, LossSpace::Image] {
            let base = ctx(11);
            let c = LossContext::new(base.calib, base.corners, space);
            let tasks = make_task_set(4, (2, 4), 4, 3).unwrap();
            let triples = tasks.triples();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let poses: Vec<_> = (0..5).map(|_| random_pose(&mut rng, 1.0)).collect();
            let gts: Vec<_> = (0..5).map(|_| random_pose(&mut rng, 1.0).to_transform()).collect();
            let w = LossWeights {
                multi_task: 1.0,
                consistency: 0.7,
                accumulated: 1.3,
            };
            let value = |p: &[Pose6DoF]| {
                let t: Vec<_> = p.iter().map(Pose6DoF::to_transform).collect();
                total_loss(&t, &gts, &tasks, &c, &w).unwrap()
            };
            let (v, grad) = total_loss_with_grad(&poses, &gts, &triples, &c, &w).unwrap();
            assert!((v - value(&poses)).abs() < 1e-9 * v);
            let h = 1e-6;
            for t in 0..poses.len() {
                for k in 0..6 {
                    let mut a = poses.clone();
                    let mut b = poses.clone();
                    let mut va = a[t].to_array();
                    let mut vb = b[t].to_array();
                    va[k] += h;
                    vb[k] -= h;
                    a[t] = Pose6DoF::from_slice(&va);
                    b[t] = Pose6DoF::from_slice(&vb);
                    let fd = (value(&a) - value(&b)) / (2.0 * h);
                    let an = grad[t][k];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                        "task {t} param {k}: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn losses_non_negative_and_consistent_sets_vanish(seed in any::<u64>()) {
            let c = ctx(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(3..7);
            let all = crate::sampling::enumerate_pairs(m).unwrap();
            let tasks = make_task_set(m, all[0], all.len() - 1, seed).unwrap();
            // Predictions induced by arbitrary absolute poses are compositional.
            let abs: Vec<_> = (0..m).map(|_| random_transform(&mut rng)).collect();
            let preds: Vec<_> = tasks.pairs().iter()
                .map(|&(i, j)| crate::geometry::ground_truth_relative(&abs[i - 1], &abs[j - 1]))
                .collect();
            prop_assert!(consistency_loss(&preds, &tasks, &c).unwrap() < 1e-12);
            let gts: Vec<_> = (0..preds.len()).map(|_| random_transform(&mut rng)).collect();
            prop_assert!(multi_task_loss(&preds, &gts, &c).unwrap() >= 0.0);
            prop_assert!(accumulated_loss(&preds, &gts, &tasks, &c).unwrap() >= 0.0);

            // Permuting tasks together with their ground truth leaves the loss unchanged.
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.reverse();
            let p2: Vec<_> = order.iter().map(|&k| preds[k]).collect();
            let g2: Vec<_> = order.iter().map(|&k| gts[k]).collect();
            let a = multi_task_loss(&preds, &gts, &c).unwrap();
            let b = multi_task_loss(&p2, &g2, &c).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
