//! Sequential vs data-parallel execution of the three hot loops: frame
//! rendering, the mini-batch gradient and dataset evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use freescan::dataio::Scan;
use freescan::geometry::corner_points;
use freescan::losses::{LossContext, LossSpace};
use freescan::metrics::{evaluate_dataset, DiceFilter, MetricOptions};
use freescan::model::{batch_loss_and_grad, Example, ModelParams, Objective, TrainConfig};
use freescan::reconstruct::OraclePredictor;
use freescan::sampling::{gt_for_tasks, make_task_set, sequence_at};
use freescan::simulator::{simulate_dataset, DatasetConfig};
use freescan::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dataset() -> DatasetConfig {
    DatasetConfig {
        n_subjects: 2,
        scans_per_subject: 2,
        specs: DatasetConfig::standard_specs(100.0, 60),
        length_range_mm: None,
        ..DatasetConfig::default()
    }
}

fn rendering(c: &mut Criterion) {
    let cfg = dataset();
    let mut g = c.benchmark_group("simulate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| simulate_dataset(&cfg, exec).unwrap()));
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let scans: Vec<Scan> = simulate_dataset(&dataset(), Execution::Parallel).unwrap();
    let cfg = TrainConfig::default();
    let spec = cfg.model_spec(scans[0].height, scans[0].width);
    let params = ModelParams::init(spec, 1).unwrap();
    let tasks = make_task_set(cfg.seq_len, cfg.main, cfg.tau, 2).unwrap();
    let corners = corner_points(scans[0].width, scans[0].height, scans[0].pixel_spacing).unwrap();
    let ctx = LossContext::new(scans[0].calib.clone(), corners, LossSpace::Tool);
    let objective = Objective::new(ctx, cfg.loss_weights, &tasks).unwrap();
    let ids: Vec<String> = scans.iter().map(Scan::id).collect();
    let batch: Vec<Example<'_>> = (0..cfg.batch_size)
        .map(|n| {
            let k = n % scans.len();
            let s = sequence_at(&ids[k], &scans[k], 3 * n % 40, cfg.seq_len, cfg.main);
            Example {
                frames: s.frames,
                targets: gt_for_tasks(&s, &tasks),
            }
        })
        .collect();
    let mut g = c.benchmark_group("batch_loss_and_grad");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_loss_and_grad(&params, &batch, &objective, exec).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let scans: Vec<Scan> = simulate_dataset(&dataset(), Execution::Parallel).unwrap();
    let refs: Vec<&Scan> = scans.iter().collect();
    let oracle = OraclePredictor { seq_len: 5, main: (2, 4) };
    let opts = MetricOptions {
        dice: DiceFilter::All,
        ..MetricOptions::default()
    };
    let mut g = c.benchmark_group("evaluate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_dataset(&oracle, &refs, &opts, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, rendering, gradient, evaluation);
criterion_main!(benches);
