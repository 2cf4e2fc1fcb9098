//! `freescan`: simulate sweeps, train transform predictors, reconstruct and
//! evaluate scans.
//!
//! Progress goes to stderr as JSON lines; results go to files only. Every
//! subcommand writes its resolved `config.json` and `invocation.json` (paths
//! and flags) next to its outputs; the run config written by `simulate`,
//! `train`, `evaluate` and `sweep` is accepted back by `--config`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use freescan::dataio::{
    load_checkpoint, read_dataset, read_scan, save_checkpoint, split_scans, write_dataset, write_json,
    write_report_csv, write_report_json, write_trajectory, Checkpoint, DataError, DatasetSplit, Scan, SplitPart,
};
use freescan::geometry::corner_points;
use freescan::losses::{LossError, LossWeights};
use freescan::metrics::{evaluate_dataset, DiceFilter, MetricsError, MetricsReport};
use freescan::model::{gradcheck, tiny_spec, EpochRecord, ModelError, TrainConfig, Trainer, Variant, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use freescan::reconstruct::{reconstruct, OraclePredictor, ReconstructError};
use freescan::sampling::SamplingError;
use freescan::simulator::{simulate_dataset, SimError};
use freescan::Execution;
use serde_json::json;

use config::{RunConfig, SweepPoint};

const OUT_ENV: &str = "FREESCAN_OUT";

#[derive(Debug, Parser)]
#[command(name = "freescan", version, about = "Trackerless freehand ultrasound transform estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run-config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `$FREESCAN_OUT/<subcommand>` or
    /// `./freescan-out/<subcommand>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Feedforward,
    Recurrent,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Feedforward => Variant::FeedForward,
            VariantArg::Recurrent => Variant::Recurrent,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DiceArg {
    All,
    PerpendicularOnly,
    None,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Main pair as `i,j` (1-based).
    #[arg(long, value_parser = parse_pair)]
    main: Option<(usize, usize)>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Loss weights as `multi_task,consistency,accumulated`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<LossWeights>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        scans_per_subject: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Chain a trained model's predictions over one scan.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Reconstruct and score scans of a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        model: Option<PathBuf>,
        /// Use ground-truth transforms as predictions.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "test")]
        part: PartArg,
        #[arg(long)]
        pixel_stride: Option<usize>,
        #[arg(long)]
        voxel_mm: Option<f64>,
        #[arg(long, value_enum)]
        dice: Option<DiceArg>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate over an interval / past / future / variant grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected i,j")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [multi_task, consistency, accumulated] => Ok(LossWeights {
            multi_task,
            consistency,
            accumulated,
        }),
        _ => Err("expected three comma-separated weights".into()),
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Data(m) => ("data", m),
            CliError::Numerical(m) => ("numerical", m),
        };
        json!({"error": {"kind": kind, "message": message, "exit_code": self.code()}})
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> Self {
        match e {
            SamplingError::ScanTooShort { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidSpec(_) => CliError::Config(e.to_string()),
            ModelError::Loss(l) => l.into(),
            ModelError::Sampling(s) => s.into(),
            ModelError::Diverged { .. } | ModelError::NonFiniteState { .. } => CliError::Numerical(e.to_string()),
            ModelError::Shape(_) | ModelError::NoData(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        match e {
            ReconstructError::Sampling(s) => s.into(),
            ReconstructError::Model(m) => m.into(),
            ReconstructError::Incompatible { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Reconstruct(r) => r.into(),
            MetricsError::InvalidVoxel(_) | MetricsError::GridTooLarge(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn log(event: &str, fields: serde_json::Value) {
    let mut obj = json!({"event": event});
    if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{obj}");
}

fn exec_of(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn out_dir(explicit: Option<PathBuf>, sub: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("freescan-out"))
            .join(sub)
    })
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(common.config.as_deref()).map_err(|e| match e {
        DataError::Io { .. } => CliError::Data(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    cfg.check_version().map_err(CliError::Config)?;
    Ok(cfg)
}

fn persist(out: &Path, cfg: &RunConfig, invocation: serde_json::Value) -> Result<(), CliError> {
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("invocation.json"), &invocation)?;
    Ok(())
}

fn apply_train_flags(t: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.variant {
        t.variant = v.into();
    }
    if let Some(v) = f.seq_len {
        t.seq_len = v;
    }
    if let Some(v) = f.main {
        t.main = v;
    }
    if let Some(v) = f.tau {
        t.tau = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = f.hidden {
        t.hidden = v;
    }
    if let Some(v) = f.weights {
        t.loss_weights = v;
    }
}

fn select<'a>(scans: &'a [Scan], split: Option<&DatasetSplit>, part: PartArg) -> Vec<&'a Scan> {
    match (split, part) {
        (Some(s), PartArg::Train) => s.select(SplitPart::Train, scans),
        (Some(s), PartArg::Validation) => s.select(SplitPart::Validation, scans),
        (Some(s), PartArg::Test) => s.select(SplitPart::Test, scans),
        _ => scans.iter().collect(),
    }
}

fn epoch_logger(history: &mut Vec<EpochRecord>) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        log("epoch", serde_json::to_value(r).unwrap_or_default());
        history.push(r.clone());
    }
}

fn cmd_simulate(
    common: Common,
    subjects: Option<usize>,
    per_subject: Option<usize>,
    frames: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = subjects {
        cfg.dataset.n_subjects = n;
    }
    if let Some(n) = per_subject {
        cfg.dataset.scans_per_subject = n;
    }
    if let Some(n) = frames {
        cfg.dataset.specs.iter_mut().for_each(|s| s.n_frames = n);
    }
    let out = out_dir(common.out, "simulate");
    log("simulate.start", json!({"subjects": cfg.dataset.n_subjects, "scans_per_subject": cfg.dataset.scans_per_subject}));
    let scans = simulate_dataset(&cfg.dataset, exec_of(common.sequential))?;
    write_dataset(&out, &scans)?;
    persist(&out, &cfg, json!({"command": "simulate"}))?;
    log("simulate.done", json!({"scans": scans.len(), "out": out}));
    Ok(())
}

fn train_run(
    cfg: &TrainConfig,
    train: &[&Scan],
    val: &[&Scan],
    exec: Execution,
    resume: Option<Checkpoint>,
    history: &mut Vec<EpochRecord>,
) -> Result<freescan::model::TrainOutcome, CliError> {
    let trainer = match resume {
        Some(ck) => Trainer::resume(ck, train, val, exec)?,
        None => Trainer::new(cfg.clone(), train, val, exec)?,
    };
    Ok(trainer.run(&mut epoch_logger(history))?)
}

fn cmd_train(common: Common, data: PathBuf, flags: TrainFlags, resume: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    apply_train_flags(&mut cfg.train, &flags);
    let resume = match resume {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            cfg.train = ck.config.clone();
            Some((p, ck))
        }
        None => None,
    };
    let out = out_dir(common.out, "train");
    let scans = read_dataset(&data)?;
    let split = split_scans(&scans, cfg.split_ratios, cfg.split_seed)?;
    let train = split.select(SplitPart::Train, &scans);
    let val = split.select(SplitPart::Validation, &scans);
    persist(
        &out,
        &cfg,
        json!({"command": "train", "data": data, "resume": resume.as_ref().map(|r| &r.0)}),
    )?;
    write_json(&out.join("split.json"), &split)?;
    log("train.start", json!({"train_scans": train.len(), "validation_scans": val.len(), "config": cfg.train}));
    let mut history = Vec::new();
    let outcome = train_run(
        &cfg.train,
        &train,
        &val,
        exec_of(common.sequential),
        resume.map(|r| r.1),
        &mut history,
    )?;
    let best = Checkpoint {
        model: outcome.best.clone(),
        optimizer: outcome.last.optimizer.clone(),
        config: cfg.train.clone(),
    };
    save_checkpoint(&best, &out.join("best.ckpt"))?;
    save_checkpoint(&outcome.last, &out.join("last.ckpt"))?;
    let mut lines = String::new();
    for r in &outcome.history {
        let _ = writeln!(lines, "{}", serde_json::to_string(r).unwrap_or_default());
    }
    fs::write(out.join("history.jsonl"), lines).map_err(|e| CliError::Data(e.to_string()))?;
    write_json(
        &out.join("summary.json"),
        &json!({"best_epoch": outcome.best_epoch, "steps": outcome.last.optimizer.step}),
    )?;
    log("train.done", json!({"best_epoch": outcome.best_epoch, "out": out}));
    Ok(())
}

fn cmd_reconstruct(model: PathBuf, scan_dir: PathBuf, out: Option<PathBuf>, sequential: bool) -> Result<(), CliError> {
    let ck = load_checkpoint(&model)?;
    let scan = read_scan(&scan_dir)?;
    let out = out_dir(out, "reconstruct");
    let rec = reconstruct(&ck.model, &scan.id(), &scan, exec_of(sequential))?;
    let corners = corner_points(scan.width, scan.height, scan.pixel_spacing).map_err(|e| CliError::Data(e.to_string()))?;
    write_trajectory(&rec, &scan.calib, &corners, &out)?;
    let cfg = RunConfig {
        train: ck.config.clone(),
        ..RunConfig::default()
    };
    persist(
        &out,
        &cfg,
        json!({"command": "reconstruct", "model": model, "scan": scan_dir, "sequential": sequential}),
    )?;
    log(
        "reconstruct.done",
        json!({"scan": rec.scan_ref, "localized": rec.len(), "unlocalized": rec.unlocalized.len()}),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    common: Common,
    data: PathBuf,
    model: Option<PathBuf>,
    oracle: bool,
    part: PartArg,
    pixel_stride: Option<usize>,
    voxel_mm: Option<f64>,
    dice: Option<DiceArg>,
) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = pixel_stride {
        cfg.metrics.pixel_stride = s;
    }
    if let Some(v) = voxel_mm {
        cfg.metrics.voxel_mm = v;
    }
    if let Some(d) = dice {
        cfg.metrics.dice = match d {
            DiceArg::All => DiceFilter::All,
            DiceArg::PerpendicularOnly => DiceFilter::PerpendicularOnly,
            DiceArg::None => DiceFilter::None,
        };
    }
    let out = out_dir(common.out, "evaluate");
    let scans = read_dataset(&data)?;
    let split = match part {
        PartArg::All => None,
        _ => Some(split_scans(&scans, cfg.split_ratios, cfg.split_seed)?),
    };
    let selected = select(&scans, split.as_ref(), part);
    let exec = exec_of(common.sequential);
    let report = match &model {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            cfg.train = ck.config.clone();
            evaluate_dataset(&ck.model, &selected, &cfg.metrics, exec)?.0
        }
        None if oracle => {
            let p = OraclePredictor {
                seq_len: cfg.train.seq_len,
                main: cfg.train.main,
            };
            evaluate_dataset(&p, &selected, &cfg.metrics, exec)?.0
        }
        None => return Err(CliError::Config("either --model or --oracle is required".into())),
    };
    write_report_json(&report, &out.join("report.json"))?;
    write_report_csv(&report, &out.join("report.csv"))?;
    persist(
        &out,
        &cfg,
        json!({"command": "evaluate", "data": data, "model": model, "oracle": oracle, "part": format!("{part:?}").to_lowercase()}),
    )?;
    log("evaluate.done", json!({"scans": report.per_scan.len(), "aggregate": report.aggregate}));
    Ok(())
}

fn cmd_gradcheck(out: Option<PathBuf>, seed: u64) -> Result<(), CliError> {
    let out = out_dir(out, "gradcheck");
    let mut reports = Vec::new();
    for v in [Variant::FeedForward, Variant::Recurrent] {
        let r = gradcheck(&tiny_spec(v), seed, GRADCHECK_STEP)?;
        log(
            "gradcheck",
            json!({"variant": v, "max_rel_error": r.max_rel_error(), "tolerance": GRADCHECK_TOLERANCE}),
        );
        reports.push(r);
    }
    write_json(&out.join("gradcheck.json"), &reports)?;
    write_json(
        &out.join("config.json"),
        &json!({"seed": seed, "step": GRADCHECK_STEP, "tolerance": GRADCHECK_TOLERANCE}),
    )?;
    write_json(&out.join("invocation.json"), &json!({"command": "gradcheck", "seed": seed}))?;
    let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
    if reports.iter().all(|r| r.passed(GRADCHECK_TOLERANCE)) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e} > {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn sweep_row(variant: Variant, p: &SweepPoint, tau: usize, r: &MetricsReport) -> String {
    let a = &r.aggregate;
    let (i, j) = p.main();
    let dice = a.dice.map(|d| format!("{},{}", d.mean, d.std)).unwrap_or_else(|| ",".into());
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        variant.name(),
        p.past,
        p.interval,
        p.future,
        p.seq_len(),
        i,
        j,
        tau,
        a.frame_err_mm.mean,
        a.frame_err_mm.std,
        a.acc_err_mm.mean,
        a.acc_err_mm.std,
        a.drift_mm.mean,
        a.drift_mm.std,
        dice
    )
}

fn cmd_sweep(common: Common, data: PathBuf, epochs: Option<usize>, steps: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load_config(&common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = steps {
        cfg.train.steps_per_epoch = s;
    }
    if cfg.sweep.points.is_empty() || cfg.sweep.variants.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let out = out_dir(common.out, "sweep");
    let scans = read_dataset(&data)?;
    let split = split_scans(&scans, cfg.split_ratios, cfg.split_seed)?;
    let (train, val, test) = (
        split.select(SplitPart::Train, &scans),
        split.select(SplitPart::Validation, &scans),
        split.select(SplitPart::Test, &scans),
    );
    persist(&out, &cfg, json!({"command": "sweep", "data": data}))?;
    let exec = exec_of(common.sequential);
    let mut csv = String::from(
        "variant,past,interval,future,seq_len,i_star,j_star,tau,frame_err_mean,frame_err_std,acc_err_mean,acc_err_std,drift_mean,drift_std,dice_mean,dice_std\n",
    );
    for &variant in &cfg.sweep.variants {
        for p in &cfg.sweep.points {
            let m = p.seq_len();
            let tau = cfg.train.tau.min(m * (m - 1) / 2 - 1);
            let tc = TrainConfig {
                variant,
                seq_len: m,
                main: p.main(),
                tau,
                ..cfg.train.clone()
            };
            let name = format!("{}_p{}_i{}_f{}", variant.name(), p.past, p.interval, p.future);
            log("sweep.run", json!({"run": name}));
            let mut history = Vec::new();
            let outcome = train_run(&tc, &train, &val, exec, None, &mut history)?;
            let (report, _) = evaluate_dataset(&outcome.best, &test, &cfg.metrics, exec)?;
            let dir = out.join("runs").join(&name);
            write_report_json(&report, &dir.join("report.json"))?;
            write_json(&dir.join("train_config.json"), &tc)?;
            csv.push_str(&sweep_row(variant, p, tau, &report));
        }
    }
    fs::write(out.join("sweep.csv"), csv).map_err(|e| CliError::Data(e.to_string()))?;
    log("sweep.done", json!({"out": out}));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            common,
            subjects,
            scans_per_subject,
            frames,
        } => cmd_simulate(common, subjects, scans_per_subject, frames),
        Command::Train {
            common,
            data,
            flags,
            resume,
        } => cmd_train(common, data, flags, resume),
        Command::Reconstruct {
            model,
            scan,
            out,
            sequential,
        } => cmd_reconstruct(model, scan, out, sequential),
        Command::Evaluate {
            common,
            data,
            model,
            oracle,
            part,
            pixel_stride,
            voxel_mm,
            dice,
        } => cmd_evaluate(common, data, model, oracle, part, pixel_stride, voxel_mm, dice),
        Command::Gradcheck { out, seed } => cmd_gradcheck(out, seed),
        Command::Sweep {
            common,
            data,
            epochs,
            steps_per_epoch,
        } => cmd_sweep(common, data, epochs, steps_per_epoch),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", CliError::Config(e.to_string()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code())
        }
    }
}

