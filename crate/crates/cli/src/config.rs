use std::path::Path;

use freescan::dataio::{read_json, DataError};
use freescan::metrics::MetricOptions;
use freescan::model::{TrainConfig, Variant};
use freescan::simulator::DatasetConfig;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_VERSION: &str = "1.0";

/// One point of an ablation grid, in frames: `past = i* - 1`,
/// `interval = j* - i*`, `future = M - j*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub past: usize,
    pub interval: usize,
    pub future: usize,
}

impl SweepPoint {
    pub fn seq_len(&self) -> usize {
        self.past + self.interval + self.future + 1
    }

    pub fn main(&self) -> (usize, usize) {
        (self.past + 1, self.past + 1 + self.interval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub points: Vec<SweepPoint>,
    pub variants: Vec<Variant>,
}

impl Default for SweepConfig {
    /// Interval, past-frame and future-frame axes around `(1, 2, 1)`.
    fn default() -> Self {
        let p = |past, interval, future| SweepPoint { past, interval, future };
        Self {
            points: vec![
                p(1, 1, 1),
                p(1, 2, 1),
                p(1, 3, 1),
                p(1, 4, 1),
                p(0, 2, 1),
                p(2, 2, 1),
                p(1, 2, 0),
                p(1, 2, 2),
            ],
            variants: vec![Variant::FeedForward, Variant::Recurrent],
        }
    }
}

/// Everything a subcommand needs to re-run identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: String,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub metrics: MetricOptions,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_CONFIG_VERSION.into(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            split_ratios: [3.0, 1.0, 1.0],
            split_seed: 0,
            metrics: MetricOptions::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, DataError> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }

    pub fn check_version(&self) -> Result<(), String> {
        let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
        if major(&self.format_version) != major(RUN_CONFIG_VERSION) {
            return Err(format!(
                "run config version {} is not supported (expected {}.x)",
                self.format_version,
                major(RUN_CONFIG_VERSION)
            ));
        }
        Ok(())
    }
}
