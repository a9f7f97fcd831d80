//! Seeded experiment harness: configs, single runs, sweeps and reports.

pub mod config;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{
    DatasetSource, EmbeddingChoice, ExperimentConfig, FailedRuns, LossEntry, Metric, ModelSpec,
    ScheduleConfig,
};
pub use report::{load_result, write_lr_curve, write_report};
pub use sweep::{
    enumerate_runs, size_sweep, Aggregate, Comparison, ExperimentResult, PreparedData, RunKey,
    RunRecord, RunTiming,
};
pub use train::{
    accuracy, feature_accuracy, predict, run_training, Readout, RunStatus, TrainOutcome,
    TrainSettings,
};

/// Combines seed components with splitmix64 so nearby inputs give unrelated seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        let mut z = (acc ^ p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}
