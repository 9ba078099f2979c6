//! Training-cost benchmark: proposed vs baseline on the same data and seed.
//!
//! Epochs are interleaved (proposed, baseline, proposed, ...) so thermal
//! and cache drift average out of the ratio instead of biasing one model.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::UnpairedDataset;
use crate::networks::{count_flops_with, ModelKind, Phase};
use crate::training::{EpochSummary, TrainConfig, TrainError, TrainResult, Trainer};

#[derive(Debug, Clone)]
pub struct BenchEpochRow {
    pub model: ModelKind,
    pub epoch: usize,
    pub wall_seconds: f64,
    pub train_step_flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchEpochRow>,
    pub proposed_total_seconds: f64,
    pub baseline_total_seconds: f64,
    /// baseline wall time / proposed wall time.
    pub speedup: f64,
    /// baseline step FLOPs / proposed step FLOPs at the configured toggles.
    pub flop_ratio: f64,
    pub flop_ratio_dev_b_on: f64,
    pub flop_ratio_dev_b_off: f64,
    /// First epoch (1-based) whose mean reconstruction loss dropped to the
    /// threshold; None if never reached within the benchmark.
    pub epochs_to_threshold_proposed: Option<usize>,
    pub epochs_to_threshold_baseline: Option<usize>,
    pub loss_threshold: f64,
}

impl BenchReport {
    /// Convergence-rate observation (baseline epochs / proposed epochs),
    /// reported when both models reached the threshold.
    pub fn convergence_ratio(&self) -> Option<f64> {
        match (
            self.epochs_to_threshold_proposed,
            self.epochs_to_threshold_baseline,
        ) {
            (Some(p), Some(b)) if p > 0 => Some(b as f64 / p as f64),
            _ => None,
        }
    }
}

fn first_epoch_reaching(epochs: &[EpochSummary], threshold: f64) -> Option<usize> {
    epochs
        .iter()
        .find(|e| e.mean_cyclic <= threshold)
        .map(|e| e.epoch)
}

/// Run `epochs` epochs of each model, interleaved per epoch, on the same
/// dataset and seed. `on_epoch` fires after every epoch of either model.
pub fn run_bench(
    cfg: &TrainConfig,
    dataset: &UnpairedDataset,
    epochs: usize,
    loss_threshold: f64,
    mut on_epoch: impl FnMut(ModelKind, &EpochSummary),
) -> TrainResult<BenchReport> {
    if epochs == 0 {
        return Err(TrainError::Config("bench needs at least one epoch".into()));
    }
    let mut proposed_cfg = cfg.clone();
    proposed_cfg.model = ModelKind::Proposed;
    proposed_cfg.epochs = epochs;
    let mut baseline_cfg = cfg.clone();
    baseline_cfg.model = ModelKind::Baseline;
    baseline_cfg.epochs = epochs;

    let mut proposed = Trainer::new(&proposed_cfg, dataset)?;
    let mut baseline = Trainer::new(&baseline_cfg, dataset)?;
    let proposed_params: u64 = proposed
        .state()
        .model
        .networks()
        .iter()
        .map(|n| n.param_count())
        .sum();
    let baseline_params: u64 = baseline
        .state()
        .model
        .networks()
        .iter()
        .map(|n| n.param_count())
        .sum();

    let mut rows = Vec::with_capacity(2 * epochs);
    let mut proposed_epochs = Vec::new();
    let mut baseline_epochs = Vec::new();
    for _ in 0..epochs {
        let (summary, _) = proposed.run_epoch()?;
        on_epoch(ModelKind::Proposed, &summary);
        rows.push(BenchEpochRow {
            model: ModelKind::Proposed,
            epoch: summary.epoch,
            wall_seconds: summary.seconds,
            train_step_flops: proposed_cfg.step_flops(),
            params: proposed_params,
        });
        proposed_epochs.push(summary);

        let (summary, _) = baseline.run_epoch()?;
        on_epoch(ModelKind::Baseline, &summary);
        rows.push(BenchEpochRow {
            model: ModelKind::Baseline,
            epoch: summary.epoch,
            wall_seconds: summary.seconds,
            train_step_flops: baseline_cfg.step_flops(),
            params: baseline_params,
        });
        baseline_epochs.push(summary);
    }

    let proposed_total_seconds: f64 = proposed_epochs.iter().map(|e| e.seconds).sum();
    let baseline_total_seconds: f64 = baseline_epochs.iter().map(|e| e.seconds).sum();
    let ratio_at = |dev_b: bool| {
        count_flops_with(&cfg.arch, ModelKind::Baseline, Phase::TrainStep, dev_b) as f64
            / count_flops_with(&cfg.arch, ModelKind::Proposed, Phase::TrainStep, dev_b) as f64
    };
    Ok(BenchReport {
        rows,
        proposed_total_seconds,
        baseline_total_seconds,
        speedup: baseline_total_seconds / proposed_total_seconds,
        flop_ratio: ratio_at(cfg.weights.use_dev_term_b),
        flop_ratio_dev_b_on: ratio_at(true),
        flop_ratio_dev_b_off: ratio_at(false),
        epochs_to_threshold_proposed: first_epoch_reaching(&proposed_epochs, loss_threshold),
        epochs_to_threshold_baseline: first_epoch_reaching(&baseline_epochs, loss_threshold),
        loss_threshold,
    })
}

pub const BENCH_CSV_HEADER: &str = "model,epoch,wall_seconds,train_step_flops,params";

/// Render the benchmark CSV: one row per (model, epoch), then summary rows
/// carrying their value in the wall_seconds column.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{:.3},{},{}\n",
            row.model.as_str(),
            row.epoch,
            row.wall_seconds,
            row.train_step_flops,
            row.params
        ));
    }
    let threshold_value = |v: Option<usize>| v.map_or(-1i64, |e| e as i64);
    out.push_str(&format!("speedup,,{:.4},,\n", report.speedup));
    out.push_str(&format!("flop_ratio,,{:.4},,\n", report.flop_ratio));
    out.push_str(&format!(
        "flop_ratio_dev_b_on,,{:.4},,\n",
        report.flop_ratio_dev_b_on
    ));
    out.push_str(&format!(
        "flop_ratio_dev_b_off,,{:.4},,\n",
        report.flop_ratio_dev_b_off
    ));
    out.push_str(&format!(
        "epochs_to_threshold_proposed,,{},,\n",
        threshold_value(report.epochs_to_threshold_proposed)
    ));
    out.push_str(&format!(
        "epochs_to_threshold_baseline,,{},,\n",
        threshold_value(report.epochs_to_threshold_baseline)
    ));
    out
}

pub fn write_bench_csv(report: &BenchReport, path: &Path) -> TrainResult<()> {
    fs::write(path, bench_csv(report)).map_err(|source| TrainError::Io {
        path: PathBuf::from(path),
        source,
    })
}
