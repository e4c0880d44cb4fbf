//! Weight sweeps and initialization robustness runs.

use super::config::{TrainConfig, TrainMode};
use super::data::Dataset;
use super::run::{train_on, RunRecord, TrainError};
use crate::losses::FixedWeights;
use crate::metrics::MetricReport;
use rayon::prelude::*;

/// Weight on the first task; the second task gets `1 - w`.
pub const DEFAULT_WEIGHTS: [f64; 11] = [1.0, 0.975, 0.95, 0.9, 0.85, 0.8, 0.7, 0.5, 0.2, 0.1, 0.0];

pub fn default_grid() -> Vec<FixedWeights> {
    DEFAULT_WEIGHTS
        .iter()
        .map(|&w| FixedWeights::new(vec![w, 1.0 - w]).expect("grid weights are valid"))
        .collect()
}

#[derive(Debug)]
pub struct SweepRow {
    pub weights: Vec<f64>,
    pub result: Result<RunRecord, TrainError>,
}

impl SweepRow {
    pub fn metrics(&self) -> Option<&MetricReport> {
        self.result.as_ref().ok().and_then(|r| r.final_metrics.as_ref())
    }
}

fn build_data(config: &TrainConfig) -> Result<Dataset, TrainError> {
    config.validate()?;
    Ok(Dataset::build(config)?)
}

/// One fixed-weight run per grid entry on a shared dataset. Cells fail
/// independently.
pub fn run_weight_sweep(config: &TrainConfig, grid: &[FixedWeights]) -> Result<Vec<SweepRow>, TrainError> {
    let data = build_data(config)?;
    Ok(grid
        .par_iter()
        .map(|w| {
            let cell = TrainConfig {
                mode: TrainMode::Fixed(w.clone()),
                ..config.clone()
            };
            SweepRow {
                weights: w.as_slice().to_vec(),
                result: train_on(&cell, &data).map(|o| o.record),
            }
        })
        .collect())
}

/// Trains `config` under several modes on one shared dataset.
pub fn run_modes(config: &TrainConfig, modes: &[TrainMode]) -> Result<Vec<Result<RunRecord, TrainError>>, TrainError> {
    let data = build_data(config)?;
    Ok(modes
        .par_iter()
        .map(|m| {
            let c = TrainConfig {
                mode: m.clone(),
                ..config.clone()
            };
            train_on(&c, &data).map(|o| o.record)
        })
        .collect())
}

#[derive(Debug)]
pub struct RobustnessReport {
    pub s_inits: Vec<f64>,
    pub records: Vec<RunRecord>,
    /// Per task: `max - min` of the final `s` across runs.
    pub final_spread: Vec<f64>,
    /// First iteration from which every task's `s` stays within `band`
    /// across all runs until the end.
    pub iters_to_band: Option<usize>,
    pub band: f64,
}

/// Learned-mode runs that differ only in the initial `s` of every task.
pub fn run_init_robustness(config: &TrainConfig, s_inits: &[f64], band: f64) -> Result<RobustnessReport, TrainError> {
    let data = build_data(config)?;
    let k = config.tasks.len();
    let records = s_inits
        .par_iter()
        .map(|&s0| {
            let c = TrainConfig {
                mode: TrainMode::Learned,
                s_init: vec![s0; k],
                ..config.clone()
            };
            c.validate()?;
            train_on(&c, &data).map(|o| o.record)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spread_at = |i: usize, t: usize| {
        let (lo, hi) = records
            .iter()
            .map(|r| r.rows[i].s[t])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    let n = records.first().map_or(0, |r| r.rows.len());
    let final_spread = (0..k).map(|t| if n == 0 { 0.0 } else { spread_at(n - 1, t) }).collect();
    let mut iters_to_band = None;
    for i in (0..n).rev() {
        if (0..k).all(|t| spread_at(i, t) <= band) {
            iters_to_band = Some(i);
        } else {
            break;
        }
    }
    Ok(RobustnessReport {
        s_inits: s_inits.to_vec(),
        records,
        final_spread,
        iters_to_band,
        band,
    })
}
