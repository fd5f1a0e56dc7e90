//! Autoregressive inference, daily means, sparse-observation verification,
//! reports, and the ablation harness.

mod ablation;
mod obs;
mod report;

use chrono::{DateTime, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{step, NormStats, NormalizedSeries, SeriesStore};
use crate::error::{Error, Result};
use crate::grid::{mask_in_place, LandSeaMask};
use crate::mot::{merge_candidates, TopKSelector};
use crate::net::{ContextSignals, ForecastNet};
use crate::train::{parallel_map, worker_count, TrainState};

pub use ablation::{check_matched, run_ablation, AblationPlan, AblationResult, AblationRow, AblationVariant};
pub use obs::{grid_sparse_obs, nearest_index, synthetic_buoys, GriddedObs, Observation, SparseObsSet};
pub use report::{evaluate, load_map, load_map_index, map_rmse, DailySstRow, EvalConfig, ForecastReport, MapEntry, ObsRow, MAPS_INDEX};

/// Identifies the model and configuration that produced a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_sha256: String,
    pub config_sha256: String,
}

/// Merged normalized predictions for leads 1..=L from one initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRun {
    pub init: DateTime<Utc>,
    pub timestamps: Vec<DateTime<Utc>>,
    pub states: Vec<Array3<f64>>,
    pub provenance: Provenance,
}

impl ForecastRun {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Physical-unit copy as a series store (land holds the channel mean).
    pub fn to_store(&self, template: &SeriesStore, norm: &NormStats) -> Result<SeriesStore> {
        let states = self
            .states
            .iter()
            .map(|s| Ok(norm.denormalize(s)?.mapv(|v| v as f32)))
            .collect::<Result<Vec<_>>>()?;
        SeriesStore::new(
            template.grid.clone(),
            template.layout.clone(),
            template.mask.clone(),
            self.timestamps.clone(),
            states,
        )
    }
}

/// Frozen model used for inference.
pub struct Forecaster<'a> {
    net: ForecastNet,
    state: &'a TrainState,
    mask: &'a LandSeaMask,
    selector: TopKSelector,
    k: usize,
    provenance: Provenance,
}

impl<'a> Forecaster<'a> {
    pub fn new(state: &'a TrainState, mask: &'a LandSeaMask, provenance: Provenance) -> Result<Self> {
        let net = state.network()?;
        if net.n_params() != state.params.len() {
            return Err(Error::Checkpoint("parameter count does not match the network".into()));
        }
        let (selector, k) = state.selector();
        Ok(Self {
            net,
            state,
            mask,
            selector,
            k,
            provenance,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.state.net_config.n_inputs
    }

    /// One forward pass and merge on a window (oldest first) whose newest
    /// member is valid at `t`.
    pub fn predict_step(&self, window: &[&Array3<f64>], t: DateTime<Utc>) -> Result<Array3<f64>> {
        let signals = ContextSignals::at(t, &self.state.grid, self.mask)?;
        let cands = self.net.forward(&self.state.params, window, &signals, self.mask)?;
        let mut merged = merge_candidates(&cands, &self.selector, self.k, self.mask)?;
        mask_in_place(&mut merged, self.mask)?;
        Ok(merged)
    }

    /// `steps` autoregressive predictions from `initial` (normalized,
    /// oldest first, newest valid at `init`).
    pub fn rollout(&self, initial: &[Array3<f64>], init: DateTime<Utc>, steps: usize) -> Result<ForecastRun> {
        Ok(self.rollout_traced(initial, init, steps)?.0)
    }

    /// Like [`Self::rollout`], also returning the window used at each step.
    pub fn rollout_traced(
        &self,
        initial: &[Array3<f64>],
        init: DateTime<Utc>,
        steps: usize,
    ) -> Result<(ForecastRun, Vec<Vec<Array3<f64>>>)> {
        if steps == 0 {
            return Err(Error::Config("rollout needs at least one step".into()));
        }
        let n = self.n_inputs();
        if initial.len() != n {
            return Err(Error::Shape(format!("{} initial states for a window of {n}", initial.len())));
        }
        let mut window: Vec<Array3<f64>> = initial.to_vec();
        let mut states = Vec::with_capacity(steps);
        let mut timestamps = Vec::with_capacity(steps);
        let mut windows = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = init + step() * k as i32;
            let refs: Vec<&Array3<f64>> = window.iter().collect();
            let next = self.predict_step(&refs, t)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "rollout prediction".into(),
                    step: k + 1,
                });
            }
            windows.push(window.clone());
            window.remove(0);
            window.push(next.clone());
            states.push(next);
            timestamps.push(t + step());
        }
        let run = ForecastRun {
            init,
            timestamps,
            states,
            provenance: self.provenance.clone(),
        };
        Ok((run, windows))
    }
}

/// Rollouts of `steps` from ground-truth windows whose newest member is
/// each of `origins` (state indices), computed concurrently.
pub fn forecast_origins(
    fc: &Forecaster<'_>,
    series: &NormalizedSeries,
    origins: &[usize],
    steps: usize,
) -> Result<Vec<ForecastRun>> {
    let n = fc.n_inputs();
    let one = |o: usize| -> Result<ForecastRun> {
        if o + 1 < n || o >= series.len() {
            return Err(Error::Config(format!("origin {o} has no full input window")));
        }
        fc.rollout(&series.states[o + 1 - n..=o], series.timestamps[o], steps)
    };
    parallel_map(origins, worker_count(), one).into_iter().collect()
}

/// Mean of one day's four six-hourly predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyMean {
    /// Valid time of the first member.
    pub start: DateTime<Utc>,
    pub values: Array3<f64>,
}

/// Consecutive groups of four predictions; a trailing partial day is dropped.
pub fn daily_average(run: &ForecastRun) -> Vec<DailyMean> {
    if run.len() < 4 {
        log::warn!("run of {} steps is shorter than one day; no daily means", run.len());
        return Vec::new();
    }
    run.states
        .chunks_exact(4)
        .zip(run.timestamps.chunks_exact(4))
        .map(|(s, t)| {
            // pairwise sum keeps the mean of equal members exact
            let mut acc = &s[0] + &s[1];
            acc += &(&s[2] + &s[3]);
            acc.mapv_inplace(|v| v / 4.0);
            DailyMean { start: t[0], values: acc }
        })
        .collect()
}
