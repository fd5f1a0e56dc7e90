//! Series storage, normalization, and training windows.

mod io;
mod synthetic;

use std::ops::Range;

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mask_in_place, ChannelLayout, GridSpec, LandSeaMask, OceanState, STEP_HOURS};
use crate::net::ContextSignals;

pub use io::{export_store, FORMAT_VERSION as DATA_FORMAT_VERSION, ingest_raw, list_state_files, state_file_name, GridMetadata, GRID_FILE, MASK_FILE};
pub use synthetic::{generate_synthetic, lag_map, synthetic_mask, Dynamic, SyntheticRecipe};

/// Input window length used by the full model.
pub const WINDOW_STEPS: usize = 4;

pub fn step() -> Duration {
    Duration::hours(STEP_HOURS)
}

/// First timestamp of generated series.
pub fn series_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap()
}

/// Six-hourly series of raw (physical-unit) states.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStore {
    pub grid: GridSpec,
    pub layout: ChannelLayout,
    pub mask: LandSeaMask,
    pub timestamps: Vec<DateTime<Utc>>,
    /// One `C x H x W` array per timestamp.
    pub states: Vec<Array3<f32>>,
}

impl SeriesStore {
    pub fn new(
        grid: GridSpec,
        layout: ChannelLayout,
        mask: LandSeaMask,
        timestamps: Vec<DateTime<Utc>>,
        states: Vec<Array3<f32>>,
    ) -> Result<Self> {
        let store = Self {
            grid,
            layout,
            mask,
            timestamps,
            states,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.mask.n_lat() != self.grid.n_lat() || self.mask.n_lon() != self.grid.n_lon() {
            return Err(Error::Shape("mask does not match grid".into()));
        }
        if self.layout.n_depths != self.grid.depth_levels.len() {
            return Err(Error::Shape(format!(
                "layout has {} depths, grid declares {}",
                self.layout.n_depths,
                self.grid.depth_levels.len()
            )));
        }
        let c = self.layout.total_channels();
        self.mask.check_channels(c)?;
        if self.timestamps.len() != self.states.len() {
            return Err(Error::Shape("timestamp and state counts differ".into()));
        }
        for t in &self.timestamps {
            crate::grid::check_step_aligned(*t)?;
        }
        for w in self.timestamps.windows(2) {
            if w[1] - w[0] != step() {
                return Err(Error::Domain(format!("non-6-hourly spacing between {} and {}", w[0], w[1])));
            }
        }
        let want = [c, self.grid.n_lat(), self.grid.n_lon()];
        if let Some(s) = self.states.iter().find(|s| s.shape() != want) {
            return Err(Error::Shape(format!("state shape {:?}, expected {:?}", s.shape(), want)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.layout.total_channels()
    }

    pub fn index_of(&self, t: DateTime<Utc>) -> Option<usize> {
        let first = *self.timestamps.first()?;
        let dt = t - first;
        if dt < Duration::zero() || dt.num_seconds() % step().num_seconds() != 0 {
            return None;
        }
        let i = (dt.num_seconds() / step().num_seconds()) as usize;
        (i < self.len()).then_some(i)
    }

    /// Raw state `i` in `f64`.
    pub fn state(&self, i: usize) -> OceanState {
        OceanState {
            values: self.states[i].mapv(f64::from),
            timestamp: self.timestamps[i],
        }
    }

    /// All states normalized with `stats` and land-filled.
    pub fn normalized(&self, stats: &NormStats) -> Result<NormalizedSeries> {
        let states = self
            .states
            .iter()
            .map(|s| {
                let mut n = stats.normalize(&s.mapv(f64::from))?;
                mask_in_place(&mut n, &self.mask)?;
                Ok(n)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NormalizedSeries {
            grid: self.grid.clone(),
            mask: self.mask.clone(),
            timestamps: self.timestamps.clone(),
            states,
        })
    }

    /// Chronological 70/10/20 split of the state indices.
    pub fn split(&self) -> DataSplit {
        DataSplit::chronological(self.len())
    }
}

/// Index ranges of the chronological train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl DataSplit {
    pub fn chronological(n: usize) -> Self {
        let a = n * 7 / 10;
        let b = n * 8 / 10;
        Self {
            train: 0..a,
            val: a..b,
            test: b..n,
        }
    }
}

/// Per-channel z-score statistics over ocean cells of the training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape("mean and std lengths differ".into()));
        }
        if let Some((c, &s)) = std.iter().enumerate().find(|(_, s)| !(**s >= MIN_STD)) {
            return Err(Error::DegenerateChannel { channel: c, std: s });
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, values: &Array3<f64>) -> Result<()> {
        if values.shape()[0] != self.channels() {
            return Err(Error::Shape(format!(
                "{} channels for {} statistics",
                values.shape()[0],
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, values: &Array3<f64>) -> Result<Array3<f64>> {
        self.check(values)?;
        let mut out = values.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn denormalize(&self, values: &Array3<f64>) -> Result<Array3<f64>> {
        self.check(values)?;
        let mut out = values.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(s.mean, s.std)
    }
}

/// Two-pass mean and population standard deviation per channel over ocean
/// cells of states with `range.start <= t < range.end`.
pub fn compute_norm_stats(store: &SeriesStore, range: Range<DateTime<Utc>>) -> Result<NormStats> {
    if range.start >= range.end {
        return Err(Error::Domain("empty training range".into()));
    }
    let picked: Vec<usize> = (0..store.len())
        .filter(|&i| range.contains(&store.timestamps[i]))
        .collect();
    if picked.is_empty() {
        return Err(Error::Domain("training range contains no states".into()));
    }
    let c = store.channels();
    let (h, w) = (store.grid.n_lat(), store.grid.n_lon());
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let plane = store.mask.plane(ch);
        let mut sum = 0.0;
        let mut n = 0usize;
        for &i in &picked {
            let s = &store.states[i];
            for hi in 0..h {
                for wi in 0..w {
                    if plane[hi * w + wi] == 1 {
                        sum += s[[ch, hi, wi]] as f64;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            // all-land channel: nothing to normalize, keep identity scaling
            mean[ch] = 0.0;
            std[ch] = 1.0;
            continue;
        }
        let m = sum / n as f64;
        let mut sq = 0.0;
        for &i in &picked {
            let s = &store.states[i];
            for hi in 0..h {
                for wi in 0..w {
                    if plane[hi * w + wi] == 1 {
                        let d = s[[ch, hi, wi]] as f64 - m;
                        sq += d * d;
                    }
                }
            }
        }
        mean[ch] = m;
        std[ch] = (sq / n as f64).sqrt();
    }
    NormStats::new(mean, std)
}

/// Normalized, land-filled states ready for windowing.
#[derive(Debug, Clone)]
pub struct NormalizedSeries {
    pub grid: GridSpec,
    pub mask: LandSeaMask,
    pub timestamps: Vec<DateTime<Utc>>,
    pub states: Vec<Array3<f64>>,
}

impl NormalizedSeries {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Window whose newest input is state `idx`, with `n_inputs` inputs and
    /// the next state as target.
    pub fn window(&self, idx: usize, n_inputs: usize) -> Result<SampleWindow> {
        let first_needed = idx as i64 - n_inputs as i64 + 1;
        if first_needed < 0 {
            let t0 = self.timestamps.first().copied().unwrap_or_else(series_epoch);
            return Err(Error::DataGap(t0 + step() * first_needed as i32));
        }
        if idx + 1 >= self.len() {
            let last = self.timestamps.last().copied().unwrap_or_else(series_epoch);
            return Err(Error::DataGap(last + step() * (idx + 2 - self.len()) as i32));
        }
        let inputs = (idx + 1 - n_inputs..=idx)
            .map(|i| OceanState {
                values: self.states[i].clone(),
                timestamp: self.timestamps[i],
            })
            .collect();
        let target = OceanState {
            values: self.states[idx + 1].clone(),
            timestamp: self.timestamps[idx + 1],
        };
        let context = ContextSignals::at(self.timestamps[idx], &self.grid, &self.mask)?;
        Ok(SampleWindow {
            inputs,
            target,
            context,
        })
    }

    /// Indices `idx` for which a window plus `horizon` targets fit in `range`.
    pub fn valid_origins(&self, range: Range<usize>, n_inputs: usize, horizon: usize) -> Range<usize> {
        let lo = range.start + n_inputs - 1;
        let hi = range.end.min(self.len()).saturating_sub(horizon);
        lo..hi.max(lo)
    }
}

/// `N` consecutive normalized inputs (oldest first), the next-step target,
/// and the context at the newest input.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub inputs: Vec<OceanState>,
    pub target: OceanState,
    pub context: ContextSignals,
}

/// Window ending at `t` with four inputs `t-18h .. t` and target `t+6h`.
pub fn make_window(store: &SeriesStore, stats: &NormStats, t: DateTime<Utc>) -> Result<SampleWindow> {
    make_window_n(store, stats, t, WINDOW_STEPS)
}

pub fn make_window_n(store: &SeriesStore, stats: &NormStats, t: DateTime<Utc>, n_inputs: usize) -> Result<SampleWindow> {
    let mut inputs = Vec::with_capacity(n_inputs);
    for k in (0..n_inputs).rev() {
        let tk = t - step() * k as i32;
        let i = store.index_of(tk).ok_or(Error::DataGap(tk))?;
        inputs.push(normalized_state(store, stats, i)?);
    }
    let tn = t + step();
    let target = normalized_state(store, stats, store.index_of(tn).ok_or(Error::DataGap(tn))?)?;
    let context = ContextSignals::at(t, &store.grid, &store.mask)?;
    Ok(SampleWindow {
        inputs,
        target,
        context,
    })
}

fn normalized_state(store: &SeriesStore, stats: &NormStats, i: usize) -> Result<OceanState> {
    let mut v = stats.normalize(&store.states[i].mapv(f64::from))?;
    mask_in_place(&mut v, &store.mask)?;
    Ok(OceanState {
        values: v,
        timestamp: store.timestamps[i],
    })
}
