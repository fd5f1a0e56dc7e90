//! Point observations gridded by nearest cell centre.

use chrono::{DateTime, Utc};
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{step, NormStats};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, LandSeaMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: DateTime<Utc>,
    pub latitude: f64,
    pub longitude: f64,
    /// Flat channel index in the layout.
    pub channel: usize,
    /// Physical units.
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseObsSet {
    pub records: Vec<Observation>,
}

/// Observations averaged onto the grid for one six-hour bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedObs {
    /// Mean observed value per cell; 0 where unobserved.
    pub values: Array3<f64>,
    /// Observation count per cell.
    pub counts: Array3<u32>,
    /// Records outside the grid's latitude range.
    pub rejected: usize,
    /// Records outside the bin.
    pub outside_bin: usize,
}

impl GriddedObs {
    pub fn observed(&self, c: usize, h: usize, w: usize) -> bool {
        self.counts[[c, h, w]] > 0
    }

    pub fn observed_cells(&self) -> usize {
        self.counts.iter().filter(|&&n| n > 0).count()
    }

    /// Root of the latitude-weighted mean squared error over observed ocean
    /// cells of `channel`; `None` when no such cell exists.
    pub fn rmse(&self, forecast: &Array3<f64>, channel: usize, weights: &[f64], mask: &LandSeaMask) -> Option<f64> {
        let (_, h, w) = forecast.dim();
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..h {
            for j in 0..w {
                if self.observed(channel, i, j) && mask.is_ocean(channel, i, j) {
                    let d = forecast[[channel, i, j]] - self.values[[channel, i, j]];
                    acc += weights[i] * d * d;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (acc / n as f64).sqrt())
    }
}

fn lon_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Nearest cell `(row, col)`: per-axis closest centre, longitude measured
/// around the circle, ties to the lower index. `None` if the latitude lies
/// beyond the outer cell edges.
pub fn nearest_index(grid: &GridSpec, lat: f64, lon: f64) -> Option<(usize, usize)> {
    let lats = &grid.latitudes;
    let h = lats.len();
    let half_first = if h > 1 { (lats[1] - lats[0]).abs() / 2.0 } else { 90.0 };
    let half_last = if h > 1 { (lats[h - 1] - lats[h - 2]).abs() / 2.0 } else { 90.0 };
    let (lo, hi) = if lats[0] <= lats[h - 1] {
        (lats[0] - half_first, lats[h - 1] + half_last)
    } else {
        (lats[h - 1] - half_last, lats[0] + half_first)
    };
    if !lat.is_finite() || !lon.is_finite() || lat < lo.max(-90.0) || lat > hi.min(90.0) {
        return None;
    }
    let argmin = |dist: &dyn Fn(usize) -> f64, n: usize| {
        let mut best = 0;
        for i in 1..n {
            if dist(i) < dist(best) {
                best = i;
            }
        }
        best
    };
    let i = argmin(&|i| (lats[i] - lat).abs(), h);
    let j = argmin(&|j| lon_dist(grid.longitudes[j], lon), grid.longitudes.len());
    Some((i, j))
}

/// Grids records valid in `[bin_start, bin_start + 6h)`; several records in
/// one cell are averaged.
pub fn grid_sparse_obs(obs: &SparseObsSet, grid: &GridSpec, channels: usize, bin_start: DateTime<Utc>) -> Result<GriddedObs> {
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let mut sums = Array3::<f64>::zeros((channels, h, w));
    let mut counts = Array3::<u32>::zeros((channels, h, w));
    let mut rejected = 0;
    let mut outside_bin = 0;
    let bin_end = bin_start + step();
    for r in &obs.records {
        if r.channel >= channels {
            return Err(Error::Shape(format!("observation channel {} of {channels}", r.channel)));
        }
        if r.timestamp < bin_start || r.timestamp >= bin_end {
            outside_bin += 1;
            continue;
        }
        match nearest_index(grid, r.latitude, r.longitude) {
            Some((i, j)) => {
                sums[[r.channel, i, j]] += r.value;
                counts[[r.channel, i, j]] += 1;
            }
            None => rejected += 1,
        }
    }
    if rejected > 0 {
        log::warn!("{rejected} observations outside the grid were rejected");
    }
    let values = ndarray::Zip::from(&sums)
        .and(&counts)
        .map_collect(|&s, &n| if n > 0 { s / n as f64 } else { 0.0 });
    Ok(GriddedObs {
        values,
        counts,
        rejected,
        outside_bin,
    })
}

/// `n` buoys at random ocean positions in `channels`, sampling the
/// physical truth at their cell plus Gaussian noise of `noise` normalized
/// units.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_buoys<R: Rng + ?Sized>(
    truth: &Array3<f32>,
    t: DateTime<Utc>,
    grid: &GridSpec,
    mask: &LandSeaMask,
    norm: &NormStats,
    channels: &[usize],
    n: usize,
    noise: f64,
    rng: &mut R,
) -> SparseObsSet {
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let dlat = if h > 1 { (grid.latitudes[1] - grid.latitudes[0]).abs() } else { 1.0 };
    let dlon = 360.0 / w as f64;
    let mut records = Vec::with_capacity(n);
    let mut guard = 0;
    while records.len() < n && guard < 100 * n.max(1) {
        guard += 1;
        let c = channels[rng.random_range(0..channels.len())];
        let (i, j) = (rng.random_range(0..h), rng.random_range(0..w));
        if !mask.is_ocean(c, i, j) {
            continue;
        }
        // stay strictly inside the cell so the nearest centre is (i, j)
        let lat = grid.latitudes[i] + dlat * rng.random_range(-0.45..0.45);
        let lon = (grid.longitudes[j] + dlon * rng.random_range(-0.45..0.45)).rem_euclid(360.0);
        let eta: f64 = rng.sample(StandardNormal);
        records.push(Observation {
            timestamp: t,
            latitude: lat,
            longitude: lon,
            channel: c,
            value: truth[[c, i, j]] as f64 + noise * norm.std[c] * eta,
        });
    }
    SparseObsSet { records }
}
