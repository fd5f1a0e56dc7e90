//! Mixture-of-time routing.
//!
//! A row-stochastic selection matrix `V` (channels x temporal windows)
//! tracks how unreliable each window's candidate has recently been for each
//! channel. Merging averages, per channel, the `K` candidates with the
//! smallest `V` entries. During training `V` is blended towards the softmax
//! (across windows) of the per-channel candidate MAE.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, GridSpec, LandSeaMask};
use crate::net::CandidateSet;
use crate::objectives::{channel_candidate_mae, CandidateMae};

const ROW_TOL: f64 = 1e-6;

/// Reliability matrix `V`; smaller entries mark more reliable windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    values: Array2<f64>,
    momentum: f64,
    k: usize,
}

impl SelectionMatrix {
    /// Every entry `1 / windows`.
    pub fn uniform(channels: usize, windows: usize, momentum: f64, k: usize) -> Result<Self> {
        let values = Array2::from_elem((channels, windows), 1.0 / windows as f64);
        Self::from_values(values, momentum, k)
    }

    pub fn from_values(values: Array2<f64>, momentum: f64, k: usize) -> Result<Self> {
        let windows = values.ncols();
        if values.nrows() == 0 || windows == 0 {
            return Err(Error::Config("selection matrix must be non-empty".into()));
        }
        if !(1..=windows).contains(&k) {
            return Err(Error::Config(format!("K = {k} outside 1..={windows}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        for (c, row) in values.outer_iter().enumerate() {
            let s: f64 = row.sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Config(format!("row {c} is not a probability vector (sum {s})")));
            }
        }
        Ok(Self { values, momentum, k })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn windows(&self) -> usize {
        self.values.ncols()
    }

    /// Index of the smallest entry of each row, ties to the smaller index.
    pub fn argmin(&self) -> Vec<usize> {
        self.values
            .outer_iter()
            .map(|row| ranked(row.as_slice().expect("contiguous row"))[0])
            .collect()
    }

    /// EMA step from precomputed MAE statistics. Rows without a valid
    /// statistic are left untouched.
    pub fn update_from_mae(&mut self, mae: &CandidateMae) -> Result<()> {
        if mae.values.dim() != self.values.dim() {
            return Err(Error::Shape(format!(
                "MAE matrix {:?} vs selection matrix {:?}",
                mae.values.dim(),
                self.values.dim()
            )));
        }
        let a = self.momentum;
        for (c, mut row) in self.values.outer_iter_mut().enumerate() {
            if !mae.valid[c] {
                continue;
            }
            let sm = softmax(mae.values.row(c).as_slice().expect("contiguous row"));
            for (v, s) in row.iter_mut().zip(sm) {
                *v = a * *v + (1.0 - a) * s;
            }
        }
        Ok(())
    }

    /// Writes `selection_matrix.csv`-style output: one row per channel.
    pub fn write_csv(&self, path: &Path, layout: &ChannelLayout, grid: &GridSpec) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cols: Vec<String> = (0..self.windows()).map(|i| format!("i{i}")).collect();
        writeln!(f, "channel,variable,depth_m,{},argmin", cols.join(","))?;
        let argmin = self.argmin();
        for (c, row) in self.values.outer_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            writeln!(
                f,
                "{c},{},{},{},{}",
                layout.variable_name(c),
                layout.depth_m(c, grid),
                vals.join(","),
                argmin[c]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Indices of a row ordered by (value, index).
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Binary `C x N` indicator of the selected windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSelector {
    pub indicator: Array2<u8>,
}

impl TopKSelector {
    /// Fails unless every row has exactly `k` ones.
    pub fn check(&self, k: usize) -> Result<()> {
        for (c, row) in self.indicator.outer_iter().enumerate() {
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Selector(format!("row {c} is not binary")));
            }
            let n = row.iter().filter(|&&v| v == 1).count();
            if n != k {
                return Err(Error::Selector(format!("row {c} selects {n} windows, expected {k}")));
            }
        }
        Ok(())
    }

    /// Select every window on every channel.
    pub fn all(channels: usize, windows: usize) -> Self {
        Self {
            indicator: Array2::ones((channels, windows)),
        }
    }
}

/// Marks the `K` smallest entries of every row; ties go to the smaller index.
pub fn topk_select(v: &SelectionMatrix) -> TopKSelector {
    let mut indicator = Array2::zeros(v.values.dim());
    for (c, row) in v.values.outer_iter().enumerate() {
        for &i in ranked(row.as_slice().expect("contiguous row")).iter().take(v.k) {
            indicator[[c, i]] = 1;
        }
    }
    TopKSelector { indicator }
}

fn check_candidates(candidates: &CandidateSet, selector: &TopKSelector) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Shape("empty candidate set".into()));
    }
    let shape = candidates.shape();
    if candidates.members.iter().any(|m| m.shape() != shape) {
        return Err(Error::Shape("candidates differ in shape".into()));
    }
    if selector.indicator.dim() != (shape[0], candidates.len()) {
        return Err(Error::Shape(format!(
            "selector {:?} for {} channels x {} candidates",
            selector.indicator.dim(),
            shape[0],
            candidates.len()
        )));
    }
    Ok(())
}

/// Per channel, the mean of the selected candidates; land refilled.
pub fn merge_candidates(
    candidates: &CandidateSet,
    selector: &TopKSelector,
    k: usize,
    mask: &LandSeaMask,
) -> Result<Array3<f64>> {
    selector.check(k)?;
    check_candidates(candidates, selector)?;
    let (c, h, w) = candidates.members[0].dim();
    let mut out = Array3::zeros((c, h, w));
    let inv = 1.0 / k as f64;
    for ci in 0..c {
        let chosen: Vec<usize> = (0..candidates.len()).filter(|&i| selector.indicator[[ci, i]] == 1).collect();
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ci);
        if let [only] = chosen[..] {
            plane.assign(&candidates.members[only].index_axis(ndarray::Axis(0), ci));
        } else {
            for &i in &chosen {
                plane.scaled_add(1.0, &candidates.members[i].index_axis(ndarray::Axis(0), ci));
            }
            plane.mapv_inplace(|v| v * inv);
        }
    }
    crate::grid::mask_in_place(&mut out, mask)?;
    Ok(out)
}

/// Gradient of [`merge_candidates`] w.r.t. each candidate.
pub fn merge_backward(d_merged: &Array3<f64>, selector: &TopKSelector, k: usize) -> Vec<Array3<f64>> {
    let (channels, windows) = selector.indicator.dim();
    let inv = 1.0 / k as f64;
    (0..windows)
        .map(|i| {
            let mut g = Array3::zeros(d_merged.dim());
            for c in 0..channels {
                if selector.indicator[[c, i]] == 1 {
                    let src = d_merged.index_axis(ndarray::Axis(0), c);
                    g.index_axis_mut(ndarray::Axis(0), c).assign(&src.mapv(|v| v * inv));
                }
            }
            g
        })
        .collect()
}

/// One EMA step of `V` from the candidates' errors against `target`.
pub fn update_selection(
    v: &SelectionMatrix,
    candidates: &CandidateSet,
    target: &Array3<f64>,
    mask: &LandSeaMask,
) -> Result<SelectionMatrix> {
    if candidates.len() != v.windows() || target.shape()[0] != v.channels() {
        return Err(Error::Shape(format!(
            "{} candidates / {} channels for a {}x{} selection matrix",
            candidates.len(),
            target.shape()[0],
            v.channels(),
            v.windows()
        )));
    }
    let mae = channel_candidate_mae(candidates, target, mask)?;
    let mut out = v.clone();
    out.update_from_mae(&mae)?;
    Ok(out)
}
