//! Latitude-weighted Charbonnier loss, latitude-weighted RMSE, and the
//! per-channel candidate MAE that drives the selection-matrix update.
//!
//! Land cells are excluded from every average: denominators count ocean
//! cells only, so the loss floor does not depend on the land fraction.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LandSeaMask, LatitudeWeights};
use crate::net::CandidateSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Charbonnier smoothing constant, normalized units.
    pub epsilon: f64,
    /// Weight `discount^k` on rollout step `k` (0-based).
    pub discount: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            discount: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        Ok(())
    }
}

fn check_pair(a: &Array3<f64>, b: &Array3<f64>, weights: &LatitudeWeights, mask: &LandSeaMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", a.shape(), b.shape())));
    }
    mask.check_field(a.shape())?;
    if weights.len() != a.shape()[1] {
        return Err(Error::Shape(format!("{} latitude weights for {} rows", weights.len(), a.shape()[1])));
    }
    Ok(())
}

fn ocean_total(mask: &LandSeaMask, channels: usize) -> usize {
    (0..channels).map(|c| mask.ocean_count(c)).sum()
}

/// Mean over ocean cells and channels of `w_row * sqrt(d^2 + eps^2)`.
pub fn charbonnier_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: &LatitudeWeights,
    mask: &LandSeaMask,
    epsilon: f64,
) -> Result<f64> {
    Ok(charbonnier_with_grad(pred, target, weights, mask, epsilon, false)?.0)
}

/// Loss and its gradient w.r.t. `pred` (zero on land).
pub fn charbonnier_loss_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: &LatitudeWeights,
    mask: &LandSeaMask,
    epsilon: f64,
) -> Result<(f64, Array3<f64>)> {
    let (l, g) = charbonnier_with_grad(pred, target, weights, mask, epsilon, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn charbonnier_with_grad(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    weights: &LatitudeWeights,
    mask: &LandSeaMask,
    epsilon: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    check_pair(pred, target, weights, mask)?;
    let (c, h, w) = pred.dim();
    let count = ocean_total(mask, c);
    if count == 0 {
        return Err(Error::Metric("no ocean cells".into()));
    }
    let inv = 1.0 / count as f64;
    let eps2 = epsilon * epsilon;
    let mut grad = want_grad.then(|| Array3::zeros((c, h, w)));
    let mut total = 0.0;
    for ci in 0..c {
        let plane = mask.plane(ci);
        for hi in 0..h {
            let a = weights.0[hi];
            for wi in 0..w {
                if plane[hi * w + wi] == 0 {
                    continue;
                }
                let d = pred[[ci, hi, wi]] - target[[ci, hi, wi]];
                let r = (d * d + eps2).sqrt();
                total += a * r;
                if let Some(g) = grad.as_mut() {
                    g[[ci, hi, wi]] = a * d / r * inv;
                }
            }
        }
    }
    Ok((total * inv, grad))
}

/// `sum_k discount^k * L_k / n` over an `n`-step rollout.
pub fn multi_step_loss(
    preds: &[Array3<f64>],
    targets: &[Array3<f64>],
    cfg: &LossConfig,
    weights: &LatitudeWeights,
    mask: &LandSeaMask,
) -> Result<f64> {
    let scales = step_scales(preds.len(), targets.len(), cfg)?;
    let mut total = 0.0;
    for ((p, t), s) in preds.iter().zip(targets).zip(scales) {
        total += s * charbonnier_loss(p, t, weights, mask, cfg.epsilon)?;
    }
    Ok(total)
}

/// Weight applied to each step's loss in [`multi_step_loss`].
pub fn step_scales(n_preds: usize, n_targets: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if n_preds != n_targets {
        return Err(Error::Shape(format!("{n_preds} predictions for {n_targets} targets")));
    }
    if n_preds == 0 {
        return Err(Error::Shape("empty rollout".into()));
    }
    Ok((0..n_preds).map(|k| cfg.discount.powi(k as i32) / n_preds as f64).collect())
}

/// Mean absolute error of each candidate per channel, normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMae {
    /// `C x N`; rows with `valid[c] == false` hold NaN.
    pub values: Array2<f64>,
    /// False where the channel has no ocean cell.
    pub valid: Vec<bool>,
}

pub fn channel_candidate_mae(candidates: &CandidateSet, target: &Array3<f64>, mask: &LandSeaMask) -> Result<CandidateMae> {
    if candidates.is_empty() {
        return Err(Error::Shape("empty candidate set".into()));
    }
    let (c, h, w) = target.dim();
    mask.check_field(target.shape())?;
    let n = candidates.len();
    let mut values = Array2::from_elem((c, n), f64::NAN);
    let mut valid = vec![false; c];
    for (i, cand) in candidates.members.iter().enumerate() {
        if cand.shape() != target.shape() {
            return Err(Error::Shape(format!("candidate {i} shape {:?} vs target {:?}", cand.shape(), target.shape())));
        }
        for ci in 0..c {
            let plane = mask.plane(ci);
            let mut sum = 0.0;
            let mut count = 0usize;
            for hi in 0..h {
                for wi in 0..w {
                    if plane[hi * w + wi] == 1 {
                        sum += (cand[[ci, hi, wi]] - target[[ci, hi, wi]]).abs();
                        count += 1;
                    }
                }
            }
            if count > 0 {
                values[[ci, i]] = sum / count as f64;
                valid[ci] = true;
            }
        }
    }
    Ok(CandidateMae { values, valid })
}

/// One forecast/truth pair keyed by initialization and lead.
#[derive(Debug, Clone, Copy)]
pub struct ForecastPair<'a> {
    /// Initialization key (any ordering-compatible identifier, e.g. a time index).
    pub init: i64,
    /// Lead time in six-hour steps, at least 1.
    pub lead: usize,
    pub forecast: &'a Array3<f64>,
    pub truth: &'a Array3<f64>,
}

/// RMSE per (channel, lead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Lead times in steps, ascending.
    pub leads: Vec<usize>,
    /// `C x leads.len()`; NaN for channels without ocean cells.
    pub rmse: Array2<f64>,
    /// Number of initializations averaged per lead.
    pub n_inits: Vec<usize>,
}

impl MetricTable {
    pub fn get(&self, channel: usize, lead: usize) -> Option<f64> {
        let j = self.leads.iter().position(|&l| l == lead)?;
        self.rmse.get([channel, j]).copied()
    }
}

/// Root of the latitude-weighted ocean mean squared error of one field.
pub fn weighted_rmse_single(
    forecast: &Array3<f64>,
    truth: &Array3<f64>,
    channel: usize,
    weights: &LatitudeWeights,
    mask: &LandSeaMask,
) -> Option<f64> {
    let (_, h, w) = forecast.dim();
    let plane = mask.plane(channel);
    let mut acc = 0.0;
    let mut count = 0usize;
    for hi in 0..h {
        for wi in 0..w {
            if plane[hi * w + wi] == 1 {
                let d = forecast[[channel, hi, wi]] - truth[[channel, hi, wi]];
                acc += weights.0[hi] * d * d;
                count += 1;
            }
        }
    }
    (count > 0).then(|| (acc / count as f64).sqrt())
}

/// For each (channel, lead): mean over initializations of the per-field
/// weighted RMSE. The square root is taken before averaging.
pub fn latitude_rmse(pairs: &[ForecastPair<'_>], weights: &LatitudeWeights, mask: &LandSeaMask) -> Result<MetricTable> {
    if pairs.is_empty() {
        return Err(Error::Metric("no forecast initializations".into()));
    }
    let channels = pairs[0].forecast.shape()[0];
    let mut by_lead: BTreeMap<usize, Vec<&ForecastPair<'_>>> = BTreeMap::new();
    for p in pairs {
        if p.lead == 0 {
            return Err(Error::Metric("lead time must be at least one step".into()));
        }
        check_pair(p.forecast, p.truth, weights, mask)?;
        if p.forecast.shape()[0] != channels {
            return Err(Error::Shape("inconsistent channel counts".into()));
        }
        by_lead.entry(p.lead).or_default().push(p);
    }
    let leads: Vec<usize> = by_lead.keys().copied().collect();
    let mut rmse = Array2::from_elem((channels, leads.len()), f64::NAN);
    let mut n_inits = Vec::with_capacity(leads.len());
    for (j, group) in by_lead.values().enumerate() {
        n_inits.push(group.len());
        for c in 0..channels {
            let vals: Vec<f64> = group
                .iter()
                .filter_map(|p| weighted_rmse_single(p.forecast, p.truth, c, weights, mask))
                .collect();
            if !vals.is_empty() {
                rmse[[c, j]] = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
    }
    Ok(MetricTable { leads, rmse, n_inits })
}
