//! Forecast verification against the truth series, in physical units.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::obs::{grid_sparse_obs, synthetic_buoys};
use super::{daily_average, ForecastRun, Provenance};
use crate::data::{NormStats, SeriesStore};
use crate::error::{Error, Result};
use crate::grid::{latitude_weights, ChannelId, STEP_HOURS};
use crate::objectives::{latitude_rmse, weighted_rmse_single, ForecastPair, MetricTable};

pub const MAPS_INDEX: &str = "maps.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Leads (steps) to score; empty scores every lead of the runs.
    pub leads: Vec<usize>,
    /// Leads for which error maps are written; empty writes none.
    pub map_leads: Vec<usize>,
    /// Synthetic buoys per verified field; 0 disables the sparse pathway.
    pub n_buoys: usize,
    /// Observation noise in normalized units.
    pub obs_noise: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            leads: Vec::new(),
            map_leads: vec![1, 4],
            n_buoys: 200,
            obs_noise: 0.1,
            seed: 0,
        }
    }
}

/// One spatial error map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub file: String,
    pub channel: usize,
    pub label: String,
    pub lead: usize,
    pub height: usize,
    pub width: usize,
    /// Fields averaged into the map.
    pub count: usize,
    /// Root of the latitude-weighted ocean mean of the map.
    pub rmse_of_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailySstRow {
    pub init: DateTime<Utc>,
    pub day: usize,
    pub start: DateTime<Utc>,
    pub forecast_mean: f64,
    pub truth_mean: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub lead: usize,
    pub channel: usize,
    pub n_obs: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastReport {
    pub table: MetricTable,
    pub labels: Vec<String>,
    /// (variable, depth m, lead, rmse) for every depth-resolved channel.
    pub depth_profile: Vec<(String, f64, usize, f64)>,
    /// Time-mean squared error per ocean cell; land is zero.
    pub maps: Vec<(MapEntry, Array2<f64>)>,
    pub daily_sst: Vec<DailySstRow>,
    pub obs: Vec<ObsRow>,
    pub provenance: Provenance,
}

fn physical(norm: &NormStats, v: &Array3<f64>) -> Result<Array3<f64>> {
    norm.denormalize(v)
}

/// Scores merged forecasts against `truth`. Forecast states are normalized
/// and are mapped back to physical units with `norm` first.
pub fn evaluate(runs: &[ForecastRun], truth: &SeriesStore, norm: &NormStats, cfg: &EvalConfig) -> Result<ForecastReport> {
    let grid = &truth.grid;
    let mask = &truth.mask;
    let layout = &truth.layout;
    let weights = latitude_weights(&grid.latitudes)?;
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let channels = truth.channels();

    // physical forecast, physical truth, lead, init index
    let mut aligned: Vec<(Array3<f64>, Array3<f64>, usize, usize)> = Vec::new();
    for (r, run) in runs.iter().enumerate() {
        for (i, (state, t)) in run.states.iter().zip(&run.timestamps).enumerate() {
            let lead = i + 1;
            if !cfg.leads.is_empty() && !cfg.leads.contains(&lead) {
                continue;
            }
            let Some(ti) = truth.index_of(*t) else { continue };
            aligned.push((physical(norm, state)?, truth.states[ti].mapv(f64::from), lead, r));
        }
    }
    if aligned.is_empty() {
        return Err(Error::Metric("no forecast overlaps the truth series".into()));
    }
    let pairs: Vec<ForecastPair<'_>> = aligned
        .iter()
        .map(|(f, t, lead, r)| ForecastPair {
            init: *r as i64,
            lead: *lead,
            forecast: f,
            truth: t,
        })
        .collect();
    let table = latitude_rmse(&pairs, &weights, mask)?;
    let labels: Vec<String> = (0..channels).map(|c| layout.label(c, grid)).collect();

    let mut depth_profile = Vec::new();
    for c in 0..channels {
        if let Some(ChannelId::Level { .. }) = layout.id(c) {
            for (j, &lead) in table.leads.iter().enumerate() {
                depth_profile.push((
                    layout.variable_name(c).to_string(),
                    layout.depth_m(c, grid),
                    lead,
                    table.rmse[[c, j]],
                ));
            }
        }
    }

    let mut maps = Vec::new();
    for &lead in &cfg.map_leads {
        let group: Vec<_> = aligned.iter().filter(|a| a.2 == lead).collect();
        if group.is_empty() {
            continue;
        }
        for c in 0..channels {
            let mut m = Array2::<f64>::zeros((h, w));
            for (f, t, _, _) in &group {
                for i in 0..h {
                    for j in 0..w {
                        if mask.is_ocean(c, i, j) {
                            let d = f[[c, i, j]] - t[[c, i, j]];
                            m[[i, j]] += d * d;
                        }
                    }
                }
            }
            m.mapv_inplace(|v| v / group.len() as f64);
            let label = labels[c].clone();
            let entry = MapEntry {
                file: format!("rmse_map_{label}_{}h.f32", lead as i64 * STEP_HOURS),
                channel: c,
                label,
                lead,
                height: h,
                width: w,
                count: group.len(),
                rmse_of_mean: map_rmse(&m, c, weights.as_slice(), mask),
            };
            maps.push((entry, m));
        }
    }

    // daily means of the surface temperature channel
    let mut daily_sst = Vec::new();
    let sst = layout.channel(0, 0).unwrap_or(0);
    for run in runs.iter().filter(|r| r.len() >= 4) {
        for (d, day) in daily_average(run).iter().enumerate() {
            let idx: Option<Vec<usize>> = (0..4)
                .map(|k| truth.index_of(run.timestamps[4 * d + k]))
                .collect();
            let Some(idx) = idx else { continue };
            let fc = physical(norm, &day.values)?;
            let mut tr = Array3::<f64>::zeros((channels, h, w));
            for &i in &idx {
                tr += &truth.states[i].mapv(f64::from);
            }
            tr.mapv_inplace(|v| v / 4.0);
            let rmse = weighted_rmse_single(&fc, &tr, sst, &weights, mask).unwrap_or(f64::NAN);
            daily_sst.push(DailySstRow {
                init: run.init,
                day: d + 1,
                start: day.start,
                forecast_mean: ocean_mean(&fc, sst, weights.as_slice(), mask),
                truth_mean: ocean_mean(&tr, sst, weights.as_slice(), mask),
                rmse,
            });
        }
    }

    let mut obs = Vec::new();
    if cfg.n_buoys > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut by_lead: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
        for (f, _, lead, r) in &aligned {
            let t = runs[*r].timestamps[lead - 1];
            let ti = truth.index_of(t).expect("aligned pair");
            let set = synthetic_buoys(
                &truth.states[ti],
                t,
                grid,
                mask,
                norm,
                &[sst],
                cfg.n_buoys,
                cfg.obs_noise,
                &mut rng,
            );
            let gridded = grid_sparse_obs(&set, grid, channels, t)?;
            if let Some(e) = gridded.rmse(f, sst, weights.as_slice(), mask) {
                let slot = by_lead.entry(*lead).or_default();
                slot.0 += set.records.len();
                slot.1.push(e);
            }
        }
        for (lead, (n_obs, errs)) in by_lead {
            obs.push(ObsRow {
                lead,
                channel: sst,
                n_obs,
                rmse: errs.iter().sum::<f64>() / errs.len() as f64,
            });
        }
    }

    let provenance = runs.first().map(|r| r.provenance.clone()).unwrap_or_default();
    Ok(ForecastReport {
        table,
        labels,
        depth_profile,
        maps,
        daily_sst,
        obs,
        provenance,
    })
}

fn ocean_mean(x: &Array3<f64>, c: usize, weights: &[f64], mask: &crate::grid::LandSeaMask) -> f64 {
    let (_, h, w) = x.dim();
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if mask.is_ocean(c, i, j) {
                acc += weights[i] * x[[c, i, j]];
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        acc / n as f64
    }
}

/// Root of the latitude-weighted ocean mean of a squared-error map.
pub fn map_rmse(map: &Array2<f64>, channel: usize, weights: &[f64], mask: &crate::grid::LandSeaMask) -> f64 {
    let (h, w) = map.dim();
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if mask.is_ocean(channel, i, j) {
                acc += weights[i] * map[[i, j]];
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        (acc / n as f64).sqrt()
    }
}

/// Reads a map written by [`ForecastReport::write`].
pub fn load_map(dir: &Path, entry: &MapEntry) -> Result<Array2<f64>> {
    let bytes = fs::read(dir.join(&entry.file))?;
    if bytes.len() != entry.height * entry.width * 4 {
        return Err(Error::Ingest {
            file: entry.file.clone(),
            reason: format!("{} bytes, expected {}", bytes.len(), entry.height * entry.width * 4),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((entry.height, entry.width), vals).expect("map shape"))
}

pub fn load_map_index(dir: &Path) -> Result<Vec<MapEntry>> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MAPS_INDEX))?)?)
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

impl ForecastReport {
    /// Writes every table and map into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("rmse.csv"))?;
        writeln!(f, "channel,label,lead_h,rmse,n_inits")?;
        for c in 0..self.labels.len() {
            for (j, &lead) in self.table.leads.iter().enumerate() {
                writeln!(
                    f,
                    "{c},{},{},{},{}",
                    self.labels[c],
                    lead as i64 * STEP_HOURS,
                    fmt(self.table.rmse[[c, j]]),
                    self.table.n_inits[j]
                )?;
            }
        }

        let mut f = fs::File::create(dir.join("rmse_by_depth.csv"))?;
        writeln!(f, "variable,depth_m,lead_h,rmse")?;
        for (var, depth, lead, rmse) in &self.depth_profile {
            writeln!(f, "{var},{depth},{},{}", *lead as i64 * STEP_HOURS, fmt(*rmse))?;
        }

        let mut index = Vec::with_capacity(self.maps.len());
        for (entry, map) in &self.maps {
            let bytes: Vec<u8> = map.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(&entry.file), bytes)?;
            index.push(entry.clone());
        }
        fs::write(dir.join(MAPS_INDEX), serde_json::to_string_pretty(&index)?)?;

        let mut f = fs::File::create(dir.join("daily_sst.csv"))?;
        writeln!(f, "init,day,start,forecast_mean,truth_mean,rmse")?;
        for r in &self.daily_sst {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.init.format("%Y-%m-%dT%H:%M:%SZ"),
                r.day,
                r.start.format("%Y-%m-%dT%H:%M:%SZ"),
                fmt(r.forecast_mean),
                fmt(r.truth_mean),
                fmt(r.rmse)
            )?;
        }

        let mut f = fs::File::create(dir.join("obs_eval.csv"))?;
        writeln!(f, "lead_h,label,n_obs,rmse")?;
        for r in &self.obs {
            writeln!(
                f,
                "{},{},{},{}",
                r.lead as i64 * STEP_HOURS,
                self.labels[r.channel],
                r.n_obs,
                fmt(r.rmse)
            )?;
        }
        Ok(())
    }
}
