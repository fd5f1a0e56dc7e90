//! Synthetic series with known temporal structure per channel.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{series_epoch, step, SeriesStore};
use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, GridSpec, LandSeaMask};

/// Temporal behaviour of one synthetic channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamic {
    /// Fixed spatial pattern oscillating with a 4-step (24 h) period.
    Diurnal,
    /// First-order autoregression with coefficient close to one.
    SlowAr,
    /// Gaussian blobs carried by a steady solenoidal flow.
    AdvectedEddy,
    /// `x[t+1] = g(x[t+1-lag]) + noise`.
    LaggedCopy { lag: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub dynamics: Vec<Dynamic>,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

const AR_COEF: f64 = 0.99;
const LAG_GAIN: f64 = 0.97;
const SMOOTH_MODES: usize = 8;
const EDDIES: usize = 6;

/// Map applied by lagged-copy channels.
pub fn lag_map(x: f64) -> f64 {
    LAG_GAIN * x
}

impl SyntheticRecipe {
    /// Recipe for [`ChannelLayout::ocean`] with two levels: surface salinity
    /// copies itself with a 4-step lag, the level below with a 1-step lag.
    pub fn routing_default(seed: u64) -> Self {
        use Dynamic::*;
        let dynamics = vec![
            Diurnal,
            SlowAr,
            LaggedCopy { lag: 4 },
            LaggedCopy { lag: 1 },
            AdvectedEddy,
            SlowAr,
            AdvectedEddy,
            SlowAr,
            Diurnal,
        ];
        Self {
            amplitudes: vec![2.0, 1.0, 0.5, 0.5, 0.3, 0.2, 0.3, 0.2, 0.2],
            dynamics,
            noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self, layout: &ChannelLayout) -> Result<()> {
        let c = layout.total_channels();
        if self.dynamics.len() != c || self.amplitudes.len() != c {
            return Err(Error::Config(format!(
                "recipe describes {} dynamics and {} amplitudes for {c} channels",
                self.dynamics.len(),
                self.amplitudes.len()
            )));
        }
        for d in &self.dynamics {
            if let Dynamic::LaggedCopy { lag } = d {
                if !(1..=4).contains(lag) {
                    return Err(Error::Config(format!("lag {lag} outside 1..=4")));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and >= 0", self.noise)));
        }
        if self.amplitudes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("amplitudes must be finite and positive".into()));
        }
        Ok(())
    }
}

/// Land mask with a mid-latitude continent and a land cap over the
/// northernmost latitude band.
pub fn synthetic_mask(n_lat: usize, n_lon: usize) -> LandSeaMask {
    let mut cells = vec![1u8; n_lat * n_lon];
    if n_lat >= 4 && n_lon >= 8 {
        for w in 0..n_lon {
            cells[(n_lat - 1) * n_lon + w] = 0;
        }
        let (h0, h1) = (n_lat * 5 / 16, n_lat * 11 / 16);
        let (w0, w1) = (n_lon * 3 / 16, n_lon * 3 / 16 + n_lon.div_ceil(10));
        for h in h0..h1 {
            for w in w0..w1 {
                cells[h * n_lon + w] = 0;
            }
        }
    }
    LandSeaMask::new(n_lat, n_lon, cells).expect("synthetic mask keeps ocean cells")
}

/// Sum of random plane waves, periodic in longitude, roughly unit variance.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let modes: Vec<(f64, f64, f64, f64)> = (0..SMOOTH_MODES)
        .map(|_| {
            let kx = rng.random_range(0..4) as f64;
            let ky = rng.random_range(0.0..2.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp: f64 = rng.sample(StandardNormal);
            (kx, ky, phase, amp)
        })
        .collect();
    let scale = (2.0 / SMOOTH_MODES as f64).sqrt();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let x = j as f64 / w as f64;
        let y = i as f64 / h as f64;
        modes
            .iter()
            .map(|(kx, ky, ph, a)| a * (2.0 * PI * (kx * x + ky * y) + ph).cos())
            .sum::<f64>()
            * scale
    })
}

fn white(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.sample(StandardNormal))
}

/// Unit-scale series for one channel, `n_steps` planes.
fn channel_series(dynamic: Dynamic, noise: f64, rng: &mut ChaCha8Rng, h: usize, w: usize, n_steps: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(n_steps);
    match dynamic {
        Dynamic::Diurnal => {
            let amp = smooth_field(rng, h, w).mapv(|v| 1.0 + 0.4 * v);
            let phase = smooth_field(rng, h, w).mapv(|v| PI * v);
            let plane = |t: usize| {
                let base = PI / 2.0 * (t % 4) as f64;
                Array2::from_shape_fn((h, w), |ix| amp[ix] * (base + phase[ix]).cos())
            };
            for t in 0..n_steps {
                let mut x = plane(t);
                if noise > 0.0 {
                    x.scaled_add(noise, &white(rng, h, w));
                }
                out.push(x);
            }
        }
        Dynamic::SlowAr => {
            let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
            let mut x = smooth_field(rng, h, w);
            for _ in 0..n_steps {
                out.push(x.clone());
                let e = smooth_field(rng, h, w);
                x = x.mapv(|v| AR_COEF * v);
                x.scaled_add(innov, &e);
            }
            if noise > 0.0 {
                for x in &mut out {
                    x.scaled_add(0.1 * noise, &white(rng, h, w));
                }
            }
        }
        Dynamic::AdvectedEddy => {
            let (hf, wf) = (h as f64, w as f64);
            let mut blobs: Vec<(f64, f64, f64, f64)> = (0..EDDIES)
                .map(|_| {
                    let y = rng.random_range(0.15 * hf..0.85 * hf);
                    let x = rng.random_range(0.0..wf);
                    let r = rng.random_range(1.0..2.5) * (hf / 16.0).max(1.0);
                    let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (y, x, r, a)
                })
                .collect();
            // streamfunction A sin(pi y/H) sin(2 pi x/W), peak speed ~0.5 cell per step
            let a = 0.5 * hf / PI;
            let vel = |y: f64, x: f64| {
                let u = a * (2.0 * PI / wf) * (PI * y / hf).sin() * (2.0 * PI * x / wf).cos();
                let v = -a * (PI / hf) * (PI * y / hf).cos() * (2.0 * PI * x / wf).sin();
                (v, u)
            };
            for _ in 0..n_steps {
                let mut x = Array2::zeros((h, w));
                for &(by, bx, r, amp) in &blobs {
                    for i in 0..h {
                        for j in 0..w {
                            let dy = i as f64 - by;
                            let mut dx = (j as f64 - bx).rem_euclid(wf);
                            if dx > wf / 2.0 {
                                dx -= wf;
                            }
                            x[[i, j]] += amp * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                        }
                    }
                }
                if noise > 0.0 {
                    x.scaled_add(0.1 * noise, &white(rng, h, w));
                }
                out.push(x);
                for b in &mut blobs {
                    // midpoint step
                    let (vy, vx) = vel(b.0, b.1);
                    let (my, mx) = (b.0 + 0.5 * vy, b.1 + 0.5 * vx);
                    let (vy, vx) = vel(my, mx);
                    b.0 = (b.0 + vy).clamp(0.0, hf - 1.0);
                    b.1 = (b.1 + vx).rem_euclid(wf);
                }
            }
        }
        Dynamic::LaggedCopy { lag } => {
            let spread = if noise > 0.0 {
                noise / (1.0 - LAG_GAIN * LAG_GAIN).sqrt()
            } else {
                1.0
            };
            for t in 0..n_steps {
                let x = if t < lag {
                    smooth_field(rng, h, w).mapv(|v| spread * v)
                } else {
                    let mut x = out[t - lag].mapv(lag_map);
                    if noise > 0.0 {
                        x.scaled_add(noise, &smooth_field(rng, h, w));
                    }
                    x
                };
                out.push(x);
            }
        }
    }
    out
}

fn channel_offset(layout: &ChannelLayout, c: usize) -> f64 {
    match layout.variable_name(c) {
        "T" => 15.0,
        "S" => 35.0,
        _ => 0.0,
    }
}

/// Generate `n_steps` six-hourly states starting at the series epoch.
/// Land cells hold the channel's physical offset.
pub fn generate_synthetic(recipe: &SyntheticRecipe, grid: &GridSpec, layout: &ChannelLayout, n_steps: usize) -> Result<SeriesStore> {
    if n_steps < 6 {
        return Err(Error::Config(format!("n_steps {n_steps} < 6")));
    }
    recipe.validate(layout)?;
    grid.validate()?;
    if layout.n_depths != grid.depth_levels.len() {
        return Err(Error::Config("layout depth count differs from grid depth levels".into()));
    }
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let c = layout.total_channels();
    let mask = synthetic_mask(h, w);
    let mut states = vec![Array3::<f32>::zeros((c, h, w)); n_steps];
    for ch in 0..c {
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
        rng.set_stream(ch as u64 + 1);
        let series = channel_series(recipe.dynamics[ch], recipe.noise, &mut rng, h, w, n_steps);
        let (off, amp) = (channel_offset(layout, ch), recipe.amplitudes[ch]);
        let plane = mask.plane(ch);
        for (t, x) in series.iter().enumerate() {
            let mut dst = states[t].index_axis_mut(ndarray::Axis(0), ch);
            for i in 0..h {
                for j in 0..w {
                    let v = if plane[i * w + j] == 1 { off + amp * x[[i, j]] } else { off };
                    dst[[i, j]] = v as f32;
                }
            }
        }
    }
    let timestamps = (0..n_steps).map(|i| series_epoch() + step() * i as i32).collect();
    SeriesStore::new(grid.clone(), layout.clone(), mask, timestamps, states)
}
