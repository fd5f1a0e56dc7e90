//! The neural forecasting core.
//!
//! A context prior network produces spatial features and a global
//! modulation vector; a shared patch encoder (weights scaled per output
//! channel by the modulation) embeds each input step; a pointwise fusion
//! merges the steps; shifted-window attention blocks with adaptive layer
//! normalization evolve the fused latent; and a shared decoder emits one
//! candidate forecast per input step through skip connections.
//!
//! Everything is `f64` and backpropagated by hand.

mod attention;
mod decoder;
mod encoder;
pub mod layers;
pub mod linalg;
mod model;
pub mod params;
mod prior;

use chrono::{DateTime, Datelike, Timelike, Utc};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LandSeaMask};

pub use attention::AttentionProbs;
pub use model::{ForecastNet, ForwardTrace};
pub use prior::temporal_features;

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Latent channel count C'.
    pub latent_dim: usize,
    /// Patch edge; also kernel and stride of the (transposed) patch convolution.
    pub patch: usize,
    pub blocks: usize,
    /// Attention window edge in tokens, clamped to the latent grid.
    pub window: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    /// Width of the skip-connection projection feeding the decoder.
    pub skip_dim: usize,
    /// Number of input steps N, one decoder candidate each.
    pub n_inputs: usize,
    /// Cyclically shift windows by half a window on odd blocks.
    pub shift_windows: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            latent_dim: 96,
            patch: 4,
            blocks: 4,
            window: 8,
            ffn_expansion: 4,
            heads: 4,
            skip_dim: 96,
            n_inputs: 4,
            shift_windows: true,
        }
    }
}

impl NetConfig {
    /// Small configuration used for the 16 x 32 experiments.
    pub fn toy() -> Self {
        Self {
            latent_dim: 32,
            patch: 2,
            blocks: 2,
            window: 8,
            ffn_expansion: 2,
            heads: 2,
            skip_dim: 32,
            n_inputs: 4,
            shift_windows: true,
        }
    }

    /// Effective (rows, cols) window for a latent grid.
    pub fn window_for(&self, tokens_h: usize, tokens_w: usize) -> (usize, usize) {
        (self.window.min(tokens_h), self.window.min(tokens_w))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.latent_dim == 0 || self.patch == 0 || self.window == 0 || self.heads == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.ffn_expansion == 0 || self.skip_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(1..=4).contains(&self.n_inputs) {
            return Err(Error::Config(format!("n_inputs {} outside 1..=4", self.n_inputs)));
        }
        if self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if height % self.patch != 0 || width % self.patch != 0 {
            return Err(Error::Shape(format!(
                "grid {height}x{width} not divisible by patch {}",
                self.patch
            )));
        }
        let (th, tw) = (height / self.patch, width / self.patch);
        let (wh, ww) = self.window_for(th, tw);
        if th % wh != 0 || tw % ww != 0 {
            return Err(Error::Shape(format!(
                "latent grid {th}x{tw} not divisible by window {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Time and space context for one initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSignals {
    /// Six-hour bin of the day, 0..=3.
    pub phase: u8,
    /// 1..=366.
    pub day_of_year: u16,
    /// Degrees, H x W.
    pub latitude: Array2<f64>,
    /// Degrees, H x W.
    pub longitude: Array2<f64>,
    /// 1 on ocean, 0 on land, H x W.
    pub ocean: Array2<f64>,
}

impl ContextSignals {
    pub fn new(phase: u8, day_of_year: u16, grid: &GridSpec, mask: &LandSeaMask) -> Result<Self> {
        if phase > 3 {
            return Err(Error::Domain(format!("phase {phase} outside 0..=3")));
        }
        if !(1..=366).contains(&day_of_year) {
            return Err(Error::Domain(format!("day of year {day_of_year} outside 1..=366")));
        }
        if mask.n_lat() != grid.n_lat() || mask.n_lon() != grid.n_lon() {
            return Err(Error::Shape("mask does not match grid".into()));
        }
        let (h, w) = (grid.n_lat(), grid.n_lon());
        Ok(Self {
            phase,
            day_of_year,
            latitude: Array2::from_shape_fn((h, w), |(i, _)| grid.latitudes[i]),
            longitude: Array2::from_shape_fn((h, w), |(_, j)| grid.longitudes[j]),
            ocean: Array2::from_shape_vec((h, w), mask.ocean_field()).expect("mask shape"),
        })
    }

    /// Signals for the step valid at `t`.
    pub fn at(t: DateTime<Utc>, grid: &GridSpec, mask: &LandSeaMask) -> Result<Self> {
        Self::new((t.hour() / 6) as u8, t.ordinal() as u16, grid, mask)
    }
}

/// Output of the context prior network.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    /// Token-major `T x C'` spatial features.
    pub spatial: Vec<f64>,
    /// Spatial mean of `spatial`, length C'; conditions the attention blocks.
    pub pooled: Vec<f64>,
    /// Global encoder modulation vector, length C'.
    pub modulation: Vec<f64>,
    pub tokens_h: usize,
    pub tokens_w: usize,
}

/// A latent field, stored token-major (`H'W' x C'`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures {
    pub data: Vec<f64>,
    pub tokens_h: usize,
    pub tokens_w: usize,
    pub dim: usize,
}

impl LatentFeatures {
    /// Channel-first `C' x H' x W'` view.
    pub fn to_array(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.dim, self.tokens_h, self.tokens_w), |(c, h, w)| {
            self.data[(h * self.tokens_w + w) * self.dim + c]
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.dim, self.tokens_h, self.tokens_w)
    }
}

/// Full-resolution forecasts, member `i` built from the skip connection of
/// input step `t - i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub members: Vec<Array3<f64>>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.members[0].shape()
    }
}
