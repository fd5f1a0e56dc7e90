//! Spatial grid, channel layout, land-sea masking and latitude weighting.
//!
//! Every other module consumes these types. All of them are immutable after
//! construction.

use std::collections::HashSet;

use chrono::{DateTime, Timelike, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value written into land cells of normalized fields.
pub const FILL_VALUE: f64 = 0.0;

/// Model time step in hours.
pub const STEP_HOURS: i64 = 6;

/// Regular latitude/longitude grid with a list of depth levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell-centre latitudes in degrees, strictly monotonic.
    pub latitudes: Vec<f64>,
    /// Cell-centre longitudes in degrees.
    pub longitudes: Vec<f64>,
    /// Depth levels in metres, strictly increasing from 0.
    pub depth_levels: Vec<f64>,
}

impl GridSpec {
    pub fn new(latitudes: Vec<f64>, longitudes: Vec<f64>, depth_levels: Vec<f64>) -> Result<Self> {
        let grid = Self {
            latitudes,
            longitudes,
            depth_levels,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Equally spaced cell centres: latitudes at `-90 + (i + 0.5) * 180 / n_lat`,
    /// longitudes at `j * 360 / n_lon`.
    pub fn uniform(n_lat: usize, n_lon: usize, depth_levels: Vec<f64>) -> Result<Self> {
        let dlat = 180.0 / n_lat as f64;
        let dlon = 360.0 / n_lon as f64;
        let latitudes = (0..n_lat).map(|i| -90.0 + (i as f64 + 0.5) * dlat).collect();
        let longitudes = (0..n_lon).map(|j| j as f64 * dlon).collect();
        Self::new(latitudes, longitudes, depth_levels)
    }

    /// The default reduced grid: 60 x 120 with four levels.
    pub fn desk_default() -> Self {
        Self::uniform(60, 120, vec![0.0, 50.0, 200.0, 1000.0]).expect("valid default grid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.latitudes.is_empty() || self.longitudes.is_empty() {
            return Err(Error::Domain("grid needs at least one latitude and longitude".into()));
        }
        if let Some(bad) = self.latitudes.iter().find(|l| !(l.abs() < 90.0)) {
            return Err(Error::Domain(format!("latitude {bad} outside (-90, 90)")));
        }
        let inc = self.latitudes.windows(2).all(|w| w[1] > w[0]);
        let dec = self.latitudes.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(Error::Domain("latitudes must be strictly monotonic".into()));
        }
        if !self.longitudes.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Domain("longitudes must be strictly increasing".into()));
        }
        let span = self.longitudes[self.longitudes.len() - 1] - self.longitudes[0];
        if span >= 360.0 || self.longitudes.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain("longitudes must span less than one full turn".into()));
        }
        if self.depth_levels.first() != Some(&0.0) {
            return Err(Error::Domain("first depth level must be 0 m".into()));
        }
        if !self.depth_levels.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::Domain("depth levels must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_lat(&self) -> usize {
        self.latitudes.len()
    }

    pub fn n_lon(&self) -> usize {
        self.longitudes.len()
    }

    /// True when the longitudes are uniformly spaced and close the circle.
    pub fn is_periodic(&self) -> bool {
        let n = self.n_lon();
        if n < 2 {
            return false;
        }
        let step = self.longitudes[1] - self.longitudes[0];
        let uniform = self
            .longitudes
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() < 1e-9 * step.abs().max(1.0));
        uniform && ((step * n as f64) - 360.0).abs() < 1e-6
    }
}

/// Which physical quantity a channel carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelId {
    /// Variable at `var` position in the layout, on depth index `depth`.
    Level { var: usize, depth: usize },
    Ssh,
}

/// Bijection between (variable, depth) pairs plus SSH and flat channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub variables: Vec<String>,
    pub n_depths: usize,
    pub has_ssh: bool,
}

impl ChannelLayout {
    /// Channel of variable position `p` at depth `d` is `p * n_depths + d`; SSH is last.
    pub fn new(variables: &[&str], n_depths: usize, has_ssh: bool) -> Result<Self> {
        Self::from_names(variables.iter().map(|s| s.to_string()).collect(), n_depths, has_ssh)
    }

    pub fn from_names(variables: Vec<String>, n_depths: usize, has_ssh: bool) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Layout("at least one variable is required".into()));
        }
        if n_depths == 0 {
            return Err(Error::Layout("n_depths must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for v in &variables {
            if !seen.insert(v.as_str()) {
                return Err(Error::Layout(format!("duplicate variable name {v:?}")));
            }
            if has_ssh && v == "SSH" {
                return Err(Error::Layout("SSH is reserved for the surface channel".into()));
            }
        }
        Ok(Self {
            variables,
            n_depths,
            has_ssh,
        })
    }

    /// T, S, U, V on every level plus SSH.
    pub fn ocean(n_depths: usize) -> Self {
        Self::new(&["T", "S", "U", "V"], n_depths, true).expect("valid layout")
    }

    pub fn total_channels(&self) -> usize {
        self.variables.len() * self.n_depths + usize::from(self.has_ssh)
    }

    pub fn channel(&self, var: usize, depth: usize) -> Option<usize> {
        (var < self.variables.len() && depth < self.n_depths).then(|| var * self.n_depths + depth)
    }

    pub fn channel_of(&self, name: &str, depth: usize) -> Option<usize> {
        let var = self.variables.iter().position(|v| v == name)?;
        self.channel(var, depth)
    }

    pub fn ssh_channel(&self) -> Option<usize> {
        self.has_ssh.then(|| self.variables.len() * self.n_depths)
    }

    pub fn id(&self, channel: usize) -> Option<ChannelId> {
        let levels = self.variables.len() * self.n_depths;
        if channel < levels {
            Some(ChannelId::Level {
                var: channel / self.n_depths,
                depth: channel % self.n_depths,
            })
        } else if self.has_ssh && channel == levels {
            Some(ChannelId::Ssh)
        } else {
            None
        }
    }

    /// Variable name of a channel ("SSH" for the surface height channel).
    pub fn variable_name(&self, channel: usize) -> &str {
        match self.id(channel) {
            Some(ChannelId::Level { var, .. }) => &self.variables[var],
            Some(ChannelId::Ssh) => "SSH",
            None => "?",
        }
    }

    /// Depth in metres of a channel; SSH sits at 0.
    pub fn depth_m(&self, channel: usize, grid: &GridSpec) -> f64 {
        match self.id(channel) {
            Some(ChannelId::Level { depth, .. }) => grid.depth_levels.get(depth).copied().unwrap_or(f64::NAN),
            _ => 0.0,
        }
    }

    /// File-name friendly label such as `T_50m` or `SSH`.
    pub fn label(&self, channel: usize, grid: &GridSpec) -> String {
        match self.id(channel) {
            Some(ChannelId::Level { var, .. }) => {
                format!("{}_{}m", self.variables[var], self.depth_m(channel, grid))
            }
            Some(ChannelId::Ssh) => "SSH".to_string(),
            None => format!("ch{channel}"),
        }
    }

    /// Physical unit of a channel's values.
    pub fn unit(&self, channel: usize) -> &'static str {
        match self.variable_name(channel) {
            "T" => "degC",
            "S" => "psu",
            "U" | "V" => "m/s",
            "SSH" => "m",
            _ => "1",
        }
    }
}

/// Binary ocean (1) / land (0) mask.
///
/// The surface plane always has at least one ocean cell. Optional per-channel
/// planes carry a depth-resolved mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandSeaMask {
    n_lat: usize,
    n_lon: usize,
    surface: Vec<u8>,
    channels: Option<Vec<Vec<u8>>>,
}

impl LandSeaMask {
    pub fn new(n_lat: usize, n_lon: usize, cells: Vec<u8>) -> Result<Self> {
        check_plane(&cells, n_lat, n_lon)?;
        if !cells.contains(&1) {
            return Err(Error::Domain("mask has no ocean cell".into()));
        }
        Ok(Self {
            n_lat,
            n_lon,
            surface: cells,
            channels: None,
        })
    }

    pub fn all_ocean(n_lat: usize, n_lon: usize) -> Self {
        Self::new(n_lat, n_lon, vec![1; n_lat * n_lon]).expect("valid mask")
    }

    /// Attaches one plane per channel. Deep channels may be entirely land.
    pub fn with_channel_planes(self, planes: Vec<Vec<u8>>) -> Result<Self> {
        for p in &planes {
            check_plane(p, self.n_lat, self.n_lon)?;
        }
        Ok(Self {
            channels: Some(planes),
            ..self
        })
    }

    /// Per-channel planes derived from per-depth planes; SSH uses the surface.
    pub fn depth_resolved(surface: &LandSeaMask, layout: &ChannelLayout, levels: &[Vec<u8>]) -> Result<Self> {
        if levels.len() != layout.n_depths {
            return Err(Error::Shape(format!(
                "{} depth planes for {} levels",
                levels.len(),
                layout.n_depths
            )));
        }
        let planes = (0..layout.total_channels())
            .map(|c| match layout.id(c) {
                Some(ChannelId::Level { depth, .. }) => levels[depth].clone(),
                _ => surface.surface.clone(),
            })
            .collect();
        Self::new(surface.n_lat, surface.n_lon, surface.surface.clone())?.with_channel_planes(planes)
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn surface(&self) -> &[u8] {
        &self.surface
    }

    pub fn channel_planes(&self) -> Option<&[Vec<u8>]> {
        self.channels.as_deref()
    }

    /// Plane that applies to `channel`. Without per-channel planes the
    /// surface plane is replicated at every level.
    pub fn plane(&self, channel: usize) -> &[u8] {
        match &self.channels {
            Some(p) => &p[channel],
            None => &self.surface,
        }
    }

    pub fn is_ocean(&self, channel: usize, h: usize, w: usize) -> bool {
        self.plane(channel)[h * self.n_lon + w] == 1
    }

    pub fn ocean_count(&self, channel: usize) -> usize {
        self.plane(channel).iter().filter(|&&v| v == 1).count()
    }

    /// Surface ocean indicator, H x W, as reals.
    pub fn ocean_field(&self) -> Vec<f64> {
        self.surface.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn check_channels(&self, channels: usize) -> Result<()> {
        match &self.channels {
            Some(p) if p.len() != channels => Err(Error::Shape(format!(
                "mask has {} channel planes for {} channels",
                p.len(),
                channels
            ))),
            _ => Ok(()),
        }
    }

    pub(crate) fn check_field(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.n_lat || shape[2] != self.n_lon {
            return Err(Error::Shape(format!(
                "field shape {:?} does not match mask {}x{}",
                shape, self.n_lat, self.n_lon
            )));
        }
        self.check_channels(shape[0])
    }
}

fn check_plane(p: &[u8], n_lat: usize, n_lon: usize) -> Result<()> {
    if p.len() != n_lat * n_lon {
        return Err(Error::Shape(format!(
            "mask plane has {} cells, expected {}x{}",
            p.len(),
            n_lat,
            n_lon
        )));
    }
    if p.iter().any(|&v| v > 1) {
        return Err(Error::Domain("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// One time step of every channel on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OceanState {
    /// C x H x W values.
    pub values: Array3<f64>,
    pub timestamp: DateTime<Utc>,
}

impl OceanState {
    pub fn new(values: Array3<f64>, timestamp: DateTime<Utc>) -> Result<Self> {
        check_step_aligned(timestamp)?;
        Ok(Self { values, timestamp })
    }
}

pub fn check_step_aligned(t: DateTime<Utc>) -> Result<()> {
    if t.hour() as i64 % STEP_HOURS != 0 || t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
        return Err(Error::Domain(format!("timestamp {t} is not on a 6-hour boundary")));
    }
    Ok(())
}

/// Normalized cos-latitude weights, one per grid row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatitudeWeights(pub Vec<f64>);

impl LatitudeWeights {
    pub fn uniform(n_lat: usize) -> Self {
        Self(vec![1.0; n_lat])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_i = H cos(lat_i) / sum_j cos(lat_j)`.
pub fn latitude_weights(latitudes: &[f64]) -> Result<LatitudeWeights> {
    if latitudes.is_empty() {
        return Err(Error::Domain("no latitudes".into()));
    }
    if let Some(bad) = latitudes.iter().find(|l| !(l.abs() < 90.0)) {
        return Err(Error::Domain(format!("latitude {bad} outside (-90, 90)")));
    }
    let cos: Vec<f64> = latitudes.iter().map(|l| l.to_radians().cos()).collect();
    Ok(LatitudeWeights(normalize_row_weights(&cos)))
}

fn normalize_row_weights(raw: &[f64]) -> Vec<f64> {
    let h = raw.len() as f64;
    let total: f64 = raw.iter().sum();
    raw.iter().map(|c| h * c / total).collect()
}

/// Overwrites land cells with [`FILL_VALUE`] on every channel.
pub fn apply_mask(state: &OceanState, mask: &LandSeaMask) -> Result<OceanState> {
    let mut out = state.clone();
    mask_in_place(&mut out.values, mask)?;
    Ok(out)
}

pub fn mask_in_place(values: &mut Array3<f64>, mask: &LandSeaMask) -> Result<()> {
    mask.check_field(values.shape())?;
    for (c, mut plane) in values.outer_iter_mut().enumerate() {
        let m = mask.plane(c);
        for (v, &o) in plane.iter_mut().zip(m) {
            if o == 0 {
                *v = FILL_VALUE;
            }
        }
    }
    Ok(())
}
