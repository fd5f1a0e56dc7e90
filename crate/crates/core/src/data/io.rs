//! On-disk series format: `grid.json`, `mask.u8`, and one `state_<time>.f32`
//! file per timestep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::SeriesStore;
use crate::error::{Error, Result};
use crate::grid::{ChannelLayout, GridSpec, LandSeaMask};

pub const GRID_FILE: &str = "grid.json";
pub const MASK_FILE: &str = "mask.u8";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRef {
    pub file: String,
    /// 1 for a surface-only mask, otherwise 1 + channel count.
    pub n_planes: usize,
    pub dtype: String,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueFormat {
    pub dtype: String,
    pub order: String,
    pub file_pattern: String,
}

/// Contents of `grid.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMetadata {
    pub format_version: u32,
    pub grid: GridSpec,
    pub grid_units: BTreeMap<String, String>,
    pub layout: ChannelLayout,
    pub channel_labels: Vec<String>,
    pub channel_units: Vec<String>,
    pub mask: MaskRef,
    pub values: ValueFormat,
    pub timestamps: Vec<DateTime<Utc>>,
}

pub fn state_file_name(t: DateTime<Utc>) -> String {
    format!("state_{}.f32", t.format("%Y-%m-%dT%H:%M:%SZ"))
}

fn ingest_err(file: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        file: file.display().to_string(),
        reason: reason.into(),
    }
}

fn metadata(store: &SeriesStore) -> GridMetadata {
    let c = store.channels();
    let units = [("latitudes", "degrees_north"), ("longitudes", "degrees_east"), ("depth_levels", "m")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    GridMetadata {
        format_version: FORMAT_VERSION,
        grid: store.grid.clone(),
        grid_units: units,
        layout: store.layout.clone(),
        channel_labels: (0..c).map(|ch| store.layout.label(ch, &store.grid)).collect(),
        channel_units: (0..c).map(|ch| store.layout.unit(ch).to_string()).collect(),
        mask: MaskRef {
            file: MASK_FILE.into(),
            n_planes: store.mask.channel_planes().map_or(1, |p| 1 + p.len()),
            dtype: "u8".into(),
            order: "plane,lat,lon".into(),
        },
        values: ValueFormat {
            dtype: "f32le".into(),
            order: "channel,lat,lon".into(),
            file_pattern: "state_%Y-%m-%dT%H:%M:%SZ.f32".into(),
        },
        timestamps: store.timestamps.clone(),
    }
}

/// Writes `store` into `dir`. An existing non-empty directory is refused
/// unless `force` is set.
pub fn export_store(store: &SeriesStore, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} is not empty (use --force to overwrite)", dir.display()),
        )));
    }
    fs::create_dir_all(dir)?;
    // a forced rewrite must not leave states of an older series behind
    for old in list_state_files(dir)? {
        fs::remove_file(old)?;
    }
    let meta = metadata(store);
    let mut mask = store.mask.surface().to_vec();
    if let Some(planes) = store.mask.channel_planes() {
        for p in planes {
            mask.extend_from_slice(p);
        }
    }
    fs::write(dir.join(MASK_FILE), mask)?;
    for (t, s) in store.timestamps.iter().zip(&store.states) {
        let mut bytes = Vec::with_capacity(s.len() * 4);
        for v in s.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(state_file_name(*t)), bytes)?;
    }
    fs::write(dir.join(GRID_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads and validates a series written by [`export_store`] or by an
/// external tool following the same layout.
pub fn ingest_raw(dir: &Path) -> Result<SeriesStore> {
    let meta_path = dir.join(GRID_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| ingest_err(&meta_path, e.to_string()))?;
    let meta: GridMetadata = serde_json::from_str(&text).map_err(|e| ingest_err(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ingest_err(&meta_path, format!("unsupported format version {}", meta.format_version)));
    }
    meta.grid.validate().map_err(|e| ingest_err(&meta_path, e.to_string()))?;
    let layout = ChannelLayout::from_names(meta.layout.variables.clone(), meta.layout.n_depths, meta.layout.has_ssh)
        .map_err(|e| ingest_err(&meta_path, e.to_string()))?;
    if layout.n_depths != meta.grid.depth_levels.len() {
        return Err(ingest_err(&meta_path, "layout depth count differs from depth_levels"));
    }
    let (c, h, w) = (layout.total_channels(), meta.grid.n_lat(), meta.grid.n_lon());

    let mask_path = dir.join(&meta.mask.file);
    let raw = fs::read(&mask_path).map_err(|e| ingest_err(&mask_path, e.to_string()))?;
    if meta.mask.n_planes != 1 && meta.mask.n_planes != 1 + c {
        return Err(ingest_err(&meta_path, format!("mask declares {} planes", meta.mask.n_planes)));
    }
    if raw.len() != meta.mask.n_planes * h * w {
        return Err(ingest_err(
            &mask_path,
            format!("{} bytes, expected {}", raw.len(), meta.mask.n_planes * h * w),
        ));
    }
    if raw.iter().any(|&b| b > 1) {
        return Err(ingest_err(&mask_path, "mask bytes must be 0 or 1"));
    }
    let mut mask = LandSeaMask::new(h, w, raw[..h * w].to_vec()).map_err(|e| ingest_err(&mask_path, e.to_string()))?;
    if meta.mask.n_planes > 1 {
        let planes = raw[h * w..].chunks(h * w).map(<[u8]>::to_vec).collect();
        mask = mask.with_channel_planes(planes)?;
    }

    let mut states = Vec::with_capacity(meta.timestamps.len());
    let expected = c * h * w * 4;
    let mut prev: Option<DateTime<Utc>> = None;
    for &t in &meta.timestamps {
        let path = dir.join(state_file_name(t));
        if let Some(p) = prev {
            if t - p != super::step() {
                return Err(ingest_err(&path, format!("spacing {} after {p}, expected 6 hours", t - p)));
            }
        }
        prev = Some(t);
        let bytes = fs::read(&path).map_err(|e| ingest_err(&path, e.to_string()))?;
        if bytes.len() != expected {
            return Err(ingest_err(
                &path,
                format!("{} bytes, expected {expected} for {c}x{h}x{w} f32 values", bytes.len()),
            ));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        states.push(Array3::from_shape_vec((c, h, w), vals).expect("size checked"));
    }
    SeriesStore::new(meta.grid, layout, mask, meta.timestamps, states).map_err(|e| ingest_err(&meta_path, e.to_string()))
}

/// Paths of all state files in `dir`, sorted by name.
pub fn list_state_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("state_") && n.ends_with(".f32"))
        })
        .collect();
    v.sort();
    Ok(v)
}
