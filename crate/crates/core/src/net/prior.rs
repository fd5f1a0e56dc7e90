use std::f64::consts::PI;

use super::layers::{gelu, gelu_grad, Linear, Patching};
use super::params::{Init, ParamRegistry};
use super::{ContextFeatures, ContextSignals};

pub const TEMPORAL_FEATURES: usize = 16;
const STATIC_FEATURES: usize = 4;
const YEAR_DAYS: f64 = 365.25;

/// Fixed sinusoids: four harmonics of the daily phase (period 4 bins) and
/// four of the day of year (period 365.25 days), sine then cosine.
pub fn temporal_features(phase: u8, day_of_year: u16) -> [f64; TEMPORAL_FEATURES] {
    let mut out = [0.0; TEMPORAL_FEATURES];
    for f in 1..=4 {
        let a = 2.0 * PI * f as f64 * phase as f64 / 4.0;
        let b = 2.0 * PI * f as f64 * day_of_year as f64 / YEAR_DAYS;
        out[2 * (f - 1)] = a.sin();
        out[2 * (f - 1) + 1] = a.cos();
        out[8 + 2 * (f - 1)] = b.sin();
        out[8 + 2 * (f - 1) + 1] = b.cos();
    }
    out
}

/// Context prior: per-token `[temporal | embedding | ocean fraction | unit
/// position vector]` through a two-layer pointwise map.
#[derive(Debug, Clone)]
pub(crate) struct PriorNet {
    embedding: usize,
    hidden: Linear,
    out: Linear,
    modulation: Linear,
    tokens: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PriorTrace {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pooled: Vec<f64>,
}

impl PriorNet {
    pub fn register(reg: &mut ParamRegistry, tokens: usize, dim: usize) -> Self {
        let embedding = reg.add("prior.embedding", &[tokens, dim], Init::TruncNormal(0.02), false);
        let din = TEMPORAL_FEATURES + dim + STATIC_FEATURES;
        Self {
            embedding,
            hidden: Linear::register(reg, "prior.hidden", din, dim, Init::TruncNormal(0.02)),
            out: Linear::register(reg, "prior.out", dim, dim, Init::TruncNormal(0.02)),
            modulation: Linear::register(reg, "prior.modulation", dim, dim, Init::TruncNormal(0.02)),
            tokens,
            dim,
        }
    }

    fn inputs(&self, p: &[f64], s: &ContextSignals, patching: &Patching) -> Vec<f64> {
        let din = self.hidden.din;
        let temporal = temporal_features(s.phase, s.day_of_year);
        let (pp, tw) = (patching.patch, patching.tokens_w());
        let mut statics = vec![0.0; self.tokens * STATIC_FEATURES];
        for h in 0..patching.height {
            for w in 0..patching.width {
                let tok = (h / pp) * tw + w / pp;
                let (lat, lon) = (s.latitude[[h, w]].to_radians(), s.longitude[[h, w]].to_radians());
                let row = &mut statics[tok * STATIC_FEATURES..(tok + 1) * STATIC_FEATURES];
                row[0] += s.ocean[[h, w]];
                row[1] += lat.sin();
                row[2] += lat.cos() * lon.sin();
                row[3] += lat.cos() * lon.cos();
            }
        }
        let area = (pp * pp) as f64;
        let emb = &p[self.embedding..self.embedding + self.tokens * self.dim];
        let mut x = vec![0.0; self.tokens * din];
        for t in 0..self.tokens {
            let row = &mut x[t * din..(t + 1) * din];
            row[..TEMPORAL_FEATURES].copy_from_slice(&temporal);
            row[TEMPORAL_FEATURES..TEMPORAL_FEATURES + self.dim]
                .copy_from_slice(&emb[t * self.dim..(t + 1) * self.dim]);
            for k in 0..STATIC_FEATURES {
                row[TEMPORAL_FEATURES + self.dim + k] = statics[t * STATIC_FEATURES + k] / area;
            }
        }
        x
    }

    pub fn forward(&self, p: &[f64], s: &ContextSignals, patching: &Patching) -> (ContextFeatures, PriorTrace) {
        let input = self.inputs(p, s, patching);
        let hidden_pre = self.hidden.forward(p, &input, self.tokens);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| gelu(v)).collect();
        let spatial = self.out.forward(p, &hidden, self.tokens);
        let mut pooled = vec![0.0; self.dim];
        for row in spatial.chunks_exact(self.dim) {
            for (a, v) in pooled.iter_mut().zip(row) {
                *a += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= self.tokens as f64);
        let modulation = self.modulation.forward(p, &pooled, 1);
        let features = ContextFeatures {
            spatial,
            pooled: pooled.clone(),
            modulation,
            tokens_h: patching.tokens_h(),
            tokens_w: patching.tokens_w(),
        };
        let trace = PriorTrace {
            input,
            hidden_pre,
            hidden,
            pooled,
        };
        (features, trace)
    }

    /// Backward from gradients w.r.t. the pooled vector and the modulation vector.
    pub fn backward(&self, p: &[f64], g: &mut [f64], tr: &PriorTrace, d_pooled: &[f64], d_modulation: &[f64]) {
        let mut dp = self.modulation.backward(p, g, &tr.pooled, d_modulation, 1);
        for (a, b) in dp.iter_mut().zip(d_pooled) {
            *a += b;
        }
        let scale = 1.0 / self.tokens as f64;
        let mut d_spatial = vec![0.0; self.tokens * self.dim];
        for row in d_spatial.chunks_exact_mut(self.dim) {
            for (a, b) in row.iter_mut().zip(&dp) {
                *a = b * scale;
            }
        }
        let mut dh = self.out.backward(p, g, &tr.hidden, &d_spatial, self.tokens);
        for (d, &x) in dh.iter_mut().zip(&tr.hidden_pre) {
            *d *= gelu_grad(x);
        }
        let dx = self.hidden.backward(p, g, &tr.input, &dh, self.tokens);
        let din = self.hidden.din;
        for t in 0..self.tokens {
            for k in 0..self.dim {
                g[self.embedding + t * self.dim + k] += dx[t * din + TEMPORAL_FEATURES + k];
            }
        }
    }
}
