//! Building blocks with hand-written backward passes.
//!
//! Activations are row-major `rows x dim` slices. Backward functions
//! accumulate parameter gradients into a flat gradient vector laid out like
//! the parameter vector.

use super::linalg::{matmul, matmul_nt, matmul_tn_acc};
use super::params::{Init, ParamRegistry};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `din x dout`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn register(reg: &mut ParamRegistry, name: &str, din: usize, dout: usize, init: Init) -> Self {
        let w = reg.add(format!("{name}.weight"), &[din, dout], init, true);
        let b = reg.add(format!("{name}.bias"), &[dout], Init::Zeros, false);
        Self { w, b, din, dout }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.din * self.dout]
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.dout]
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = matmul(x, self.weight(p), rows, self.din, self.dout);
        add_row_bias(&mut y, self.bias(p));
        y
    }

    /// Accumulates weight and bias gradients; returns `dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        self.backward_params(g, x, dy, rows);
        matmul_nt(dy, self.weight(p), rows, self.dout, self.din)
    }

    pub fn backward_params(&self, g: &mut [f64], x: &[f64], dy: &[f64], rows: usize) {
        matmul_tn_acc(x, dy, rows, self.din, self.dout, &mut g[self.w..self.w + self.din * self.dout]);
        let gb = &mut g[self.b..self.b + self.dout];
        for row in dy.chunks_exact(self.dout) {
            for (a, &d) in gb.iter_mut().zip(row) {
                *a += d;
            }
        }
    }
}

pub fn add_row_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Saved statistics of a row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub dim: usize,
}

/// Normalizes each row to zero mean and unit variance.
pub fn layer_norm(x: &[f64], dim: usize) -> NormCache {
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for (o, v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
    }
    NormCache { xhat, rstd, dim }
}

/// Backward of [`layer_norm`] given the gradient w.r.t. `xhat`.
pub fn layer_norm_backward(cache: &NormCache, dxhat: &[f64]) -> Vec<f64> {
    let dim = cache.dim;
    let mut dx = vec![0.0; dxhat.len()];
    for (r, s) in cache.rstd.iter().enumerate() {
        let span = r * dim..(r + 1) * dim;
        let xh = &cache.xhat[span.clone()];
        let dh = &dxhat[span.clone()];
        let mean_d = dh.iter().sum::<f64>() / dim as f64;
        let mean_dx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        for ((o, &d), &x) in dx[span].iter_mut().zip(dh).zip(xh) {
            *o = s * (d - mean_d - x * mean_dx);
        }
    }
    dx
}

/// Layer normalization with learnable per-channel gain and offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

impl AffineNorm {
    pub fn register(reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        let gamma = reg.add(format!("{name}.gamma"), &[dim], Init::Ones, false);
        let beta = reg.add(format!("{name}.beta"), &[dim], Init::Zeros, false);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, NormCache) {
        let cache = layer_norm(x, self.dim);
        let gamma = &p[self.gamma..self.gamma + self.dim];
        let beta = &p[self.beta..self.beta + self.dim];
        let mut y = cache.xhat.clone();
        for row in y.chunks_exact_mut(self.dim) {
            for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut dxhat = dy.to_vec();
        for (r, row) in dxhat.chunks_exact_mut(d).enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                g[self.gamma + j] += row[j] * xh[j];
                g[self.beta + j] += row[j];
                row[j] *= p[self.gamma + j];
            }
        }
        layer_norm_backward(cache, &dxhat)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Geometry of the patch embedding: `C x H x W` fields cut into
/// `patch x patch` tiles, giving `H' x W'` tokens of `C * patch^2` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patching {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Patching {
    pub fn tokens_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn tokens_w(&self) -> usize {
        self.width / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.tokens_h() * self.tokens_w()
    }

    pub fn features(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Field (flat `C x H x W`) to token matrix (`T x C*p*p`).
    pub fn patchify(&self, field: &[f64]) -> Vec<f64> {
        let (p, wt, f) = (self.patch, self.tokens_w(), self.features());
        let mut out = vec![0.0; self.tokens() * f];
        for c in 0..self.channels {
            for h in 0..self.height {
                for w in 0..self.width {
                    let tok = (h / p) * wt + w / p;
                    let feat = c * p * p + (h % p) * p + w % p;
                    out[tok * f + feat] = field[(c * self.height + h) * self.width + w];
                }
            }
        }
        out
    }

    /// Inverse of [`Patching::patchify`].
    pub fn unpatchify(&self, tokens: &[f64]) -> Vec<f64> {
        let (p, wt, f) = (self.patch, self.tokens_w(), self.features());
        let mut out = vec![0.0; self.channels * self.height * self.width];
        for c in 0..self.channels {
            for h in 0..self.height {
                for w in 0..self.width {
                    let tok = (h / p) * wt + w / p;
                    let feat = c * p * p + (h % p) * p + w % p;
                    out[(c * self.height + h) * self.width + w] = tokens[tok * f + feat];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn patchify_round_trip() {
        let p = Patching {
            channels: 3,
            height: 8,
            width: 12,
            patch: 4,
        };
        let mut r = rng();
        let x: Vec<f64> = (0..3 * 8 * 12).map(|_| r.random()).collect();
        assert_eq!(p.unpatchify(&p.patchify(&x)), x);
        assert_eq!(p.tokens(), 6);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn affine_norm_and_linear_gradients() {
        let mut reg = ParamRegistry::default();
        let lin = Linear::register(&mut reg, "l", 5, 4, Init::TruncNormal(0.5));
        let norm = AffineNorm::register(&mut reg, "n", 4);
        let mut r = rng();
        let mut p: Vec<f64> = (0..reg.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3 * 5).map(|_| r.random_range(-1.0..1.0)).collect();
        let wsum: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| {
            let (y, _) = norm.forward(p, &lin.forward(p, x, 3));
            y.iter().zip(&wsum).map(|(a, b)| a * b).sum::<f64>()
        };
        let z = lin.forward(&p, &x, 3);
        let (_, cache) = norm.forward(&p, &z);
        let mut g = vec![0.0; reg.len()];
        let dz = norm.backward(&p, &mut g, &cache, &wsum);
        let dx = lin.backward(&p, &mut g, &x, &dz, 3);
        let h = 1e-6;
        for i in 0..reg.len() {
            let old = p[i];
            p[i] = old + h;
            let up = loss(&p, &x);
            p[i] = old - h;
            let dn = loss(&p, &x);
            p[i] = old;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = loss(&p, &xp);
            xp[i] = x[i] - h;
            let dn = loss(&p, &xp);
            xp[i] = x[i];
            assert!(((up - dn) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
    }
}
