use super::layers::{AffineNorm, Linear, NormCache, Patching};
use super::params::{Init, ParamRegistry};

/// Patch embedding (kernel = stride = patch) whose weights are scaled per
/// output channel by `1 + m`, followed by layer normalization.
#[derive(Debug, Clone)]
pub(crate) struct StateEncoder {
    pub proj: Linear,
    pub norm: AffineNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct EncodeTrace {
    patches: Vec<f64>,
    raw: Vec<f64>,
    norm: NormCache,
}

impl StateEncoder {
    pub fn register(reg: &mut ParamRegistry, features: usize, dim: usize) -> Self {
        Self {
            proj: Linear::register(reg, "encoder.patch", features, dim, Init::TruncNormal(0.02)),
            norm: AffineNorm::register(reg, "encoder.norm", dim),
        }
    }

    /// Pre-normalization response `(P W) * (1 + m) + b` and the unscaled `P W`.
    pub fn pre_norm(&self, p: &[f64], patches: &[f64], modulation: &[f64], tokens: usize) -> (Vec<f64>, Vec<f64>) {
        let dim = self.proj.dout;
        let raw = super::linalg::matmul(patches, self.proj.weight(p), tokens, self.proj.din, dim);
        let bias = self.proj.bias(p);
        let mut pre = raw.clone();
        for row in pre.chunks_exact_mut(dim) {
            for k in 0..dim {
                row[k] = row[k] * (1.0 + modulation[k]) + bias[k];
            }
        }
        (pre, raw)
    }

    pub fn forward(&self, p: &[f64], field: &[f64], modulation: &[f64], patching: &Patching) -> (Vec<f64>, EncodeTrace) {
        let patches = patching.patchify(field);
        let (pre, raw) = self.pre_norm(p, &patches, modulation, patching.tokens());
        let (y, norm) = self.norm.forward(p, &pre);
        (y, EncodeTrace { patches, raw, norm })
    }

    /// Returns the gradient w.r.t. the input field; accumulates into `d_modulation`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        tr: &EncodeTrace,
        modulation: &[f64],
        dy: &[f64],
        d_modulation: &mut [f64],
        patching: &Patching,
    ) -> Vec<f64> {
        let dim = self.proj.dout;
        let dpre = self.norm.backward(p, g, &tr.norm, dy);
        let mut draw = dpre.clone();
        for (t, row) in draw.chunks_exact_mut(dim).enumerate() {
            for k in 0..dim {
                d_modulation[k] += tr.raw[t * dim + k] * row[k];
                row[k] *= 1.0 + modulation[k];
            }
        }
        let tokens = patching.tokens();
        // bias sees the unscaled gradient
        let gb = self.proj.b;
        for row in dpre.chunks_exact(dim) {
            for k in 0..dim {
                g[gb + k] += row[k];
            }
        }
        super::linalg::matmul_tn_acc(
            &tr.patches,
            &draw,
            tokens,
            self.proj.din,
            dim,
            &mut g[self.proj.w..self.proj.w + self.proj.din * dim],
        );
        let dpatches = super::linalg::matmul_nt(&draw, self.proj.weight(p), tokens, dim, self.proj.din);
        patching.unpatchify(&dpatches)
    }
}

/// Channel concatenation of the N step latents, pointwise projection, normalization.
#[derive(Debug, Clone)]
pub(crate) struct TemporalFusion {
    pub proj: Linear,
    pub norm: AffineNorm,
    pub n_inputs: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FuseTrace {
    concat: Vec<f64>,
    norm: NormCache,
}

impl TemporalFusion {
    pub fn register(reg: &mut ParamRegistry, n_inputs: usize, dim: usize) -> Self {
        Self {
            proj: Linear::register(reg, "fusion.proj", n_inputs * dim, dim, Init::TruncNormal(0.02)),
            norm: AffineNorm::register(reg, "fusion.norm", dim),
            n_inputs,
            dim,
        }
    }

    pub fn forward(&self, p: &[f64], latents: &[&[f64]], tokens: usize) -> (Vec<f64>, FuseTrace) {
        let (n, d) = (self.n_inputs, self.dim);
        let mut concat = vec![0.0; tokens * n * d];
        for (i, lat) in latents.iter().enumerate() {
            for t in 0..tokens {
                concat[t * n * d + i * d..t * n * d + (i + 1) * d].copy_from_slice(&lat[t * d..(t + 1) * d]);
            }
        }
        let z = self.proj.forward(p, &concat, tokens);
        let (y, norm) = self.norm.forward(p, &z);
        (y, FuseTrace { concat, norm })
    }

    /// Gradients w.r.t. each input latent, in input order.
    pub fn backward(&self, p: &[f64], g: &mut [f64], tr: &FuseTrace, dy: &[f64], tokens: usize) -> Vec<Vec<f64>> {
        let (n, d) = (self.n_inputs, self.dim);
        let dz = self.norm.backward(p, g, &tr.norm, dy);
        let dcat = self.proj.backward(p, g, &tr.concat, &dz, tokens);
        (0..n)
            .map(|i| {
                let mut out = vec![0.0; tokens * d];
                for t in 0..tokens {
                    out[t * d..(t + 1) * d].copy_from_slice(&dcat[t * n * d + i * d..t * n * d + (i + 1) * d]);
                }
                out
            })
            .collect()
    }
}
