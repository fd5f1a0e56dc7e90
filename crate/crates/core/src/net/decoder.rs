use super::layers::{AffineNorm, Linear, NormCache, Patching};
use super::params::{Init, ParamRegistry};

/// Shared decoder: skip projection of `[predicted | encoder latent]`,
/// normalization, then a transposed patch convolution back to `C x H x W`.
#[derive(Debug, Clone)]
pub(crate) struct SkipDecoder {
    skip: Linear,
    norm: AffineNorm,
    out: Linear,
    dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DecodeTrace {
    concat: Vec<f64>,
    norm: NormCache,
    normed: Vec<f64>,
}

impl SkipDecoder {
    pub fn register(reg: &mut ParamRegistry, dim: usize, skip_dim: usize, features: usize) -> Self {
        Self {
            skip: Linear::register(reg, "decoder.skip", 2 * dim, skip_dim, Init::TruncNormal(0.02)),
            norm: AffineNorm::register(reg, "decoder.norm", skip_dim),
            out: Linear::register(reg, "decoder.patch", skip_dim, features, Init::TruncNormal(0.02)),
            dim,
        }
    }

    /// Flat `C x H x W` field, before land refill.
    pub fn forward(&self, p: &[f64], predicted: &[f64], skip: &[f64], patching: &Patching) -> (Vec<f64>, DecodeTrace) {
        let (t, d) = (patching.tokens(), self.dim);
        let mut concat = vec![0.0; t * 2 * d];
        for k in 0..t {
            concat[k * 2 * d..k * 2 * d + d].copy_from_slice(&predicted[k * d..(k + 1) * d]);
            concat[k * 2 * d + d..(k + 1) * 2 * d].copy_from_slice(&skip[k * d..(k + 1) * d]);
        }
        let s = self.skip.forward(p, &concat, t);
        let (normed, norm) = self.norm.forward(p, &s);
        let tokens = self.out.forward(p, &normed, t);
        (patching.unpatchify(&tokens), DecodeTrace { concat, norm, normed })
    }

    /// Returns `(d predicted, d skip)`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        tr: &DecodeTrace,
        dfield: &[f64],
        patching: &Patching,
    ) -> (Vec<f64>, Vec<f64>) {
        let (t, d) = (patching.tokens(), self.dim);
        let dtokens = patching.patchify(dfield);
        let dnormed = self.out.backward(p, g, &tr.normed, &dtokens, t);
        let ds = self.norm.backward(p, g, &tr.norm, &dnormed);
        let dcat = self.skip.backward(p, g, &tr.concat, &ds, t);
        let mut dpred = vec![0.0; t * d];
        let mut dskip = vec![0.0; t * d];
        for k in 0..t {
            dpred[k * d..(k + 1) * d].copy_from_slice(&dcat[k * 2 * d..k * 2 * d + d]);
            dskip[k * d..(k + 1) * d].copy_from_slice(&dcat[k * 2 * d + d..(k + 1) * 2 * d]);
        }
        (dpred, dskip)
    }
}
