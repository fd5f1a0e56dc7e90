use super::layers::{gelu, gelu_grad, layer_norm, layer_norm_backward, Linear, NormCache};
use super::params::{Init, ParamRegistry};

/// Softmax attention weights of one block: `[window][head]` row-major
/// `L x L` matrices, `L` tokens per window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    pub window_tokens: usize,
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// Adaptive-norm, windowed multi-head self-attention, adaptive-norm, FFN.
#[derive(Debug, Clone)]
pub(crate) struct AttentionBlock {
    ada_attn: Linear,
    qkv: Linear,
    out: Linear,
    ada_ffn: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    heads: usize,
    dim: usize,
    tokens: usize,
    /// Token indices of every (possibly shifted) window.
    windows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace {
    gen_attn: Vec<f64>,
    ln_attn: NormCache,
    h_attn: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<Vec<Vec<f64>>>,
    mixed: Vec<f64>,
    gen_ffn: Vec<f64>,
    ln_ffn: NormCache,
    h_ffn: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn window_lists(th: usize, tw: usize, wh: usize, ww: usize, sh: usize, sw: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wy in 0..th / wh {
        for wx in 0..tw / ww {
            let mut idx = Vec::with_capacity(wh * ww);
            for a in 0..wh {
                for b in 0..ww {
                    let r = (wy * wh + a + sh) % th;
                    let c = (wx * ww + b + sw) % tw;
                    idx.push(r * tw + c);
                }
            }
            out.push(idx);
        }
    }
    out
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        reg: &mut ParamRegistry,
        index: usize,
        dim: usize,
        heads: usize,
        expansion: usize,
        grid: (usize, usize),
        window: (usize, usize),
        shifted: bool,
    ) -> Self {
        let name = |s: &str| format!("block{index}.{s}");
        let (th, tw) = grid;
        let (wh, ww) = window;
        let (sh, sw) = if shifted {
            (if wh < th { wh / 2 } else { 0 }, if ww < tw { ww / 2 } else { 0 })
        } else {
            (0, 0)
        };
        Self {
            ada_attn: Linear::register(reg, &name("ada_attn"), dim, 2 * dim, Init::Zeros),
            qkv: Linear::register(reg, &name("qkv"), dim, 3 * dim, Init::TruncNormal(0.02)),
            out: Linear::register(reg, &name("attn_out"), dim, dim, Init::Zeros),
            ada_ffn: Linear::register(reg, &name("ada_ffn"), dim, 2 * dim, Init::Zeros),
            ffn_in: Linear::register(reg, &name("ffn_in"), dim, expansion * dim, Init::TruncNormal(0.02)),
            ffn_out: Linear::register(reg, &name("ffn_out"), expansion * dim, dim, Init::Zeros),
            heads,
            dim,
            tokens: th * tw,
            windows: window_lists(th, tw, wh, ww, sh, sw),
        }
    }

    fn modulate(&self, x: &[f64], gen: &[f64]) -> (Vec<f64>, NormCache) {
        let d = self.dim;
        let ln = layer_norm(x, d);
        let mut h = ln.xhat.clone();
        for row in h.chunks_exact_mut(d) {
            for k in 0..d {
                row[k] = row[k] * (1.0 + gen[k]) + gen[d + k];
            }
        }
        (h, ln)
    }

    /// Returns `(d x, d gen)` for the adaptive norm.
    fn modulate_backward(&self, ln: &NormCache, gen: &[f64], dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut dgen = vec![0.0; 2 * d];
        let mut dxhat = dh.to_vec();
        for (t, row) in dxhat.chunks_exact_mut(d).enumerate() {
            for k in 0..d {
                dgen[k] += row[k] * ln.xhat[t * d + k];
                dgen[d + k] += row[k];
                row[k] *= 1.0 + gen[k];
            }
        }
        (layer_norm_backward(ln, &dxhat), dgen)
    }

    fn attend(&self, qkv: &[f64]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = vec![0.0; self.tokens * d];
        let mut probs = Vec::with_capacity(self.windows.len());
        for idx in &self.windows {
            let l = idx.len();
            let mut per_head = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let (qo, ko, vo) = (hd * dh, d + hd * dh, 2 * d + hd * dh);
                let mut p = vec![0.0; l * l];
                for (a, &ta) in idx.iter().enumerate() {
                    let q = &qkv[ta * 3 * d + qo..ta * 3 * d + qo + dh];
                    let row = &mut p[a * l..(a + 1) * l];
                    for (b, &tb) in idx.iter().enumerate() {
                        let k = &qkv[tb * 3 * d + ko..tb * 3 * d + ko + dh];
                        row[b] = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                    let o = &mut mixed[ta * d + qo..ta * d + qo + dh];
                    for (b, &tb) in idx.iter().enumerate() {
                        let v = &qkv[tb * 3 * d + vo..tb * 3 * d + vo + dh];
                        for (acc, x) in o.iter_mut().zip(v) {
                            *acc += row[b] * x;
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        (mixed, probs)
    }

    fn attend_backward(&self, qkv: &[f64], probs: &[Vec<Vec<f64>>], dmixed: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; self.tokens * 3 * d];
        for (idx, per_head) in self.windows.iter().zip(probs) {
            let l = idx.len();
            for (hd, p) in per_head.iter().enumerate() {
                let (qo, ko, vo) = (hd * dh, d + hd * dh, 2 * d + hd * dh);
                for (a, &ta) in idx.iter().enumerate() {
                    let dout = &dmixed[ta * d + qo..ta * d + qo + dh];
                    let prow = &p[a * l..(a + 1) * l];
                    // dP = dO V^T, dV += P^T dO
                    let mut dp = vec![0.0; l];
                    for (b, &tb) in idx.iter().enumerate() {
                        let v = &qkv[tb * 3 * d + vo..tb * 3 * d + vo + dh];
                        dp[b] = dout.iter().zip(v).map(|(x, y)| x * y).sum();
                        let dv = &mut dqkv[tb * 3 * d + vo..tb * 3 * d + vo + dh];
                        for (acc, x) in dv.iter_mut().zip(dout) {
                            *acc += prow[b] * x;
                        }
                    }
                    let dot: f64 = dp.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for (b, &tb) in idx.iter().enumerate() {
                        let ds = prow[b] * (dp[b] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..dh {
                            let qa = qkv[ta * 3 * d + qo + j];
                            let kb = qkv[tb * 3 * d + ko + j];
                            dqkv[ta * 3 * d + qo + j] += ds * kb;
                            dqkv[tb * 3 * d + ko + j] += ds * qa;
                        }
                    }
                }
            }
        }
        dqkv
    }

    pub fn forward(&self, p: &[f64], x: &[f64], cond: &[f64]) -> (Vec<f64>, BlockTrace) {
        let t = self.tokens;
        let gen_attn = self.ada_attn.forward(p, cond, 1);
        let (h_attn, ln_attn) = self.modulate(x, &gen_attn);
        let qkv = self.qkv.forward(p, &h_attn, t);
        let (mixed, probs) = self.attend(&qkv);
        let attn_out = self.out.forward(p, &mixed, t);
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let gen_ffn = self.ada_ffn.forward(p, cond, 1);
        let (h_ffn, ln_ffn) = self.modulate(&x_mid, &gen_ffn);
        let ffn_pre = self.ffn_in.forward(p, &h_ffn, t);
        let ffn_act: Vec<f64> = ffn_pre.iter().map(|&v| gelu(v)).collect();
        let ffn = self.ffn_out.forward(p, &ffn_act, t);
        let y = x_mid.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        let trace = BlockTrace {
            gen_attn,
            ln_attn,
            h_attn,
            qkv,
            probs,
            mixed,
            gen_ffn,
            ln_ffn,
            h_ffn,
            ffn_pre,
            ffn_act,
        };
        (y, trace)
    }

    /// Returns `(d x, d cond)`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], tr: &BlockTrace, cond: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t = self.tokens;
        let mut dfa = self.ffn_out.backward(p, g, &tr.ffn_act, dy, t);
        for (v, &x) in dfa.iter_mut().zip(&tr.ffn_pre) {
            *v *= gelu_grad(x);
        }
        let dh_ffn = self.ffn_in.backward(p, g, &tr.h_ffn, &dfa, t);
        let (dx_ln, dgen_ffn) = self.modulate_backward(&tr.ln_ffn, &tr.gen_ffn, &dh_ffn);
        let mut dcond = self.ada_ffn.backward(p, g, cond, &dgen_ffn, 1);
        let dx_mid: Vec<f64> = dy.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();

        let dmixed = self.out.backward(p, g, &tr.mixed, &dx_mid, t);
        let dqkv = self.attend_backward(&tr.qkv, &tr.probs, &dmixed);
        let dh_attn = self.qkv.backward(p, g, &tr.h_attn, &dqkv, t);
        let (dx_ln, dgen_attn) = self.modulate_backward(&tr.ln_attn, &tr.gen_attn, &dh_attn);
        for (a, b) in dcond.iter_mut().zip(self.ada_attn.backward(p, g, cond, &dgen_attn, 1)) {
            *a += b;
        }
        let dx = dx_mid.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        (dx, dcond)
    }

    pub fn probs(&self, tr: &BlockTrace) -> AttentionProbs {
        AttentionProbs {
            window_tokens: self.windows.first().map_or(0, |w| w.len()),
            probs: tr.probs.clone(),
        }
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }
}
