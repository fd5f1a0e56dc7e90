use ndarray::Array3;
use rand::Rng;

use super::attention::{AttentionBlock, AttentionProbs, BlockTrace};
use super::decoder::{DecodeTrace, SkipDecoder};
use super::encoder::{EncodeTrace, FuseTrace, StateEncoder, TemporalFusion};
use super::layers::Patching;
use super::params::ParamRegistry;
use super::prior::{PriorNet, PriorTrace};
use super::{CandidateSet, ContextFeatures, ContextSignals, LatentFeatures, NetConfig};
use crate::error::{Error, Result};
use crate::grid::LandSeaMask;

/// Network structure: parameter offsets plus static geometry. Parameter
/// values live in a separate flat vector so they can be shared read-only.
#[derive(Debug, Clone)]
pub struct ForecastNet {
    config: NetConfig,
    patching: Patching,
    registry: ParamRegistry,
    prior: PriorNet,
    encoder: StateEncoder,
    fusion: TemporalFusion,
    blocks: Vec<AttentionBlock>,
    decoder: SkipDecoder,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    context: ContextFeatures,
    prior: PriorTrace,
    encoded: Vec<EncodeTrace>,
    latents: Vec<Vec<f64>>,
    fuse: FuseTrace,
    blocks: Vec<BlockTrace>,
    predicted: Vec<f64>,
    decoded: Vec<DecodeTrace>,
}

impl ForwardTrace {
    pub fn context(&self) -> &ContextFeatures {
        &self.context
    }

    /// Encoder latents of the inputs, oldest first.
    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }
}

impl ForecastNet {
    pub fn new(config: NetConfig, channels: usize, height: usize, width: usize) -> Result<Self> {
        config.validate(height, width)?;
        if channels == 0 {
            return Err(Error::Config("no channels".into()));
        }
        let patching = Patching {
            channels,
            height,
            width,
            patch: config.patch,
        };
        let (th, tw) = (patching.tokens_h(), patching.tokens_w());
        let d = config.latent_dim;
        let mut reg = ParamRegistry::default();
        let prior = PriorNet::register(&mut reg, patching.tokens(), d);
        let encoder = StateEncoder::register(&mut reg, patching.features(), d);
        let fusion = TemporalFusion::register(&mut reg, config.n_inputs, d);
        let window = config.window_for(th, tw);
        let blocks = (0..config.blocks)
            .map(|b| {
                AttentionBlock::register(
                    &mut reg,
                    b,
                    d,
                    config.heads,
                    config.ffn_expansion,
                    (th, tw),
                    window,
                    config.shift_windows && b % 2 == 1,
                )
            })
            .collect();
        let decoder = SkipDecoder::register(&mut reg, d, config.skip_dim, patching.features());
        Ok(Self {
            config,
            patching,
            registry: reg,
            prior,
            encoder,
            fusion,
            blocks,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn n_params(&self) -> usize {
        self.registry.len()
    }

    pub fn channels(&self) -> usize {
        self.patching.channels
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.patching.height, self.patching.width)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.latent_dim, self.patching.tokens_h(), self.patching.tokens_w())
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.registry.initialize(rng)
    }

    /// Token indices of each attention window of `block`.
    pub fn attention_windows(&self, block: usize) -> &[Vec<usize>] {
        self.blocks[block].windows()
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.registry.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network needs {}",
                p.len(),
                self.registry.len()
            )));
        }
        Ok(())
    }

    fn check_field(&self, field: &Array3<f64>) -> Result<()> {
        let want = [self.patching.channels, self.patching.height, self.patching.width];
        if field.shape() != want {
            return Err(Error::Shape(format!("field shape {:?}, expected {:?}", field.shape(), want)));
        }
        Ok(())
    }

    fn check_latent(&self, l: &LatentFeatures) -> Result<()> {
        if l.shape() != self.latent_shape() || l.data.len() != self.patching.tokens() * self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent shape {:?}, expected {:?}",
                l.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }

    fn check_signals(&self, s: &ContextSignals) -> Result<()> {
        let want = (self.patching.height, self.patching.width);
        if s.latitude.dim() != want || s.longitude.dim() != want || s.ocean.dim() != want {
            return Err(Error::Shape("context signals do not match the grid".into()));
        }
        Ok(())
    }

    fn latent(&self, data: Vec<f64>) -> LatentFeatures {
        LatentFeatures {
            data,
            tokens_h: self.patching.tokens_h(),
            tokens_w: self.patching.tokens_w(),
            dim: self.config.latent_dim,
        }
    }

    fn to_field(&self, flat: Vec<f64>, mask: &LandSeaMask) -> Result<Array3<f64>> {
        let mut a = Array3::from_shape_vec((self.patching.channels, self.patching.height, self.patching.width), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        refill_land(&mut a, mask)?;
        Ok(a)
    }

    pub fn encode_prior(&self, p: &[f64], signals: &ContextSignals) -> Result<ContextFeatures> {
        self.check_params(p)?;
        self.check_signals(signals)?;
        Ok(self.prior.forward(p, signals, &self.patching).0)
    }

    pub fn encode_state(&self, p: &[f64], state: &Array3<f64>, ctx: &ContextFeatures) -> Result<LatentFeatures> {
        self.check_params(p)?;
        self.check_field(state)?;
        let flat: Vec<f64> = state.iter().copied().collect();
        Ok(self.latent(self.encoder.forward(p, &flat, &ctx.modulation, &self.patching).0))
    }

    /// Encoder response before normalization, for a given modulation vector.
    pub fn encode_state_pre_norm(&self, p: &[f64], state: &Array3<f64>, modulation: &[f64]) -> Result<Vec<f64>> {
        self.check_params(p)?;
        self.check_field(state)?;
        let flat: Vec<f64> = state.iter().copied().collect();
        let patches = self.patching.patchify(&flat);
        Ok(self.encoder.pre_norm(p, &patches, modulation, self.patching.tokens()).0)
    }

    /// Fuses latents ordered oldest first.
    pub fn fuse_temporal(&self, p: &[f64], latents: &[LatentFeatures]) -> Result<LatentFeatures> {
        self.check_params(p)?;
        if latents.len() != self.config.n_inputs {
            return Err(Error::Shape(format!(
                "{} latents for {} inputs",
                latents.len(),
                self.config.n_inputs
            )));
        }
        for l in latents {
            self.check_latent(l)?;
        }
        let refs: Vec<&[f64]> = latents.iter().map(|l| l.data.as_slice()).collect();
        Ok(self.latent(self.fusion.forward(p, &refs, self.patching.tokens()).0))
    }

    pub fn predict_latent(&self, p: &[f64], fused: &LatentFeatures, ctx: &ContextFeatures) -> Result<LatentFeatures> {
        Ok(self.predict_latent_with_attention(p, fused, ctx)?.0)
    }

    /// Prediction module output together with every block's attention weights.
    pub fn predict_latent_with_attention(
        &self,
        p: &[f64],
        fused: &LatentFeatures,
        ctx: &ContextFeatures,
    ) -> Result<(LatentFeatures, Vec<AttentionProbs>)> {
        self.check_params(p)?;
        self.check_latent(fused)?;
        let mut x = fused.data.clone();
        let mut probs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward(p, &x, &ctx.pooled);
            probs.push(b.probs(&tr));
            x = y;
        }
        Ok((self.latent(x), probs))
    }

    /// Candidate `i` uses the skip from `temporal_latents[N - 1 - i]`
    /// (latents are ordered oldest first, so candidate 0 is the newest step).
    pub fn decode_candidates(
        &self,
        p: &[f64],
        predicted: &LatentFeatures,
        temporal_latents: &[LatentFeatures],
        mask: &LandSeaMask,
    ) -> Result<CandidateSet> {
        self.check_params(p)?;
        self.check_latent(predicted)?;
        if temporal_latents.len() != self.config.n_inputs {
            return Err(Error::Shape(format!(
                "{} skip latents for {} inputs",
                temporal_latents.len(),
                self.config.n_inputs
            )));
        }
        let n = temporal_latents.len();
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let skip = &temporal_latents[n - 1 - i];
            self.check_latent(skip)?;
            let (flat, _) = self.decoder.forward(p, &predicted.data, &skip.data, &self.patching);
            members.push(self.to_field(flat, mask)?);
        }
        Ok(CandidateSet { members })
    }

    /// Inputs ordered oldest first; all normalized and masked.
    pub fn forward(
        &self,
        p: &[f64],
        inputs: &[&Array3<f64>],
        signals: &ContextSignals,
        mask: &LandSeaMask,
    ) -> Result<CandidateSet> {
        Ok(self.forward_trace(p, inputs, signals, mask)?.0)
    }

    pub fn forward_trace(
        &self,
        p: &[f64],
        inputs: &[&Array3<f64>],
        signals: &ContextSignals,
        mask: &LandSeaMask,
    ) -> Result<(CandidateSet, ForwardTrace)> {
        self.check_params(p)?;
        self.check_signals(signals)?;
        if inputs.len() != self.config.n_inputs {
            return Err(Error::Shape(format!(
                "{} input states for {} inputs",
                inputs.len(),
                self.config.n_inputs
            )));
        }
        for x in inputs {
            self.check_field(x)?;
        }
        mask.check_channels(self.patching.channels)?;
        let tokens = self.patching.tokens();
        let (context, prior) = self.prior.forward(p, signals, &self.patching);
        let mut encoded = Vec::with_capacity(inputs.len());
        let mut latents = Vec::with_capacity(inputs.len());
        for x in inputs {
            let flat: Vec<f64> = x.iter().copied().collect();
            let (l, tr) = self.encoder.forward(p, &flat, &context.modulation, &self.patching);
            latents.push(l);
            encoded.push(tr);
        }
        let refs: Vec<&[f64]> = latents.iter().map(|l| l.as_slice()).collect();
        let (mut x, fuse) = self.fusion.forward(p, &refs, tokens);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward(p, &x, &context.pooled);
            blocks.push(tr);
            x = y;
        }
        let n = inputs.len();
        let mut members = Vec::with_capacity(n);
        let mut decoded = Vec::with_capacity(n);
        for i in 0..n {
            let (flat, tr) = self.decoder.forward(p, &x, &latents[n - 1 - i], &self.patching);
            members.push(self.to_field(flat, mask)?);
            decoded.push(tr);
        }
        let trace = ForwardTrace {
            context,
            prior,
            encoded,
            latents,
            fuse,
            blocks,
            predicted: x,
            decoded,
        };
        Ok((CandidateSet { members }, trace))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. each input state (oldest first).
    pub fn backward(
        &self,
        p: &[f64],
        trace: &ForwardTrace,
        d_candidates: &[Array3<f64>],
        mask: &LandSeaMask,
        grads: &mut [f64],
    ) -> Result<Vec<Array3<f64>>> {
        self.check_params(p)?;
        if grads.len() != p.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let n = self.config.n_inputs;
        if d_candidates.len() != n {
            return Err(Error::Shape(format!("{} candidate gradients for {n} candidates", d_candidates.len())));
        }
        let tokens = self.patching.tokens();
        let d = self.config.latent_dim;
        let mut d_pred = vec![0.0; tokens * d];
        let mut d_latents = vec![vec![0.0; tokens * d]; n];
        for (i, dc) in d_candidates.iter().enumerate() {
            self.check_field(dc)?;
            let mut dc = dc.clone();
            zero_land(&mut dc, mask)?;
            let flat: Vec<f64> = dc.iter().copied().collect();
            let (dp, ds) = self.decoder.backward(p, grads, &trace.decoded[i], &flat, &self.patching);
            add_into(&mut d_pred, &dp);
            add_into(&mut d_latents[n - 1 - i], &ds);
        }
        let mut d_pooled = vec![0.0; d];
        let mut dx = d_pred;
        for (b, tr) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (dprev, dcond) = b.backward(p, grads, tr, &trace.context.pooled, &dx);
            add_into(&mut d_pooled, &dcond);
            dx = dprev;
        }
        for (acc, g) in d_latents.iter_mut().zip(self.fusion.backward(p, grads, &trace.fuse, &dx, tokens)) {
            add_into(acc, &g);
        }
        let mut d_mod = vec![0.0; d];
        let (c, h, w) = (self.patching.channels, self.patching.height, self.patching.width);
        let mut d_inputs = Vec::with_capacity(n);
        for (tr, dl) in trace.encoded.iter().zip(&d_latents) {
            let dxf = self
                .encoder
                .backward(p, grads, tr, &trace.context.modulation, dl, &mut d_mod, &self.patching);
            d_inputs.push(Array3::from_shape_vec((c, h, w), dxf).map_err(|e| Error::Shape(e.to_string()))?);
        }
        self.prior.backward(p, grads, &trace.prior, &d_pooled, &d_mod);
        Ok(d_inputs)
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn zero_land(a: &mut Array3<f64>, mask: &LandSeaMask) -> Result<()> {
    mask.check_field(a.shape())?;
    for (c, mut plane) in a.outer_iter_mut().enumerate() {
        for (v, &o) in plane.iter_mut().zip(mask.plane(c)) {
            if o == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

fn refill_land(a: &mut Array3<f64>, mask: &LandSeaMask) -> Result<()> {
    crate::grid::mask_in_place(a, mask)
}
