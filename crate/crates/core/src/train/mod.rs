//! Pretraining, autoregressive fine-tuning, and checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{step, NormStats, NormalizedSeries};
use crate::error::{Error, Result};
use crate::grid::{latitude_weights, ChannelLayout, GridSpec, LatitudeWeights};
use crate::mot::{merge_backward, merge_candidates, topk_select, SelectionMatrix, TopKSelector};
use crate::net::{ContextSignals, ForecastNet, NetConfig};
use crate::objectives::{channel_candidate_mae, charbonnier_loss_grad, step_scales, CandidateMae, LossConfig};

pub use checkpoint::{checkpoint_sha256, config_hash, load_checkpoint, save_checkpoint, write_manifest, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, AdamW};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "OCEANCAST_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Selection-matrix momentum.
    pub momentum: f64,
    /// Windows merged per channel.
    pub top_k: usize,
    /// Rollout steps per fine-tuning sample.
    pub horizon: usize,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Weight of the merged-forecast loss term.
    pub merged_weight: f64,
    /// Weight of each individual candidate's loss term.
    pub candidate_weight: f64,
    /// When false, candidates are averaged with equal weight and the
    /// selection matrix is never updated.
    pub use_mot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            iterations: 2000,
            batch_size: 1,
            peak_lr: 2.5e-4,
            floor_lr: 1e-8,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            momentum: 0.99,
            top_k: 1,
            horizon: 4,
            seed: 0,
            checkpoint_every: 0,
            merged_weight: 1.0,
            candidate_weight: 0.25,
            use_mot: true,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        Self {
            stage: Stage::Finetune,
            iterations: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr < self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("need 0 <= floor_lr < peak_lr, got {} and {}", self.floor_lr, self.peak_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0 && self.clip_norm > 0.0) {
            return bad("weight_decay >= 0, adam_eps > 0 and clip_norm > 0 required".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.merged_weight >= 0.0 && self.candidate_weight >= 0.0)
            || self.merged_weight + self.candidate_weight == 0.0
        {
            return bad("loss term weights must be nonnegative and not both zero".into());
        }
        Ok(())
    }

    /// Rollout length used for each sample.
    pub fn rollout_steps(&self) -> usize {
        match self.stage {
            Stage::Pretrain => 1,
            Stage::Finetune => self.horizon,
        }
    }
}

/// Cosine decay from `peak_lr` at step 0 to `floor_lr` at `iterations`;
/// later steps stay at the floor.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step == 0 {
        return cfg.peak_lr;
    }
    if step >= cfg.iterations {
        return cfg.floor_lr;
    }
    let frac = step as f64 / cfg.iterations as f64;
    cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Everything needed to continue training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net_config: NetConfig,
    pub loss_config: LossConfig,
    pub train_config: TrainConfig,
    pub grid: GridSpec,
    pub layout: ChannelLayout,
    pub norm: NormStats,
    pub params: Vec<f64>,
    pub optimizer: AdamW,
    pub selection: SelectionMatrix,
    /// Completed iterations of the current stage.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn init(
        net_config: NetConfig,
        loss_config: LossConfig,
        train_config: TrainConfig,
        grid: GridSpec,
        layout: ChannelLayout,
        norm: NormStats,
    ) -> Result<Self> {
        train_config.validate()?;
        loss_config.validate()?;
        let c = layout.total_channels();
        if norm.channels() != c {
            return Err(Error::Config(format!("{} normalization channels for {c} channels", norm.channels())));
        }
        let net = ForecastNet::new(net_config.clone(), c, grid.n_lat(), grid.n_lon())?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        let params = net.init_params(&mut rng);
        let optimizer = AdamW::new(
            params.len(),
            train_config.beta1,
            train_config.beta2,
            train_config.adam_eps,
            train_config.weight_decay,
        );
        let selection = SelectionMatrix::uniform(c, net_config.n_inputs, train_config.momentum, train_config.top_k)?;
        Ok(Self {
            net_config,
            loss_config,
            train_config,
            grid,
            layout,
            norm,
            params,
            optimizer,
            selection,
            iteration: 0,
            rng,
        })
    }

    /// Starts a new stage from these weights and selection matrix with a
    /// fresh optimizer and counter.
    pub fn next_stage(&self, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let selection = SelectionMatrix::from_values(self.selection.values().clone(), cfg.momentum, cfg.top_k)?;
        Ok(Self {
            optimizer: AdamW::new(self.params.len(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            train_config: cfg,
            selection,
            iteration: 0,
            ..self.clone()
        })
    }

    pub fn network(&self) -> Result<ForecastNet> {
        ForecastNet::new(
            self.net_config.clone(),
            self.layout.total_channels(),
            self.grid.n_lat(),
            self.grid.n_lon(),
        )
    }

    /// Selector used for merging: learned TopK, or all windows when MoT is off.
    pub fn selector(&self) -> (TopKSelector, usize) {
        if self.train_config.use_mot {
            (topk_select(&self.selection), self.selection.k())
        } else {
            let n = self.net_config.n_inputs;
            (TopKSelector::all(self.layout.total_channels(), n), n)
        }
    }
}

/// One row of `train_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub stage: Stage,
}

/// Appends records, writing the header when the file is new.
pub fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(f, "iteration,lr,loss,stage")?;
    }
    for r in records {
        writeln!(f, "{},{:e},{:.10e},{}", r.iteration, r.lr, r.loss, r.stage.as_str())?;
    }
    f.flush()?;
    Ok(())
}

/// Loss, gradient side information, and instrumentation for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    /// Unscaled loss of each rollout step.
    pub step_losses: Vec<f64>,
    /// Step-1 candidate errors, used for the selection update.
    pub mae: CandidateMae,
    /// Input window seen at each rollout step, oldest first.
    pub step_inputs: Vec<Vec<Array3<f64>>>,
    /// Merged prediction of each rollout step.
    pub merged: Vec<Array3<f64>>,
}

pub struct Trainer<'a> {
    net: ForecastNet,
    state: TrainState,
    data: &'a NormalizedSeries,
    weights: LatitudeWeights,
    origins: Range<usize>,
    decay: Vec<bool>,
    history: Vec<LogRecord>,
    workers: usize,
}

impl<'a> Trainer<'a> {
    /// Trains on samples whose whole rollout lies inside `range`
    /// (state indices of `data`).
    pub fn new(state: TrainState, data: &'a NormalizedSeries, range: Range<usize>) -> Result<Self> {
        state.train_config.validate()?;
        let net = state.network()?;
        if data.grid != state.grid {
            return Err(Error::Config("data grid differs from the checkpoint grid".into()));
        }
        if net.n_params() != state.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters for a network of {}",
                state.params.len(),
                net.n_params()
            )));
        }
        if state.selection.windows() != state.net_config.n_inputs {
            return Err(Error::Config("selection matrix width differs from the input window".into()));
        }
        let origins = data.valid_origins(range, state.net_config.n_inputs, state.train_config.rollout_steps());
        if origins.is_empty() {
            return Err(Error::Config("training range too short for one sample".into()));
        }
        let weights = latitude_weights(&state.grid.latitudes)?;
        let decay = net.registry().decay_mask();
        Ok(Self {
            net,
            state,
            data,
            weights,
            origins,
            decay,
            history: Vec::new(),
            workers: worker_count(),
        })
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn net(&self) -> &ForecastNet {
        &self.net
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn origins(&self) -> Range<usize> {
        self.origins.clone()
    }

    /// Loss of one sample starting at state index `origin` (newest input),
    /// accumulating its gradient into `grads`. `scales` overrides the
    /// per-step loss weights.
    pub fn sample_gradient(&self, origin: usize, scales: Option<&[f64]>, grads: &mut [f64]) -> Result<SampleOutcome> {
        let (selector, k) = self.state.selector();
        sample_gradient(
            &self.net,
            &self.state,
            self.data,
            &self.weights,
            &selector,
            k,
            origin,
            scales,
            grads,
        )
    }

    /// One optimization step; returns its log record.
    pub fn step(&mut self) -> Result<LogRecord> {
        let cfg = self.state.train_config.clone();
        let it = self.state.iteration;
        let lr = lr_at(it, &cfg);
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.state.rng.random_range(self.origins.clone()))
            .collect();
        let (selector, k) = self.state.selector();
        let n = self.state.params.len();
        let results = {
            let (net, state, data, weights) = (&self.net, &self.state, self.data, &self.weights);
            let run = |origin: usize| -> Result<(Vec<f64>, SampleOutcome)> {
                let mut g = vec![0.0; n];
                let o = sample_gradient(net, state, data, weights, &selector, k, origin, None, &mut g)?;
                Ok((g, o))
            };
            parallel_map(&picks, self.workers, run)
        };
        let mut grads = vec![0.0; n];
        let mut loss = 0.0;
        let mut maes = Vec::with_capacity(picks.len());
        for r in results {
            let (g, o) = r?;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
            loss += o.loss;
            maes.push(o.mae);
        }
        let inv = 1.0 / picks.len() as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        loss *= inv;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("{} loss", cfg.stage.as_str()),
                step: it,
            });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        self.state.optimizer.step(&mut self.state.params, &grads, &self.decay, lr);
        if cfg.use_mot {
            self.state.selection.update_from_mae(&mean_mae(&maes))?;
        }
        self.state.iteration += 1;
        let rec = LogRecord {
            iteration: it,
            lr,
            loss,
            stage: cfg.stage,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs until the configured iteration count, calling `after` once per
    /// iteration.
    pub fn run(&mut self, mut after: impl FnMut(&LogRecord, &TrainState) -> Result<()>) -> Result<()> {
        while self.state.iteration < self.state.train_config.iterations {
            let rec = self.step()?;
            after(&rec, &self.state)?;
        }
        Ok(())
    }
}

fn mean_mae(maes: &[CandidateMae]) -> CandidateMae {
    let first = &maes[0];
    let mut values = Array2::zeros(first.values.dim());
    for m in maes {
        values += &m.values;
    }
    values.mapv_inplace(|v| v / maes.len() as f64);
    CandidateMae {
        values,
        valid: first.valid.clone(),
    }
}

/// Applies `f` to every item on up to `workers` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R>
where
    T: Copy,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(|&x| f(x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(|&x| f(x)).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_gradient(
    net: &ForecastNet,
    state: &TrainState,
    data: &NormalizedSeries,
    weights: &LatitudeWeights,
    selector: &TopKSelector,
    k: usize,
    origin: usize,
    scales: Option<&[f64]>,
    grads: &mut [f64],
) -> Result<SampleOutcome> {
    let n = state.net_config.n_inputs;
    let h = state.train_config.rollout_steps();
    if origin + 1 < n || origin + h >= data.len() {
        return Err(Error::DataGap(data.timestamps[0] + step() * (origin as i32 + h as i32)));
    }
    let default_scales = step_scales(h, h, &state.loss_config)?;
    let scales = scales.unwrap_or(&default_scales);
    if scales.len() != h {
        return Err(Error::Shape(format!("{} step weights for {h} steps", scales.len())));
    }
    let cfg = &state.train_config;
    let eps = state.loss_config.epsilon;
    let mask = &data.mask;

    let mut window: Vec<Array3<f64>> = data.states[origin + 1 - n..=origin].to_vec();
    let mut traces = Vec::with_capacity(h);
    let mut loss_grads = Vec::with_capacity(h);
    let mut step_inputs = Vec::with_capacity(h);
    let mut merged_all = Vec::with_capacity(h);
    let mut step_losses = Vec::with_capacity(h);
    let mut mae = None;
    let mut total = 0.0;
    for s in 0..h {
        let inputs = &window[s..s + n];
        let refs: Vec<&Array3<f64>> = inputs.iter().collect();
        let signals = ContextSignals::at(data.timestamps[origin] + step() * s as i32, &data.grid, mask)?;
        let (cands, trace) = net.forward_trace(&state.params, &refs, &signals, mask)?;
        let target = &data.states[origin + 1 + s];
        let merged = merge_candidates(&cands, selector, k, mask)?;
        let (lm, gm) = charbonnier_loss_grad(&merged, target, weights, mask, eps)?;
        let mut step_loss = cfg.merged_weight * lm;
        let mut gc = Vec::with_capacity(n);
        for c in &cands.members {
            let (l, g) = charbonnier_loss_grad(c, target, weights, mask, eps)?;
            step_loss += cfg.candidate_weight * l;
            gc.push(g);
        }
        if s == 0 {
            mae = Some(channel_candidate_mae(&cands, target, mask)?);
        }
        total += scales[s] * step_loss;
        step_losses.push(step_loss);
        step_inputs.push(inputs.to_vec());
        traces.push(trace);
        loss_grads.push((gm, gc));
        merged_all.push(merged.clone());
        window.push(merged);
    }

    let mut d_window: Vec<Array3<f64>> = window.iter().map(|w| Array3::zeros(w.raw_dim())).collect();
    for s in (0..h).rev() {
        let (gm, gc) = &loss_grads[s];
        let mut dm = std::mem::replace(&mut d_window[n + s], Array3::zeros((0, 0, 0)));
        dm.scaled_add(scales[s] * cfg.merged_weight, gm);
        let mut d_cands = merge_backward(&dm, selector, k);
        for (dc, g) in d_cands.iter_mut().zip(gc) {
            dc.scaled_add(scales[s] * cfg.candidate_weight, g);
        }
        let d_inputs = net.backward(&state.params, &traces[s], &d_cands, mask, grads)?;
        if s > 0 {
            for (j, d) in d_inputs.into_iter().enumerate() {
                if s + j >= n {
                    d_window[s + j] += &d;
                }
            }
        }
    }
    Ok(SampleOutcome {
        loss: total,
        step_losses,
        mae: mae.expect("at least one step"),
        step_inputs,
        merged: merged_all,
    })
}

#[cfg(test)]
mod tests;
