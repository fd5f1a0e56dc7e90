//! Matched-budget training of the full model and its ablated variants.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalConfig};
use super::{forecast_origins, Forecaster, Provenance};
use crate::data::{compute_norm_stats, SeriesStore};
use crate::error::{Error, Result};
use crate::grid::STEP_HOURS;
use crate::net::NetConfig;
use crate::objectives::{LossConfig, MetricTable};
use crate::train::{parallel_map, worker_count, Stage, TrainConfig, TrainState, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "full")]
    Full,
    /// Candidates averaged with equal weight; no selection updates.
    #[serde(rename = "woMoT")]
    WoMot,
    /// As `WoMot` with a two-step input window.
    #[serde(rename = "woMoT_2times")]
    WoMot2Times,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [Self::Full, Self::WoMot, Self::WoMot2Times];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoMot => "woMoT",
            Self::WoMot2Times => "woMoT_2times",
        }
    }

    /// Configs for this variant derived from the full model's.
    pub fn apply(self, net: &NetConfig, train: &TrainConfig) -> (NetConfig, TrainConfig) {
        let (mut net, mut train) = (net.clone(), train.clone());
        match self {
            Self::Full => {}
            Self::WoMot => train.use_mot = false,
            Self::WoMot2Times => {
                train.use_mot = false;
                net.n_inputs = 2;
            }
        }
        (net, train)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Errors unless the runs differ only in the ablated settings.
pub fn check_matched(runs: &[(AblationVariant, NetConfig, TrainConfig)]) -> Result<()> {
    let canon = |net: &NetConfig, train: &TrainConfig| {
        let mut n = net.clone();
        let mut t = train.clone();
        n.n_inputs = 0;
        t.use_mot = true;
        (n, t)
    };
    let Some((_, n0, t0)) = runs.first() else {
        return Ok(());
    };
    let base = canon(n0, t0);
    for (v, n, t) in runs {
        let (cn, ct) = canon(n, t);
        if ct.seed != base.1.seed {
            return Err(Error::Config(format!("{v} uses seed {} instead of {}", ct.seed, base.1.seed)));
        }
        if ct != base.1 || cn != base.0 {
            return Err(Error::Config(format!("{v} differs from the reference run beyond the ablated setting")));
        }
        if t.use_mot != (*v == AblationVariant::Full) {
            return Err(Error::Config(format!("{v} has use_mot = {}", t.use_mot)));
        }
        if *v == AblationVariant::WoMot2Times && n.n_inputs != 2 {
            return Err(Error::Config(format!("{v} needs a two-step window, got {}", n.n_inputs)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
    /// Full-model configuration; variants derive from it.
    pub net: NetConfig,
    pub loss: LossConfig,
    pub pretrain: TrainConfig,
    pub finetune: Option<TrainConfig>,
    /// Scored leads; defaults to step 1.
    pub eval: EvalConfig,
    /// Spacing between scored initializations.
    pub init_stride: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: AblationVariant::ALL.to_vec(),
            seeds: (0..5).collect(),
            net: NetConfig::toy(),
            loss: LossConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: None,
            eval: EvalConfig {
                leads: vec![1],
                map_leads: Vec::new(),
                n_buoys: 0,
                ..EvalConfig::default()
            },
            init_stride: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub table: MetricTable,
    /// Training losses of every stage, in order.
    pub losses: Vec<f64>,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub labels: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, variant: AblationVariant, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// One line per (variant, seed, channel, lead).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "variant,seed,channel,label,lead_h,rmse")?;
        for r in &self.rows {
            for (c, label) in self.labels.iter().enumerate() {
                for (j, &lead) in r.table.leads.iter().enumerate() {
                    writeln!(
                        f,
                        "{},{},{c},{label},{},{:.9e}",
                        r.variant,
                        r.seed,
                        lead as i64 * STEP_HOURS,
                        r.table.rmse[[c, j]]
                    )?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Trains every (variant, seed) pair on the first split of `store` and
/// scores step-wise forecasts over the validation and test splits.
pub fn run_ablation(plan: &AblationPlan, store: &SeriesStore) -> Result<AblationResult> {
    if plan.variants.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    if plan.init_stride == 0 {
        return Err(Error::Config("init_stride must be positive".into()));
    }
    let split = store.split();
    let norm = compute_norm_stats(store, store.timestamps[0]..store.timestamps[split.train.end])?;
    let series = store.normalized(&norm)?;
    let steps = plan.eval.leads.iter().copied().max().unwrap_or(1);

    let mut jobs = Vec::new();
    for &seed in &plan.seeds {
        let pre = TrainConfig {
            seed,
            stage: Stage::Pretrain,
            ..plan.pretrain.clone()
        };
        let group: Vec<_> = plan
            .variants
            .iter()
            .map(|&v| {
                let (n, t) = v.apply(&plan.net, &pre);
                (v, n, t)
            })
            .collect();
        check_matched(&group)?;
        jobs.extend(group.into_iter().map(|(v, _, _)| (v, seed)));
    }

    let run_one = |(variant, seed): (AblationVariant, u64)| -> Result<AblationRow> {
        let pre = TrainConfig {
            seed,
            stage: Stage::Pretrain,
            ..plan.pretrain.clone()
        };
        let (net, pre) = variant.apply(&plan.net, &pre);
        let state = TrainState::init(
            net.clone(),
            plan.loss.clone(),
            pre,
            store.grid.clone(),
            store.layout.clone(),
            norm.clone(),
        )?;
        let mut trainer = Trainer::new(state, &series, split.train.clone())?.with_workers(1);
        trainer.run(|_, _| Ok(()))?;
        let mut losses: Vec<f64> = trainer.history().iter().map(|r| r.loss).collect();
        let mut state = trainer.into_state();
        if let Some(ft) = &plan.finetune {
            let ft = TrainConfig {
                seed,
                stage: Stage::Finetune,
                ..ft.clone()
            };
            let (_, ft) = variant.apply(&plan.net, &ft);
            let mut trainer = Trainer::new(state.next_stage(ft)?, &series, split.train.clone())?.with_workers(1);
            trainer.run(|_, _| Ok(()))?;
            losses.extend(trainer.history().iter().map(|r| r.loss));
            state = trainer.into_state();
        }
        let fc = Forecaster::new(&state, &series.mask, Provenance::default())?;
        let range = split.val.start..split.test.end;
        let origins: Vec<usize> = series
            .valid_origins(range, net.n_inputs, steps)
            .step_by(plan.init_stride)
            .collect();
        let runs = forecast_origins(&fc, &series, &origins, steps)?;
        let report = evaluate(&runs, store, &norm, &plan.eval)?;
        Ok(AblationRow {
            variant,
            seed,
            table: report.table,
            losses,
            state,
        })
    };
    let rows = parallel_map(&jobs, worker_count(), run_one)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..store.channels()).map(|c| store.layout.label(c, &store.grid)).collect();
    Ok(AblationResult { labels, rows })
}
