use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, NaiveDateTime, Utc};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use oceancast::config::RunConfig;
use oceancast::data::{
    compute_norm_stats, export_store, generate_synthetic, ingest_raw, NormalizedSeries, SeriesStore,
    DATA_FORMAT_VERSION,
};
use oceancast::eval::{evaluate, forecast_origins, run_ablation, AblationVariant, Forecaster, Provenance};
use oceancast::train::{
    append_log, checkpoint_sha256, config_hash, load_checkpoint, save_checkpoint, write_manifest, LogRecord,
    Stage, TrainConfig, TrainState, Trainer, CHECKPOINT_VERSION, WORKERS_ENV,
};
use oceancast::{Error, Result};

#[derive(Parser)]
#[command(name = "oceancast", about = "Six-hourly ocean-state forecasting")]
struct Cli {
    /// Worker threads; overrides the environment variable.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series into `<out>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Recipe seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain from scratch on `<out>/data`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Fine-tune a checkpoint with multi-step rollouts.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from.
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Rollout horizon; overrides the config.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Roll a checkpoint forward from a ground-truth window.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to roll out.
        #[arg(long)]
        from: PathBuf,
        /// Initialization time, e.g. 2000-03-01T00:00:00Z.
        #[arg(long)]
        init: String,
        /// Number of six-hourly steps.
        #[arg(long)]
        steps: usize,
    },
    /// Score rollouts over the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score.
        #[arg(long)]
        from: PathBuf,
        /// Report directory name under `<out>/reports`.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train and compare ablated variants under a matched budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, e.g. full,woMoT,woMoT_2times.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Number of seeds, counted up from the pretrain seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Report directory name under `<out>/reports`.
        #[arg(long)]
        run_id: Option<String>,
    },
}

/// Exclusive marker preventing two writers in one output directory.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".oceancast.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::new(
                ErrorKind::AlreadyExists,
                format!("{} is locked by another run (remove the lock file if stale)", dir.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        fs::read_dir(path)?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(Error::Io(std::io::Error::new(
            ErrorKind::AlreadyExists,
            format!("{} already exists (use --force to overwrite)", path.display()),
        )));
    }
    Ok(())
}

fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map(|t| t.and_utc())
        .map_err(|e| Error::Config(format!("bad timestamp {s:?}: {e}")))
}

fn apply_flags(cfg: &mut TrainConfig, flags: &TrainFlags) {
    if let Some(n) = flags.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.as_str())
    }
    fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    fn selection(&self) -> PathBuf {
        self.root.join("selection_matrix.csv")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn load(common: &Common) -> Result<(RunConfig, Paths)> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("config {}: {io}", common.config.display()),
        )),
        other => other,
    })?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let root = cfg.output_dir.clone();
    Ok((cfg, Paths { root }))
}

/// Drops rows of `stage` from an existing log so a rerun does not
/// duplicate them.
fn reset_log(path: &Path, stage: Stage) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let suffix = format!(",{}", stage.as_str());
    let kept: Vec<&str> = text.lines().filter(|l| !l.ends_with(&suffix)).collect();
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

fn train_stage(state: TrainState, series: &NormalizedSeries, store: &SeriesStore, paths: &Paths) -> Result<PathBuf> {
    let stage = state.train_config.stage;
    let dir = paths.checkpoint_dir(stage);
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("model.ckpt");
    let every = state.train_config.checkpoint_every;
    let total = state.train_config.iterations;
    let split = store.split();
    let mut trainer = Trainer::new(state, series, split.train.clone())?;
    info!(
        "{} for {total} iterations on {} origins",
        stage.as_str(),
        trainer.origins().len()
    );
    let mut pending: Vec<LogRecord> = Vec::new();
    let log_path = paths.log();
    trainer.run(|rec, st| {
        pending.push(rec.clone());
        let done = rec.iteration + 1;
        if done % 100 == 0 || done == total {
            info!("{} iteration {done}/{total} loss {:.5}", stage.as_str(), rec.loss);
        }
        if (every > 0 && done % every == 0) || done == total {
            append_log(&log_path, &pending)?;
            pending.clear();
            let sha = save_checkpoint(st, &ckpt)?;
            write_manifest(st, &ckpt, &sha)?;
        }
        Ok(())
    })?;
    let state = trainer.into_state();
    state.selection.write_csv(&paths.selection(), &state.layout, &state.grid)?;
    info!("selection argmin per channel: {:?}", state.selection.argmin());
    Ok(ckpt)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        std::env::set_var(WORKERS_ENV, w.max(1).to_string());
    }
    match cli.command {
        Command::GenData { common, seed } => {
            let (mut cfg, paths) = load(&common)?;
            if let Some(s) = seed {
                cfg.data.recipe.seed = s;
            }
            let _lock = DirLock::acquire(&paths.root)?;
            let grid = cfg.data.grid()?;
            let layout = cfg.data.layout()?;
            let store = generate_synthetic(&cfg.data.recipe, &grid, &layout, cfg.data.n_steps)?;
            export_store(&store, &paths.data(), common.force)?;
            info!("wrote {} states to {}", store.len(), paths.data().display());
        }
        Command::Train { common, flags } => {
            let (mut cfg, paths) = load(&common)?;
            apply_flags(&mut cfg.pretrain, &flags);
            cfg.validate()?;
            let _lock = DirLock::acquire(&paths.root)?;
            refuse_existing(&paths.checkpoint_dir(Stage::Pretrain), common.force)?;
            refuse_existing(&paths.log(), common.force)?;
            let _ = fs::remove_file(paths.log());
            let store = ingest_raw(&paths.data())?;
            let split = store.split();
            let norm = compute_norm_stats(&store, store.timestamps[0]..store.timestamps[split.train.end])?;
            let series = store.normalized(&norm)?;
            let state = TrainState::init(
                cfg.net.clone(),
                cfg.loss.clone(),
                cfg.pretrain.clone(),
                store.grid.clone(),
                store.layout.clone(),
                norm,
            )?;
            let ckpt = train_stage(state, &series, &store, &paths)?;
            info!("checkpoint {}", ckpt.display());
        }
        Command::Finetune {
            common,
            from,
            flags,
            horizon,
        } => {
            let (mut cfg, paths) = load(&common)?;
            apply_flags(&mut cfg.finetune, &flags);
            if let Some(h) = horizon {
                cfg.finetune.horizon = h;
            }
            cfg.validate()?;
            let _lock = DirLock::acquire(&paths.root)?;
            refuse_existing(&paths.checkpoint_dir(Stage::Finetune), common.force)?;
            let base = load_checkpoint(&from)?;
            let store = ingest_raw(&paths.data())?;
            let series = store.normalized(&base.norm)?;
            let state = base.next_stage(cfg.finetune.clone())?;
            reset_log(&paths.log(), Stage::Finetune)?;
            let ckpt = train_stage(state, &series, &store, &paths)?;
            info!("checkpoint {}", ckpt.display());
        }
        Command::Predict {
            common,
            from,
            init,
            steps,
        } => {
            let (_, paths) = load(&common)?;
            let init = parse_time(&init)?;
            let _lock = DirLock::acquire(&paths.root)?;
            let state = load_checkpoint(&from)?;
            let store = ingest_raw(&paths.data())?;
            let series = store.normalized(&state.norm)?;
            let n = state.net_config.n_inputs;
            let idx = store.index_of(init).ok_or(Error::DataGap(init))?;
            if idx + 1 < n {
                return Err(Error::DataGap(store.timestamps[0] - oceancast::data::step()));
            }
            let provenance = Provenance {
                checkpoint_sha256: checkpoint_sha256(&from)?,
                config_sha256: config_hash(&state)?,
            };
            let fc = Forecaster::new(&state, &store.mask, provenance.clone())?;
            let run = fc.rollout(&series.states[idx + 1 - n..=idx], init, steps)?;
            let dir = paths.root.join("predictions").join(init.format("%Y-%m-%dT%H%M%SZ").to_string());
            export_store(&run.to_store(&store, &state.norm)?, &dir, common.force)?;
            fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
            info!("wrote {} predictions to {}", run.len(), dir.display());
        }
        Command::Evaluate { common, from, run_id } => {
            let (cfg, paths) = load(&common)?;
            let _lock = DirLock::acquire(&paths.root)?;
            let state = load_checkpoint(&from)?;
            let sha = checkpoint_sha256(&from)?;
            let run_id = run_id.unwrap_or_else(|| format!("eval-{}", &sha[..12]));
            let dir = paths.reports().join(&run_id);
            refuse_existing(&dir, common.force)?;
            let store = ingest_raw(&paths.data())?;
            let series = store.normalized(&state.norm)?;
            let split = store.split();
            let steps = cfg.eval.steps;
            let origins: Vec<usize> = series
                .valid_origins(split.test.clone(), state.net_config.n_inputs, steps)
                .step_by(cfg.eval.init_stride)
                .collect();
            if origins.is_empty() {
                return Err(Error::Config(format!("test split too short for {steps}-step rollouts")));
            }
            let provenance = Provenance {
                checkpoint_sha256: sha,
                config_sha256: config_hash(&state)?,
            };
            let fc = Forecaster::new(&state, &store.mask, provenance.clone())?;
            let runs = forecast_origins(&fc, &series, &origins, steps)?;
            let report = evaluate(&runs, &store, &state.norm, &cfg.eval.report)?;
            report.write(&dir)?;
            fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
            info!("report for {} initializations in {}", runs.len(), dir.display());
        }
        Command::Ablate {
            common,
            variants,
            seeds,
            run_id,
        } => {
            let (cfg, paths) = load(&common)?;
            let variants = match variants {
                Some(v) => v.iter().map(|s| s.trim().parse()).collect::<Result<Vec<AblationVariant>>>()?,
                None => cfg.ablation.variants.clone(),
            };
            let plan = cfg.ablation_plan(&variants, seeds.unwrap_or(cfg.ablation.seeds));
            let _lock = DirLock::acquire(&paths.root)?;
            let dir = paths.reports().join(run_id.unwrap_or_else(|| "ablation".into()));
            refuse_existing(&dir, common.force)?;
            let store = ingest_raw(&paths.data())?;
            info!("ablation over {} variants and {} seeds", plan.variants.len(), plan.seeds.len());
            let result = run_ablation(&plan, &store)?;
            fs::create_dir_all(&dir)?;
            result.write_csv(&dir.join("ablation_compare.csv"))?;
            fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
            info!("wrote {}", dir.join("ablation_compare.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version = format!(
        "{} (checkpoint format {CHECKPOINT_VERSION}, data format {DATA_FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    let version: &'static str = Box::leak(version.into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
