//! `mumt`: generate data, preprocess, train, evaluate and run ablations.
//!
//! Exit status is 0 on success, 1 for invalid arguments or configuration and
//! 2 for failures while running.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn, LevelFilter};
use mumtaffect::config::{self, Partition, RunConfig};
use mumtaffect::data::{self, synth, Dataset, ProcessedTrial};
use mumtaffect::eval::{self, Cell, GridData, GridRow};
use mumtaffect::model::{ModalityDims, MuMTAffect};
use mumtaffect::train::{self, Checkpoint, EpochRecord, Phase, HISTORY_HEADER};
use serde_json::json;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mumt", version, about = "Multimodal multitask affect and personality model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted structure.
    GenSynth(GenSynth),
    /// Resample raw trials and write them in preprocessed form.
    Preprocess(Preprocess),
    /// Train one phase or the full three-phase schedule.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Train and evaluate every cell of the modality / Stim Emo grid.
    Ablate(Ablate),
}

#[derive(Args)]
struct Common {
    /// Config file with [model], [train] and [data] sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynth {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    users: usize,
    #[arg(long, default_value_t = 40)]
    trials_per_user: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Probability that the stimulus cue matches the felt class.
    #[arg(long, default_value_t = 0.7)]
    context_rate: f64,
}

#[derive(Args)]
struct Preprocess {
    /// Dataset directory to read.
    #[arg(long)]
    data: PathBuf,
    /// Directory for the preprocessed dataset.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Multitask,
    Finetune,
    All,
}

impl PhaseArg {
    fn phases(self) -> Vec<Phase> {
        match self {
            PhaseArg::Pretrain => vec![Phase::Pretrain],
            PhaseArg::Multitask => vec![Phase::Multitask],
            PhaseArg::Finetune => vec![Phase::Finetune],
            PhaseArg::All => Phase::ALL.to_vec(),
        }
    }
}

#[derive(Args)]
struct Train {
    /// Dataset directory (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    phase: PhaseArg,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct Eval {
    /// Dataset directory (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Split to score; the split follows the [data] section.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write metrics.json and logs here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    /// Dataset directory (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Train every cell with the personality loss switched off.
    #[arg(long)]
    emotion_only: bool,
}

/// Bad arguments or configuration; exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = describe(&e);
            if log::max_level() == log::LevelFilter::Off {
                eprintln!("error: {msg}");
            } else {
                log::error!("{msg}");
            }
            let invalid = e
                .chain()
                .any(|c| c.is::<Invalid>() || c.is::<config::ConfigError>());
            ExitCode::from(if invalid { 1 } else { 2 })
        }
    }
}

/// The error chain joined with `: `, skipping causes whose text the previous
/// message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Loads the config file (or defaults) and applies `MUMT_SEED`.
fn load_config(common: Option<&Common>) -> Result<RunConfig> {
    let mut cfg = match common.and_then(|c| c.config.as_deref()) {
        Some(p) => config::parse_config(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var("MUMT_SEED").ok();
    config::apply_seed_override(&mut cfg, env.as_deref())?;
    Ok(cfg)
}

/// Creates `out`, starts logging to `out/run.log` and records the
/// configuration and seeds.
fn start_run(out: &Path, cfg: &RunConfig, seeds: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_file = fs::File::create(out.join("run.log")).context("creating run.log")?;
    let lc = simplelog::ConfigBuilder::new().set_time_level(LevelFilter::Off).build();
    simplelog::CombinedLogger::init(vec![
        simplelog::WriteLogger::new(LevelFilter::Info, lc.clone(), std::io::stderr()),
        simplelog::WriteLogger::new(LevelFilter::Info, lc, log_file),
    ])
    .context("initializing logging")?;
    fs::write(out.join("effective_config"), config::effective_config(cfg)).context("writing effective_config")?;
    write_json(&out.join("seeds.json"), &seeds)?;
    info!("mumt {} writing to {}", env!("CARGO_PKG_VERSION"), out.display());
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn config_seeds(cfg: &RunConfig) -> serde_json::Value {
    json!({ "train_seed": cfg.train.seed, "data_seed": cfg.data.seed })
}

fn data_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None if !cfg.data.dir.is_empty() => Ok(PathBuf::from(&cfg.data.dir)),
        None => Err(Invalid("no dataset: pass --data or set data.dir".into()).into()),
    }
}

fn load(dir: &Path) -> Result<Dataset> {
    let ds = data::load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
    info!("loaded {} trials from {}", ds.trials.len(), dir.display());
    for r in &ds.rejected {
        warn!("rejected {}: {}", r.trial_id, r.reason);
    }
    if ds.trials.is_empty() {
        bail!("{}: no usable trials", dir.display());
    }
    Ok(ds)
}

/// Matches the model's input widths and summary schema to the dataset.
fn fit_config_to_data(cfg: &mut RunConfig, ds: &Dataset) -> Result<()> {
    let dims = ModalityDims::from_array(ds.widths());
    if dims != cfg.model.modality_dims {
        info!("input widths from dataset: {:?}", ds.widths());
        cfg.model.modality_dims = dims;
    }
    cfg.model.summary_dim = ds.summary_names.len();
    cfg.model.summary_names = ds.summary_names.clone();
    cfg.model.validate().map_err(Invalid)?;
    Ok(())
}

fn pick<'a>(trials: &'a [ProcessedTrial], idx: &[usize]) -> Vec<&'a ProcessedTrial> {
    idx.iter().map(|&i| &trials[i]).collect()
}

fn split_json(ds: &Dataset, part: &Partition) -> serde_json::Value {
    let ids = |idx: &[usize]| idx.iter().map(|&i| ds.trials[i].trial_id.clone()).collect::<Vec<_>>();
    json!({ "train": ids(&part.train), "val": ids(&part.val), "test": ids(&part.test) })
}

fn gen_synth(a: GenSynth) -> Result<()> {
    if a.users < 3 {
        return Err(Invalid(format!("--users must be at least 3, got {}", a.users)).into());
    }
    if a.trials_per_user == 0 {
        return Err(Invalid("--trials-per-user must be positive".into()).into());
    }
    if !(0.0..=1.0).contains(&a.context_rate) {
        return Err(Invalid(format!("--context-rate must lie in [0, 1], got {}", a.context_rate)).into());
    }
    let cfg = load_config(None)?;
    let scfg = synth::SynthConfig {
        context_rate: a.context_rate,
        ..synth::SynthConfig::new(a.users, a.trials_per_user, a.seed)
    };
    start_run(&a.out, &cfg, json!({ "synth_seed": a.seed }))?;
    let records = synth::generate(&scfg);
    data::write_dataset(&a.out, &records).context("writing dataset")?;
    write_json(&a.out.join("synth.json"), &scfg)?;
    info!("wrote {} trials for {} users", records.len(), a.users);
    Ok(())
}

fn preprocess(a: Preprocess) -> Result<()> {
    let cfg = load_config(None)?;
    if a.out == a.data {
        return Err(Invalid("--out must differ from --data".into()).into());
    }
    start_run(&a.out, &cfg, config_seeds(&cfg))?;
    let ds = load(&a.data)?;
    data::write_preprocessed(&a.out, &ds).context("writing preprocessed dataset")?;
    write_json(&a.out.join("rejected.json"), &ds.rejected.iter().map(|r| json!({"trial_id": r.trial_id, "reason": r.reason})).collect::<Vec<_>>())?;
    info!("wrote {} preprocessed trials", ds.trials.len());
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let mut cfg = load_config(Some(&a.common))?;
    let dir = data_dir(a.data, &cfg)?;
    let init = match &a.init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    start_run(&a.out, &cfg, config_seeds(&cfg))?;
    let ds = load(&dir)?;
    fit_config_to_data(&mut cfg, &ds)?;
    fs::write(a.out.join("effective_config"), config::effective_config(&cfg))?;
    let part = cfg.data.partition(&ds.trials)?;
    write_json(&a.out.join("split.json"), &split_json(&ds, &part))?;
    let (tr, va, te) = (pick(&ds.trials, &part.train), pick(&ds.trials, &part.val), pick(&ds.trials, &part.test));
    info!("split: {} train, {} val, {} test trials", tr.len(), va.len(), te.len());

    let mut model = match init {
        Some(ck) => {
            let m = ck.to_model()?;
            if m.cfg != cfg.model {
                warn!("model settings come from the --init checkpoint, not the config");
            }
            m
        }
        None => {
            let mut m = MuMTAffect::new(cfg.model.clone(), cfg.train.seed)?;
            m.fit_normalizer(&tr);
            m
        }
    };
    info!("{} parameters", model.count_parameters().total);

    let mut history = fs::File::create(a.out.join("history.csv")).context("creating history.csv")?;
    writeln!(history, "{HISTORY_HEADER}")?;
    let mut io_err: Option<std::io::Error> = None;
    let mut hook = |r: &EpochRecord, _: &MuMTAffect| {
        info!(
            "{} epoch {}: train {:.5} val {:.5}",
            r.phase, r.epoch, r.train.total, r.val.total
        );
        if let Err(e) = writeln!(history, "{}", r.csv_row()).and_then(|_| history.flush()) {
            io_err.get_or_insert(e);
        }
        false
    };
    let outcomes = train::train_phases(&mut model, &tr, &va, &a.phase.phases(), &cfg.train, &mut hook)?;
    if let Some(e) = io_err {
        return Err(e).context("writing history.csv");
    }
    for o in &outcomes {
        let name = format!("phase{}_{}.bin", o.phase.number(), o.phase);
        o.best.save(&a.out.join(&name))?;
        info!(
            "{}: best epoch {} val loss {:.5}{}",
            o.phase,
            o.best_epoch,
            o.best_val_loss,
            if o.stopped_early { " (stopped early)" } else { "" }
        );
    }
    let last = outcomes.last().expect("at least one phase");
    let final_ck = Checkpoint::capture(&model, Some(last.phase), last.best_epoch, cfg.train.seed, Some(last.best_val_loss));
    final_ck.save(&a.out.join("model.bin"))?;
    let report = eval::evaluate_model(&model, &te, cfg.train.batch_size)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    info!("test avg F1 {:.4}", report.avg_f1);
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let cfg = load_config(Some(&a.common))?;
    let dir = data_dir(a.data, &cfg)?;
    if let Some(out) = &a.out {
        start_run(out, &cfg, config_seeds(&cfg))?;
    }
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let model = ck.to_model()?;
    let ds = load(&dir)?;
    if ds.widths() != model.cfg.modality_dims.to_array() {
        bail!(
            "dataset widths {:?} do not match the checkpoint's {:?}",
            ds.widths(),
            model.cfg.modality_dims.to_array()
        );
    }
    let idx = match a.split {
        SplitArg::All => (0..ds.trials.len()).collect(),
        s => {
            let part = cfg.data.partition(&ds.trials)?;
            match s {
                SplitArg::Train => part.train,
                SplitArg::Val => part.val,
                _ => part.test,
            }
        }
    };
    let report = eval::evaluate_model(&model, &pick(&ds.trials, &idx), cfg.train.batch_size)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out.join("metrics.json"), text + "\n")?;
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let mut cfg = load_config(Some(&a.common))?;
    let dir = data_dir(a.data, &cfg)?;
    start_run(&a.out, &cfg, config_seeds(&cfg))?;
    let ds = load(&dir)?;
    fit_config_to_data(&mut cfg, &ds)?;
    fs::write(a.out.join("effective_config"), config::effective_config(&cfg))?;
    let part = cfg.data.partition(&ds.trials)?;
    write_json(&a.out.join("split.json"), &split_json(&ds, &part))?;
    let (tr, va, te) = (pick(&ds.trials, &part.train), pick(&ds.trials, &part.val), pick(&ds.trials, &part.test));
    let grid = GridData {
        train: &tr,
        val: &va,
        test: &te,
    };
    let cells: Vec<Cell> = eval::default_cells()
        .into_iter()
        .map(|c| Cell {
            emotion_only: a.emotion_only,
            ..c
        })
        .collect();
    let mut done: Vec<GridRow> = Vec::new();
    let csv_path = a.out.join("grid.csv");
    let mut on_row = |row: &GridRow| {
        info!(
            "cell {:?} stim {}: avg F1 {:.4}",
            row.cell.modalities, row.cell.stim_emo, row.report.avg_f1
        );
        done.push(row.clone());
        if let Err(e) = fs::write(&csv_path, eval::grid_csv(&done)) {
            warn!("writing {}: {e}", csv_path.display());
        }
    };
    let rows = eval::ablation_grid(&grid, &cfg.model, &cfg.train, &cells, cfg.train.seed, &mut on_row)?;
    fs::write(&csv_path, eval::grid_csv(&rows))?;
    write_json(&a.out.join("grid.json"), &rows)?;
    Ok(())
}
