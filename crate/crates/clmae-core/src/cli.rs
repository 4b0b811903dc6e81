//! Command line: dataset generation, pretraining, evaluation protocols,
//! mask visualization, and the gradient self-check.

use crate::checkpoint::{Checkpoint, CkptError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{gen_synthetic, pixel_nn_loo, DataError, Dataset};
use crate::eval::{
    extract_features, few_shot_probe, linear_probe, nn_classify, pixel_features, EvalError,
    FeatureSet, ProbeResult, RESULTS_HEADER,
};
use crate::suite::{gradient_suite, SUITE_TOLERANCE};
use crate::train::{dump_masks, run_training, TrainError, TrainMode, TrainState};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

/// Probe training length and rate are fixed at toy scale.
const PROBE_EPOCHS: usize = 100;
const PROBE_LR: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Other(String),
}

#[derive(Parser)]
#[command(
    name = "clmae",
    version,
    about = "Curriculum-masked autoencoder pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic class-structured dataset
    GenData(GenDataArgs),
    /// Pretrain with the learned curriculum masks
    Pretrain(SettingsArgs),
    /// Pretrain the plain autoencoder under uniform random masks
    PretrainBaseline(SettingsArgs),
    /// Continue an interrupted run from a checkpoint
    Resume(ResumeArgs),
    /// Nearest-neighbor classification on frozen features
    EvalNn(EvalNnArgs),
    /// Linear probe on frozen features, averaged over three runs
    EvalProbe(EvalProbeArgs),
    /// Few-shot linear probes at each requested shot count
    EvalFewshot(EvalFewshotArgs),
    /// Render binary masks and soft statistics for dataset images
    DumpMasks(DumpMasksArgs),
    /// Check every gradient against central finite differences
    GradCheck(GradCheckArgs),
}

/// Settings resolve in order: defaults, then the config file, then each
/// --set pair, then the dedicated flags.
#[derive(Args)]
struct SettingsArgs {
    /// Settings file of key = value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single setting override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (overrides the config key)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config key)
    #[arg(long)]
    out: Option<String>,
    /// Training dataset path (overrides the config key)
    #[arg(long)]
    data: Option<String>,
}

impl SettingsArgs {
    fn build(&self) -> Result<TrainConfig, RunError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(&path.to_string_lossy())?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| RunError::Other(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data = data.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    h: usize,
    #[arg(long, default_value_t = 32)]
    w: usize,
    #[arg(long, default_value_t = 3)]
    c: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Destination file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint to continue from
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvalCommonArgs {
    /// Checkpoint holding the frozen encoder
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training-split dataset file
    #[arg(long = "train-data")]
    train_data: PathBuf,
    /// Test-split dataset file
    #[arg(long = "test-data")]
    test_data: PathBuf,
    /// Row label in the results file
    #[arg(long, default_value = "encoder")]
    tag: String,
    /// Results CSV destination
    #[arg(long, default_value = "results.csv")]
    results: PathBuf,
    /// Seed for the averaged protocols
    #[arg(long = "eval-seed", default_value_t = 1000)]
    eval_seed: u64,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvalNnArgs {
    /// Use raw pixels instead of encoder features
    #[arg(long)]
    pixels: bool,
    #[command(flatten)]
    common: EvalCommonArgs,
}

#[derive(Args)]
struct EvalProbeArgs {
    #[command(flatten)]
    common: EvalCommonArgs,
}

#[derive(Args)]
struct EvalFewshotArgs {
    /// Comma-separated shot counts
    #[arg(long, default_value = "1,2,4,8,16")]
    shots: String,
    #[command(flatten)]
    common: EvalCommonArgs,
}

/// The rendered dataset comes from the settings' data path and the files go
/// under the settings' output directory, so both follow --data and --out.
#[derive(Args)]
struct DumpMasksArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of images, from the front of the dataset
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Probe-point seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Parse argv and run; the returned code is the process exit status.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real parse
            // failures are usage errors.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain(a, TrainMode::Curriculum),
        Cmd::PretrainBaseline(a) => pretrain(a, TrainMode::Baseline),
        Cmd::Resume(a) => resume(a),
        Cmd::EvalNn(a) => eval_nn(a),
        Cmd::EvalProbe(a) => eval_probe(a),
        Cmd::EvalFewshot(a) => eval_fewshot(a),
        Cmd::DumpMasks(a) => dump(a),
        Cmd::GradCheck(a) => grad_check(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), RunError> {
    let ds = gen_synthetic(a.classes, a.per_class, a.h, a.w, a.c, a.seed)?;
    // Classes must be reachable from pixels yet not trivially solved there,
    // so representation learning has measurable headroom.
    if a.classes >= 2 && a.per_class >= 2 {
        let loo = pixel_nn_loo(&ds);
        let chance = 1.0 / a.classes as f64;
        println!("pixel 1-NN (leave-one-out): {:.1}%", loo * 100.0);
        if loo >= 1.0 {
            return Err(RunError::Other(
                "generated classes are perfectly separable in pixel space".into(),
            ));
        }
        if loo <= chance {
            return Err(RunError::Other(format!(
                "generated classes are not separable in pixel space ({:.1}% vs {:.1}% chance)",
                loo * 100.0,
                chance * 100.0
            )));
        }
    }
    ds.write(&a.out)?;
    println!("wrote {} images ({} classes) to {}", ds.count(), a.classes, a.out.display());
    Ok(())
}

fn pretrain(a: SettingsArgs, mode: TrainMode) -> Result<(), RunError> {
    let cfg = a.build()?;
    let ds = Dataset::read(Path::new(&cfg.data))?;
    let state = run_training(&cfg, &ds, mode, None, None)?;
    println!("finished {} iterations; artifacts in {}", state.step, cfg.out);
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<(), RunError> {
    let cfg = a.settings.build()?;
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let mode = if ckpt.params.iter().any(|e| e.name.starts_with("cmm.")) {
        TrainMode::Curriculum
    } else {
        TrainMode::Baseline
    };
    let ds = Dataset::read(Path::new(&cfg.data))?;
    let state = run_training(&cfg, &ds, mode, Some(ckpt), None)?;
    println!("finished {} iterations; artifacts in {}", state.step, cfg.out);
    Ok(())
}

/// Frozen encoder from a checkpoint under the supplied settings.
fn load_encoder(
    settings: &SettingsArgs,
    checkpoint: &Path,
) -> Result<(TrainConfig, TrainState), RunError> {
    let cfg = settings.build()?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let state = TrainState::restore(&cfg, &ckpt)?;
    Ok((cfg, state))
}

fn encoder_features(
    common: &EvalCommonArgs,
    ds_train: &Dataset,
    ds_test: &Dataset,
) -> Result<(FeatureSet, FeatureSet), RunError> {
    let path = common.checkpoint.as_ref().ok_or_else(|| {
        RunError::Other("--checkpoint is required unless --pixels is given".into())
    })?;
    let (cfg, state) = load_encoder(&common.settings, path)?;
    let geom = cfg.geometry();
    Ok((
        extract_features(&state.mae, &geom, ds_train)?,
        extract_features(&state.mae, &geom, ds_test)?,
    ))
}

fn write_results(path: &Path, rows: &[(String, ProbeResult)]) -> Result<(), RunError> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for (tag, r) in rows {
        let row = r.csv_row(tag);
        println!("{row}");
        text.push_str(&row);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|source| RunError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, text)
        .map_err(|source| RunError::Io { path: path.display().to_string(), source })
}

fn eval_nn(a: EvalNnArgs) -> Result<(), RunError> {
    let ds_train = Dataset::read(&a.common.train_data)?;
    let ds_test = Dataset::read(&a.common.test_data)?;
    let (train, test) = if a.pixels {
        (pixel_features(&ds_train), pixel_features(&ds_test))
    } else {
        encoder_features(&a.common, &ds_train, &ds_test)?
    };
    let result = nn_classify(&train, &test, 5)?;
    write_results(&a.common.results, &[(a.common.tag.clone(), result)])
}

fn eval_probe(a: EvalProbeArgs) -> Result<(), RunError> {
    let ds_train = Dataset::read(&a.common.train_data)?;
    let ds_test = Dataset::read(&a.common.test_data)?;
    let (train, test) = encoder_features(&a.common, &ds_train, &ds_test)?;
    let result = linear_probe(&train, &test, PROBE_EPOCHS, PROBE_LR, a.common.eval_seed)?;
    write_results(&a.common.results, &[(a.common.tag.clone(), result)])
}

fn eval_fewshot(a: EvalFewshotArgs) -> Result<(), RunError> {
    let shots: Vec<usize> = a
        .shots
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| RunError::Other(format!("bad shot count {:?}", s.trim())))
        })
        .collect::<Result<_, _>>()?;
    if shots.is_empty() {
        return Err(RunError::Other("--shots needs at least one count".into()));
    }
    let ds_train = Dataset::read(&a.common.train_data)?;
    let ds_test = Dataset::read(&a.common.test_data)?;
    let (train, test) = encoder_features(&a.common, &ds_train, &ds_test)?;
    let mut rows = Vec::with_capacity(shots.len());
    for k in shots {
        let result = few_shot_probe(&train, &test, k, PROBE_EPOCHS, PROBE_LR, a.common.eval_seed)?;
        rows.push((a.common.tag.clone(), result));
    }
    write_results(&a.common.results, &rows)
}

fn dump(a: DumpMasksArgs) -> Result<(), RunError> {
    let cfg = a.settings.build()?;
    let ckpt = Checkpoint::read(&a.checkpoint)?;
    let state = TrainState::restore(&cfg, &ckpt)?;
    let cmm = state
        .cmm
        .as_ref()
        .ok_or_else(|| RunError::Other("checkpoint has no masking module to render".into()))?;
    let ds = Dataset::read(Path::new(&cfg.data))?;
    // The stored step indexes the next iteration; label dumps with the last
    // completed one.
    let step = state.step.saturating_sub(1);
    let out = Path::new(&cfg.out);
    dump_masks(cmm, &cfg.geometry(), &ds, out, a.count, step)?;
    println!("wrote {} masks to {}", a.count.min(ds.count()), out.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), RunError> {
    let reports = gradient_suite(a.seed);
    let mut worst: (&str, f64) = ("", 0.0);
    for r in &reports {
        println!("{:<22} {:.3e}", r.name, r.err);
        if r.err > worst.1 {
            worst = (r.name, r.err);
        }
    }
    println!("max relative error: {:.3e} ({})", worst.1, worst.0);
    if worst.1 >= SUITE_TOLERANCE {
        return Err(RunError::Other(format!(
            "gradient check failed: {} off by {:.3e}",
            worst.0, worst.1
        )));
    }
    println!("all {} components within {SUITE_TOLERANCE:e}", reports.len());
    Ok(())
}
