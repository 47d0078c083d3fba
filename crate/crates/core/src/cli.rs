//! The `gsd` command line: generate, train, eval, analyze and sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or configuration error, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{GsdError, Result};
use crate::experiment::{self, SweepAxis};
use crate::gsd::EvalBasisMode;
use crate::synthgen::{self, Dataset};
use crate::training::{self, FrozenStream, Splits};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// File names inside a data directory written by `generate`.
pub const TRAIN_FILE: &str = "train_a.bin";
pub const TEST_A_FILE: &str = "test_a.bin";
pub const TEST_B_FILE: &str = "test_b.bin";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "gsd", about = "Geometric semantic decoupling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detector checkpoint to evaluate or analyse.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory holding the splits written by `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train and test splits with their manifests.
    Generate(Common),
    /// Pretrain the frozen stream and fine-tune the detector.
    Train(Common),
    /// Score a trained detector on both test splits in both basis modes.
    Eval(Common),
    /// Feature diagnostics: anchor cosines, residual orthogonality, silhouettes, attention.
    Analyze(Common),
    /// Train and score one run per seed and axis value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of k, depth, anchor_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gsd: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a failed command.
pub fn exit_code(e: &GsdError) -> i32 {
    match e {
        GsdError::Numerical(_) | GsdError::UndefinedMetric(_) => EXIT_NUMERICAL,
        _ => EXIT_IO,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(c) => cmd_generate(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Analyze(c) => cmd_analyze(&c),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(&common, &axis, &values),
    }
}

/// Loads the config, applies `GSD_SEED` and `--out`, creates the output directory and
/// writes the resolved config there.
fn prepare(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply_env()?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dir) = &c.data {
        cfg.data_train = Some(dir.join(TRAIN_FILE));
        cfg.data_test_a = Some(dir.join(TEST_A_FILE));
        cfg.data_test_b = Some(dir.join(TEST_B_FILE));
    }
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(RESOLVED_CONFIG), &cfg.to_text())?;
    Ok(cfg)
}

/// Creates `dir` if needed; its parent must already exist.
fn create_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    std::fs::create_dir(dir).map_err(|e| GsdError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GsdError::io(path, e))
}

fn manifest_name(file: &str) -> String {
    file.replace(".bin", ".csv")
}

fn cmd_generate(c: &Common) -> Result<()> {
    let cfg = prepare(c)?;
    let splits = experiment::generate_splits(&cfg)?;
    for (file, data) in [
        (TRAIN_FILE, &splits.train),
        (TEST_A_FILE, &splits.test_a),
        (TEST_B_FILE, &splits.test_b),
    ] {
        synthgen::write_dataset(&cfg.out_dir.join(file), data)?;
        synthgen::write_manifest(&cfg.out_dir.join(manifest_name(file)), data)?;
    }
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = prepare(c)?;
    let splits = experiment::load_splits(&cfg)?;
    let frozen = experiment::pretrain(&cfg, &splits)?;
    let outcome = experiment::train(&cfg, &splits, &frozen)?;
    Checkpoint::new(frozen.model.clone(), None).save(&cfg.out_dir.join("frozen.ckpt"))?;
    Checkpoint::new(outcome.detector.clone(), outcome.last_basis.clone())
        .save(&cfg.out_dir.join("detector.ckpt"))?;
    write(&cfg.out_dir.join("trace.csv"), &training::trace_csv(&outcome.trace))
}

/// Detector and frozen stream of a finished run: `--ckpt` or `out.dir/detector.ckpt`,
/// with `frozen.ckpt` read from the same directory.
fn load_run(c: &Common, cfg: &RunConfig) -> Result<(Checkpoint, FrozenStream)> {
    let ckpt_path = c.ckpt.clone().unwrap_or_else(|| cfg.out_dir.join("detector.ckpt"));
    let detector = Checkpoint::load(&ckpt_path)?;
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    let frozen = Checkpoint::load(&dir.join("frozen.ckpt"))?;
    if detector.model.config != cfg.encoder || frozen.model.config != cfg.encoder {
        return Err(GsdError::Config(format!(
            "checkpoint architecture does not match the configured encoder {:?}",
            cfg.encoder
        )));
    }
    Ok((detector, FrozenStream { model: frozen.model }))
}

fn cmd_eval(c: &Common) -> Result<()> {
    let cfg = prepare(c)?;
    let (ckpt, frozen) = load_run(c, &cfg)?;
    let splits = experiment::load_splits(&cfg)?;
    let outcome = training::TrainOutcome {
        detector: ckpt.model,
        trace: Vec::new(),
        last_basis: ckpt.basis,
    };
    let mut csv = String::from("metric,split,value\n");
    for mode in [EvalBasisMode::PerBatch, EvalBasisMode::FrozenTrainBasis] {
        let r = experiment::report(&cfg, &frozen, &outcome, &splits, mode)?;
        for (metric, split, v) in experiment::report_rows(&r) {
            let _ = writeln!(csv, "{metric},{split},{v:.17e}");
        }
    }
    write(&cfg.out_dir.join("report.csv"), &csv)
}

fn cmd_analyze(c: &Common) -> Result<()> {
    let cfg = prepare(c)?;
    let (ckpt, frozen) = load_run(c, &cfg)?;
    let splits = experiment::load_splits(&cfg)?;
    let detector = &ckpt.model;
    let out = &cfg.out_dir;

    let mut hist = String::from("split,bin_low,bin_high,count\n");
    for (name, data) in [("test_a", &splits.test_a), ("test_b", &splits.test_b)] {
        for (lo, hi, n) in experiment::cosine_histogram(&cfg, &frozen, data, 20)? {
            let _ = writeln!(hist, "{name},{lo},{hi},{n}");
        }
    }
    write(&out.join("cosine_hist.csv"), &hist)?;

    let mut resid = String::from("split,max_residual,max_token_norm,relative\n");
    if let Some(g) = cfg.active_gsd().filter(|g| g.is_active()) {
        for (name, data) in [("test_a", &splits.test_a), ("test_b", &splits.test_b)] {
            let (worst, norm) = experiment::residual_summary(
                &g,
                &frozen,
                detector,
                data,
                cfg.train.batch_size,
                cfg.train.seed,
            )?;
            let rel = if norm > 0.0 { worst / norm } else { 0.0 };
            let _ = writeln!(resid, "{name},{worst:e},{norm:e},{rel:e}");
        }
    }
    write(&out.join("residual_orthogonality.csv"), &resid)?;

    let tag = if cfg.active_gsd().is_some_and(|g| g.is_active()) {
        "gsd"
    } else {
        "baseline"
    };
    let outcome = training::TrainOutcome {
        detector: detector.clone(),
        trace: Vec::new(),
        last_basis: ckpt.basis.clone(),
    };
    let report = experiment::report(&cfg, &frozen, &outcome, &splits, cfg.gsd.eval_basis_mode)?;
    let mut sil = String::from("clustering,features,split,samples,value\n");
    for (name, data, eval) in [
        ("test_a", &splits.test_a, &report.test_a),
        ("test_b", &splits.test_b, &report.test_b),
    ] {
        let all: Vec<usize> = (0..data.len()).collect();
        let fakes = experiment::fake_rows(data);
        let by_label = experiment::feature_silhouette(eval, data, &all, false)?;
        let by_identity = experiment::feature_silhouette(eval, data, &fakes, true)?;
        let _ = writeln!(sil, "by_label,{tag},{name},all,{by_label}");
        let _ = writeln!(sil, "by_identity,{tag},{name},fake,{by_identity}");
    }
    write(&out.join("silhouette.csv"), &sil)?;

    let att_dir = out.join("attention");
    create_dir(&att_dir)?;
    write_attention(&cfg, &frozen, detector, &splits, &att_dir)
}

/// Attention grids for the first eight test-B images, with the basis of that batch.
fn write_attention(
    cfg: &RunConfig,
    frozen: &FrozenStream,
    detector: &crate::encoder::EncoderModel,
    splits: &Splits,
    dir: &Path,
) -> Result<()> {
    let data: &Dataset = &splits.test_b;
    let n = data.len().min(8);
    let images: Vec<&[f64]> = data.images().into_iter().take(n).collect();
    let gsd = cfg.active_gsd().filter(|g| g.is_active());
    let basis = match &gsd {
        Some(g) => Some(crate::encoder::batch_basis(&frozen.model, &images, g)?),
        None => None,
    };
    for (i, img) in images.iter().enumerate() {
        let grid = experiment::attention_grid(detector, img, gsd.as_ref(), basis.as_ref())?;
        let mut csv = String::new();
        for r in 0..grid.rows() {
            let row: Vec<String> = grid.row(r).iter().map(|v| format!("{v:.9e}")).collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        write(&dir.join(format!("image_{i}.csv")), &csv)?;
    }
    Ok(())
}

fn cmd_sweep(c: &Common, axis: &str, values: &str) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(GsdError::Config("--values lists no values".into()));
    }
    let cfg = prepare(c)?;
    let rows = experiment::sweep(&cfg, axis, &values, |r| {
        eprintln!(
            "{}={} seed {}: auc_group_B {:.4}",
            r.axis, r.value, r.seed, r.auc_group_b
        );
    })?;
    write(&cfg.out_dir.join("sweep.csv"), &experiment::sweep_csv(&rows))
}
