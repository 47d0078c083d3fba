//! End-to-end runs: data splits, frozen-stream pretraining, detector training,
//! evaluation in both basis modes, sweeps and feature diagnostics.

use std::fmt;
use std::str::FromStr;

use crate::basis::{self, SemanticBasis};
use crate::config::RunConfig;
use crate::encoder::{self, EncoderModel};
use crate::error::{GsdError, Result};
use crate::gsd::{self, EvalBasisMode, GsdConfig};
use crate::linalg::{DenseMatrix, DEFAULT_RANK_TOL};
use crate::metrics;
use crate::rng;
use crate::synthgen::{self, Dataset, Domain, SynthConfig};
use crate::training::{self, EvalOutput, FrozenStream, Splits, TrainOutcome};

/// Per-split synthetic parameters derived from one data seed. All splits share the
/// identity bank; the per-sample streams differ.
pub fn split_configs(cfg: &RunConfig) -> [SynthConfig; 3] {
    let seed = cfg.effective_data_seed();
    let base = SynthConfig {
        bank_seed: rng::derive_seed(seed, &[rng::label("bank")]),
        ..cfg.synth()
    };
    let split = |domain: Domain, name: &str| SynthConfig {
        domain,
        seed: rng::derive_seed(seed, &[rng::label(name)]),
        ..base.clone()
    };
    [
        split(Domain::A, "train"),
        split(Domain::A, "test_a"),
        split(Domain::B, "test_b"),
    ]
}

pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    let [train, test_a, test_b] = split_configs(cfg);
    Ok(Splits {
        train: synthgen::generate_split(&train)?,
        test_a: synthgen::generate_split(&test_a)?,
        test_b: synthgen::generate_split(&test_b)?,
    })
}

/// Reads the three splits named by `data.*` paths, or generates them when none is set.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match (&cfg.data_train, &cfg.data_test_a, &cfg.data_test_b) {
        (None, None, None) => generate_splits(cfg),
        (Some(tr), Some(a), Some(b)) => {
            let splits = Splits {
                train: synthgen::read_dataset(tr)?,
                test_a: synthgen::read_dataset(a)?,
                test_b: synthgen::read_dataset(b)?,
            };
            for d in [&splits.train, &splits.test_a, &splits.test_b] {
                if d.image_size != cfg.encoder.image_size {
                    return Err(GsdError::Config(format!(
                        "data has {}px images but the encoder expects {}px",
                        d.image_size, cfg.encoder.image_size
                    )));
                }
            }
            Ok(splits)
        }
        _ => Err(GsdError::Config(
            "set all of data.train, data.test_a and data.test_b, or none".into(),
        )),
    }
}

pub fn pretrain(cfg: &RunConfig, splits: &Splits) -> Result<FrozenStream> {
    let model = training::pretrain_frozen(cfg.encoder, &splits.train, &cfg.train)?;
    Ok(FrozenStream { model })
}

/// Trains the detector described by `cfg` (baseline when decoupling is disabled).
pub fn train(cfg: &RunConfig, splits: &Splits, frozen: &FrozenStream) -> Result<TrainOutcome> {
    let gsd = cfg.active_gsd();
    training::train_detector(frozen, splits, gsd.as_ref(), &cfg.train)
}

/// Scores one split with the detector; `None` decoupling gives plain forward passes.
pub fn evaluate_split(
    cfg: &RunConfig,
    frozen: &FrozenStream,
    detector: &EncoderModel,
    train_basis: Option<&SemanticBasis>,
    data: &Dataset,
    mode: EvalBasisMode,
) -> Result<EvalOutput> {
    let gsd = cfg.active_gsd().filter(|g| g.is_active());
    let globals = match (&gsd, mode) {
        (Some(g), EvalBasisMode::PerBatch) => Some(frozen.globals(data, g)?),
        _ => None,
    };
    training::evaluate(
        detector,
        data,
        globals.as_ref(),
        gsd.as_ref(),
        mode,
        train_basis,
        cfg.train.batch_size,
        cfg.train.seed,
    )
}

/// Final metrics of a trained detector on both test splits.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub mode: EvalBasisMode,
    pub test_a: EvalOutput,
    pub test_b: EvalOutput,
}

pub fn report(
    cfg: &RunConfig,
    frozen: &FrozenStream,
    outcome: &TrainOutcome,
    splits: &Splits,
    mode: EvalBasisMode,
) -> Result<RunReport> {
    let basis = outcome.last_basis.as_ref();
    Ok(RunReport {
        mode,
        test_a: evaluate_split(cfg, frozen, &outcome.detector, basis, &splits.test_a, mode)?,
        test_b: evaluate_split(cfg, frozen, &outcome.detector, basis, &splits.test_b, mode)?,
    })
}

/// `metric,split,value` rows for one report.
pub fn report_rows(r: &RunReport) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    for (split, e) in [("test_a", &r.test_a), ("test_b", &r.test_b)] {
        for (metric, v) in [
            ("loss", e.loss),
            ("auc_frame", e.auc_frame),
            ("auc_group", e.auc_group),
            ("acc", e.acc),
        ] {
            rows.push((format!("{metric}.{}", r.mode), split.to_string(), v));
        }
    }
    rows
}

/// The swept quantity of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Requested basis size.
    K,
    /// Number of decoupled tail blocks; 0 is the baseline.
    Depth,
    AnchorMode,
}

impl FromStr for SweepAxis {
    type Err = GsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "depth" => Ok(SweepAxis::Depth),
            "anchor_mode" => Ok(SweepAxis::AnchorMode),
            _ => Err(GsdError::Config(format!(
                "unknown sweep axis {s:?} (expected k, depth or anchor_mode)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::Depth => "depth",
            SweepAxis::AnchorMode => "anchor_mode",
        })
    }
}

impl SweepAxis {
    /// A copy of `cfg` with decoupling enabled and the axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut out = cfg.clone();
        out.gsd_enabled = true;
        match self {
            SweepAxis::K => out.set("gsd.k", value)?,
            SweepAxis::Depth => out.set("gsd.num_tail_layers", value)?,
            SweepAxis::AnchorMode => out.set("gsd.anchor_mode", value)?,
        }
        out.validate()?;
        Ok(out)
    }
}

/// One trained-and-scored setting of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub auc_frame_a: f64,
    pub auc_frame_b: f64,
    pub auc_group_b: f64,
    pub acc_b: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,seed,auc_frame_A,auc_frame_B,auc_group_B,acc_B";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.axis, r.value, r.seed, r.auc_frame_a, r.auc_frame_b, r.auc_group_b, r.acc_b
        ));
    }
    out
}

/// Trains and scores one configuration, returning its sweep-style summary. Scoring
/// uses the configured evaluation basis mode.
pub fn scored_run(
    cfg: &RunConfig,
    splits: &Splits,
    frozen: &FrozenStream,
) -> Result<(TrainOutcome, RunReport)> {
    let mut quiet = cfg.clone();
    quiet.train.eval_each_epoch = false;
    let outcome = train(&quiet, splits, frozen)?;
    let r = report(cfg, frozen, &outcome, splits, cfg.gsd.eval_basis_mode)?;
    Ok((outcome, r))
}

/// Runs every `(seed, value)` pair; splits and the frozen stream are built once per seed.
/// `progress` is called after each row.
pub fn sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut seeded = cfg.clone();
        seeded.train.seed = seed;
        let splits = load_splits(&seeded)?;
        let frozen = pretrain(&seeded, &splits)?;
        for (value, vcfg) in values.iter().zip(&configs) {
            let mut run_cfg = vcfg.clone();
            run_cfg.train.seed = seed;
            let (_, r) = scored_run(&run_cfg, &splits, &frozen)?;
            let row = SweepRow {
                axis,
                value: value.clone(),
                seed,
                auc_frame_a: r.test_a.auc_frame,
                auc_frame_b: r.test_b.auc_frame,
                auc_group_b: r.test_b.auc_group,
                acc_b: r.test_b.acc,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Histogram of cosine similarity between each frozen global feature and its batch
/// anchor, with evaluation batching. Returns `(low, high, count)` per bin over [-1, 1].
pub fn cosine_histogram(
    cfg: &RunConfig,
    frozen: &FrozenStream,
    data: &Dataset,
    bins: usize,
) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 {
        return Err(GsdError::Validation("histogram needs at least one bin".into()));
    }
    let globals = frozen.globals(data, &cfg.gsd)?;
    let mut counts = vec![0usize; bins];
    for batch in training::eval_batches(data.len(), cfg.train.batch_size, cfg.train.seed) {
        let rows = globals.select_rows(&batch);
        let anchor = basis::compute_anchor(&rows)?;
        for i in 0..rows.rows() {
            let c = basis::cosine_to_anchor(rows.row(i), &anchor)?;
            let pos = ((c + 1.0) / 2.0 * bins as f64).floor() as isize;
            counts[pos.clamp(0, bins as isize - 1) as usize] += 1;
        }
    }
    let width = 2.0 / bins as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, n)| (-1.0 + i as f64 * width, -1.0 + (i + 1) as f64 * width, n))
        .collect())
}

/// Worst residual component along the basis over every decoupled block input, with
/// the largest token norm seen, across the evaluation batches of `data`.
pub fn residual_summary(
    gsd: &GsdConfig,
    frozen: &FrozenStream,
    detector: &EncoderModel,
    data: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let globals = frozen.globals(data, gsd)?;
    let depth = detector.config.depth;
    let mut worst = 0.0f64;
    let mut max_norm = 0.0f64;
    for batch in training::eval_batches(data.len(), batch_size, seed) {
        let b = basis::basis_from_globals(&globals.select_rows(&batch), gsd.requested_k, DEFAULT_RANK_TOL)?;
        for &i in &batch {
            let t = encoder::forward(detector, &data.samples[i].pixels, Some(gsd), Some(&b), true)?;
            let inputs = t.layer_inputs.expect("traced");
            for (l, x) in inputs.iter().enumerate() {
                if !gsd.applies_to(l, depth) || b.is_empty() {
                    continue;
                }
                let patches = x.select_rows(&(1..x.rows()).collect::<Vec<_>>());
                worst = worst.max(gsd::residual_orthogonality(&patches, &b)?);
                for r in 0..patches.rows() {
                    max_norm = max_norm.max(crate::linalg::norm2(patches.row(r)));
                }
            }
        }
    }
    Ok((worst, max_norm))
}

/// Silhouette of detector features on `rows` of `eval`, clustered by label or identity.
pub fn feature_silhouette(eval: &EvalOutput, data: &Dataset, rows: &[usize], by_identity: bool) -> Result<f64> {
    let features = eval.features.select_rows(rows);
    let clusters: Vec<usize> = rows
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            if by_identity {
                s.identity_id
            } else {
                usize::from(s.label)
            }
        })
        .collect();
    metrics::silhouette(&features, &clusters)
}

/// Indices of the fake samples of a split.
pub fn fake_rows(data: &Dataset) -> Vec<usize> {
    (0..data.len()).filter(|&i| data.samples[i].label == 1).collect()
}

/// Final-block classification-token attention over patches, averaged over heads, as a
/// side × side grid.
pub fn attention_grid(detector: &EncoderModel, image: &[f64], gsd: Option<&GsdConfig>, basis: Option<&SemanticBasis>) -> Result<DenseMatrix> {
    let t = encoder::forward(detector, image, gsd, basis, true)?;
    let att = t.cls_attention.expect("traced");
    let side = detector.config.patches_per_side();
    let mut grid = DenseMatrix::zeros(side, side);
    for p in 0..side * side {
        let mean = (0..att.rows()).map(|h| att.get(h, p + 1)).sum::<f64>() / att.rows() as f64;
        grid.set(p / side, p % side, mean);
    }
    Ok(grid)
}
