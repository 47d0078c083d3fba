//! Loss, reverse-mode gradients, AdamW and the training loop.

use rand::seq::SliceRandom;

use crate::basis::{self, SemanticBasis};
use crate::encoder::{self, EncoderConfig, EncoderModel, EncoderParams, ForwardOptions, GradTable};
use crate::error::{GsdError, Result};
use crate::gsd::{EvalBasisMode, GsdConfig};
use crate::linalg::{DenseMatrix, DEFAULT_RANK_TOL};
use crate::metrics;
use crate::rng;
use crate::synthgen::Dataset;

pub const PROB_CLAMP: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamped_prob(z: f64) -> (f64, bool) {
    let p = sigmoid(z);
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Mean binary cross-entropy of `sigmoid(logit)` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(GsdError::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(GsdError::Validation(format!("label {y} is not 0 or 1")));
        }
        let (p, _) = clamped_prob(z);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / logits.len() as f64)
}

/// d(mean BCE)/d(logit) for one sample; zero where the clamp is active.
fn bce_grad(z: f64, y: u8, batch: usize) -> f64 {
    let (p, clamped) = clamped_prob(z);
    if clamped {
        0.0
    } else {
        (p - f64::from(y)) / batch as f64
    }
}

/// Loss, gradients and per-sample logits for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: GradTable,
    pub logits: Vec<f64>,
}

/// Mean BCE over the batch and its gradient w.r.t. every detector parameter.
///
/// The basis is a constant: projected blocks pass gradients through `I − U Uᵀ` and
/// nothing flows back into whatever produced it.
pub fn backward(
    model: &EncoderModel,
    images: &[&[f64]],
    labels: &[u8],
    gsd: Option<&GsdConfig>,
    basis: Option<&SemanticBasis>,
) -> Result<BatchGradient> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(GsdError::Shape(format!(
            "{} images for {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut grads = EncoderParams::zeros(&model.config);
    let mut logits = Vec::with_capacity(images.len());
    for (img, &y) in images.iter().zip(labels) {
        if y > 1 {
            return Err(GsdError::Validation(format!("label {y} is not 0 or 1")));
        }
        let (_, cache) = encoder::forward_impl(
            model,
            img,
            gsd,
            basis,
            ForwardOptions {
                keep_cache: true,
                trace: false,
            },
        )?;
        let cache = cache.expect("cache requested");
        let dz = bce_grad(cache.logit, y, images.len());
        encoder::backward_impl(model, &cache, basis, dz, None, &mut grads);
        logits.push(cache.logit);
    }
    let loss = bce_loss(&logits, labels)?;
    if !grads.all_finite() {
        return Err(GsdError::Numerical("non-finite gradient".into()));
    }
    Ok(BatchGradient {
        loss,
        grads,
        logits,
    })
}

/// Gradients for both streams of a dual-stream step.
#[derive(Clone, Debug)]
pub struct DualGradient {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub detector: GradTable,
    /// Always zero: the basis is a stop-gradient boundary.
    pub frozen: GradTable,
    pub basis: SemanticBasis,
}

pub fn dual_stream_backward(
    frozen: &EncoderModel,
    detector: &EncoderModel,
    images: &[&[f64]],
    labels: &[u8],
    gsd: &GsdConfig,
) -> Result<DualGradient> {
    if frozen.config != detector.config {
        return Err(GsdError::Config(
            "frozen stream and detector use different architectures".into(),
        ));
    }
    let basis = encoder::batch_basis(frozen, images, gsd)?;
    let g = backward(detector, images, labels, Some(gsd), Some(&basis))?;
    Ok(DualGradient {
        loss: g.loss,
        logits: g.logits,
        detector: g.grads,
        frozen: EncoderParams::zeros(&frozen.config),
        basis,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per tensor plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)], hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: shapes.iter().map(|&(r, c)| vec![0.0; r * c]).collect(),
            v: shapes.iter().map(|&(r, c)| vec![0.0; r * c]).collect(),
        }
    }

    pub fn for_params(params: &EncoderParams, hyper: AdamWConfig) -> Self {
        let shapes: Vec<_> = params.named().iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes, hyper)
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &f64> {
        self.v.iter().flatten()
    }

    /// One decoupled-weight-decay Adam step over matching tensor lists.
    pub fn step_tensors(&mut self, params: Vec<&mut DenseMatrix>, grads: Vec<&DenseMatrix>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(GsdError::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.data().len() != self.m[i].len() || g.data().len() != self.m[i].len() {
                return Err(GsdError::Shape(format!(
                    "tensor {i}: parameter {:?}, gradient {:?}, state length {}",
                    p.shape(),
                    g.shape(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = h.beta1 * *mi + (1.0 - h.beta1) * gr;
                *vi = h.beta2 * *vi + (1.0 - h.beta2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= h.lr * h.weight_decay * *w;
                *w -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

/// AdamW update of an encoder from a gradient table.
pub fn adamw_step(model: &mut EncoderModel, grads: &GradTable, state: &mut OptimizerState) -> Result<()> {
    let g: Vec<&DenseMatrix> = grads.named().into_iter().map(|(_, t)| t).collect();
    state.step_tensors(model.params.tensors_mut(), g)
}

/// Worst coordinate of a central-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares `analytic` with central differences of `f` at `point`, coordinate by
/// coordinate, using `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(GsdError::Validation(format!("step must be positive, got {h}")));
    }
    if point.len() != analytic.len() {
        return Err(GsdError::Shape(format!(
            "{} coordinates but {} gradient entries",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GsdError::Numerical(format!(
                "non-finite function value at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err > report.max_rel_error {
            report = FdReport {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(report)
}

/// How the frozen stream is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrozenInit {
    /// Identity classification on the real training images, then frozen.
    Pretrained,
    /// Random initialisation only.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frozen_init: FrozenInit,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Score both test splits after every epoch; when off, the trace holds only
    /// training rows and callers evaluate the final detector themselves.
    pub eval_each_epoch: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            epochs: 12,
            seed: 1,
            frozen_init: FrozenInit::Pretrained,
            pretrain_epochs: 16,
            pretrain_lr: 1e-3,
            eval_each_epoch: true,
        }
    }
}

/// Identity-classification pretraining of the frozen stream on real samples.
///
/// Uses a temporary softmax head over identities that is discarded afterwards.
pub fn pretrain_frozen(
    config: EncoderConfig,
    data: &Dataset,
    settings: &TrainSettings,
) -> Result<EncoderModel> {
    let mut model = EncoderModel::init(config, &mut rng::stream(settings.seed, &[rng::label("init")]))?;
    if settings.frozen_init == FrozenInit::Random || settings.pretrain_epochs == 0 {
        return Ok(model);
    }
    let real: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == 0).collect();
    let classes = data.samples.iter().map(|s| s.identity_id).max().unwrap_or(0) + 1;
    if real.is_empty() || classes < 2 {
        return Err(GsdError::Validation(
            "pretraining needs real samples from at least two identities".into(),
        ));
    }
    let d = config.dim;
    let mut head_w = DenseMatrix::zeros(d, classes);
    let mut head_b = DenseMatrix::zeros(1, classes);
    let hyper = AdamWConfig {
        lr: settings.pretrain_lr,
        ..settings.optimizer
    };
    let mut opt = OptimizerState::for_params(&model.params, hyper);
    let mut head_opt = OptimizerState::new(&[(d, classes), (1, classes)], hyper);
    let mut order = real.clone();
    for epoch in 0..settings.pretrain_epochs {
        order.shuffle(&mut rng::stream(
            settings.seed,
            &[rng::label("pretrain-order"), epoch as u64],
        ));
        for chunk in order.chunks(settings.batch_size) {
            let mut grads = EncoderParams::zeros(&config);
            let mut g_hw = DenseMatrix::zeros(d, classes);
            let mut g_hb = DenseMatrix::zeros(1, classes);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &data.samples[i];
                let (_, cache) = encoder::forward_impl(
                    &model,
                    &s.pixels,
                    None,
                    None,
                    ForwardOptions {
                        keep_cache: true,
                        trace: false,
                    },
                )?;
                let cache = cache.expect("cache requested");
                let feat = &cache.feature;
                let mut z = head_b.data().to_vec();
                crate::linalg::gemm_nn(feat, head_w.data(), &mut z, 1, d, classes);
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                let mut dz: Vec<f64> = z.iter().map(|v| v / sum * scale).collect();
                dz[s.identity_id] -= scale;
                crate::linalg::gemm_tn(feat, &dz, g_hw.data_mut(), 1, d, classes);
                for (g, v) in g_hb.data_mut().iter_mut().zip(&dz) {
                    *g += v;
                }
                let mut d_feat = vec![0.0; d];
                crate::linalg::gemm_nt(&dz, head_w.data(), &mut d_feat, 1, classes, d);
                encoder::backward_impl(&model, &cache, None, 0.0, Some(&d_feat), &mut grads);
            }
            adamw_step(&mut model, &grads, &mut opt)?;
            head_opt.step_tensors(vec![&mut head_w, &mut head_b], vec![&g_hw, &g_hb])?;
        }
    }
    if !model.params.all_finite() {
        return Err(GsdError::Numerical("frozen-stream pretraining diverged".into()));
    }
    Ok(model)
}

/// Frozen model plus its cached global features for each split.
#[derive(Clone, Debug)]
pub struct FrozenStream {
    pub model: EncoderModel,
}

impl FrozenStream {
    pub fn globals(&self, data: &Dataset, gsd: &GsdConfig) -> Result<DenseMatrix> {
        encoder::global_features(&self.model, &data.images(), gsd.anchor_mode)
    }
}

/// Per-split evaluation of a detector.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub logits: Vec<f64>,
    /// Normalised classification-token features, one row per sample.
    pub features: DenseMatrix,
    pub loss: f64,
    pub auc_frame: f64,
    pub auc_group: f64,
    pub acc: f64,
}

/// Fixed evaluation batching: a seeded permutation cut into `batch_size` chunks.
pub fn eval_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::label("eval-order")]));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Scores a split. `globals` are the frozen features of `data` (rows aligned), needed
/// only for per-batch bases; `train_basis` serves the frozen-train-basis mode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    detector: &EncoderModel,
    data: &Dataset,
    globals: Option<&DenseMatrix>,
    gsd: Option<&GsdConfig>,
    mode: EvalBasisMode,
    train_basis: Option<&SemanticBasis>,
    batch_size: usize,
    seed: u64,
) -> Result<EvalOutput> {
    let n = data.len();
    let mut logits = vec![0.0; n];
    let mut features = DenseMatrix::zeros(n, detector.config.dim);
    let active = gsd.filter(|g| g.is_active());
    for batch in eval_batches(n, batch_size, seed) {
        let basis = match (active, mode) {
            (None, _) => None,
            (Some(g), EvalBasisMode::PerBatch) => {
                let globals = globals.ok_or_else(|| {
                    GsdError::Config("per-batch evaluation needs frozen features".into())
                })?;
                let rows = globals.select_rows(&batch);
                Some(basis::basis_from_globals(&rows, g.requested_k, DEFAULT_RANK_TOL)?)
            }
            (Some(_), EvalBasisMode::FrozenTrainBasis) => Some(
                train_basis
                    .cloned()
                    .ok_or_else(|| GsdError::Config("no stored training basis".into()))?,
            ),
        };
        for &i in &batch {
            let t = encoder::forward(detector, &data.samples[i].pixels, active, basis.as_ref(), false)?;
            logits[i] = t.logit;
            features.row_mut(i).copy_from_slice(&t.feature);
        }
    }
    let labels = data.labels();
    Ok(EvalOutput {
        loss: bce_loss(&logits, &labels)?,
        auc_frame: metrics::roc_auc(&logits, &labels)?,
        auc_group: metrics::group_auc(&logits, &labels, &data.groups())?,
        acc: metrics::accuracy(&logits, &labels)?,
        logits,
        features,
    })
}

/// One row of the metrics trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub auc_frame: f64,
    pub auc_group: f64,
    pub acc: f64,
}

pub const TRACE_HEADER: &str = "epoch,split,loss,auc_frame,auc_group,acc";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.epoch, r.split, r.loss, r.auc_frame, r.auc_group, r.acc
        ));
    }
    out
}

/// Training and evaluation splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test_a: Dataset,
    pub test_b: Dataset,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: EncoderModel,
    pub trace: Vec<TraceRow>,
    /// Basis of the final training batch, kept for deployment-style evaluation.
    pub last_basis: Option<SemanticBasis>,
}

/// Fine-tunes a copy of the frozen stream as the detector.
///
/// Each epoch visits the training split in a seeded order; with decoupling active, each
/// batch's basis comes from the frozen features of that batch. After every epoch the
/// trace gains a `train` row (from the logits seen during the epoch) and rows for both
/// test splits.
pub fn train_detector(
    frozen: &FrozenStream,
    splits: &Splits,
    gsd: Option<&GsdConfig>,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    let mut detector = frozen.model.clone();
    let active = gsd.filter(|g| g.is_active());
    if let Some(g) = gsd {
        g.validate(detector.config.depth)?;
    }
    let train_globals = active.map(|g| frozen.globals(&splits.train, g)).transpose()?;
    let test_globals = match active {
        Some(g) if settings.eval_each_epoch => Some((
            frozen.globals(&splits.test_a, g)?,
            frozen.globals(&splits.test_b, g)?,
        )),
        _ => None,
    };
    let mut opt = OptimizerState::for_params(&detector.params, settings.optimizer);
    let labels = splits.train.labels();
    let groups = splits.train.groups();
    let mut trace = Vec::new();
    let mut last_basis = None;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    for epoch in 0..settings.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(
            settings.seed,
            &[rng::label("train-order"), epoch as u64],
        ));
        let mut seen_logits = vec![0.0; splits.train.len()];
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size.max(1)) {
            let images: Vec<&[f64]> = batch.iter().map(|&i| splits.train.samples[i].pixels.as_slice()).collect();
            let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let basis = match (active, &train_globals) {
                (Some(g), Some(tg)) => Some(basis::basis_from_globals(
                    &tg.select_rows(batch),
                    g.requested_k,
                    DEFAULT_RANK_TOL,
                )?),
                _ => None,
            };
            let step = backward(&detector, &images, &y, active, basis.as_ref()).map_err(|e| match e {
                GsdError::Numerical(m) => GsdError::Numerical(format!("{m} in epoch {epoch}")),
                other => other,
            })?;
            if !step.loss.is_finite() {
                return Err(GsdError::Numerical(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += step.loss * batch.len() as f64;
            for (&i, &z) in batch.iter().zip(&step.logits) {
                seen_logits[i] = z;
            }
            adamw_step(&mut detector, &step.grads, &mut opt)?;
            last_basis = basis;
        }
        trace.push(TraceRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / splits.train.len() as f64,
            auc_frame: metrics::roc_auc(&seen_logits, &labels)?,
            auc_group: metrics::group_auc(&seen_logits, &labels, &groups)?,
            acc: metrics::accuracy(&seen_logits, &labels)?,
        });
        if !settings.eval_each_epoch {
            continue;
        }
        let mode = active.map(|g| g.eval_basis_mode).unwrap_or(EvalBasisMode::PerBatch);
        for (name, data, g) in [
            ("test_a", &splits.test_a, test_globals.as_ref().map(|x| &x.0)),
            ("test_b", &splits.test_b, test_globals.as_ref().map(|x| &x.1)),
        ] {
            let e = evaluate(
                &detector,
                data,
                g,
                active,
                mode,
                last_basis.as_ref(),
                settings.batch_size,
                settings.seed,
            )?;
            trace.push(TraceRow {
                epoch,
                split: name.into(),
                loss: e.loss,
                auc_frame: e.auc_frame,
                auc_group: e.auc_group,
                acc: e.acc,
            });
        }
    }
    Ok(TrainOutcome {
        detector,
        trace,
        last_basis,
    })
}
