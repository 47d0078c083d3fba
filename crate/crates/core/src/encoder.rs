//! A small pre-norm patch transformer used for both streams of the detector.
//!
//! Token 0 is the classification token; tokens `1..N` are patch embeddings. When a
//! [`GsdConfig`] is active, the patch rows of each tail block's input are projected onto
//! the complement of the batch semantic basis before the block runs. The classification
//! token is never projected but still attends to the projected patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::basis::{self, SemanticBasis};
use crate::error::{GsdError, Result};
use crate::gsd::{self, AnchorMode, GsdConfig};
use crate::linalg::{self, DenseMatrix, DEFAULT_RANK_TOL};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 32,
            heads: 4,
            depth: 6,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(GsdError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(GsdError::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(GsdError::Config("encoder depth must be at least 1".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(GsdError::Config(format!(
                "mlp ratio {} gives an empty hidden layer",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patch tokens plus the classification token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: DenseMatrix,
    pub ln1_b: DenseMatrix,
    pub wq: DenseMatrix,
    pub bq: DenseMatrix,
    pub wk: DenseMatrix,
    pub bk: DenseMatrix,
    pub wv: DenseMatrix,
    pub bv: DenseMatrix,
    pub wo: DenseMatrix,
    pub bo: DenseMatrix,
    pub ln2_g: DenseMatrix,
    pub ln2_b: DenseMatrix,
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

/// Every tensor of the encoder, including the binary classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_w: DenseMatrix,
    pub patch_b: DenseMatrix,
    pub cls: DenseMatrix,
    pub pos: DenseMatrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: DenseMatrix,
    pub lnf_b: DenseMatrix,
    pub head_w: DenseMatrix,
    pub head_b: DenseMatrix,
}

/// Gradients share the parameter layout.
pub type GradTable = EncoderParams;

const BLOCK_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl BlockParams {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden());
        let z = DenseMatrix::zeros;
        Self {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            wq: z(d, d),
            bq: z(1, d),
            wk: z(d, d),
            bk: z(1, d),
            wv: z(d, d),
            bv: z(1, d),
            wo: z(d, d),
            bo: z(1, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            w1: z(d, h),
            b1: z(1, h),
            w2: z(h, d),
            b2: z(1, d),
        }
    }

    fn tensors(&self) -> [&DenseMatrix; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DenseMatrix; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.dim;
        Self {
            patch_w: DenseMatrix::zeros(cfg.patch_len(), d),
            patch_b: DenseMatrix::zeros(1, d),
            cls: DenseMatrix::zeros(1, d),
            pos: DenseMatrix::zeros(cfg.num_tokens(), d),
            blocks: (0..cfg.depth).map(|_| BlockParams::zeros(cfg)).collect(),
            lnf_g: DenseMatrix::zeros(1, d),
            lnf_b: DenseMatrix::zeros(1, d),
            head_w: DenseMatrix::zeros(d, 1),
            head_b: DenseMatrix::zeros(1, 1),
        }
    }

    /// Tensors in a fixed order with their dotted names.
    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.lnf_g));
        out.push(("ln_f.b".to_string(), &self.lnf_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Mutable tensors, in the same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for b in self.blocks.iter_mut() {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Adds `other` into `self`; layouts must match.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        let theirs: Vec<&DenseMatrix> = other.named().into_iter().map(|(_, t)| t).collect();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn abs_sum(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Flattened copy of every scalar, in [`EncoderParams::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl EncoderModel {
    /// Random initialisation: linear maps draw from N(0, 1/fan_in), embeddings from
    /// N(0, 0.02²), layer norms start at the identity.
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = EncoderParams::zeros(&config);
        let fill = |m: &mut DenseMatrix, std: f64, rng: &mut R| {
            let n = Normal::new(0.0, std).expect("positive std");
            m.data_mut().iter_mut().for_each(|v| *v = n.sample(rng));
        };
        let fan = |m: &DenseMatrix| 1.0 / (m.rows() as f64).sqrt();
        let s = fan(&p.patch_w);
        fill(&mut p.patch_w, s, rng);
        fill(&mut p.cls, 0.02, rng);
        fill(&mut p.pos, 0.02, rng);
        for b in p.blocks.iter_mut() {
            b.ln1_g.data_mut().fill(1.0);
            b.ln2_g.data_mut().fill(1.0);
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
                let s = fan(w);
                fill(w, s, rng);
            }
        }
        p.lnf_g.data_mut().fill(1.0);
        fill(&mut p.head_w, 0.02, rng);
        Ok(Self { config, params: p })
    }

    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let reference = EncoderParams::zeros(&self.config);
        for ((name, mine), (_, expected)) in self.params.named().iter().zip(reference.named()) {
            if mine.shape() != expected.shape() {
                return Err(GsdError::Shape(format!(
                    "tensor {name} is {:?}, expected {:?}",
                    mine.shape(),
                    expected.shape()
                )));
            }
        }
        if self.params.blocks.len() != self.config.depth {
            return Err(GsdError::Shape(format!(
                "{} blocks for depth {}",
                self.params.blocks.len(),
                self.config.depth
            )));
        }
        Ok(())
    }
}

/// Splits an H×W image into row-major patches, each flattened row-major.
pub fn patchify(image: &DenseMatrix, patch_size: usize) -> Result<DenseMatrix> {
    let (h, w) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(GsdError::Shape(format!(
            "{h}x{w} image is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    Ok(patchify_raw(image.data(), h, w, patch_size))
}

pub(crate) fn patchify_raw(pixels: &[f64], h: usize, w: usize, p: usize) -> DenseMatrix {
    let (ph, pw) = (h / p, w / p);
    let mut out = DenseMatrix::zeros(ph * pw, p * p);
    for pr in 0..ph {
        for pc in 0..pw {
            let row = out.row_mut(pr * pw + pc);
            for y in 0..p {
                for x in 0..p {
                    row[y * p + x] = pixels[(pr * p + y) * w + pc * p + x];
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`] for an `height`×`width` image.
pub fn unpatchify(
    patches: &DenseMatrix,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<DenseMatrix> {
    let p = patch_size;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(GsdError::Shape(format!(
            "{height}x{width} image is not divisible into {p}x{p} patches"
        )));
    }
    let pw = width / p;
    if patches.shape() != ((height / p) * pw, p * p) {
        return Err(GsdError::Shape(format!(
            "patch matrix {:?} does not fit a {height}x{width} image",
            patches.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(height, width);
    for (idx, row) in (0..patches.rows()).map(|i| (i, patches.row(i))) {
        let (pr, pc) = (idx / pw, idx % pw);
        for y in 0..p {
            for x in 0..p {
                out.set(pr * p + y, pc * p + x, row[y * p + x]);
            }
        }
    }
    Ok(out)
}

/// Global feature from an N×D token matrix: patch mean (GAP) or token 0 (CLS).
pub fn extract_global(tokens: &DenseMatrix, mode: AnchorMode) -> Result<Vec<f64>> {
    if tokens.rows() < 2 {
        return Err(GsdError::Validation(format!(
            "need a classification token and at least one patch, got {} tokens",
            tokens.rows()
        )));
    }
    Ok(match mode {
        AnchorMode::Cls => tokens.row(0).to_vec(),
        AnchorMode::Gap => {
            let n = (tokens.rows() - 1) as f64;
            let mut g = vec![0.0; tokens.cols()];
            for i in 1..tokens.rows() {
                for (a, v) in g.iter_mut().zip(tokens.row(i)) {
                    *a += v;
                }
            }
            g.iter_mut().for_each(|v| *v /= n);
            g
        }
    })
}

/// Output of a single-image forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Pre-sigmoid score.
    pub logit: f64,
    /// Normalised classification token read by the head.
    pub feature: Vec<f64>,
    /// Token matrix after the last block, before the final norm.
    pub final_tokens: DenseMatrix,
    /// Input token matrix of every block (after any projection), when traced.
    pub layer_inputs: Option<Vec<DenseMatrix>>,
    /// Final-block attention of the classification token, heads × N, when traced.
    pub cls_attention: Option<DenseMatrix>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    cat: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    projected: bool,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct ForwardCache {
    patches: DenseMatrix,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    pub(crate) feature: Vec<f64>,
    pub(crate) logit: f64,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64], d: usize) -> LnCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates parameter gradients and writes the input gradient into `dx` (added).
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
    d: usize,
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(out: &mut [f64], b: &[f64]) {
    for row in out.chunks_exact_mut(b.len()) {
        for (o, v) in row.iter_mut().zip(b) {
            *o += v;
        }
    }
}

fn col_sum_into(x: &[f64], acc: &mut [f64]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Which blocks receive the projection, given an optional config and basis.
fn projection_plan<'a>(
    cfg: &EncoderConfig,
    gsd: Option<&GsdConfig>,
    basis: Option<&'a SemanticBasis>,
) -> Result<Option<(&'a SemanticBasis, usize)>> {
    let Some(g) = gsd else { return Ok(None) };
    g.validate(cfg.depth)?;
    if g.num_tail_layers == 0 {
        return Ok(None);
    }
    let Some(b) = basis else {
        return Err(GsdError::Config(
            "decoupling is enabled but no semantic basis was supplied".into(),
        ));
    };
    if b.dim() != cfg.dim {
        return Err(GsdError::Shape(format!(
            "basis dimension {} does not match encoder width {}",
            b.dim(),
            cfg.dim
        )));
    }
    if b.is_empty() {
        return Ok(None);
    }
    Ok(Some((b, cfg.depth - g.num_tail_layers)))
}

pub(crate) struct ForwardOptions {
    pub keep_cache: bool,
    pub trace: bool,
}

pub(crate) fn forward_impl(
    model: &EncoderModel,
    pixels: &[f64],
    gsd: Option<&GsdConfig>,
    basis: Option<&SemanticBasis>,
    opts: ForwardOptions,
) -> Result<(ForwardTrace, Option<ForwardCache>)> {
    let cfg = &model.config;
    let p = &model.params;
    if pixels.len() != cfg.image_size * cfg.image_size {
        return Err(GsdError::Shape(format!(
            "image has {} pixels, expected {}x{}",
            pixels.len(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let plan = projection_plan(cfg, gsd, basis)?;
    let (d, n, hid, heads, hd) = (
        cfg.dim,
        cfg.num_tokens(),
        cfg.hidden(),
        cfg.heads,
        cfg.head_dim(),
    );
    let patches = patchify_raw(pixels, cfg.image_size, cfg.image_size, cfg.patch_size);

    let mut x = vec![0.0; n * d];
    x[..d].copy_from_slice(p.cls.data());
    linalg::gemm_nn(
        patches.data(),
        p.patch_w.data(),
        &mut x[d..],
        n - 1,
        cfg.patch_len(),
        d,
    );
    add_bias(&mut x[d..], p.patch_b.data());
    for (xv, pv) in x.iter_mut().zip(p.pos.data()) {
        *xv += pv;
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut caches = Vec::with_capacity(cfg.depth);
    let mut layer_inputs = opts.trace.then(Vec::new);
    let mut cls_attention = None;

    for (l, bp) in p.blocks.iter().enumerate() {
        let projected = match plan {
            Some((b, first)) if l >= first => {
                gsd::decouple_rows_in_place(&mut x[d..], d, b.u());
                true
            }
            _ => false,
        };
        if let Some(v) = layer_inputs.as_mut() {
            v.push(DenseMatrix::from_vec(n, d, x.clone()));
        }

        let mut h1 = vec![0.0; n * d];
        let ln1 = layer_norm(&x, bp.ln1_g.data(), bp.ln1_b.data(), &mut h1, d);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        linalg::gemm_nn(&h1, bp.wq.data(), &mut q, n, d, d);
        linalg::gemm_nn(&h1, bp.wk.data(), &mut k, n, d, d);
        linalg::gemm_nn(&h1, bp.wv.data(), &mut v, n, d, d);
        add_bias(&mut q, bp.bq.data());
        add_bias(&mut k, bp.bk.data());
        add_bias(&mut v, bp.bv.data());

        let mut probs = vec![0.0; heads * n * n];
        let mut cat = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * hd;
            let ph = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut ph[i * n..(i + 1) * n];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    let s = linalg::dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                    row[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let out = &mut cat[i * d + off..i * d + off + hd];
                for (j, &pij) in row.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                        *o += pij * vv;
                    }
                }
            }
        }
        if opts.trace && l + 1 == cfg.depth {
            let mut att = DenseMatrix::zeros(heads, n);
            for h in 0..heads {
                att.row_mut(h)
                    .copy_from_slice(&probs[h * n * n..h * n * n + n]);
            }
            cls_attention = Some(att);
        }

        let mut a = vec![0.0; n * d];
        linalg::gemm_nn(&cat, bp.wo.data(), &mut a, n, d, d);
        add_bias(&mut a, bp.bo.data());
        for (xv, av) in x.iter_mut().zip(&a) {
            *xv += av;
        }

        let mut h2 = vec![0.0; n * d];
        let ln2 = layer_norm(&x, bp.ln2_g.data(), bp.ln2_b.data(), &mut h2, d);
        let mut pre = vec![0.0; n * hid];
        linalg::gemm_nn(&h2, bp.w1.data(), &mut pre, n, d, hid);
        add_bias(&mut pre, bp.b1.data());
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mut m = vec![0.0; n * d];
        linalg::gemm_nn(&act, bp.w2.data(), &mut m, n, hid, d);
        add_bias(&mut m, bp.b2.data());
        for (xv, mv) in x.iter_mut().zip(&m) {
            *xv += mv;
        }

        if opts.keep_cache {
            caches.push(BlockCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                cat,
                ln2,
                h2,
                pre,
                act,
                projected,
            });
        }
    }

    let mut feature = vec![0.0; d];
    let lnf = layer_norm(&x[..d], p.lnf_g.data(), p.lnf_b.data(), &mut feature, d);
    let logit = linalg::dot(&feature, p.head_w.data()) + p.head_b.data()[0];
    if !logit.is_finite() {
        return Err(GsdError::Numerical("forward pass produced a non-finite logit".into()));
    }

    let trace = ForwardTrace {
        logit,
        feature: feature.clone(),
        final_tokens: DenseMatrix::from_vec(n, d, x),
        layer_inputs,
        cls_attention,
    };
    let cache = opts.keep_cache.then(|| ForwardCache {
        patches,
        blocks: caches,
        lnf,
        feature,
        logit,
    });
    Ok((trace, cache))
}

/// Back-propagates `d_feature` (gradient w.r.t. the normalised classification token)
/// and `d_logit` (gradient w.r.t. the head output) through the encoder, accumulating
/// into `grads`. Projected blocks pass gradients through `I − U Uᵀ` with U constant.
pub(crate) fn backward_impl(
    model: &EncoderModel,
    cache: &ForwardCache,
    basis: Option<&SemanticBasis>,
    d_logit: f64,
    d_feature_extra: Option<&[f64]>,
    grads: &mut GradTable,
) {
    let cfg = &model.config;
    let p = &model.params;
    let (d, n, hid, heads, hd) = (
        cfg.dim,
        cfg.num_tokens(),
        cfg.hidden(),
        cfg.heads,
        cfg.head_dim(),
    );
    let scale = 1.0 / (hd as f64).sqrt();

    // head
    let mut d_feat: Vec<f64> = p.head_w.data().iter().map(|w| w * d_logit).collect();
    if let Some(extra) = d_feature_extra {
        for (a, b) in d_feat.iter_mut().zip(extra) {
            *a += b;
        }
    }
    for (g, f) in grads.head_w.data_mut().iter_mut().zip(&cache.feature) {
        *g += d_logit * f;
    }
    grads.head_b.data_mut()[0] += d_logit;

    let mut dx = vec![0.0; n * d];
    layer_norm_backward(
        &d_feat,
        &cache.lnf,
        p.lnf_g.data(),
        grads.lnf_g.data_mut(),
        grads.lnf_b.data_mut(),
        &mut dx[..d],
        d,
    );

    for (l, (bp, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[l];
        // Rows that carry gradient; in the last block only the classification token does.
        let live = if l + 1 == cfg.depth { 1 } else { n };

        // MLP
        let dxl = &dx[..live * d];
        linalg::gemm_tn(&bc.act[..live * hid], dxl, gb.w2.data_mut(), live, hid, d);
        col_sum_into(dxl, gb.b2.data_mut());
        let mut d_pre = vec![0.0; live * hid];
        linalg::gemm_nt(dxl, bp.w2.data(), &mut d_pre, live, d, hid);
        for (dp, &z) in d_pre.iter_mut().zip(&bc.pre) {
            *dp *= gelu_grad(z);
        }
        linalg::gemm_tn(&bc.h2[..live * d], &d_pre, gb.w1.data_mut(), live, d, hid);
        col_sum_into(&d_pre, gb.b1.data_mut());
        let mut d_h2 = vec![0.0; live * d];
        linalg::gemm_nt(&d_pre, bp.w1.data(), &mut d_h2, live, hid, d);
        let mut d_mid = dx.clone();
        let ln2_live = LnCache {
            xhat: bc.ln2.xhat[..live * d].to_vec(),
            rstd: bc.ln2.rstd[..live].to_vec(),
        };
        layer_norm_backward(
            &d_h2,
            &ln2_live,
            bp.ln2_g.data(),
            gb.ln2_g.data_mut(),
            gb.ln2_b.data_mut(),
            &mut d_mid[..live * d],
            d,
        );

        // attention output projection
        let dml = &d_mid[..live * d];
        linalg::gemm_tn(&bc.cat[..live * d], dml, gb.wo.data_mut(), live, d, d);
        col_sum_into(dml, gb.bo.data_mut());
        let mut d_cat = vec![0.0; live * d];
        linalg::gemm_nt(dml, bp.wo.data(), &mut d_cat, live, d, d);

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp_row = vec![0.0; n];
        for h in 0..heads {
            let off = h * hd;
            let ph = &bc.probs[h * n * n..(h + 1) * n * n];
            for i in 0..live {
                let dout = &d_cat[i * d + off..i * d + off + hd];
                let prow = &ph[i * n..(i + 1) * n];
                let mut rowdot = 0.0;
                for j in 0..n {
                    let vj = &bc.v[j * d + off..j * d + off + hd];
                    dp_row[j] = linalg::dot(dout, vj);
                    rowdot += dp_row[j] * prow[j];
                    let pij = prow[j];
                    for (dvv, o) in dv[j * d + off..j * d + off + hd].iter_mut().zip(dout) {
                        *dvv += pij * o;
                    }
                }
                let qi = &bc.q[i * d + off..i * d + off + hd];
                for j in 0..n {
                    let ds = prow[j] * (dp_row[j] - rowdot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &bc.k[j * d + off..j * d + off + hd];
                    for t in 0..hd {
                        dq[i * d + off + t] += ds * kj[t];
                        dk[j * d + off + t] += ds * qi[t];
                    }
                }
            }
        }

        let mut d_h1 = vec![0.0; n * d];
        for (w, dz, gw, gbias) in [
            (&bp.wq, &dq, &mut gb.wq, &mut gb.bq),
            (&bp.wk, &dk, &mut gb.wk, &mut gb.bk),
            (&bp.wv, &dv, &mut gb.wv, &mut gb.bv),
        ] {
            linalg::gemm_nt(dz, w.data(), &mut d_h1, n, d, d);
            linalg::gemm_tn(&bc.h1, dz, gw.data_mut(), n, d, d);
            col_sum_into(dz, gbias.data_mut());
        }

        let mut d_in = d_mid;
        layer_norm_backward(
            &d_h1,
            &bc.ln1,
            bp.ln1_g.data(),
            gb.ln1_g.data_mut(),
            gb.ln1_b.data_mut(),
            &mut d_in,
            d,
        );
        if bc.projected {
            let b = basis.expect("projected block implies a basis");
            gsd::decouple_rows_in_place(&mut d_in[d..], d, b.u());
        }
        dx = d_in;
    }

    // embeddings
    for (g, v) in grads.cls.data_mut().iter_mut().zip(&dx[..d]) {
        *g += v;
    }
    for (g, v) in grads.pos.data_mut().iter_mut().zip(&dx) {
        *g += v;
    }
    linalg::gemm_tn(
        cache.patches.data(),
        &dx[d..],
        grads.patch_w.data_mut(),
        n - 1,
        cfg.patch_len(),
        d,
    );
    col_sum_into(&dx[d..], grads.patch_b.data_mut());
}

/// Single-image forward pass.
///
/// With `gsd` absent, `num_tail_layers == 0`, or an empty basis, the result is the
/// plain encoder's output bit for bit.
pub fn forward(
    model: &EncoderModel,
    image: &[f64],
    gsd: Option<&GsdConfig>,
    basis: Option<&SemanticBasis>,
    trace: bool,
) -> Result<ForwardTrace> {
    let (t, _) = forward_impl(
        model,
        image,
        gsd,
        basis,
        ForwardOptions {
            keep_cache: false,
            trace,
        },
    )?;
    Ok(t)
}

/// Frozen-stream global feature of one image: pooled final-block tokens.
pub fn global_feature(model: &EncoderModel, image: &[f64], mode: AnchorMode) -> Result<Vec<f64>> {
    let t = forward(model, image, None, None, false)?;
    extract_global(&t.final_tokens, mode)
}

/// B×D matrix of frozen global features for a batch.
pub fn global_features(
    model: &EncoderModel,
    images: &[&[f64]],
    mode: AnchorMode,
) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(images.len(), model.config.dim);
    for (i, img) in images.iter().enumerate() {
        let g = global_feature(model, img, mode)?;
        out.row_mut(i).copy_from_slice(&g);
    }
    Ok(out)
}

/// Per-batch diagnostics from the dual-stream forward pass.
#[derive(Clone, Debug)]
pub struct DualStreamOutput {
    pub logits: Vec<f64>,
    pub basis: SemanticBasis,
    pub effective_k: usize,
    /// Worst `|⟨patch token, u_k⟩|` over projected block inputs, relative to the largest
    /// token norm seen there. Zero when nothing was projected.
    pub residual_orthogonality: f64,
}

fn check_pair(frozen: &EncoderModel, detector: &EncoderModel) -> Result<()> {
    if frozen.config != detector.config {
        return Err(GsdError::Config(format!(
            "frozen stream {:?} and detector {:?} use different architectures",
            frozen.config, detector.config
        )));
    }
    Ok(())
}

/// Semantic basis for a batch, estimated from the frozen stream only.
pub fn batch_basis(
    frozen: &EncoderModel,
    images: &[&[f64]],
    gsd: &GsdConfig,
) -> Result<SemanticBasis> {
    if images.is_empty() {
        return Err(GsdError::Validation("empty batch".into()));
    }
    let globals = global_features(frozen, images, gsd.anchor_mode)?;
    basis::basis_from_globals(&globals, gsd.requested_k, DEFAULT_RANK_TOL)
}

/// Frozen stream → anchor → basis → detector with decoupled tail blocks.
pub fn dual_stream_forward(
    frozen: &EncoderModel,
    detector: &EncoderModel,
    images: &[&[f64]],
    gsd: &GsdConfig,
) -> Result<DualStreamOutput> {
    check_pair(frozen, detector)?;
    let basis = batch_basis(frozen, images, gsd)?;
    let mut logits = Vec::with_capacity(images.len());
    let mut worst = 0.0_f64;
    let mut max_norm = 0.0_f64;
    let first = detector.config.depth - gsd.num_tail_layers.min(detector.config.depth);
    for img in images {
        let t = forward(detector, img, Some(gsd), Some(&basis), !basis.is_empty())?;
        logits.push(t.logit);
        if let Some(inputs) = &t.layer_inputs {
            for tokens in &inputs[first..] {
                let patches = DenseMatrix::from_vec(
                    tokens.rows() - 1,
                    tokens.cols(),
                    tokens.data()[tokens.cols()..].to_vec(),
                );
                worst = worst.max(gsd::residual_orthogonality(&patches, &basis)?);
                for i in 0..patches.rows() {
                    max_norm = max_norm.max(linalg::norm2(patches.row(i)));
                }
            }
        }
    }
    let rel = if max_norm > 0.0 { worst / max_norm } else { 0.0 };
    Ok(DualStreamOutput {
        logits,
        effective_k: basis.effective_k(),
        basis,
        residual_orthogonality: rel,
    })
}
