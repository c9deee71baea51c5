//! Decoder-only transformer over the unified vocabulary.
//!
//! Pre-norm blocks with learned positional embeddings. Every token also adds
//! a learned frame embedding (see [`FrameTracker`]) so a CoT code and the
//! audio tokens of the same window share a time signal. The clap slot adds a
//! linear projection of the unit-normalized condition embedding to the
//! token embedding of [`Special::Clap`].
//!
//! All parameters live in one flat buffer. Forward and backward passes are
//! written out by hand and are generic over the float type so the same code
//! serves `f64` gradient checks and `f32` training.

use std::fmt::Debug;
use std::fs;
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::sequence::{FrameTracker, Special, TokenSequence, VocabLayout};

/// Float types the model runs in.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

#[inline]
fn sc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Maximum number of input positions.
    pub context: usize,
    pub mlp_ratio: usize,
    /// Audio tokens per window, used for frame tracking.
    pub tokens_per_frame: usize,
    /// Frame embedding rows beyond the "no frame" row.
    pub max_frames: usize,
    /// Final LayerNorm before the output head. Disabling it with `depth = 0`
    /// leaves a model whose logits are linear in each parameter tensor.
    pub final_norm: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 4,
            heads: 4,
            context: 1024,
            mlp_ratio: 4,
            tokens_per_frame: 20,
            max_frames: 32,
            final_norm: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.context < 2 {
            return Err(Error::config("context must hold at least two positions"));
        }
        if self.mlp_ratio == 0 || self.tokens_per_frame == 0 {
            return Err(Error::config("mlp_ratio and tokens_per_frame must be positive"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// Whether the model was trained on streams with a CoT region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Musicot,
    Baseline,
}

impl Variant {
    pub fn uses_cot(self) -> bool {
        self == Variant::Musicot
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Musicot => "musicot",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    o_w: usize,
    o_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok: usize,
    pos: usize,
    frame: usize,
    clap: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

fn build_specs(config: &ModelConfig, vocab: usize, clap_dim: usize) -> (Vec<TensorSpec>, Offsets) {
    let w = config.width;
    let h = config.hidden();
    let mut specs: Vec<TensorSpec> = Vec::new();
    let mut total = 0usize;
    let mut add = |name: String, shape: Vec<usize>| -> usize {
        let spec = TensorSpec {
            name,
            shape,
            offset: total,
        };
        let off = total;
        total += spec.len();
        specs.push(spec);
        off
    };
    let tok = add("tok_emb".into(), vec![vocab, w]);
    let pos = add("pos_emb".into(), vec![config.context, w]);
    let frame = add("frame_emb".into(), vec![config.max_frames + 1, w]);
    let clap = add("clap_proj".into(), vec![clap_dim, w]);
    let mut blocks = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let p = |s: &str| format!("block{l}.{s}");
        blocks.push(BlockOffsets {
            ln1_g: add(p("ln1.gain"), vec![w]),
            ln1_b: add(p("ln1.bias"), vec![w]),
            qkv_w: add(p("attn.qkv.weight"), vec![w, 3 * w]),
            qkv_b: add(p("attn.qkv.bias"), vec![3 * w]),
            o_w: add(p("attn.out.weight"), vec![w, w]),
            o_b: add(p("attn.out.bias"), vec![w]),
            ln2_g: add(p("ln2.gain"), vec![w]),
            ln2_b: add(p("ln2.bias"), vec![w]),
            fc1_w: add(p("mlp.fc1.weight"), vec![w, h]),
            fc1_b: add(p("mlp.fc1.bias"), vec![h]),
            fc2_w: add(p("mlp.fc2.weight"), vec![h, w]),
            fc2_b: add(p("mlp.fc2.bias"), vec![w]),
        });
    }
    let (lnf_g, lnf_b) = if config.final_norm {
        (add("ln_f.gain".into(), vec![w]), add("ln_f.bias".into(), vec![w]))
    } else {
        (0, 0)
    };
    let head_w = add("head.weight".into(), vec![w, vocab]);
    let head_b = add("head.bias".into(), vec![vocab]);
    (
        specs,
        Offsets {
            tok,
            pos,
            frame,
            clap,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        },
    )
}

// ---------------------------------------------------------------------------
// Dense kernels. Matrices are row-major with weights stored `[in][out]`.

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[t] = b + x[t] · w` for `rows` rows.
fn linear<F: Scalar>(x: &[F], w: &[F], b: &[F], n_in: usize, n_out: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        or.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            if xi != F::zero() {
                axpy(xi, &w[i * n_out..(i + 1) * n_out], or);
            }
        }
    }
}

/// Accumulates weight and bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    w: &[F],
    n_in: usize,
    n_out: usize,
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
) {
    for (xr, dr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
        axpy(F::one(), dr, db);
        for (i, &xi) in xr.iter().enumerate() {
            if xi != F::zero() {
                axpy(xi, dr, &mut dw[i * n_out..(i + 1) * n_out]);
            }
        }
    }
    if let Some(dx) = dx {
        for (dxr, dr) in dx.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            for (i, v) in dxr.iter_mut().enumerate() {
                *v = dot(dr, &w[i * n_out..(i + 1) * n_out]);
            }
        }
    }
}

/// Row-wise LayerNorm; returns per-row mean and reciprocal std.
fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], n: usize, out: &mut [F], mean: &mut [F], rstd: &mut [F]) {
    let inv_n = sc::<F>(1.0 / n as f64);
    let eps = sc::<F>(LN_EPS);
    for (r, (xr, or)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mu = xr.iter().fold(F::zero(), |a, &v| a + v) * inv_n;
        let var = xr.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_n;
        let rs = (var + eps).sqrt().recip();
        for i in 0..n {
            or[i] = (xr[i] - mu) * rs * g[i] + b[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    g: &[F],
    mean: &[F],
    rstd: &[F],
    n: usize,
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
) {
    let inv_n = sc::<F>(1.0 / n as f64);
    let mut dxhat = vec![F::zero(); n];
    for (r, ((xr, dr), dxr)) in x
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
        .enumerate()
    {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut s1 = F::zero();
        let mut s2 = F::zero();
        for i in 0..n {
            let xhat = (xr[i] - mu) * rs;
            dg[i] += dr[i] * xhat;
            db[i] += dr[i];
            dxhat[i] = dr[i] * g[i];
            s1 += dxhat[i];
            s2 += dxhat[i] * xhat;
        }
        s1 *= inv_n;
        s2 *= inv_n;
        for i in 0..n {
            let xhat = (xr[i] - mu) * rs;
            dxr[i] = rs * (dxhat[i] - s1 - xhat * s2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let inner = sc::<F>(GELU_C) * (x + sc::<F>(GELU_K) * x * x * x);
    sc::<F>(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = sc::<F>(GELU_C);
    let k = sc::<F>(GELU_K);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = sc::<F>(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + sc::<F>(3.0) * k * x * x)
}

/// Numerically stable log-softmax in `f64`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

// ---------------------------------------------------------------------------

struct LayerCache<F> {
    x_in: Vec<F>,
    a: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    /// `heads × T × T`, zero above the diagonal.
    probs: Vec<F>,
    att: Vec<F>,
    x_mid: Vec<F>,
    b: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    h1: Vec<F>,
    g: Vec<F>,
}

struct Activations<F> {
    t: usize,
    layers: Vec<LayerCache<F>>,
    x_final: Vec<F>,
    /// Input to the output head.
    y: Vec<F>,
    lnf_mean: Vec<F>,
    lnf_rstd: Vec<F>,
}

/// Model inputs for one stream: ids, frame indices and the clap vector.
struct Inputs<'a, F> {
    ids: &'a [u32],
    frames: Vec<usize>,
    clap: Option<Vec<F>>,
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    config: ModelConfig,
    layout: VocabLayout,
    variant: Variant,
    clap_dim: usize,
    seed: u64,
    step: u64,
    specs: Vec<TensorSpec>,
    off: Offsets,
    params: Vec<F>,
}

impl<F: Scalar> Transformer<F> {
    /// Fresh model with Gaussian weights, unit LayerNorm gains and a zero output head.
    pub fn new(config: ModelConfig, layout: VocabLayout, variant: Variant, clap_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if clap_dim == 0 {
            return Err(Error::config("clap_dim must be positive"));
        }
        let (specs, off) = build_specs(&config, layout.vocab_size(), clap_dim);
        let total = specs.iter().map(TensorSpec::len).sum();
        let mut params = vec![F::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let resid_scale = 1.0 / (2.0 * config.depth.max(1) as f64).sqrt();
        for spec in &specs {
            let name = spec.name.as_str();
            let range = spec.range();
            if name.ends_with(".gain") {
                params[range].iter_mut().for_each(|p| *p = F::one());
            } else if name.ends_with(".bias") || name.starts_with("head.") {
                // zero
            } else {
                let scale = if name.ends_with("attn.out.weight") || name.ends_with("mlp.fc2.weight") {
                    resid_scale
                } else {
                    1.0
                };
                for p in &mut params[range] {
                    *p = sc(normal.sample(&mut rng) * scale);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            variant,
            clap_dim,
            seed,
            step: 0,
            specs,
            off,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn clap_dim(&self) -> usize {
        self.clap_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn vocab_size(&self) -> usize {
        self.layout.vocab_size()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let range = self.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.params[range])
    }

    /// Same model in another float type.
    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            variant: self.variant,
            clap_dim: self.clap_dim,
            seed: self.seed,
            step: self.step,
            specs: self.specs.clone(),
            off: self.off.clone(),
            params: self
                .params
                .iter()
                .map(|p| sc::<G>(p.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    fn p(&self, off: usize, len: usize) -> &[F] {
        &self.params[off..off + len]
    }

    fn clap_vector(&self, clap: Option<&Embedding>) -> Result<Option<Vec<F>>> {
        match clap {
            None => Ok(None),
            Some(e) => {
                e.check_dim(self.clap_dim)?;
                let n = e.normalized()?;
                Ok(Some(n.values().iter().map(|&v| sc(v)).collect()))
            }
        }
    }

    fn inputs<'a>(&self, ids: &'a [u32], clap: Option<&Embedding>) -> Result<Inputs<'a, F>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token stream is empty".into()));
        }
        if ids.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                context: self.config.context,
            });
        }
        let vocab = self.vocab_size();
        let mut tracker = FrameTracker::new(self.config.tokens_per_frame, self.config.max_frames);
        let mut frames = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: id as usize,
                    size: vocab,
                });
            }
            frames.push(tracker.next(id, &self.layout));
        }
        let clap = self.clap_vector(clap)?;
        if clap.is_none() && ids.contains(&Special::Clap.id()) {
            return Err(Error::EmptyInput(
                "clap slot present without a condition embedding".into(),
            ));
        }
        Ok(Inputs { ids, frames, clap })
    }

    /// Input embedding of one token at position `pos`.
    fn embed_token(&self, id: u32, pos: usize, frame: usize, clap: Option<&[F]>, out: &mut [F]) {
        let w = self.config.width;
        let o = &self.off;
        let tok = self.p(o.tok + id as usize * w, w);
        let pe = self.p(o.pos + pos * w, w);
        let fe = self.p(o.frame + frame * w, w);
        for i in 0..w {
            out[i] = tok[i] + pe[i] + fe[i];
        }
        if id == Special::Clap.id() {
            if let Some(c) = clap {
                for (d, &cd) in c.iter().enumerate() {
                    axpy(cd, self.p(o.clap + d * w, w), out);
                }
            }
        }
    }

    fn forward(&self, inp: &Inputs<'_, F>) -> Activations<F> {
        let cfg = &self.config;
        let (t, w, hd, nh, hid) = (inp.ids.len(), cfg.width, cfg.head_dim(), cfg.heads, cfg.hidden());
        let scale = sc::<F>(1.0 / (hd as f64).sqrt());
        let mut x = vec![F::zero(); t * w];
        for (pos, (&id, &fr)) in inp.ids.iter().zip(&inp.frames).enumerate() {
            self.embed_token(id, pos, fr, inp.clap.as_deref(), &mut x[pos * w..(pos + 1) * w]);
        }
        let mut layers = Vec::with_capacity(cfg.depth);
        for bo in &self.off.blocks {
            let mut a = vec![F::zero(); t * w];
            let mut ln1_mean = vec![F::zero(); t];
            let mut ln1_rstd = vec![F::zero(); t];
            layer_norm(
                &x,
                self.p(bo.ln1_g, w),
                self.p(bo.ln1_b, w),
                w,
                &mut a,
                &mut ln1_mean,
                &mut ln1_rstd,
            );
            let mut qkv = vec![F::zero(); t * 3 * w];
            linear(
                &a,
                self.p(bo.qkv_w, w * 3 * w),
                self.p(bo.qkv_b, 3 * w),
                w,
                3 * w,
                &mut qkv,
            );
            let mut probs = vec![F::zero(); nh * t * t];
            let mut att = vec![F::zero(); t * w];
            let mut scores = vec![F::zero(); t];
            for h in 0..nh {
                let qo = h * hd;
                for i in 0..t {
                    let q = &qkv[i * 3 * w + qo..i * 3 * w + qo + hd];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let k = &qkv[j * 3 * w + w + qo..j * 3 * w + w + qo + hd];
                        scores[j] = dot(q, k) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = F::zero();
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let zr = z.recip();
                    let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                    let out = &mut att[i * w + qo..i * w + qo + hd];
                    for j in 0..=i {
                        let pj = scores[j] * zr;
                        prow[j] = pj;
                        axpy(pj, &qkv[j * 3 * w + 2 * w + qo..j * 3 * w + 2 * w + qo + hd], out);
                    }
                }
            }
            let mut proj = vec![F::zero(); t * w];
            linear(&att, self.p(bo.o_w, w * w), self.p(bo.o_b, w), w, w, &mut proj);
            let x_mid: Vec<F> = x.iter().zip(&proj).map(|(&u, &v)| u + v).collect();
            let mut b = vec![F::zero(); t * w];
            let mut ln2_mean = vec![F::zero(); t];
            let mut ln2_rstd = vec![F::zero(); t];
            layer_norm(
                &x_mid,
                self.p(bo.ln2_g, w),
                self.p(bo.ln2_b, w),
                w,
                &mut b,
                &mut ln2_mean,
                &mut ln2_rstd,
            );
            let mut h1 = vec![F::zero(); t * hid];
            linear(&b, self.p(bo.fc1_w, w * hid), self.p(bo.fc1_b, hid), w, hid, &mut h1);
            let g: Vec<F> = h1.iter().map(|&v| gelu(v)).collect();
            let mut m = vec![F::zero(); t * w];
            linear(&g, self.p(bo.fc2_w, hid * w), self.p(bo.fc2_b, w), hid, w, &mut m);
            let x_out: Vec<F> = x_mid.iter().zip(&m).map(|(&u, &v)| u + v).collect();
            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                a,
                ln1_mean,
                ln1_rstd,
                qkv,
                probs,
                att,
                x_mid,
                b,
                ln2_mean,
                ln2_rstd,
                h1,
                g,
            });
        }
        let mut lnf_mean = vec![F::zero(); t];
        let mut lnf_rstd = vec![F::zero(); t];
        let y = if cfg.final_norm {
            let mut y = vec![F::zero(); t * w];
            layer_norm(
                &x,
                self.p(self.off.lnf_g, w),
                self.p(self.off.lnf_b, w),
                w,
                &mut y,
                &mut lnf_mean,
                &mut lnf_rstd,
            );
            y
        } else {
            x.clone()
        };
        Activations {
            t,
            layers,
            x_final: x,
            y,
            lnf_mean,
            lnf_rstd,
        }
    }

    fn head_logits(&self, y_row: &[F], out: &mut [F]) {
        let (w, v) = (self.config.width, self.vocab_size());
        linear(
            y_row,
            self.p(self.off.head_w, w * v),
            self.p(self.off.head_b, v),
            w,
            v,
            out,
        );
    }

    /// Next-token logits after `prefix`.
    pub fn forward_logits(&self, prefix: &[u32], clap: Option<&Embedding>) -> Result<Vec<F>> {
        if prefix.len() >= self.config.context {
            return Err(Error::ContextOverflow {
                len: prefix.len(),
                context: self.config.context,
            });
        }
        let inp = self.inputs(prefix, clap)?;
        let act = self.forward(&inp);
        let w = self.config.width;
        let mut out = vec![F::zero(); self.vocab_size()];
        self.head_logits(&act.y[(act.t - 1) * w..act.t * w], &mut out);
        Ok(out)
    }

    /// Logits at every position of `ids` (row `i` predicts token `i + 1`).
    pub fn all_logits(&self, ids: &[u32], clap: Option<&Embedding>) -> Result<Vec<Vec<F>>> {
        let inp = self.inputs(ids, clap)?;
        let act = self.forward(&inp);
        let w = self.config.width;
        Ok((0..act.t)
            .map(|i| {
                let mut out = vec![F::zero(); self.vocab_size()];
                self.head_logits(&act.y[i * w..(i + 1) * w], &mut out);
                out
            })
            .collect())
    }

    /// Log-probability of each token `ids[i]`, `i ≥ 1`, given its prefix.
    pub fn token_logprobs(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        if seq.len() < 2 {
            return Ok(Vec::new());
        }
        let inp = self.inputs(&seq.ids[..seq.len() - 1], seq.clap.as_ref())?;
        let act = self.forward(&inp);
        let w = self.config.width;
        let mut logits = vec![F::zero(); self.vocab_size()];
        let mut out = Vec::with_capacity(act.t);
        for i in 0..act.t {
            self.head_logits(&act.y[i * w..(i + 1) * w], &mut logits);
            let lf: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let ls = log_softmax(&lf);
            out.push(ls[seq.ids[i + 1] as usize]);
        }
        Ok(out)
    }

    /// Mean masked cross-entropy over a batch, in nats per target token.
    pub fn loss(&self, batch: &[TokenSequence]) -> Result<f64> {
        let (sum, count) = self.accumulate(batch, None)?;
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Mean masked cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[TokenSequence]) -> Result<(f64, Vec<F>)> {
        let mut grad = vec![F::zero(); self.params.len()];
        let (sum, count) = self.accumulate(batch, Some(&mut grad))?;
        Ok((if count == 0 { 0.0 } else { sum / count as f64 }, grad))
    }

    fn accumulate(&self, batch: &[TokenSequence], mut grad: Option<&mut [F]>) -> Result<(f64, usize)> {
        let count: usize = batch
            .iter()
            .map(|s| s.loss_mask.iter().skip(1).filter(|m| **m).count())
            .sum();
        if count == 0 {
            return Ok((0.0, 0));
        }
        let inv = sc::<F>(1.0 / count as f64);
        let mut total = 0.0;
        for seq in batch {
            if seq.ids.len() != seq.loss_mask.len() {
                return Err(Error::SegmentViolation("ids and loss mask differ in length".into()));
            }
            total += self.sequence_pass(seq, inv, grad.as_deref_mut())?;
        }
        Ok((total, count))
    }

    /// Summed CE of one stream; adds `scale · ∂CE/∂θ` into `grad` when given.
    fn sequence_pass(&self, seq: &TokenSequence, scale: F, grad: Option<&mut [F]>) -> Result<f64> {
        let n = seq.len();
        if n < 2 || !seq.loss_mask[1..].iter().any(|m| *m) {
            return Ok(0.0);
        }
        let inp = self.inputs(&seq.ids[..n - 1], seq.clap.as_ref())?;
        let act = self.forward(&inp);
        let (w, v) = (self.config.width, self.vocab_size());
        let mut dy = grad.as_ref().map(|_| vec![F::zero(); act.t * w]);
        let mut logits = vec![F::zero(); v];
        let mut loss = 0.0;
        let mut dlogits_all: Vec<(usize, Vec<F>)> = Vec::new();
        for pos in 0..act.t {
            if !seq.loss_mask[pos + 1] {
                continue;
            }
            let target = seq.ids[pos + 1] as usize;
            self.head_logits(&act.y[pos * w..(pos + 1) * w], &mut logits);
            let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for l in &mut logits {
                *l = (*l - max).exp();
                z += *l;
            }
            let logp = (logits[target] / z).ln();
            loss -= logp.to_f64().unwrap_or(f64::NAN);
            if dy.is_some() {
                let zr = z.recip();
                let mut d: Vec<F> = logits.iter().map(|&e| e * zr * scale).collect();
                d[target] -= scale;
                dlogits_all.push((pos, d));
            }
        }
        if let (Some(grad), Some(dy)) = (grad, dy.as_mut()) {
            let hw = self.p(self.off.head_w, w * v);
            for (pos, d) in &dlogits_all {
                let yr = &act.y[pos * w..(pos + 1) * w];
                axpy(F::one(), d, &mut grad[self.off.head_b..self.off.head_b + v]);
                for i in 0..w {
                    axpy(
                        yr[i],
                        d,
                        &mut grad[self.off.head_w + i * v..self.off.head_w + (i + 1) * v],
                    );
                    dy[pos * w + i] = dot(d, &hw[i * v..(i + 1) * v]);
                }
            }
            self.backward(&inp, &act, dy, grad);
        }
        Ok(loss)
    }

    fn backward(&self, inp: &Inputs<'_, F>, act: &Activations<F>, dy: &[F], grad: &mut [F]) {
        let cfg = &self.config;
        let (t, w, hd, nh, hid) = (act.t, cfg.width, cfg.head_dim(), cfg.heads, cfg.hidden());
        let scale = sc::<F>(1.0 / (hd as f64).sqrt());
        let mut dx = vec![F::zero(); t * w];
        if cfg.final_norm {
            let (go, bo) = (self.off.lnf_g, self.off.lnf_b);
            let (dg, db) = split_two(grad, go, bo, w);
            layer_norm_backward(
                &act.x_final,
                dy,
                self.p(go, w),
                &act.lnf_mean,
                &act.lnf_rstd,
                w,
                &mut dx,
                dg,
                db,
            );
        } else {
            dx.copy_from_slice(dy);
        }
        let mut tmp_w = vec![F::zero(); t * w];
        let mut dh = vec![F::zero(); t * hid];
        for (bo, lc) in self.off.blocks.iter().zip(&act.layers).rev() {
            // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
            {
                let (dw, db) = split_two(grad, bo.fc2_w, bo.fc2_b, hid * w);
                linear_backward(
                    &lc.g,
                    &dx,
                    self.p(bo.fc2_w, hid * w),
                    hid,
                    w,
                    Some(&mut dh),
                    dw,
                    &mut db[..w],
                );
            }
            for (d, &h) in dh.iter_mut().zip(&lc.h1) {
                *d *= gelu_grad(h);
            }
            {
                let (dw, db) = split_two(grad, bo.fc1_w, bo.fc1_b, w * hid);
                linear_backward(
                    &lc.b,
                    &dh,
                    self.p(bo.fc1_w, w * hid),
                    w,
                    hid,
                    Some(&mut tmp_w),
                    dw,
                    &mut db[..hid],
                );
            }
            {
                let mut dxm = vec![F::zero(); t * w];
                let (dg, db) = split_two(grad, bo.ln2_g, bo.ln2_b, w);
                layer_norm_backward(
                    &lc.x_mid,
                    &tmp_w,
                    self.p(bo.ln2_g, w),
                    &lc.ln2_mean,
                    &lc.ln2_rstd,
                    w,
                    &mut dxm,
                    dg,
                    &mut db[..w],
                );
                for (a, b) in dx.iter_mut().zip(&dxm) {
                    *a += *b;
                }
            }
            // Attention branch: x_mid = x_in + out(attn(ln1(x_in))).
            let mut datt = vec![F::zero(); t * w];
            {
                let (dw, db) = split_two(grad, bo.o_w, bo.o_b, w * w);
                linear_backward(
                    &lc.att,
                    &dx,
                    self.p(bo.o_w, w * w),
                    w,
                    w,
                    Some(&mut datt),
                    dw,
                    &mut db[..w],
                );
            }
            let mut dqkv = vec![F::zero(); t * 3 * w];
            let mut dp = vec![F::zero(); t];
            for h in 0..nh {
                let qo = h * hd;
                for i in 0..t {
                    let prow = &lc.probs[(h * t + i) * t..(h * t + i) * t + t];
                    let dout = &datt[i * w + qo..i * w + qo + hd];
                    let mut sum = F::zero();
                    for j in 0..=i {
                        let vj = &lc.qkv[j * 3 * w + 2 * w + qo..j * 3 * w + 2 * w + qo + hd];
                        dp[j] = dot(dout, vj);
                        sum += prow[j] * dp[j];
                        axpy(
                            prow[j],
                            dout,
                            &mut dqkv[j * 3 * w + 2 * w + qo..j * 3 * w + 2 * w + qo + hd],
                        );
                    }
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - sum) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let (qi, kj) = (i * 3 * w + qo, j * 3 * w + w + qo);
                        for e in 0..hd {
                            let kv = lc.qkv[kj + e];
                            let qv = lc.qkv[qi + e];
                            dqkv[qi + e] += ds * kv;
                            dqkv[kj + e] += ds * qv;
                        }
                    }
                }
            }
            {
                let (dw, db) = split_two(grad, bo.qkv_w, bo.qkv_b, w * 3 * w);
                linear_backward(
                    &lc.a,
                    &dqkv,
                    self.p(bo.qkv_w, w * 3 * w),
                    w,
                    3 * w,
                    Some(&mut tmp_w),
                    dw,
                    &mut db[..3 * w],
                );
            }
            {
                let mut dxi = vec![F::zero(); t * w];
                let (dg, db) = split_two(grad, bo.ln1_g, bo.ln1_b, w);
                layer_norm_backward(
                    &lc.x_in,
                    &tmp_w,
                    self.p(bo.ln1_g, w),
                    &lc.ln1_mean,
                    &lc.ln1_rstd,
                    w,
                    &mut dxi,
                    dg,
                    &mut db[..w],
                );
                for (a, b) in dx.iter_mut().zip(&dxi) {
                    *a += *b;
                }
            }
        }
        let o = &self.off;
        for (pos, (&id, &fr)) in inp.ids.iter().zip(&inp.frames).enumerate() {
            let d = &dx[pos * w..(pos + 1) * w];
            axpy(
                F::one(),
                d,
                &mut grad[o.tok + id as usize * w..o.tok + (id as usize + 1) * w],
            );
            axpy(F::one(), d, &mut grad[o.pos + pos * w..o.pos + (pos + 1) * w]);
            axpy(F::one(), d, &mut grad[o.frame + fr * w..o.frame + (fr + 1) * w]);
            if id == Special::Clap.id() {
                if let Some(c) = &inp.clap {
                    for (k, &ck) in c.iter().enumerate() {
                        axpy(ck, d, &mut grad[o.clap + k * w..o.clap + (k + 1) * w]);
                    }
                }
            }
        }
    }

    /// Starts incremental decoding with a key/value cache.
    pub fn start_decode(&self, clap: Option<&Embedding>) -> Result<DecodeState<F>> {
        Ok(DecodeState {
            clap: self.clap_vector(clap)?,
            tracker: FrameTracker::new(self.config.tokens_per_frame, self.config.max_frames),
            keys: vec![Vec::new(); self.config.depth],
            values: vec![Vec::new(); self.config.depth],
            ids: Vec::new(),
        })
    }

    // -----------------------------------------------------------------------
    // Checkpoints.

    /// Writes `MCOTCKP1`, a length-prefixed JSON header and the tensors as little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let header = CheckpointHeader {
            layout_hash: self.layout.hash(),
            layout: self.layout.clone(),
            variant: self.variant,
            uses_cot: self.variant.uses_cot(),
            config: self.config.clone(),
            clap_dim: self.clap_dim,
            seed: self.seed,
            step: self.step,
            tensors: self.specs.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            buf.extend_from_slice(&(p.to_f64().unwrap_or(f64::NAN) as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("{} is not a model checkpoint", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::format("truncated checkpoint header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.layout.hash() != header.layout_hash {
            return Err(Error::format("checkpoint layout hash does not match its layout"));
        }
        let mut model = Self::new(
            header.config,
            header.layout,
            header.variant,
            header.clap_dim,
            header.seed,
        )?;
        let expect: Vec<(&str, &[usize])> = model
            .specs
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice()))
            .collect();
        let got: Vec<(&str, &[usize])> = header
            .tensors
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice()))
            .collect();
        if expect != got {
            return Err(Error::format("checkpoint tensor list does not match its config"));
        }
        let data = &bytes[16 + hlen..];
        if data.len() != 4 * model.params.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} bytes of tensors, expected {}",
                data.len(),
                4 * model.params.len()
            )));
        }
        for (p, chunk) in model.params.iter_mut().zip(data.chunks_exact(4)) {
            *p = sc(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        model.step = header.step;
        Ok(model)
    }
}

/// Two disjoint mutable views into the gradient buffer: `len` at `a` and the rest from `b`.
fn split_two<F>(grad: &mut [F], a: usize, b: usize, len: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], hi)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MCOTCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    layout_hash: String,
    layout: VocabLayout,
    variant: Variant,
    uses_cot: bool,
    config: ModelConfig,
    clap_dim: usize,
    seed: u64,
    step: u64,
    tensors: Vec<TensorSpec>,
}

/// Key/value cache for one decoding stream.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    clap: Option<Vec<F>>,
    tracker: FrameTracker,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    ids: Vec<u32>,
}

impl<F: Scalar> DecodeState<F> {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `id` and returns the logits for the token after it.
    pub fn feed(&mut self, model: &Transformer<F>, id: u32) -> Result<Vec<F>> {
        let cfg = &model.config;
        let pos = self.ids.len();
        if pos >= cfg.context {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                context: cfg.context,
            });
        }
        if id as usize >= model.vocab_size() {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: id as usize,
                size: model.vocab_size(),
            });
        }
        if id == Special::Clap.id() && self.clap.is_none() {
            return Err(Error::EmptyInput(
                "clap slot present without a condition embedding".into(),
            ));
        }
        let (w, hd, nh, hid) = (cfg.width, cfg.head_dim(), cfg.heads, cfg.hidden());
        let scale = sc::<F>(1.0 / (hd as f64).sqrt());
        let frame = self.tracker.next(id, &model.layout);
        let mut x = vec![F::zero(); w];
        model.embed_token(id, pos, frame, self.clap.as_deref(), &mut x);
        let mut a = vec![F::zero(); w];
        let (mut m1, mut r1) = ([F::zero()], [F::zero()]);
        let mut qkv = vec![F::zero(); 3 * w];
        let mut att = vec![F::zero(); w];
        let mut proj = vec![F::zero(); w];
        let mut h1 = vec![F::zero(); hid];
        let mut scores = vec![F::zero(); pos + 1];
        for (l, bo) in model.off.blocks.iter().enumerate() {
            layer_norm(
                &x,
                model.p(bo.ln1_g, w),
                model.p(bo.ln1_b, w),
                w,
                &mut a,
                &mut m1,
                &mut r1,
            );
            linear(
                &a,
                model.p(bo.qkv_w, w * 3 * w),
                model.p(bo.qkv_b, 3 * w),
                w,
                3 * w,
                &mut qkv,
            );
            self.keys[l].extend_from_slice(&qkv[w..2 * w]);
            self.values[l].extend_from_slice(&qkv[2 * w..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            att.iter_mut().for_each(|v| *v = F::zero());
            for h in 0..nh {
                let qo = h * hd;
                let q = &qkv[qo..qo + hd];
                let mut max = F::neg_infinity();
                for j in 0..=pos {
                    scores[j] = dot(q, &keys[j * w + qo..j * w + qo + hd]) * scale;
                    max = max.max(scores[j]);
                }
                let mut z = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let zr = z.recip();
                for j in 0..=pos {
                    axpy(
                        scores[j] * zr,
                        &values[j * w + qo..j * w + qo + hd],
                        &mut att[qo..qo + hd],
                    );
                }
            }
            linear(&att, model.p(bo.o_w, w * w), model.p(bo.o_b, w), w, w, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }
            layer_norm(
                &x,
                model.p(bo.ln2_g, w),
                model.p(bo.ln2_b, w),
                w,
                &mut a,
                &mut m1,
                &mut r1,
            );
            linear(&a, model.p(bo.fc1_w, w * hid), model.p(bo.fc1_b, hid), w, hid, &mut h1);
            h1.iter_mut().for_each(|v| *v = gelu(*v));
            linear(&h1, model.p(bo.fc2_w, hid * w), model.p(bo.fc2_b, w), hid, w, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += *pi;
            }
        }
        let y = if cfg.final_norm {
            let mut y = vec![F::zero(); w];
            layer_norm(
                &x,
                model.p(model.off.lnf_g, w),
                model.p(model.off.lnf_b, w),
                w,
                &mut y,
                &mut m1,
                &mut r1,
            );
            y
        } else {
            x
        };
        self.ids.push(id);
        let mut out = vec![F::zero(); model.vocab_size()];
        model.head_logits(&y, &mut out);
        Ok(out)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Worst parameter index with its analytic and numeric derivatives.
    pub worst: Option<(usize, f64, f64)>,
}

/// Relative error floor so parameters with vanishing gradients do not divide by zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

/// Compares the analytic gradient of the masked CE with central differences
/// on `samples` parameters drawn without replacement.
pub fn gradient_check(
    model: &Transformer<f64>,
    batch: &[TokenSequence],
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if model.num_params() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::config(format!(
            "gradient check wants at most {GRAD_CHECK_MAX_PARAMS} parameters, model has {}",
            model.num_params()
        )));
    }
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let (_, grad) = model.loss_and_grad(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.num_params();
    let picks = rand::seq::index::sample(&mut rng, n, samples.min(n));
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for idx in picks.iter() {
        let orig = probe.params[idx];
        probe.params[idx] = orig + h;
        let up = probe.loss(batch)?;
        probe.params[idx] = orig - h;
        let down = probe.loss(batch)?;
        probe.params[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[idx];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Fills every parameter with small Gaussian noise, including the output head.
pub fn randomize_all<F: Scalar>(model: &mut Transformer<F>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    for p in model.params.iter_mut() {
        *p += sc(normal.sample(&mut rng));
    }
}
