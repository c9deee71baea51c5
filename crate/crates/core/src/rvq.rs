//! Residual vector quantization of embeddings into coarse-to-fine code grids.
//!
//! Level `k` quantizes the residual left after subtracting the codewords
//! chosen at levels `1..k`. The cumulative sum of the chosen codewords is the
//! reconstruction.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_CODEBOOK_SIZE: usize = 64;

const MAGIC: &[u8; 8] = b"MCOTRVQ1";

/// M×L grid of codebook indices: frame `m`, level `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CotGrid {
    levels: usize,
    codes: Vec<u32>,
}

impl CotGrid {
    /// Builds a grid from per-frame rows; every row must have `levels` entries.
    pub fn from_rows(levels: usize, rows: &[Vec<u32>]) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("grid needs at least one level"));
        }
        let mut codes = Vec::with_capacity(rows.len() * levels);
        for (m, row) in rows.iter().enumerate() {
            if row.len() != levels {
                return Err(Error::MalformedCot(format!(
                    "ragged grid: frame {m} has {} levels, expected {levels}",
                    row.len()
                )));
            }
            codes.extend_from_slice(row);
        }
        Ok(Self { levels, codes })
    }

    pub fn empty(levels: usize) -> Self {
        Self {
            levels,
            codes: Vec::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.codes.len() / self.levels
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn row(&self, m: usize) -> &[u32] {
        &self.codes[m * self.levels..(m + 1) * self.levels]
    }

    pub fn get(&self, m: usize, k: usize) -> u32 {
        self.codes[m * self.levels + k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks_exact(self.levels)
    }

    pub fn to_rows(&self) -> Vec<Vec<u32>> {
        self.rows().map(<[u32]>::to_vec).collect()
    }

    /// Keeps the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> CotGrid {
        let frames = frames.min(self.frames());
        CotGrid {
            levels: self.levels,
            codes: self.codes[..frames * self.levels].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvqTrainConfig {
    pub epochs: usize,
    pub ema_decay: f64,
    pub batch_size: usize,
    /// Codes used at most this many times in an epoch are reseeded.
    pub dead_code_threshold: usize,
    /// Laplace smoothing for EMA cluster sizes.
    pub epsilon: f64,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            ema_decay: 0.99,
            batch_size: 256,
            dead_code_threshold: 0,
            epsilon: 1e-5,
        }
    }
}

impl RvqTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics from [`train_rvq`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqTrainReport {
    /// Mean squared reconstruction error after levels `1..=k`, on the training corpus.
    pub per_level_mse: Vec<f64>,
    /// Number of dead-code reseeds per level.
    pub reseeds: Vec<usize>,
}

/// `L` ordered codebooks of `Q` codewords over a `D`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    dim: usize,
    codebook_size: usize,
    /// One `Q×D` row-major table per level.
    codebooks: Vec<Vec<f32>>,
    seed: u64,
    corpus_hash: [u8; 32],
    trained: bool,
}

impl RvqModel {
    pub fn untrained(dim: usize, levels: usize, codebook_size: usize) -> Self {
        Self {
            dim,
            codebook_size,
            codebooks: vec![vec![0.0; dim * codebook_size]; levels],
            seed: 0,
            corpus_hash: [0; 32],
            trained: false,
        }
    }

    /// Wraps explicit codebooks (each `Q×D` row-major) as a trained model.
    pub fn from_codebooks(dim: usize, codebook_size: usize, codebooks: Vec<Vec<f32>>) -> Result<Self> {
        if codebooks.is_empty() {
            return Err(Error::config("at least one codebook required"));
        }
        for cb in &codebooks {
            if cb.len() != dim * codebook_size {
                return Err(Error::DimensionMismatch {
                    expected: dim * codebook_size,
                    got: cb.len(),
                });
            }
            if cb.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("non-finite codeword"));
            }
        }
        Ok(Self {
            dim,
            codebook_size,
            codebooks,
            seed: 0,
            corpus_hash: [0; 32],
            trained: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn corpus_hash(&self) -> &[u8; 32] {
        &self.corpus_hash
    }

    pub fn codeword(&self, level: usize, index: usize) -> &[f32] {
        &self.codebooks[level][index * self.dim..(index + 1) * self.dim]
    }

    pub fn codebook(&self, level: usize) -> &[f32] {
        &self.codebooks[level]
    }

    fn ensure_ready(&self, dim: usize) -> Result<()> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: dim,
            });
        }
        Ok(())
    }

    /// Coarse-to-fine code indices for one embedding. Ties go to the lowest index.
    pub fn quantize(&self, e: &Embedding) -> Result<Vec<u32>> {
        self.ensure_ready(e.dim())?;
        let mut residual = e.values().to_vec();
        let mut codes = Vec::with_capacity(self.levels());
        for level in 0..self.levels() {
            let (q, _) = nearest(&self.codebooks[level], self.dim, &residual);
            for (r, c) in residual.iter_mut().zip(self.codeword(level, q)) {
                *r -= f64::from(*c);
            }
            codes.push(q as u32);
        }
        Ok(codes)
    }

    /// Sum of the selected codeword at every level.
    pub fn dequantize(&self, codes: &[u32]) -> Result<Embedding> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if codes.len() != self.levels() {
            return Err(Error::DimensionMismatch {
                expected: self.levels(),
                got: codes.len(),
            });
        }
        let mut out = vec![0.0f64; self.dim];
        for (level, &q) in codes.iter().enumerate() {
            let q = q as usize;
            if q >= self.codebook_size {
                return Err(Error::OutOfRange {
                    what: "codebook",
                    index: q,
                    size: self.codebook_size,
                });
            }
            for (o, c) in out.iter_mut().zip(self.codeword(level, q)) {
                *o += f64::from(*c);
            }
        }
        Embedding::new(out)
    }

    /// Frame-wise [`quantize`](Self::quantize).
    pub fn quantize_sequence(&self, embeddings: &[Embedding]) -> Result<CotGrid> {
        let rows = embeddings
            .iter()
            .map(|e| self.quantize(e))
            .collect::<Result<Vec<_>>>()?;
        CotGrid::from_rows(self.levels(), &rows)
    }

    /// Dequantizes every frame of a grid.
    pub fn dequantize_grid(&self, grid: &CotGrid) -> Result<Vec<Embedding>> {
        grid.rows().map(|row| self.dequantize(row)).collect()
    }

    /// Mean squared reconstruction error after each prefix of levels.
    pub fn per_level_mse(&self, embeddings: &[Embedding]) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("no embeddings to evaluate".into()));
        }
        let mut totals = vec![0.0; self.levels()];
        for e in embeddings {
            let codes = self.quantize(e)?;
            let mut residual = e.values().to_vec();
            for (level, &q) in codes.iter().enumerate() {
                for (r, c) in residual.iter_mut().zip(self.codeword(level, q as usize)) {
                    *r -= f64::from(*c);
                }
                totals[level] += residual.iter().map(|r| r * r).sum::<f64>();
            }
        }
        Ok(totals.into_iter().map(|t| t / embeddings.len() as f64).collect())
    }

    pub fn save(&self, path: &Path, report: Option<&RvqTrainReport>) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::with_capacity(64 + self.levels() * self.codebook_size * self.dim * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.levels() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.codebook_size as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.corpus_hash);
        for cb in &self.codebooks {
            for v in cb {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;

        let meta = RvqMetadata {
            format: "MCOTRVQ1: magic[8] | D u32 | L u32 | Q u32 | seed u64 | corpus_sha256[32] | L*Q*D f32, all little-endian, row-major per level".into(),
            dim: self.dim,
            levels: self.levels(),
            codebook_size: self.codebook_size,
            seed: self.seed,
            corpus_hash: hex(&self.corpus_hash),
            per_level_mse: report.map(|r| r.per_level_mse.clone()),
            reseeds: report.map(|r| r.reseeds.clone()),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let header = 8 + 4 * 3 + 8 + 32;
        if bytes.len() < header || &bytes[..8] != MAGIC {
            return Err(Error::format(format!("{} is not an RVQ codebook file", path.display())));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let dim = u32_at(8);
        let levels = u32_at(12);
        let q = u32_at(16);
        let seed = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let mut corpus_hash = [0u8; 32];
        corpus_hash.copy_from_slice(&bytes[28..60]);
        let expected = header + levels * q * dim * 4;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "codebook file has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let codebooks = floats.chunks_exact(q * dim).map(<[f32]>::to_vec).collect();
        let mut model = Self::from_codebooks(dim, q, codebooks)?;
        model.seed = seed;
        model.corpus_hash = corpus_hash;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RvqMetadata {
    format: String,
    dim: usize,
    levels: usize,
    codebook_size: usize,
    seed: u64,
    corpus_hash: String,
    per_level_mse: Option<Vec<f64>>,
    reseeds: Option<Vec<usize>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the little-endian bytes of every embedding.
pub fn corpus_hash(embeddings: &[Embedding]) -> [u8; 32] {
    let mut h = Sha256::new();
    for e in embeddings {
        for v in e.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Index and squared distance of the nearest codeword; lowest index wins ties.
fn nearest(codebook: &[f32], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (q, cw) in codebook.chunks_exact(dim).enumerate() {
        let d: f64 = x
            .iter()
            .zip(cw)
            .map(|(a, &b)| {
                let t = a - f64::from(b);
                t * t
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    (best, best_d)
}

/// Fits `levels` codebooks of `codebook_size` codewords, level by level on the
/// residuals of the previous levels.
///
/// Each level starts from k-means++ and is refined with mini-batch
/// assignment plus exponential-moving-average centroid updates. Codes unused
/// for a whole epoch move to the highest-error residuals.
pub fn train_rvq(
    embeddings: &[Embedding],
    levels: usize,
    codebook_size: usize,
    config: &RvqTrainConfig,
    seed: u64,
) -> Result<(RvqModel, RvqTrainReport)> {
    config.validate()?;
    if levels == 0 {
        return Err(Error::config("levels must be at least 1"));
    }
    if codebook_size == 0 {
        return Err(Error::config("codebook_size must be at least 1"));
    }
    if embeddings.len() < codebook_size {
        return Err(Error::InsufficientSamples(format!(
            "{} training embeddings for a codebook of size {codebook_size}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dim();
    for e in embeddings {
        e.check_dim(dim)?;
    }

    let n = embeddings.len();
    let mut residuals: Vec<f64> = embeddings.iter().flat_map(|e| e.values().iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebooks = Vec::with_capacity(levels);
    let mut report = RvqTrainReport {
        per_level_mse: Vec::with_capacity(levels),
        reseeds: Vec::with_capacity(levels),
    };

    for _ in 0..levels {
        let (codebook, reseeds) = fit_level(&residuals, n, dim, codebook_size, config, &mut rng);
        let mut sq = 0.0;
        for r in residuals.chunks_exact_mut(dim) {
            let (q, _) = nearest(&codebook, dim, r);
            for (x, c) in r.iter_mut().zip(&codebook[q * dim..(q + 1) * dim]) {
                *x -= f64::from(*c);
            }
            sq += r.iter().map(|v| v * v).sum::<f64>();
        }
        report.per_level_mse.push(sq / n as f64);
        report.reseeds.push(reseeds);
        codebooks.push(codebook);
    }

    let mut model = RvqModel::from_codebooks(dim, codebook_size, codebooks)?;
    model.seed = seed;
    model.corpus_hash = corpus_hash(embeddings);
    Ok((model, report))
}

fn fit_level(
    data: &[f64],
    n: usize,
    dim: usize,
    q: usize,
    config: &RvqTrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, usize) {
    let mut centroids = kmeans_plus_plus(data, n, dim, q, rng);
    let mut cluster_size = vec![1.0f64; q];
    let mut embed_avg = centroids.clone();
    let decay = config.ema_decay;
    let mut order: Vec<usize> = (0..n).collect();
    let mut reseeds = 0;

    let mut counts = vec![0.0f64; q];
    let mut sums = vec![0.0f64; q * dim];
    let mut usage = vec![0usize; q];
    let mut assign_err = vec![0.0f64; n];
    let mut cb32 = to_f32(&centroids);

    for _ in 0..config.epochs {
        order.shuffle(rng);
        usage.iter_mut().for_each(|u| *u = 0);
        for batch in order.chunks(config.batch_size) {
            counts.iter_mut().for_each(|c| *c = 0.0);
            sums.iter_mut().for_each(|s| *s = 0.0);
            for &i in batch {
                let x = &data[i * dim..(i + 1) * dim];
                let (best, d) = nearest(&cb32, dim, x);
                assign_err[i] = d;
                usage[best] += 1;
                counts[best] += 1.0;
                for (s, v) in sums[best * dim..(best + 1) * dim].iter_mut().zip(x) {
                    *s += v;
                }
            }
            for c in 0..q {
                cluster_size[c] = decay * cluster_size[c] + (1.0 - decay) * counts[c];
            }
            for (a, s) in embed_avg.iter_mut().zip(&sums) {
                *a = decay * *a + (1.0 - decay) * s;
            }
            let total: f64 = cluster_size.iter().sum();
            for c in 0..q {
                let smoothed = (cluster_size[c] + config.epsilon) / (total + q as f64 * config.epsilon) * total;
                for j in 0..dim {
                    centroids[c * dim + j] = embed_avg[c * dim + j] / smoothed;
                }
            }
            cb32 = to_f32(&centroids);
        }

        let dead: Vec<usize> = (0..q).filter(|&c| usage[c] <= config.dead_code_threshold).collect();
        if !dead.is_empty() {
            reseeds += dead.len();
            let mut by_err: Vec<usize> = (0..n).collect();
            by_err.sort_by(|&a, &b| assign_err[b].total_cmp(&assign_err[a]).then(a.cmp(&b)));
            for (c, &i) in dead.iter().zip(&by_err) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
                embed_avg[c * dim..(c + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
                cluster_size[*c] = 1.0;
            }
            cb32 = to_f32(&centroids);
        }
    }

    dedupe_rows(&mut cb32, data, n, dim, q);
    (cb32, reseeds)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Replaces duplicate codewords with the residuals worst served by the
/// current codebook, so every table ends up with distinct rows.
fn dedupe_rows(cb: &mut [f32], data: &[f64], n: usize, dim: usize, q: usize) {
    let is_dup = |cb: &[f32], c: usize| (0..c).any(|o| cb[o * dim..(o + 1) * dim] == cb[c * dim..(c + 1) * dim]);
    if !(1..q).any(|c| is_dup(cb, c)) {
        return;
    }
    let mut errs: Vec<(f64, usize)> = (0..n)
        .map(|i| (nearest(cb, dim, &data[i * dim..(i + 1) * dim]).1, i))
        .collect();
    errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut candidates = errs.into_iter().map(|(_, i)| i);
    for c in 1..q {
        while is_dup(cb, c) {
            match candidates.next() {
                Some(i) => {
                    for j in 0..dim {
                        cb[c * dim + j] = data[i * dim + j] as f32;
                    }
                }
                None => {
                    // Degenerate corpus with fewer distinct points than codes.
                    cb[c * dim] += f32::EPSILON * (c as f32 + 1.0);
                }
            }
        }
    }
}

fn kmeans_plus_plus(data: &[f64], n: usize, dim: usize, q: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(q * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut min_d = vec![f64::INFINITY; n];
    for c in 1..q {
        let last = &centroids[(c - 1) * dim..c * dim];
        for i in 0..n {
            let d: f64 = data[i * dim..(i + 1) * dim]
                .iter()
                .zip(last)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in min_d.iter().enumerate() {
                acc += d;
                if acc >= target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(&data[pick * dim..(pick + 1) * dim]);
    }
    centroids
}
