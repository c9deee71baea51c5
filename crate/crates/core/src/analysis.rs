//! Structural analysis of generated CoT grids, Fréchet embedding distance,
//! correlation and copy-rate measurements.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, AnchorSet, Embedding};
use crate::error::{Error, Result};
use crate::rvq::{CotGrid, RvqModel};

/// Track volume below which an anchor is dropped for a song.
pub const DEFAULT_VOLUME_FLOOR: f64 = 1e-2;
pub const DEFAULT_COPY_NGRAM: usize = 8;

/// Frame-by-anchor cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTimeline {
    pub anchors: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SimilarityTimeline {
    pub fn frames(&self) -> usize {
        self.rows.len()
    }

    /// Heat-map CSV: `frame,<anchor>,<anchor>,…`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame");
        for a in &self.anchors {
            s.push(',');
            s.push_str(a);
        }
        s.push('\n');
        for (m, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{m}");
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn similarity_rows(embeddings: &[Embedding], anchors: &AnchorSet) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|e| anchors.iter().map(|(_, a)| cosine_similarity(e, a)).collect())
        .collect()
}

/// Row `m` holds the similarity of `dequantize(grid row m)` to each anchor.
pub fn anchor_similarity_timeline(grid: &CotGrid, rvq: &RvqModel, anchors: &AnchorSet) -> Result<SimilarityTimeline> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("grid has no frames".into()));
    }
    if anchors.dim() != rvq.dim() {
        return Err(Error::DimensionMismatch {
            expected: rvq.dim(),
            got: anchors.dim(),
        });
    }
    let embeddings = rvq.dequantize_grid(grid)?;
    Ok(SimilarityTimeline {
        anchors: anchors.names().map(str::to_string).collect(),
        rows: similarity_rows(&embeddings, anchors)?,
    })
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorCorrelation {
    pub anchor: String,
    /// Pearson r over all pooled frames; `None` when excluded or undefined.
    pub r: Option<f64>,
    pub n_samples: usize,
    pub songs_used: usize,
    pub songs_excluded: usize,
    /// Mean of per-song correlations over songs where r is defined.
    pub mean_song_r: Option<f64>,
}

impl AnchorCorrelation {
    pub fn excluded(&self) -> bool {
        self.r.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub anchors: Vec<AnchorCorrelation>,
    pub volume_floor: f64,
    pub songs: usize,
}

impl CorrelationReport {
    pub fn sample_count(&self) -> usize {
        self.anchors.iter().map(|a| a.n_samples).sum()
    }

    pub fn get(&self, anchor: &str) -> Option<&AnchorCorrelation> {
        self.anchors.iter().find(|a| a.anchor == anchor)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("anchor,r,n_samples,excluded,mean_song_r\n");
        for a in &self.anchors {
            let r = a.r.map(|r| format!("{r:.6}")).unwrap_or_default();
            let ms = a.mean_song_r.map(|r| format!("{r:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{r},{},{},{ms}", a.anchor, a.n_samples, a.excluded());
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "structural correlation over {} songs (volume floor {:e})\n",
            self.songs, self.volume_floor
        );
        for a in &self.anchors {
            match a.r {
                Some(r) => {
                    let _ = writeln!(
                        s,
                        "  {:<8} r = {r:+.3}  (n = {}, songs used {}, excluded {})",
                        a.anchor, a.n_samples, a.songs_used, a.songs_excluded
                    );
                }
                None => {
                    let _ = writeln!(s, "  {:<8} excluded", a.anchor);
                }
            }
        }
        s
    }
}

/// Pools (similarity, intensity) pairs per anchor over every song and frame.
///
/// A song contributes to an anchor only when its mean intensity for that
/// anchor reaches `volume_floor`. Intensity matrices are frame-by-anchor and
/// must align with the grids.
pub fn structural_correlation_report(
    songs: &[(CotGrid, Vec<Vec<f64>>)],
    rvq: &RvqModel,
    anchors: &AnchorSet,
    volume_floor: f64,
) -> Result<CorrelationReport> {
    let a_count = anchors.len();
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); a_count];
    let mut used = vec![0usize; a_count];
    let mut excluded = vec![0usize; a_count];
    let mut per_song: Vec<Vec<f64>> = vec![Vec::new(); a_count];

    for (grid, intensity) in songs {
        if grid.frames() != intensity.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.frames(),
                got: intensity.len(),
            });
        }
        if grid.is_empty() {
            continue;
        }
        if let Some(row) = intensity.iter().find(|r| r.len() != a_count) {
            return Err(Error::DimensionMismatch {
                expected: a_count,
                got: row.len(),
            });
        }
        let timeline = anchor_similarity_timeline(grid, rvq, anchors)?;
        for a in 0..a_count {
            let vol: Vec<f64> = intensity.iter().map(|r| r[a]).collect();
            let mean = vol.iter().sum::<f64>() / vol.len() as f64;
            if mean < volume_floor {
                excluded[a] += 1;
                continue;
            }
            used[a] += 1;
            let sims: Vec<f64> = timeline.rows.iter().map(|r| r[a]).collect();
            if let Ok(r) = pearson_r(&sims, &vol) {
                per_song[a].push(r);
            }
            pooled[a].0.extend(sims);
            pooled[a].1.extend(vol);
        }
    }

    let anchors_out = anchors
        .names()
        .enumerate()
        .map(|(a, name)| {
            let (x, y) = &pooled[a];
            AnchorCorrelation {
                anchor: name.to_string(),
                r: pearson_r(x, y).ok(),
                n_samples: x.len(),
                songs_used: used[a],
                songs_excluded: excluded[a],
                mean_song_r: (!per_song[a].is_empty())
                    .then(|| per_song[a].iter().sum::<f64>() / per_song[a].len() as f64),
            }
        })
        .collect();
    Ok(CorrelationReport {
        anchors: anchors_out,
        volume_floor,
        songs: songs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Full,
    Diagonal,
}

/// Mean and unbiased covariance of a set of embeddings.
pub fn gaussian_fit(set: &[Embedding]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "{} samples; need at least 2",
            set.len()
        )));
    }
    let d = set[0].dim();
    let n = set.len();
    let mut mean = DVector::<f64>::zeros(d);
    for e in set {
        e.check_dim(d)?;
        mean += DVector::from_column_slice(e.values());
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for e in set {
        let x = DVector::from_column_slice(e.values()) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits:
/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
///
/// The trace of the cross term is computed as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`,
/// which only needs symmetric eigendecompositions.
pub fn frechet_embedding_distance(set_a: &[Embedding], set_b: &[Embedding], mode: CovarianceMode) -> Result<f64> {
    let d = set_a.first().map(Embedding::dim).unwrap_or(0);
    let min = match mode {
        CovarianceMode::Full => d + 1,
        CovarianceMode::Diagonal => 2,
    };
    if set_a.len() < min || set_b.len() < min {
        return Err(Error::InsufficientSamples(format!(
            "{mode:?} covariance needs at least {min} samples per set, got {} and {}",
            set_a.len(),
            set_b.len()
        )));
    }
    let (ma, ca) = gaussian_fit(set_a)?;
    let (mb, cb) = gaussian_fit(set_b)?;
    if ma.len() != mb.len() {
        return Err(Error::DimensionMismatch {
            expected: ma.len(),
            got: mb.len(),
        });
    }
    let mean_term = (&ma - &mb).norm_squared();
    let trace_term = match mode {
        CovarianceMode::Diagonal => (0..d)
            .map(|i| {
                let (va, vb) = (ca[(i, i)], cb[(i, i)]);
                va + vb - 2.0 * (va * vb).max(0.0).sqrt()
            })
            .sum::<f64>(),
        CovarianceMode::Full => {
            let sa = sqrt_psd(&ca);
            let inner = &sa * &cb * &sa;
            let inner = (&inner + inner.transpose()) * 0.5;
            let cross: f64 = SymmetricEigen::new(inner)
                .eigenvalues
                .iter()
                .map(|v| v.max(0.0).sqrt())
                .sum();
            ca.trace() + cb.trace() - 2.0 * cross
        }
    };
    Ok((mean_term + trace_term).max(0.0))
}

/// Fraction of the generated `n`-grams that occur verbatim in the corpus.
/// A sequence shorter than `n` has no n-grams and scores 0.
pub fn ngram_copy_rate(generated: &[u32], corpus: &[Vec<u32>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    let index = NgramIndex::new(corpus, n);
    Ok(index.copy_rate(generated))
}

/// Hash set of every `n`-gram in a corpus, for repeated copy-rate queries.
pub struct NgramIndex<'a> {
    n: usize,
    grams: HashSet<&'a [u32]>,
}

impl<'a> NgramIndex<'a> {
    pub fn new(corpus: &'a [Vec<u32>], n: usize) -> Self {
        let grams = corpus.iter().flat_map(|s| s.windows(n.max(1))).collect();
        Self { n: n.max(1), grams }
    }

    pub fn copy_rate(&self, generated: &[u32]) -> f64 {
        let (hits, total) = self.counts(generated);
        if total == 0 {
            return 0.0;
        }
        hits as f64 / total as f64
    }

    /// Copied and total n-gram counts, for pooling over many sequences.
    pub fn counts(&self, generated: &[u32]) -> (usize, usize) {
        if generated.len() < self.n {
            return (0, 0);
        }
        let hits = generated.windows(self.n).filter(|g| self.grams.contains(g)).count();
        (hits, generated.len() + 1 - self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // covariance 4 over variances 5·5 (sums of squared deviations)
        assert!((pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            pearson_r(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_of_affine_map(x in prop::collection::vec(-10.0f64..10.0, 3..20), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let yn: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
            prop_assert!((pearson_r(&x, &y).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((pearson_r(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn frechet_nonnegative_and_symmetric(
            a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..12),
            b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..12),
        ) {
            let a: Vec<_> = a.iter().map(|v| emb(v)).collect();
            let b: Vec<_> = b.iter().map(|v| emb(v)).collect();
            for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
                let ab = frechet_embedding_distance(&a, &b, mode).unwrap();
                let ba = frechet_embedding_distance(&b, &a, mode).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let h = 1.0 / 2f64.sqrt();
        let a = vec![emb(&[-h]), emb(&[h])];
        let b = vec![emb(&[1.0 - h]), emb(&[1.0 + h])];
        for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
            assert!((frechet_embedding_distance(&a, &b, mode).unwrap() - 1.0).abs() < 1e-9);
            assert!(frechet_embedding_distance(&a, &a, mode).unwrap().abs() < 1e-9);
        }
        // 1-D variances 1 and 4, equal means: (1 - 2)^2 = 1
        let c = vec![emb(&[-2.0 * h]), emb(&[2.0 * h])];
        assert!((frechet_embedding_distance(&a, &c, CovarianceMode::Full).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_full_matches_diagonal_for_diagonal_covariances() {
        // axis-aligned point sets have diagonal sample covariances
        let a: Vec<_> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]]
            .iter()
            .map(|v| emb(v))
            .collect();
        let b: Vec<_> = [[3.0, 1.0], [1.0, 1.0], [2.0, 1.5], [2.0, 0.5]]
            .iter()
            .map(|v| emb(v))
            .collect();
        let full = frechet_embedding_distance(&a, &b, CovarianceMode::Full).unwrap();
        let diag = frechet_embedding_distance(&a, &b, CovarianceMode::Diagonal).unwrap();
        assert!((full - diag).abs() < 1e-9, "{full} vs {diag}");
    }

    #[test]
    fn frechet_sample_requirements() {
        let a: Vec<_> = (0..3).map(|i| emb(&[i as f64, 1.0, 2.0])).collect();
        assert!(matches!(
            frechet_embedding_distance(&a, &a, CovarianceMode::Full),
            Err(Error::InsufficientSamples(_))
        ));
        assert!(frechet_embedding_distance(&a, &a, CovarianceMode::Diagonal).is_ok());
        assert!(frechet_embedding_distance(&a[..1], &a, CovarianceMode::Diagonal).is_err());
    }

    #[test]
    fn copy_rate_examples() {
        let corpus = vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10], vec![20, 21, 22]];
        assert_eq!(ngram_copy_rate(&[3, 4, 5, 6], &corpus, 3).unwrap(), 1.0);
        assert_eq!(ngram_copy_rate(&[100, 101, 102, 103], &corpus, 2).unwrap(), 0.0);
        assert_eq!(ngram_copy_rate(&[1, 2, 99], &corpus, 2).unwrap(), 0.5);
        assert_eq!(ngram_copy_rate(&[1], &corpus, 2).unwrap(), 0.0);
        assert!(ngram_copy_rate(&[1], &corpus, 0).is_err());
    }

    fn axis_rvq() -> RvqModel {
        // level 1 holds the two axes, level 2 the zero vector and a small offset
        RvqModel::from_codebooks(2, 2, vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 0.1, 0.1]]).unwrap()
    }

    #[test]
    fn timeline_examples() {
        let rvq = axis_rvq();
        let anchors = AnchorSet::new(vec![("x".into(), emb(&[1.0, 0.0])), ("y".into(), emb(&[0.0, 1.0]))]).unwrap();
        let grid = CotGrid::from_rows(2, &[vec![0, 0], vec![1, 1]]).unwrap();
        let tl = anchor_similarity_timeline(&grid, &rvq, &anchors).unwrap();
        assert_eq!(tl.rows[0], vec![1.0, 0.0]);
        let d = rvq.dequantize(&[1, 1]).unwrap();
        assert!((tl.rows[1][0] - cosine_similarity(&d, &emb(&[1.0, 0.0])).unwrap()).abs() < 1e-15);
        let one = anchor_similarity_timeline(&grid.truncated(1), &rvq, &anchors).unwrap();
        assert_eq!(one.rows, vec![tl.rows[0].clone()]);
        // positive rescaling of the anchors leaves the timeline unchanged
        let scaled = AnchorSet::new(vec![("x".into(), emb(&[3.0, 0.0])), ("y".into(), emb(&[0.0, 0.5]))]).unwrap();
        assert_eq!(anchor_similarity_timeline(&grid, &rvq, &scaled).unwrap().rows, tl.rows);
        assert!(anchor_similarity_timeline(&CotGrid::empty(2), &rvq, &anchors).is_err());
        let wrong = AnchorSet::new(vec![("z".into(), emb(&[1.0, 0.0, 0.0]))]).unwrap();
        assert!(matches!(
            anchor_similarity_timeline(&grid, &rvq, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn correlation_report_identity_and_floor() {
        let rvq = RvqModel::from_codebooks(2, 4, vec![vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]]).unwrap();
        let anchors = AnchorSet::new(vec![("x".into(), emb(&[1.0, 0.0])), ("y".into(), emb(&[0.0, 1.0]))]).unwrap();
        let grid = CotGrid::from_rows(1, &[vec![0], vec![1], vec![2], vec![3]]).unwrap();
        let tl = anchor_similarity_timeline(&grid, &rvq, &anchors).unwrap();
        let report = structural_correlation_report(&[(grid.clone(), tl.rows.clone())], &rvq, &anchors, 1e-2).unwrap();
        for a in &report.anchors {
            assert!((a.r.unwrap() - 1.0).abs() < 1e-12);
        }
        // a silent y channel is excluded, not reported as zero
        let silent: Vec<Vec<f64>> = tl.rows.iter().map(|r| vec![r[0], 0.001]).collect();
        let report = structural_correlation_report(&[(grid, silent)], &rvq, &anchors, 1e-2).unwrap();
        assert!(report.get("x").unwrap().r.is_some());
        let y = report.get("y").unwrap();
        assert!(y.excluded());
        assert_eq!(y.songs_excluded, 1);
        assert_eq!(y.n_samples, 0);
        assert!(report.to_csv().contains("y,,0,true"));
    }
}
