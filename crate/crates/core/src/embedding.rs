//! Joint language-audio embedding space.
//!
//! Embeddings are stored unnormalized; normalization only happens inside
//! [`cosine_similarity`]. Residual quantization works in the raw space.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding dimension at desk scale.
pub const DEFAULT_DIM: usize = 32;

/// Default duration of one embedding window, in seconds.
pub const DEFAULT_WINDOW_SECONDS: f64 = 10.0;

/// A real vector in the joint embedding space with its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding has no entries".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("embedding entry {i} is not finite")));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }

    /// Unit-norm copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Embedding> {
        if self.is_zero() {
            return Err(Error::domain("cannot normalize the zero vector"));
        }
        Embedding::new(self.values.iter().map(|v| v / self.norm).collect())
    }

    pub fn scaled(&self, alpha: f64) -> Result<Embedding> {
        Embedding::new(self.values.iter().map(|v| v * alpha).collect())
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        self.check_dim(other.dim())?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
///
/// Uses unsquared norms. A squared-norm denominator would not be scale
/// invariant and is not a cosine.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.is_zero() || b.is_zero() {
        return Err(Error::domain("cosine similarity of a zero-norm vector"));
    }
    let dot = a.dot(b)?;
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// Number of embedding windows covering `duration_seconds`.
pub fn window_count(duration_seconds: f64, window_seconds: f64) -> usize {
    if duration_seconds <= 0.0 {
        return 0;
    }
    (duration_seconds / window_seconds).ceil() as usize
}

/// Abstraction over a contrastive language-audio encoder.
///
/// Implementations must be usable concurrently once constructed.
pub trait EmbeddingProvider: Send + Sync {
    /// Per-window feature stream the audio encoder consumes.
    type Signal: ?Sized;

    fn dim(&self) -> usize;

    fn window_seconds(&self) -> f64 {
        DEFAULT_WINDOW_SECONDS
    }

    fn embed_text(&self, text: &str) -> Result<Embedding>;

    /// One embedding per window, in temporal order.
    fn embed_audio_windows(&self, signal: &Self::Signal, total_windows: usize) -> Result<Vec<Embedding>>;
}

/// Named text anchors scored against musical thoughts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: Vec<(String, Embedding)>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<(String, Embedding)>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::EmptyInput("anchor set is empty".into()));
        }
        let mut seen = HashSet::new();
        let dim = anchors[0].1.dim();
        for (name, emb) in &anchors {
            if !seen.insert(name.as_str()) {
                return Err(Error::domain(format!("duplicate anchor name {name:?}")));
            }
            if emb.is_zero() {
                return Err(Error::domain(format!("anchor {name:?} has zero embedding")));
            }
            emb.check_dim(dim)?;
        }
        Ok(Self { anchors })
    }

    /// Embeds each name with the provider.
    pub fn from_names<P: EmbeddingProvider + ?Sized>(provider: &P, names: &[&str]) -> Result<Self> {
        let anchors = names
            .iter()
            .map(|n| Ok((n.to_string(), provider.embed_text(n)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(anchors)
    }

    /// Parses the anchor table format: one anchor per line, either
    /// `name<TAB>comma-separated floats` or a bare `name` which the provider
    /// embeds. Blank lines and `#` comments are skipped.
    pub fn parse_table<P: EmbeddingProvider + ?Sized>(text: &str, provider: &P) -> Result<Self> {
        let mut anchors = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (name, emb) = match line.split_once('\t') {
                Some((name, floats)) => {
                    let values = floats
                        .split(',')
                        .map(|f| {
                            f.trim()
                                .parse::<f64>()
                                .map_err(|e| Error::format(format!("anchor line {}: {e}", lineno + 1)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (name.trim().to_string(), Embedding::new(values)?)
                }
                None => {
                    let name = line.trim().to_string();
                    let emb = provider.embed_text(&name)?;
                    (name, emb)
                }
            };
            emb.check_dim(provider.dim())?;
            anchors.push((name, emb));
        }
        Self::new(anchors)
    }

    pub fn load<P: EmbeddingProvider + ?Sized>(path: &Path, provider: &P) -> Result<Self> {
        Self::parse_table(&std::fs::read_to_string(path)?, provider)
    }

    /// Renders every anchor with explicit coordinates.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, emb) in &self.anchors {
            let floats: Vec<String> = emb.values().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(name);
            out.push('\t');
            out.push_str(&floats.join(","));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].1.dim()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.anchors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.anchors.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn get(&self, name: &str) -> Option<&Embedding> {
        self.anchors.iter().find(|(n, _)| n == name).map(|(_, e)| e)
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
    fn cosine_examples() {
        let v = emb(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&emb(&[1.0, 1.0]), &emb(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        let z = Embedding::zeros(2);
        assert!(matches!(
            cosine_similarity(&z, &emb(&[1.0, 0.0])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&emb(&[1.0]), &emb(&[1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(30.0, 10.0), 3);
        assert_eq!(window_count(10.0, 10.0), 1);
        assert_eq!(window_count(25.0, 10.0), 3);
        assert_eq!(window_count(0.0, 10.0), 0);
    }

    #[test]
    fn anchor_set_rejects_duplicates_and_zero() {
        let a = emb(&[1.0, 0.0]);
        assert!(AnchorSet::new(vec![("x".into(), a.clone()), ("x".into(), a.clone())]).is_err());
        assert!(AnchorSet::new(vec![("z".into(), Embedding::zeros(2))]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let a = emb(&a);
            let b = emb(&b);
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let c = cosine_similarity(&a, &b).unwrap();
            let cs = cosine_similarity(&a.scaled(alpha).unwrap(), &b.scaled(beta).unwrap()).unwrap();
            prop_assert!((c - cs).abs() < 1e-12);
            prop_assert!(c.abs() <= 1.0 + 1e-12);
            prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
