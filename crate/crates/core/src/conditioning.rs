//! Condition prefix: embedding slot, tag tokens and lyric tokens.
//!
//! At training time the embedding comes from a random audio window of the
//! song and the tags from [`mir_stub`]; at inference time both come from the
//! prompt text, with tags picked by cosine threshold.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Embedding, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::synthetic::{mir_stub, SyntheticSong};

/// Default cosine threshold for inference-time tag selection.
pub const DEFAULT_DELTA: f64 = 0.5;

const SYNTHETIC_WORDS: [&str; 24] = [
    "la", "na", "oh", "yeah", "love", "night", "baby", "heart", "fire", "dream", "sky", "rain", "dance", "home", "run",
    "light", "stay", "gone", "shine", "wild", "slow", "burn", "high", "low",
];

/// Word-level lexicon over lowercase ASCII letters; words are separated by single spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    words: Vec<String>,
}

impl Lexicon {
    pub fn new(words: Vec<String>) -> Result<Self> {
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::config("lexicon words must be nonempty"));
            }
            if let Some(c) = w.chars().find(|c| !c.is_ascii_lowercase()) {
                return Err(Error::OutOfVocabularyChar(c));
            }
            if words[..i].contains(w) {
                return Err(Error::config(format!("duplicate lexicon word {w:?}")));
            }
        }
        Ok(Self { words })
    }

    /// The lexicon synthetic lyrics are drawn from.
    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_WORDS.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if let Some(c) = text.chars().find(|c| !(c.is_ascii_lowercase() || *c == ' ')) {
            return Err(Error::OutOfVocabularyChar(c));
        }
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ')
            .map(|w| {
                self.words
                    .iter()
                    .position(|x| x == w)
                    .map(|p| p as u32)
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.words
                    .get(id as usize)
                    .map(String::as_str)
                    .ok_or(Error::OutOfRange {
                        what: "lexicon",
                        index: id as usize,
                        size: self.words.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// Finite set of tags with their text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagUniverse {
    tags: Vec<(String, Embedding)>,
}

impl TagUniverse {
    pub fn new<P: EmbeddingProvider + ?Sized>(provider: &P, names: &[&str]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyInput("tag universe is empty".into()));
        }
        let mut tags: Vec<(String, Embedding)> = Vec::with_capacity(names.len());
        for name in names {
            if tags.iter().any(|(t, _)| t == name) {
                return Err(Error::config(format!("duplicate tag {name:?}")));
            }
            let emb = provider.embed_text(name)?;
            emb.check_dim(provider.dim())?;
            tags.push((name.to_string(), emb));
        }
        Ok(Self { tags })
    }

    /// Reads one tag per line; blank lines are ignored.
    pub fn load<P: EmbeddingProvider + ?Sized>(path: &Path, provider: &P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(provider, &names)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(|(n, _)| n.as_str())
    }

    pub fn name(&self, i: usize) -> &str {
        &self.tags[i].0
    }

    pub fn embedding(&self, i: usize) -> &Embedding {
        &self.tags[i].1
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|(n, _)| n == tag)
    }
}

/// Every tag whose cosine similarity with the prompt exceeds `delta`, in universe order.
pub fn select_tags(prompt: &Embedding, universe: &TagUniverse, delta: f64) -> Result<Vec<String>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let mut out = Vec::new();
    for (name, emb) in &universe.tags {
        if cosine_similarity(prompt, emb)? > delta {
            out.push(name.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub clap: Embedding,
    pub tags: Vec<String>,
    /// Lexicon-local word ids.
    pub lyrics: Vec<u32>,
    /// The unconditional variant: sequence assembly substitutes the null condition.
    pub dropped: bool,
}

impl ConditionBundle {
    pub fn as_dropped(&self) -> Self {
        Self {
            dropped: true,
            ..self.clone()
        }
    }
}

/// Training-time condition: a uniformly random window embedding, stub tags, song lyrics.
pub fn build_condition_train<R: Rng + ?Sized>(
    song: &SyntheticSong,
    lexicon: &Lexicon,
    rng: &mut R,
) -> Result<ConditionBundle> {
    if song.embeddings.is_empty() {
        return Err(Error::EmptyInput(format!("song {} has no windows", song.index)));
    }
    let pick = rng.random_range(0..song.embeddings.len());
    Ok(ConditionBundle {
        clap: song.embeddings[pick].clone(),
        tags: mir_stub(song),
        lyrics: lexicon.tokenize(&song.lyrics)?,
        dropped: false,
    })
}

/// Inference-time condition from prompt text.
pub fn build_condition_infer<P: EmbeddingProvider + ?Sized>(
    prompt: &str,
    provider: &P,
    universe: &TagUniverse,
    delta: f64,
    lyrics: Vec<u32>,
) -> Result<ConditionBundle> {
    if prompt.trim().is_empty() {
        return Err(Error::EmptyInput("prompt text is empty".into()));
    }
    let clap = provider.embed_text(prompt)?;
    let tags = select_tags(&clap, universe, delta)?;
    Ok(ConditionBundle {
        clap,
        tags,
        lyrics,
        dropped: false,
    })
}
