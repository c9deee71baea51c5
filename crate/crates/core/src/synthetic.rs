//! Toy music corpus with known ground truth.
//!
//! Every song is a left-to-right sequence of sections. Each section type
//! carries a mean intensity profile over five instrument channels; per-window
//! intensities add smooth noise to a per-song scaled profile. Window
//! embeddings are `normalize(P·u + ε)` where the columns of `P` are the
//! anchor embeddings, so anchor similarity tracks intensity by construction.
//! Audio ids each belong to one channel, and a window's ids are drawn with
//! channel frequency proportional to that channel's intensity.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{Lexicon, TagUniverse};
use crate::embedding::{cosine_similarity, AnchorSet, Embedding, EmbeddingProvider, DEFAULT_WINDOW_SECONDS};
use crate::error::{Error, Result};

/// Instrument channels, in anchor order.
pub const CHANNELS: [&str; 5] = ["vocals", "bass", "drums", "guitar", "piano"];
pub const NUM_CHANNELS: usize = CHANNELS.len();
pub const VOCALS: usize = 0;

pub const GENRES: [&str; 5] = ["pop", "rock", "ballad", "ambient", "dance"];

/// Channel mean intensity above which the channel becomes a tag.
pub const TAG_INTENSITY_THRESHOLD: f64 = 0.4;
/// Vocals mean intensity above which a song carries lyrics.
pub const LYRICS_VOCALS_THRESHOLD: f64 = 0.2;

pub type Intensity = [f64; NUM_CHANNELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Intro,
    Verse,
    Chorus,
    Outro,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::Intro, Section::Verse, Section::Chorus, Section::Outro];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Mean intensity per channel (vocals, bass, drums, guitar, piano).
    pub fn profile(self) -> Intensity {
        match self {
            Section::Intro => [0.10, 0.30, 0.20, 0.40, 0.65],
            Section::Verse => [0.70, 0.50, 0.50, 0.40, 0.40],
            Section::Chorus => [0.90, 0.80, 0.90, 0.70, 0.30],
            Section::Outro => [0.20, 0.30, 0.10, 0.30, 0.60],
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Section::Intro => "intro",
            Section::Verse => "verse",
            Section::Chorus => "chorus",
            Section::Outro => "outro",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub songs: usize,
    pub min_windows: usize,
    pub max_windows: usize,
    /// Standard deviation of the per-dimension embedding noise.
    pub noise: f64,
    /// Standard deviation of the innovation in the smooth intensity noise.
    pub intensity_jitter: f64,
    pub instrumental_fraction: f64,
    pub tokens_per_window: usize,
    pub audio_vocab: usize,
    pub dim: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            songs: 200,
            min_windows: 6,
            max_windows: 18,
            noise: 0.05,
            intensity_jitter: 0.08,
            instrumental_fraction: 0.3,
            tokens_per_window: 20,
            audio_vocab: 256,
            dim: crate::embedding::DEFAULT_DIM,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_windows == 0 || self.min_windows > self.max_windows {
            return Err(Error::config(
                "window range must satisfy 1 <= min_windows <= max_windows",
            ));
        }
        if !(0.0..=1.0).contains(&self.instrumental_fraction) {
            return Err(Error::config("instrumental_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        if self.noise < 0.0 || self.intensity_jitter < 0.0 {
            return Err(Error::config("noise scales must be nonnegative"));
        }
        if self.tokens_per_window == 0 {
            return Err(Error::config("tokens_per_window must be positive"));
        }
        if self.audio_vocab < NUM_CHANNELS + 1 {
            return Err(Error::config(
                "audio_vocab must leave at least one id per channel plus silence",
            ));
        }
        if self.dim < NUM_CHANNELS {
            return Err(Error::config("embedding dim must be at least the channel count"));
        }
        Ok(())
    }
}

/// FNV-1a, used to derive stable seeds from strings and indices.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer over a (seed, stream) pair.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-window intensity rows plus the seed of the embedding noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSignal {
    pub intensities: Vec<Intensity>,
    pub noise_seed: u64,
}

/// Stand-in for a pretrained language-audio encoder.
///
/// `P` is a seeded random orthogonal `D×D` basis. Its first five columns are
/// the channel anchors, the next columns embed genre words, and any other
/// word gets a seeded Gaussian vector. Text embeds as the sum of its word
/// vectors.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    dim: usize,
    seed: u64,
    noise: f64,
    /// Column-major `D×D`.
    basis: Vec<f64>,
}

impl SyntheticProvider {
    pub fn new(dim: usize, seed: u64, noise: f64) -> Result<Self> {
        if dim < NUM_CHANNELS {
            return Err(Error::config("provider dim must be at least the channel count"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xC1A9));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| normal.sample(&mut rng));
        let qr = gauss.qr();
        let (q, r) = (qr.q(), qr.r());
        // Fix column signs so the basis does not depend on QR sign conventions.
        let mut basis = Vec::with_capacity(dim * dim);
        for j in 0..dim {
            let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            basis.extend((0..dim).map(|i| s * q[(i, j)]));
        }
        Ok(Self {
            dim,
            seed,
            noise,
            basis,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.basis[j * self.dim..(j + 1) * self.dim]
    }

    /// The channel anchor set ("vocals", "bass", ...), columns of `P`.
    pub fn anchors(&self) -> AnchorSet {
        let anchors = CHANNELS
            .iter()
            .enumerate()
            .map(|(a, name)| (name.to_string(), Embedding::new(self.column(a).to_vec()).unwrap()))
            .collect();
        AnchorSet::new(anchors).unwrap()
    }

    /// `P·u`, before noise and normalization.
    pub fn mix(&self, u: &Intensity) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (a, w) in u.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.column(a)) {
                *o += w * p;
            }
        }
        out
    }

    /// Least-squares channel intensities implied by an embedding: `Pᵀe`
    /// restricted to the anchor columns, after unit normalization.
    pub fn implied_intensity(&self, e: &Embedding) -> Result<Intensity> {
        e.check_dim(self.dim)?;
        let unit = e.normalized()?;
        let mut out = [0.0; NUM_CHANNELS];
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.column(a).iter().zip(unit.values()).map(|(p, x)| p * x).sum();
        }
        Ok(out)
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        if let Some(a) = CHANNELS.iter().position(|c| *c == word) {
            return self.column(a).to_vec();
        }
        if let Some(g) = GENRES.iter().position(|c| *c == word) {
            if NUM_CHANNELS + g < self.dim {
                return self.column(NUM_CHANNELS + g).to_vec();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, fnv1a(word.as_bytes())));
        let normal = Normal::new(0.0, 1.0 / (self.dim as f64).sqrt()).unwrap();
        (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Window embeddings for the given intensity rows, `normalize(P·u + ε)`.
    pub fn embed_intensities(&self, intensities: &[Intensity], noise_seed: u64) -> Result<Vec<Embedding>> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
        intensities
            .iter()
            .map(|u| {
                let mut v = self.mix(u);
                for x in v.iter_mut() {
                    *x += normal.sample(&mut rng);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::domain("window embedding is exactly zero"));
                }
                Embedding::new(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }
}

impl EmbeddingProvider for SyntheticProvider {
    type Signal = SyntheticSignal;

    fn dim(&self) -> usize {
        self.dim
    }

    fn window_seconds(&self) -> f64 {
        DEFAULT_WINDOW_SECONDS
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let mut acc = vec![0.0; self.dim];
        let mut words = 0;
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            for (a, w) in acc.iter_mut().zip(self.word_vector(&word)) {
                *a += w;
            }
            words += 1;
        }
        if words == 0 {
            return Err(Error::domain("cannot embed empty text"));
        }
        Embedding::new(acc)
    }

    fn embed_audio_windows(&self, signal: &SyntheticSignal, total_windows: usize) -> Result<Vec<Embedding>> {
        if total_windows == 0 {
            return Err(Error::EmptyInput("song has no windows".into()));
        }
        if total_windows > signal.intensities.len() {
            return Err(Error::OutOfRange {
                what: "signal windows",
                index: total_windows,
                size: signal.intensities.len(),
            });
        }
        self.embed_intensities(&signal.intensities[..total_windows], signal.noise_seed)
    }
}

/// Channel-owned audio ids with section-dependent within-channel preferences.
///
/// Channel `a` owns ids `[a·w, (a+1)·w)` with `w = (V-1) / 5`; the last id of
/// the block is reserved for silent windows.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioGrammar {
    vocab: usize,
    ids_per_channel: usize,
    /// Cumulative within-channel weights, indexed `[section][channel]`.
    cumulative: Vec<Vec<Vec<f64>>>,
}

impl AudioGrammar {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let ids_per_channel = (vocab - 1) / NUM_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA0D1));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let cumulative = Section::ALL
            .iter()
            .map(|_| {
                (0..NUM_CHANNELS)
                    .map(|_| {
                        let w: Vec<f64> = (0..ids_per_channel)
                            .map(|_| f64::exp(1.2 * normal.sample(&mut rng)))
                            .collect();
                        let total: f64 = w.iter().sum();
                        let mut acc = 0.0;
                        w.iter()
                            .map(|x| {
                                acc += x / total;
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            vocab,
            ids_per_channel,
            cumulative,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn silence_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    /// Owning channel of an audio id, `None` for silence and unused ids.
    pub fn channel_of(&self, id: u32) -> Option<usize> {
        let c = id as usize / self.ids_per_channel;
        (c < NUM_CHANNELS).then_some(c)
    }

    pub fn emit_window<R: Rng + ?Sized>(
        &self,
        section: Section,
        u: &Intensity,
        count: usize,
        rng: &mut R,
        out: &mut Vec<u32>,
    ) {
        let total: f64 = u.iter().sum();
        for _ in 0..count {
            if total <= 0.0 {
                out.push(self.silence_id());
                continue;
            }
            let mut t = rng.random::<f64>() * total;
            let mut channel = NUM_CHANNELS - 1;
            for (a, w) in u.iter().enumerate() {
                if *w > 0.0 && t < *w {
                    channel = a;
                    break;
                }
                t -= w;
            }
            // Guard against rounding pushing the draw onto a silent channel.
            if u[channel] <= 0.0 {
                channel = (0..NUM_CHANNELS).rev().find(|&a| u[a] > 0.0).unwrap();
            }
            let cum = &self.cumulative[section.index()][channel];
            let r = rng.random::<f64>();
            let local = cum.partition_point(|c| *c < r).min(self.ids_per_channel - 1);
            out.push((channel * self.ids_per_channel + local) as u32);
        }
    }

    /// Per-window channel frequencies of an audio token stream, `F` tokens per window.
    /// A trailing partial window is counted over its own length.
    pub fn channel_frequencies(&self, tokens: &[u32], tokens_per_window: usize) -> Vec<Intensity> {
        tokens
            .chunks(tokens_per_window)
            .map(|w| {
                let mut f = [0.0; NUM_CHANNELS];
                for id in w {
                    if let Some(c) = self.channel_of(*id) {
                        f[c] += 1.0;
                    }
                }
                for x in f.iter_mut() {
                    *x /= w.len() as f64;
                }
                f
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSong {
    pub index: usize,
    pub sections: Vec<Section>,
    pub intensities: Vec<Intensity>,
    #[serde(skip)]
    pub embeddings: Vec<Embedding>,
    pub tags: Vec<String>,
    pub lyrics: String,
    pub audio_tokens: Vec<u32>,
    pub tokens_per_window: usize,
    pub noise_seed: u64,
}

impl SyntheticSong {
    pub fn windows(&self) -> usize {
        self.intensities.len()
    }

    pub fn signal(&self) -> SyntheticSignal {
        SyntheticSignal {
            intensities: self.intensities.clone(),
            noise_seed: self.noise_seed,
        }
    }

    pub fn mean_intensity(&self) -> Intensity {
        let mut mean = [0.0; NUM_CHANNELS];
        if self.intensities.is_empty() {
            return mean;
        }
        for row in &self.intensities {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.intensities.len() as f64);
        mean
    }

    pub fn audio_window(&self, m: usize) -> &[u32] {
        &self.audio_tokens[m * self.tokens_per_window..(m + 1) * self.tokens_per_window]
    }
}

/// Genre from the section layout alone.
pub fn genre_of(sections: &[Section]) -> &'static str {
    if sections.is_empty() {
        return "rock";
    }
    let frac = |s: Section| sections.iter().filter(|x| **x == s).count() as f64 / sections.len() as f64;
    let edges = frac(Section::Intro) + frac(Section::Outro);
    let (chorus, verse) = (frac(Section::Chorus), frac(Section::Verse));
    if edges >= 0.3 {
        "ambient"
    } else if chorus >= 0.5 {
        "dance"
    } else if verse >= 0.5 {
        "ballad"
    } else if chorus > verse {
        "pop"
    } else {
        "rock"
    }
}

/// Tag extraction standing in for music-information-retrieval classifiers:
/// channels whose song mean intensity exceeds 0.4, then the section-derived genre.
pub fn mir_stub(song: &SyntheticSong) -> Vec<String> {
    let mean = song.mean_intensity();
    let mut tags: Vec<String> = CHANNELS
        .iter()
        .zip(mean)
        .filter(|(_, m)| *m > TAG_INTENSITY_THRESHOLD)
        .map(|(c, _)| c.to_string())
        .collect();
    tags.push(genre_of(&song.sections).to_string());
    tags
}

/// Tag universe: every channel tag then every genre tag.
pub fn tag_names() -> Vec<&'static str> {
    CHANNELS.iter().chain(GENRES.iter()).copied().collect()
}

/// Left-to-right section grammar: intro, alternating verse/chorus runs, outro.
fn draw_sections<R: Rng + ?Sized>(windows: usize, rng: &mut R) -> Vec<Section> {
    let intro = (1 + usize::from(windows >= 10)).min(windows);
    let outro = (1 + usize::from(windows >= 14)).min(windows - intro);
    let middle = windows - intro - outro;
    let mut out = vec![Section::Intro; intro];
    let mut current = if rng.random_bool(0.7) {
        Section::Verse
    } else {
        Section::Chorus
    };
    while out.len() < intro + middle {
        let run = rng.random_range(1..=4).min(intro + middle - out.len());
        out.extend(std::iter::repeat_n(current, run));
        current = if current == Section::Verse {
            Section::Chorus
        } else {
            Section::Verse
        };
    }
    out.extend(std::iter::repeat_n(Section::Outro, outro));
    out
}

/// A generated dataset with the provider, tag universe and audio grammar it was built with.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub songs: Vec<SyntheticSong>,
    pub provider: SyntheticProvider,
    pub universe: TagUniverse,
    pub grammar: AudioGrammar,
    pub lexicon: Lexicon,
}

impl Corpus {
    pub fn is_validation(&self, index: usize) -> bool {
        let h = derive_seed(derive_seed(self.config.seed, 0x5917), index as u64);
        (h % 1_000_000) as f64 / 1_000_000.0 < self.config.validation_fraction
    }

    pub fn train_songs(&self) -> impl Iterator<Item = &SyntheticSong> {
        self.songs.iter().filter(|s| !self.is_validation(s.index))
    }

    pub fn validation_songs(&self) -> impl Iterator<Item = &SyntheticSong> {
        self.songs.iter().filter(|s| self.is_validation(s.index))
    }

    pub fn all_embeddings(&self) -> Vec<Embedding> {
        self.songs.iter().flat_map(|s| s.embeddings.iter().cloned()).collect()
    }

    pub fn anchors(&self) -> AnchorSet {
        self.provider.anchors()
    }

    /// Writes `corpus.jsonl` (header line then one song per line) and the
    /// `embeddings.bin` sidecar into `dir`. Returns the content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let mut jsonl = Vec::new();
        let header = CorpusHeader {
            format: "musicot-corpus-v1".into(),
            provider_seed: self.provider.seed(),
            songs: self.songs.len(),
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut jsonl, &header)?;
        jsonl.push(b'\n');
        for song in &self.songs {
            serde_json::to_writer(&mut jsonl, song)?;
            jsonl.push(b'\n');
        }
        let mut bin = Vec::new();
        bin.extend_from_slice(EMB_MAGIC);
        bin.extend_from_slice(&(self.config.dim as u32).to_le_bytes());
        bin.extend_from_slice(&(self.songs.len() as u32).to_le_bytes());
        for song in &self.songs {
            bin.extend_from_slice(&(song.embeddings.len() as u32).to_le_bytes());
            for e in &song.embeddings {
                for v in e.values() {
                    bin.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(dir.join(CORPUS_FILE))?.write_all(&jsonl)?;
        fs::File::create(dir.join(EMBEDDINGS_FILE))?.write_all(&bin)?;
        Ok(content_hash(&jsonl, &bin))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = fs::File::open(dir.join(CORPUS_FILE))?;
        let mut lines = BufReader::new(file).lines();
        let header: CorpusHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::format("corpus file is empty")),
        };
        if header.format != "musicot-corpus-v1" {
            return Err(Error::format(format!("unknown corpus format {:?}", header.format)));
        }
        let mut songs = Vec::with_capacity(header.songs);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            songs.push(serde_json::from_str::<SyntheticSong>(&line)?);
        }
        if songs.len() != header.songs {
            return Err(Error::format(format!(
                "header declares {} songs, found {}",
                header.songs,
                songs.len()
            )));
        }
        let bin = fs::read(dir.join(EMBEDDINGS_FILE))?;
        if bin.len() < 16 || &bin[..8] != EMB_MAGIC {
            return Err(Error::format("bad embedding sidecar"));
        }
        let dim = u32::from_le_bytes(bin[8..12].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bin[12..16].try_into().unwrap()) as usize;
        if dim != header.config.dim || count != songs.len() {
            return Err(Error::format("embedding sidecar does not match corpus header"));
        }
        let mut off = 16;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bin
                .get(off..off + n)
                .ok_or_else(|| Error::format("truncated embedding sidecar"))?;
            off += n;
            Ok(s)
        };
        for song in songs.iter_mut() {
            let m = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut embs = Vec::with_capacity(m);
            for _ in 0..m {
                let raw = take(8 * dim)?;
                let values = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                embs.push(Embedding::new(values)?);
            }
            song.embeddings = embs;
        }
        let config = header.config;
        let provider = SyntheticProvider::new(config.dim, header.provider_seed, config.noise)?;
        let universe = TagUniverse::new(&provider, &tag_names())?;
        Ok(Corpus {
            grammar: AudioGrammar::new(config.audio_vocab, config.seed),
            lexicon: Lexicon::synthetic(),
            config,
            songs,
            provider,
            universe,
        })
    }

    /// Content hash of the on-disk files in `dir`.
    pub fn hash_on_disk(dir: &Path) -> Result<String> {
        let jsonl = fs::read(dir.join(CORPUS_FILE))?;
        let bin = fs::read(dir.join(EMBEDDINGS_FILE))?;
        Ok(content_hash(&jsonl, &bin))
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
const EMB_MAGIC: &[u8; 8] = b"MCOTEMB1";

fn content_hash(a: &[u8], b: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(a);
    h.update(b);
    crate::rvq::hex(&h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    provider_seed: u64,
    songs: usize,
    config: CorpusConfig,
}

/// Generates one song; deterministic in `(config, index)`.
pub fn generate_song(
    config: &CorpusConfig,
    index: usize,
    provider: &SyntheticProvider,
    grammar: &AudioGrammar,
    lexicon: &Lexicon,
) -> Result<SyntheticSong> {
    let song_seed = derive_seed(config.seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(song_seed);
    let windows = rng.random_range(config.min_windows..=config.max_windows);
    let sections = draw_sections(windows, &mut rng);

    let instrumental = rng.random_bool(config.instrumental_fraction);
    let mut active = [true; NUM_CHANNELS];
    let mut gain = [0.0; NUM_CHANNELS];
    for a in 0..NUM_CHANNELS {
        active[a] = if a == VOCALS {
            !instrumental
        } else {
            rng.random_bool(0.75)
        };
        gain[a] = rng.random_range(0.6..1.0);
    }

    let jitter = Normal::new(0.0, config.intensity_jitter).map_err(|e| Error::config(e.to_string()))?;
    let mut smooth = [0.0; NUM_CHANNELS];
    let intensities: Vec<Intensity> = sections
        .iter()
        .map(|s| {
            let profile = s.profile();
            let mut u = [0.0; NUM_CHANNELS];
            for a in 0..NUM_CHANNELS {
                smooth[a] = 0.7 * smooth[a] + jitter.sample(&mut rng);
                if active[a] {
                    u[a] = (gain[a] * profile[a] + smooth[a]).clamp(0.0, 1.0);
                }
            }
            u
        })
        .collect();

    let noise_seed = derive_seed(song_seed, 0xE5);
    let embeddings = provider.embed_intensities(&intensities, noise_seed)?;

    let mut audio_tokens = Vec::with_capacity(windows * config.tokens_per_window);
    for (s, u) in sections.iter().zip(&intensities) {
        grammar.emit_window(*s, u, config.tokens_per_window, &mut rng, &mut audio_tokens);
    }

    let mut song = SyntheticSong {
        index,
        sections,
        intensities,
        embeddings,
        tags: Vec::new(),
        lyrics: String::new(),
        audio_tokens,
        tokens_per_window: config.tokens_per_window,
        noise_seed,
    };
    song.tags = mir_stub(&song);
    if song.mean_intensity()[VOCALS] > LYRICS_VOCALS_THRESHOLD {
        let words = rng.random_range(3..=8);
        let lyric: Vec<&str> = (0..words)
            .map(|_| lexicon.word(rng.random_range(0..lexicon.len())))
            .collect();
        song.lyrics = lyric.join(" ");
    }
    Ok(song)
}

/// Builds the whole corpus with its provider, tag universe and audio grammar.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let provider = SyntheticProvider::new(config.dim, config.seed, config.noise)?;
    let grammar = AudioGrammar::new(config.audio_vocab, config.seed);
    let lexicon = Lexicon::synthetic();
    let universe = TagUniverse::new(&provider, &tag_names())?;
    let songs = (0..config.songs)
        .map(|i| generate_song(config, i, &provider, &grammar, &lexicon))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        songs,
        provider,
        universe,
        grammar,
        lexicon,
    })
}

/// Cosine similarity of each window embedding with each anchor.
pub fn anchor_similarities(embeddings: &[Embedding], anchors: &AnchorSet) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|e| anchors.iter().map(|(_, a)| cosine_similarity(e, a)).collect())
        .collect()
}
