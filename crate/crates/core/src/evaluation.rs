//! End-to-end measurements on the synthetic corpus: stream construction,
//! held-out audio CE, structure adherence, structural correlation, copy
//! rates, Fréchet distances and the sampling ablation grid.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    frechet_embedding_distance, pearson_r, structural_correlation_report, CorrelationReport, CovarianceMode, NgramIndex,
};
use crate::conditioning::{build_condition_infer, build_condition_train, ConditionBundle};
use crate::decoding::{sample, sample_continuation, sample_with_reference, GeneratedSong, SamplingParams};
use crate::embedding::{cosine_similarity, Embedding};
use crate::error::{Error, Result};
use crate::model::{Scalar, Transformer, Variant};
use crate::rvq::{CotGrid, RvqModel};
use crate::sequence::{assemble_baseline_sequence, assemble_training_sequence, Segment, TokenSequence, VocabLayout};
use crate::synthetic::{derive_seed, Corpus, Intensity, SyntheticSong, NUM_CHANNELS};

/// Vocabulary for a corpus and a trained quantizer.
pub fn vocab_layout(corpus: &Corpus, rvq: &RvqModel) -> Result<VocabLayout> {
    VocabLayout::new(
        corpus.lexicon.len(),
        corpus.universe.names().map(str::to_string).collect(),
        rvq.levels(),
        rvq.codebook_size(),
        corpus.config.audio_vocab,
    )
}

/// Training streams, `draws` per song, each with its own random condition window.
pub fn training_streams<'a>(
    corpus: &Corpus,
    rvq: &RvqModel,
    layout: &VocabLayout,
    variant: Variant,
    songs: impl IntoIterator<Item = &'a SyntheticSong>,
    draws: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for song in songs {
        let grid = match variant {
            Variant::Musicot => Some(rvq.quantize_sequence(&song.embeddings)?),
            Variant::Baseline => None,
        };
        for d in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (song.index * draws + d) as u64));
            let cond = build_condition_train(song, &corpus.lexicon, &mut rng)?;
            out.push(match &grid {
                Some(g) => assemble_training_sequence(&cond, g, &song.audio_tokens, layout)?,
                None => assemble_baseline_sequence(&cond, &song.audio_tokens, layout)?,
            });
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of the audio-segment tokens, teacher forced.
pub fn heldout_audio_ce<F: Scalar>(model: &Transformer<F>, streams: &[TokenSequence]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in streams {
        let lp = model.token_logprobs(seq)?;
        for (i, l) in lp.iter().enumerate() {
            if seq.segments[i + 1] == Segment::Audio {
                sum -= l;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no audio tokens to score".into()));
    }
    Ok(sum / count as f64)
}

/// Text prompt describing a song: its tags, space separated.
pub fn prompt_for(song: &SyntheticSong) -> String {
    song.tags.join(" ")
}

/// Inference-time condition for a song's prompt, carrying the song's lyrics.
pub fn prompt_condition(corpus: &Corpus, song: &SyntheticSong, delta: f64) -> Result<ConditionBundle> {
    build_condition_infer(
        &prompt_for(song),
        &corpus.provider,
        &corpus.universe,
        delta,
        corpus.lexicon.tokenize(&song.lyrics)?,
    )
}

/// One generated song with what it was asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedSong {
    pub source: usize,
    pub prompt: String,
    /// Channel intensities implied by the prompt embedding.
    pub implied: Intensity,
    pub song: GeneratedSong,
}

/// Samples one song per source song's prompt; song `i` uses seed `derive_seed(params.seed, i)`.
pub fn generate_for_prompts<F: Scalar>(
    model: &Transformer<F>,
    corpus: &Corpus,
    sources: &[&SyntheticSong],
    params: &SamplingParams,
    delta: f64,
) -> Result<Vec<PromptedSong>> {
    par_map(sources.len(), |i| {
        let src = sources[i];
        let cond = prompt_condition(corpus, src, delta)?;
        let p = SamplingParams {
            seed: derive_seed(params.seed, i as u64),
            ..params.clone()
        };
        Ok(PromptedSong {
            source: src.index,
            prompt: prompt_for(src),
            implied: corpus.provider.implied_intensity(&cond.clap)?,
            song: sample(model, &cond, &p)?,
        })
    })
}

/// Maps `f` over `0..n` on scoped worker threads, one contiguous chunk per
/// thread. Results come back in index order, so output does not depend on
/// the thread count.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n);
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Vec<Result<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

/// Mean channel frequency of a token stream over all its tokens.
pub fn mean_channel_frequency(corpus: &Corpus, tokens: &[u32]) -> Intensity {
    let mut f = [0.0; NUM_CHANNELS];
    if tokens.is_empty() {
        return f;
    }
    for t in tokens {
        if let Some(c) = corpus.grammar.channel_of(*t) {
            f[c] += 1.0;
        }
    }
    f.iter_mut().for_each(|x| *x /= tokens.len() as f64);
    f
}

/// Pearson r between generated channel frequencies and prompt-implied
/// intensities, pooled over every (song, channel) pair.
pub fn structure_adherence(corpus: &Corpus, songs: &[PromptedSong]) -> Result<f64> {
    let mut x = Vec::with_capacity(songs.len() * NUM_CHANNELS);
    let mut y = Vec::with_capacity(songs.len() * NUM_CHANNELS);
    for s in songs {
        let f = mean_channel_frequency(corpus, &s.song.audio_tokens);
        x.extend_from_slice(&f);
        y.extend_from_slice(&s.implied);
    }
    pearson_r(&x, &y)
}

/// Pairs each generated grid with the per-window channel frequencies of the
/// audio it produced, truncated to their common frame count.
pub fn generated_structure(corpus: &Corpus, songs: &[GeneratedSong]) -> Vec<(CotGrid, Vec<Vec<f64>>)> {
    songs
        .iter()
        .filter(|s| !s.grid.is_empty() && !s.audio_tokens.is_empty())
        .map(|s| {
            let freq = corpus
                .grammar
                .channel_frequencies(&s.audio_tokens, corpus.config.tokens_per_window);
            let m = s.grid.frames().min(freq.len());
            (s.grid.truncated(m), freq[..m].iter().map(|r| r.to_vec()).collect())
        })
        .collect()
}

/// Structural correlation report of generated songs against their own audio.
pub fn generated_correlation(
    corpus: &Corpus,
    rvq: &RvqModel,
    songs: &[GeneratedSong],
    floor: f64,
) -> Result<CorrelationReport> {
    structural_correlation_report(&generated_structure(corpus, songs), rvq, &corpus.anchors(), floor)
}

/// Every dequantized CoT frame of the generated songs.
pub fn dequantized_frames(rvq: &RvqModel, songs: &[GeneratedSong]) -> Result<Vec<Embedding>> {
    let mut out = Vec::new();
    for s in songs {
        out.extend(rvq.dequantize_grid(&s.grid)?);
    }
    Ok(out)
}

/// Full covariance when both sets have more than `D` samples, else diagonal.
pub fn frechet_auto(a: &[Embedding], b: &[Embedding]) -> Result<(f64, CovarianceMode)> {
    let d = a.first().or(b.first()).map(Embedding::dim).unwrap_or(0);
    let mode = if a.len() > d && b.len() > d {
        CovarianceMode::Full
    } else {
        CovarianceMode::Diagonal
    };
    Ok((frechet_embedding_distance(a, b, mode)?, mode))
}

/// Mean framewise cosine similarity over the common prefix of two sequences.
pub fn mean_frame_cosine(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    let m = a.len().min(b.len());
    if m == 0 {
        return Err(Error::EmptyInput("no common frames".into()));
    }
    let mut s = 0.0;
    for i in 0..m {
        s += cosine_similarity(&a[i], &b[i])?;
    }
    Ok(s / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrial {
    pub reference: usize,
    pub grid_verbatim: bool,
    pub similarity_to_reference: f64,
    /// Similarities to the distractor songs.
    pub similarity_to_others: Vec<f64>,
    pub referencing_copy_rate: f64,
    pub continuation_copy_rate: f64,
}

impl ReferenceTrial {
    pub fn closer_to_reference(&self) -> bool {
        self.similarity_to_others
            .iter()
            .all(|s| self.similarity_to_reference > *s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencingReport {
    pub trials: Vec<ReferenceTrial>,
    /// Pooled over all trials: copied n-grams over generated n-grams.
    pub referencing_copy_rate: f64,
    pub continuation_copy_rate: f64,
    pub n: usize,
}

impl ReferencingReport {
    pub fn closer_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.closer_to_reference()).count() as f64 / self.trials.len() as f64
    }

    pub fn all_verbatim(&self) -> bool {
        self.trials.iter().all(|t| t.grid_verbatim)
    }
}

/// Reference trials: each reference's grid is injected, the generated CoT is
/// compared with the reference and with `distractors` other songs, and the
/// sampled audio's copy rate is compared with continuation from the
/// reference's first window of audio tokens.
#[allow(clippy::too_many_arguments)]
pub fn referencing_trials<F: Scalar>(
    model: &Transformer<F>,
    corpus: &Corpus,
    rvq: &RvqModel,
    references: &[&SyntheticSong],
    distractors: usize,
    n: usize,
    params: &SamplingParams,
    delta: f64,
) -> Result<ReferencingReport> {
    let train_audio: Vec<Vec<u32>> = corpus.train_songs().map(|s| s.audio_tokens.clone()).collect();
    let index = NgramIndex::new(&train_audio, n);
    let pool: Vec<&SyntheticSong> = corpus.songs.iter().collect();
    let results = par_map(references.len(), |i| {
        let src = references[i];
        let cond = prompt_condition(corpus, src, delta)?;
        let p = SamplingParams {
            seed: derive_seed(params.seed, i as u64),
            ..params.clone()
        };
        let injected = rvq.quantize_sequence(&src.embeddings)?;
        let with_ref = sample_with_reference(model, &cond, &src.embeddings, rvq, &p)?;
        let prompt = src.audio_window(0);
        let cont = sample_continuation(model, &cond, prompt, &p)?;

        let generated = rvq.dequantize_grid(&with_ref.grid)?;
        let similarity_to_reference = mean_frame_cosine(&generated, &src.embeddings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, 0xD15));
        let candidates: Vec<&SyntheticSong> = pool.iter().copied().filter(|s| s.index != src.index).collect();
        let similarity_to_others = rand::seq::IndexedRandom::choose_multiple(&candidates[..], &mut rng, distractors)
            .map(|o| mean_frame_cosine(&generated, &o.embeddings))
            .collect::<Result<Vec<_>>>()?;

        let (rh, rt) = index.counts(with_ref.sampled_audio());
        let (ch, ct) = index.counts(cont.sampled_audio());
        let trial = ReferenceTrial {
            reference: src.index,
            grid_verbatim: with_ref.grid == injected,
            similarity_to_reference,
            similarity_to_others,
            referencing_copy_rate: ratio(rh, rt),
            continuation_copy_rate: ratio(ch, ct),
        };
        Ok((trial, [rh, rt, ch, ct]))
    })?;
    let mut counts = [0usize; 4];
    let mut trials = Vec::with_capacity(results.len());
    for (trial, c) in results {
        for (acc, v) in counts.iter_mut().zip(c) {
            *acc += v;
        }
        trials.push(trial);
    }
    let [ref_hits, ref_total, cont_hits, cont_total] = counts;
    Ok(ReferencingReport {
        trials,
        referencing_copy_rate: ratio(ref_hits, ref_total),
        continuation_copy_rate: ratio(cont_hits, cont_total),
        n,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dual_temp: bool,
    pub ds_cfg: bool,
    pub params: SamplingParams,
    pub frechet_to_heldout: Option<f64>,
    pub structure_adherence: Option<f64>,
    pub mean_cot_frames: f64,
    pub mean_audio_tokens: f64,
    pub mean_logprob: f64,
}

/// Row labels in table order: full, without dual temperature, without
/// dual-scale guidance, without both.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("MusiCoT", true, true),
    ("w/o Dual-Temp.", false, true),
    ("w/o DS-CFG", true, false),
    ("w/o Dual-Temp. & DS-CFG", false, false),
];

/// Runs the four sampling configurations on the same prompts.
pub fn ablation_grid<F: Scalar>(
    model: &Transformer<F>,
    corpus: &Corpus,
    rvq: &RvqModel,
    sources: &[&SyntheticSong],
    heldout: &[Embedding],
    params: &SamplingParams,
    delta: f64,
) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&(label, dual_temp, ds_cfg)| {
            let p = params.ablation(dual_temp, ds_cfg);
            let songs = generate_for_prompts(model, corpus, sources, &p, delta)?;
            let generated: Vec<GeneratedSong> = songs.iter().map(|s| s.song.clone()).collect();
            let frames = dequantized_frames(rvq, &generated)?;
            let frechet = if frames.len() >= 2 && heldout.len() >= 2 {
                Some(frechet_auto(&frames, heldout)?.0)
            } else {
                None
            };
            let n = songs.len().max(1) as f64;
            let (mut lp, mut lp_n) = (0.0, 0usize);
            for s in &generated {
                for r in &s.trace {
                    if let Some(v) = r.logprob {
                        lp += v;
                        lp_n += 1;
                    }
                }
            }
            Ok(AblationRow {
                label: label.to_string(),
                dual_temp,
                ds_cfg,
                params: p,
                frechet_to_heldout: frechet,
                structure_adherence: structure_adherence(corpus, &songs).ok(),
                mean_cot_frames: generated.iter().map(|s| s.grid.frames() as f64).sum::<f64>() / n,
                mean_audio_tokens: generated.iter().map(|s| s.audio_tokens.len() as f64).sum::<f64>() / n,
                mean_logprob: ratio_f(lp, lp_n),
            })
        })
        .collect()
}

fn ratio_f(a: f64, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a / b as f64
    }
}

/// Plain-text table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s =
        String::from("row,frechet_to_heldout,structure_adherence,mean_cot_frames,mean_audio_tokens,mean_logprob\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{:.3},{:.4}",
            r.label,
            fmt(r.frechet_to_heldout),
            fmt(r.structure_adherence),
            r.mean_cot_frames,
            r.mean_audio_tokens,
            r.mean_logprob
        );
    }
    s
}
