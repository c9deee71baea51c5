//! Phase-aware sampling: dual temperature, dual-scale guidance, CoT legality
//! masking and music referencing.
//!
//! Each step runs a conditional and an unconditional stream and samples from
//! `softmax((λ·log p_c + (1 − λ)·log p_u) / T)`, with `(λ₁, T_cot)` between
//! `cot_bos` and `cot_eos` and `(λ₂, T_audio)` afterwards. In the audio phase
//! the unconditional stream is, by default, `bos null_cond cot_bos cot_eos
//! audio…`, so the CoT is marginalized along with the condition.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::model::{log_softmax, DecodeState, Scalar, Transformer};
use crate::rvq::{CotGrid, RvqModel};
use crate::sequence::{condition_prefix, flatten_cot, parse_generated, Segment, Special, TokenKind, VocabLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temp_cot: f64,
    pub temp_audio: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_k: Option<usize>,
    pub max_cot_tokens: usize,
    pub max_audio_tokens: usize,
    /// Keep the CoT prefix in the audio-phase unconditional stream.
    pub uncond_keeps_cot: bool,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temp_cot: 0.65,
            temp_audio: 0.75,
            lambda1: 2.3,
            lambda2: 1.3,
            top_k: None,
            max_cot_tokens: 72,
            max_audio_tokens: 360,
            uncond_keeps_cot: false,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("temp_cot", self.temp_cot), ("temp_audio", self.temp_audio)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !l.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::config("top_k must be positive when set"));
        }
        Ok(())
    }

    /// One row of the ablation grid. Without dual temperature both phases use
    /// `temp_audio`; without dual-scale guidance both phases use `lambda2`.
    pub fn ablation(&self, dual_temp: bool, ds_cfg: bool) -> Self {
        let mut p = self.clone();
        if !dual_temp {
            p.temp_cot = p.temp_audio;
        }
        if !ds_cfg {
            p.lambda1 = p.lambda2;
        }
        p
    }

    /// Greedy decoding without guidance.
    pub fn greedy(max_cot_tokens: usize, max_audio_tokens: usize) -> Self {
        Self {
            temp_cot: 1e-6,
            temp_audio: 1e-6,
            lambda1: 1.0,
            lambda2: 1.0,
            top_k: None,
            max_cot_tokens,
            max_audio_tokens,
            uncond_keeps_cot: false,
            seed: 0,
        }
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; scores.len()];
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `softmax(λ·logp_cond + (1 − λ)·logp_uncond)`.
pub fn cfg_mix(logp_cond: &[f64], logp_uncond: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Ok(softmax(&cfg_scores(logp_cond, logp_uncond, lambda)?))
}

fn cfg_scores(logp_cond: &[f64], logp_uncond: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if logp_cond.len() != logp_uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: logp_cond.len(),
            got: logp_uncond.len(),
        });
    }
    if !lambda.is_finite() || logp_cond.iter().chain(logp_uncond).any(|v| !v.is_finite()) {
        return Err(Error::domain("guidance inputs must be finite"));
    }
    Ok(logp_cond
        .iter()
        .zip(logp_uncond)
        .map(|(c, u)| lambda * c + (1.0 - lambda) * u)
        .collect())
}

/// `softmax(logits / T)`.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::domain(format!("temperature must be positive, got {t}")));
    }
    Ok(softmax(&logits.iter().map(|l| l / t).collect::<Vec<_>>()))
}

/// Keeps the `k` largest finite scores; ties at the cut keep the lower index.
fn top_k_filter(scores: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
    if order.len() <= k {
        return;
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in &order[k..] {
        scores[i] = f64::NEG_INFINITY;
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Which ids may come next while inside the CoT region.
#[derive(Debug, Clone)]
struct CotLegality {
    levels: usize,
    frame_cap: usize,
    level: usize,
    count: usize,
    frames: Option<usize>,
}

impl CotLegality {
    fn new(levels: usize, frame_cap: usize) -> Self {
        Self {
            levels,
            frame_cap,
            level: 0,
            count: 0,
            frames: None,
        }
    }

    /// Allowed CoT level for the next code, and whether `cot_eos` is allowed.
    fn options(&self) -> (Vec<usize>, bool) {
        match self.frames {
            None => {
                let mut lv = Vec::new();
                if self.count < self.frame_cap {
                    lv.push(0);
                }
                if self.count >= 1 && self.levels > 1 {
                    lv.push(1);
                }
                (lv, self.count >= 1 && self.levels == 1)
            }
            Some(m) if self.count < m => (vec![self.level], false),
            Some(_) if self.level + 1 < self.levels => (vec![self.level + 1], false),
            Some(_) => (Vec::new(), true),
        }
    }

    fn advance(&mut self, level: usize) {
        if level == self.level {
            self.count += 1;
        } else {
            if self.frames.is_none() {
                self.frames = Some(self.count);
            }
            self.level = level;
            self.count = 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position of the token in the conditional stream.
    pub position: usize,
    pub id: u32,
    pub segment: Segment,
    /// Log-probability under the sampling distribution; absent for forced tokens.
    pub logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSong {
    pub grid: CotGrid,
    pub audio_tokens: Vec<u32>,
    /// Full conditional stream including the condition prefix.
    pub ids: Vec<u32>,
    pub trace: Vec<StepRecord>,
    /// Number of leading audio tokens that were forced rather than sampled.
    pub forced_audio: usize,
}

impl GeneratedSong {
    /// Audio tokens the model actually sampled.
    pub fn sampled_audio(&self) -> &[u32] {
        &self.audio_tokens[self.forced_audio.min(self.audio_tokens.len())..]
    }

    /// Tab-separated `position, id, segment, logprob` with a summary header.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# cot {}x{} audio {} forced_audio {}",
            self.grid.frames(),
            self.grid.levels(),
            self.audio_tokens.len(),
            self.forced_audio
        );
        let _ = writeln!(s, "position\tid\tsegment\tlogprob");
        for r in &self.trace {
            let lp = r.logprob.map_or_else(|| "forced".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.position, r.id, r.segment.as_str(), lp);
        }
        s
    }
}

fn to_f64<F: Scalar>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

fn segment_of(id: u32, layout: &VocabLayout) -> Segment {
    match layout.kind(id) {
        Ok(TokenKind::Cot { .. }) => Segment::Cot,
        Ok(TokenKind::Audio(_)) => Segment::Audio,
        _ => Segment::Special,
    }
}

/// Two synchronized decoding streams.
struct Streams<'m, F: Scalar> {
    model: &'m Transformer<F>,
    cond: DecodeState<F>,
    uncond: DecodeState<F>,
    cond_logits: Vec<F>,
    uncond_logits: Vec<F>,
    trace: Vec<StepRecord>,
    prefix_len: usize,
    /// Both guidance scales are 1, so the unconditional stream is never read.
    skip_uncond: bool,
}

impl<'m, F: Scalar> Streams<'m, F> {
    fn new(model: &'m Transformer<F>, cond: &ConditionBundle, skip_uncond: bool) -> Result<Self> {
        let prefix = condition_prefix(cond, model.layout())?;
        let mut c = model.start_decode(prefix.clap.as_ref())?;
        let mut trace = Vec::new();
        let mut cond_logits = Vec::new();
        for (i, (&id, &seg)) in prefix.ids.iter().zip(&prefix.segments).enumerate() {
            cond_logits = c.feed(model, id)?;
            trace.push(StepRecord {
                position: i,
                id,
                segment: seg,
                logprob: None,
            });
        }
        let (uncond, uncond_logits) = Self::null_stream(model, &[])?;
        Ok(Self {
            model,
            cond: c,
            uncond,
            cond_logits,
            uncond_logits,
            trace,
            prefix_len: prefix.ids.len(),
            skip_uncond,
        })
    }

    fn null_stream(model: &Transformer<F>, tail: &[u32]) -> Result<(DecodeState<F>, Vec<F>)> {
        let mut u = model.start_decode(None::<&Embedding>)?;
        u.feed(model, Special::Bos.id())?;
        let mut logits = u.feed(model, Special::NullCond.id())?;
        for &id in tail {
            logits = u.feed(model, id)?;
        }
        Ok((u, logits))
    }

    fn restart_uncond(&mut self, tail: &[u32]) -> Result<()> {
        if self.skip_uncond {
            return Ok(());
        }
        let (u, l) = Self::null_stream(self.model, tail)?;
        self.uncond = u;
        self.uncond_logits = l;
        Ok(())
    }

    /// Appends `id` to both streams.
    fn push(&mut self, id: u32, logprob: Option<f64>, feed_uncond: bool) -> Result<()> {
        let layout = self.model.layout();
        self.trace.push(StepRecord {
            position: self.cond.len(),
            id,
            segment: segment_of(id, layout),
            logprob,
        });
        self.cond_logits = self.cond.feed(self.model, id)?;
        if feed_uncond && !self.skip_uncond {
            self.uncond_logits = self.uncond.feed(self.model, id)?;
        }
        Ok(())
    }

    /// Samples the next id among `allowed` with guidance scale `lambda` and temperature `t`.
    fn choose<R: Rng + ?Sized>(
        &self,
        allowed: &[bool],
        lambda: f64,
        t: f64,
        top_k: Option<usize>,
        rng: &mut R,
    ) -> Result<(u32, f64)> {
        let lc = log_softmax(&to_f64(&self.cond_logits));
        let mut scores = if lambda == 1.0 {
            lc
        } else {
            cfg_scores(&lc, &log_softmax(&to_f64(&self.uncond_logits)), lambda)?
        };
        for (s, ok) in scores.iter_mut().zip(allowed) {
            *s = if *ok { *s / t } else { f64::NEG_INFINITY };
        }
        if let Some(k) = top_k {
            top_k_filter(&mut scores, k);
        }
        let probs = softmax(&scores);
        if probs.iter().all(|p| *p == 0.0) || probs.iter().any(|p| p.is_nan()) {
            return Err(Error::AllMasked(self.cond.len()));
        }
        let i = draw(&probs, rng);
        Ok((i as u32, probs[i].ln()))
    }
}

/// How the CoT region is produced.
enum CotSource<'a> {
    Sample,
    Forced(&'a CotGrid),
}

fn decode<F: Scalar>(
    model: &Transformer<F>,
    cond: &ConditionBundle,
    cot: CotSource<'_>,
    audio_prompt: &[u32],
    params: &SamplingParams,
) -> Result<GeneratedSong> {
    params.validate()?;
    let layout = model.layout().clone();
    let levels = layout.levels();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let uses_cot = model.variant().uses_cot();
    let prefix_len = condition_prefix(cond, &layout)?.len();
    let cot_budget = match (&cot, uses_cot) {
        (_, false) => 0,
        (CotSource::Forced(g), true) => g.frames() * levels + 2,
        (CotSource::Sample, true) => params.max_cot_tokens + 2,
    };
    let needed = prefix_len + cot_budget + audio_prompt.len().max(params.max_audio_tokens);
    if needed > model.config().context {
        return Err(Error::ContextOverflow {
            len: needed,
            context: model.config().context,
        });
    }
    let mut st = Streams::new(model, cond, params.lambda1 == 1.0 && params.lambda2 == 1.0)?;
    if uses_cot {
        st.push(Special::CotBos.id(), None, true)?;
        let mut flat: Vec<u32> = Vec::new();
        match cot {
            CotSource::Forced(grid) => {
                if grid.levels() != levels {
                    return Err(Error::DimensionMismatch {
                        expected: levels,
                        got: grid.levels(),
                    });
                }
                for (level, code) in flatten_cot(grid) {
                    let id = layout.cot_id(level, code)?;
                    st.push(id, None, true)?;
                    flat.push(id);
                }
                st.push(Special::CotEos.id(), None, params.uncond_keeps_cot)?;
            }
            CotSource::Sample => {
                let frame_cap = params.max_cot_tokens / levels;
                if frame_cap == 0 {
                    return Err(Error::config(format!(
                        "max_cot_tokens {} leaves no room for one frame of {levels} levels",
                        params.max_cot_tokens
                    )));
                }
                let mut legal = CotLegality::new(levels, frame_cap);
                loop {
                    let (lv, eos_ok) = legal.options();
                    let mut allowed = vec![false; layout.vocab_size()];
                    for &l in &lv {
                        allowed[layout.cot_level_range(l)].iter_mut().for_each(|a| *a = true);
                    }
                    allowed[Special::CotEos.id() as usize] = eos_ok;
                    let (id, lp) = st.choose(&allowed, params.lambda1, params.temp_cot, params.top_k, &mut rng)?;
                    if id == Special::CotEos.id() {
                        st.push(id, Some(lp), params.uncond_keeps_cot)?;
                        break;
                    }
                    match layout.kind(id)? {
                        TokenKind::Cot { level, .. } => legal.advance(level),
                        _ => return Err(Error::SegmentViolation(format!("illegal id {id} sampled in cot phase"))),
                    }
                    st.push(id, Some(lp), true)?;
                    flat.push(id);
                }
            }
        }
        if !params.uncond_keeps_cot {
            st.restart_uncond(&[Special::CotBos.id(), Special::CotEos.id()])?;
        }
    }
    let mut audio_count = 0usize;
    for &t in audio_prompt {
        st.push(layout.audio_id(t)?, None, true)?;
        audio_count += 1;
    }
    let mut allowed = vec![false; layout.vocab_size()];
    allowed[layout.audio_range()].iter_mut().for_each(|a| *a = true);
    while audio_count < params.max_audio_tokens {
        // An empty song is never useful, so eos opens after the first audio token.
        allowed[Special::Eos.id() as usize] = audio_count > 0;
        let (id, lp) = st.choose(&allowed, params.lambda2, params.temp_audio, params.top_k, &mut rng)?;
        if id == Special::Eos.id() {
            st.trace.push(StepRecord {
                position: st.cond.len(),
                id,
                segment: Segment::Special,
                logprob: Some(lp),
            });
            break;
        }
        st.push(id, Some(lp), true)?;
        audio_count += 1;
    }
    let ids: Vec<u32> = st.trace.iter().map(|r| r.id).collect();
    let (grid, audio_tokens) = parse_generated(&ids[st.prefix_len..], &layout)?;
    Ok(GeneratedSong {
        grid,
        audio_tokens,
        ids,
        trace: st.trace,
        forced_audio: audio_prompt.len(),
    })
}

/// Samples a full song: CoT phase (MusiCoT models only), then audio.
pub fn sample<F: Scalar>(
    model: &Transformer<F>,
    cond: &ConditionBundle,
    params: &SamplingParams,
) -> Result<GeneratedSong> {
    decode(model, cond, CotSource::Sample, &[], params)
}

/// Music referencing: quantizes the reference, force-feeds its codes as the
/// CoT region and samples only the audio phase.
pub fn sample_with_reference<F: Scalar>(
    model: &Transformer<F>,
    cond: &ConditionBundle,
    reference: &[Embedding],
    rvq: &RvqModel,
    params: &SamplingParams,
) -> Result<GeneratedSong> {
    if !model.variant().uses_cot() {
        return Err(Error::config("referencing needs a model trained with a CoT region"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference has no windows".into()));
    }
    if rvq.levels() != model.layout().levels() || rvq.codebook_size() != model.layout().codebook_size as usize {
        return Err(Error::DimensionMismatch {
            expected: model.layout().levels(),
            got: rvq.levels(),
        });
    }
    let grid = rvq.quantize_sequence(reference)?;
    decode(model, cond, CotSource::Forced(&grid), &[], params)
}

/// Audio-token continuation: samples the CoT as usual, forces `prompt` as the
/// first audio tokens and continues from there.
pub fn sample_continuation<F: Scalar>(
    model: &Transformer<F>,
    cond: &ConditionBundle,
    prompt: &[u32],
    params: &SamplingParams,
) -> Result<GeneratedSong> {
    decode(model, cond, CotSource::Sample, prompt, params)
}
