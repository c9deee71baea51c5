//! Unified vocabulary layout, coarse-to-fine flattening and token stream assembly.
//!
//! A training stream reads
//! `bos, clap-slot, tags…, sep, lyrics…, cot_bos, level-1 codes…, …, level-L codes…, cot_eos, audio…, eos`.
//! Every RVQ level owns its own id block so a CoT id alone determines its level.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::ConditionBundle;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::rvq::CotGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    CotBos = 3,
    CotEos = 4,
    Sep = 5,
    NullCond = 6,
    /// Slot rendered from the continuous condition embedding.
    Clap = 7,
}

pub const NUM_SPECIALS: u32 = 8;

impl Special {
    pub fn id(self) -> u32 {
        self as u32
    }

    fn from_id(id: u32) -> Option<Self> {
        Some(match id {
            0 => Special::Pad,
            1 => Special::Bos,
            2 => Special::Eos,
            3 => Special::CotBos,
            4 => Special::CotEos,
            5 => Special::Sep,
            6 => Special::NullCond,
            7 => Special::Clap,
            _ => return None,
        })
    }
}

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    Text(u32),
    Tag(u32),
    /// Zero-based level and codebook index.
    Cot {
        level: usize,
        index: u32,
    },
    Audio(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Condition,
    Cot,
    Audio,
    Special,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Condition => "condition",
            Segment::Cot => "cot",
            Segment::Audio => "audio",
            Segment::Special => "special",
        }
    }
}

/// Contiguous id blocks: specials, text, tags, one CoT block per level, audio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_size: u32,
    pub tags: Vec<String>,
    pub levels: u32,
    pub codebook_size: u32,
    pub audio_size: u32,
}

impl VocabLayout {
    pub fn new(
        text_size: usize,
        tags: Vec<String>,
        levels: usize,
        codebook_size: usize,
        audio_size: usize,
    ) -> Result<Self> {
        if levels == 0 || codebook_size == 0 || audio_size == 0 {
            return Err(Error::config("layout needs at least one level, code and audio id"));
        }
        Ok(Self {
            text_size: text_size as u32,
            tags,
            levels: levels as u32,
            codebook_size: codebook_size as u32,
            audio_size: audio_size as u32,
        })
    }

    pub fn text_base(&self) -> u32 {
        NUM_SPECIALS
    }

    pub fn tag_base(&self) -> u32 {
        self.text_base() + self.text_size
    }

    pub fn cot_base(&self) -> u32 {
        self.tag_base() + self.tags.len() as u32
    }

    pub fn audio_base(&self) -> u32 {
        self.cot_base() + self.levels * self.codebook_size
    }

    pub fn vocab_size(&self) -> usize {
        (self.audio_base() + self.audio_size) as usize
    }

    pub fn levels(&self) -> usize {
        self.levels as usize
    }

    pub fn text_id(&self, word: u32) -> Result<u32> {
        if word >= self.text_size {
            return Err(Error::OutOfRange {
                what: "text block",
                index: word as usize,
                size: self.text_size as usize,
            });
        }
        Ok(self.text_base() + word)
    }

    pub fn tag_id(&self, tag: &str) -> Result<u32> {
        self.tags
            .iter()
            .position(|t| t == tag)
            .map(|p| self.tag_base() + p as u32)
            .ok_or_else(|| Error::domain(format!("tag {tag:?} not in layout")))
    }

    /// Id of code `index` at zero-based `level`: `cot_base + level·Q + index`.
    pub fn cot_id(&self, level: usize, index: u32) -> Result<u32> {
        if level >= self.levels() {
            return Err(Error::OutOfRange {
                what: "rvq level",
                index: level,
                size: self.levels(),
            });
        }
        if index >= self.codebook_size {
            return Err(Error::OutOfRange {
                what: "codebook",
                index: index as usize,
                size: self.codebook_size as usize,
            });
        }
        Ok(self.cot_base() + level as u32 * self.codebook_size + index)
    }

    pub fn audio_id(&self, token: u32) -> Result<u32> {
        if token >= self.audio_size {
            return Err(Error::OutOfRange {
                what: "audio block",
                index: token as usize,
                size: self.audio_size as usize,
            });
        }
        Ok(self.audio_base() + token)
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind> {
        if let Some(s) = Special::from_id(id) {
            return Ok(TokenKind::Special(s));
        }
        if id < self.tag_base() {
            return Ok(TokenKind::Text(id - self.text_base()));
        }
        if id < self.cot_base() {
            return Ok(TokenKind::Tag(id - self.tag_base()));
        }
        if id < self.audio_base() {
            let local = id - self.cot_base();
            return Ok(TokenKind::Cot {
                level: (local / self.codebook_size) as usize,
                index: local % self.codebook_size,
            });
        }
        if (id as usize) < self.vocab_size() {
            return Ok(TokenKind::Audio(id - self.audio_base()));
        }
        Err(Error::OutOfRange {
            what: "vocabulary",
            index: id as usize,
            size: self.vocab_size(),
        })
    }

    /// Id range of one CoT level.
    pub fn cot_level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = (self.cot_base() + level as u32 * self.codebook_size) as usize;
        start..start + self.codebook_size as usize
    }

    pub fn audio_range(&self) -> std::ops::Range<usize> {
        self.audio_base() as usize..self.vocab_size()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        crate::rvq::hex(&Sha256::digest(&json))
    }
}

/// One flat token stream with parallel segment labels and loss mask.
///
/// `loss_mask[i]` marks token `i` as a prediction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
    /// Embedding rendered at the clap slot, absent for the null condition.
    pub clap: Option<Embedding>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, seg: Segment, target: bool) {
        self.ids.push(id);
        self.segments.push(seg);
        self.loss_mask.push(target);
    }

    /// Checks the parallel-array and masking invariants.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.segments.len() || self.ids.len() != self.loss_mask.len() {
            return Err(Error::SegmentViolation("parallel arrays differ in length".into()));
        }
        for (i, (seg, mask)) in self.segments.iter().zip(&self.loss_mask).enumerate() {
            if *seg == Segment::Condition && *mask {
                return Err(Error::SegmentViolation(format!("loss mask set on condition token {i}")));
            }
            if matches!(seg, Segment::Cot | Segment::Audio) && !*mask {
                return Err(Error::SegmentViolation(format!("loss mask clear on target token {i}")));
            }
        }
        Ok(())
    }

    /// Integer-per-line dump for inspection.
    pub fn dump_ids(&self) -> String {
        let mut s = String::with_capacity(self.ids.len() * 5);
        for id in &self.ids {
            let _ = writeln!(s, "{id}");
        }
        s
    }
}

/// Codebook-major flattening: all level-1 codes in time order, then level 2, …
pub fn flatten_cot(grid: &CotGrid) -> Vec<(usize, u32)> {
    let mut out = Vec::with_capacity(grid.frames() * grid.levels());
    for k in 0..grid.levels() {
        for m in 0..grid.frames() {
            out.push((k, grid.get(m, k)));
        }
    }
    out
}

/// Inverse of [`flatten_cot`].
pub fn unflatten_cot(flat: &[(usize, u32)], levels: usize) -> Result<CotGrid> {
    if levels == 0 {
        return Err(Error::config("levels must be positive"));
    }
    if !flat.len().is_multiple_of(levels) {
        return Err(Error::MalformedCot(format!(
            "cot length {} not divisible by {levels} levels",
            flat.len()
        )));
    }
    let frames = flat.len() / levels;
    let mut rows = vec![vec![0u32; levels]; frames];
    for (pos, &(level, code)) in flat.iter().enumerate() {
        let expect = pos / frames.max(1);
        if level != expect {
            return Err(Error::MalformedCot(format!(
                "position {pos} holds level {} where level {} was expected",
                level + 1,
                expect + 1
            )));
        }
        rows[pos % frames][level] = code;
    }
    CotGrid::from_rows(levels, &rows)
}

fn push_condition(seq: &mut TokenSequence, cond: &ConditionBundle, layout: &VocabLayout) -> Result<()> {
    if cond.dropped {
        seq.push(Special::NullCond.id(), Segment::Condition, false);
        return Ok(());
    }
    seq.clap = Some(cond.clap.clone());
    seq.push(Special::Clap.id(), Segment::Condition, false);
    for tag in &cond.tags {
        seq.push(layout.tag_id(tag)?, Segment::Condition, false);
    }
    seq.push(Special::Sep.id(), Segment::Condition, false);
    for w in &cond.lyrics {
        seq.push(layout.text_id(*w)?, Segment::Condition, false);
    }
    Ok(())
}

/// Condition prefix up to (not including) `cot_bos`.
pub fn condition_prefix(cond: &ConditionBundle, layout: &VocabLayout) -> Result<TokenSequence> {
    let mut seq = TokenSequence {
        ids: Vec::new(),
        segments: Vec::new(),
        loss_mask: Vec::new(),
        clap: None,
    };
    seq.push(Special::Bos.id(), Segment::Special, false);
    push_condition(&mut seq, cond, layout)?;
    Ok(seq)
}

/// Full MusiCoT training stream.
pub fn assemble_training_sequence(
    cond: &ConditionBundle,
    grid: &CotGrid,
    audio_tokens: &[u32],
    layout: &VocabLayout,
) -> Result<TokenSequence> {
    if grid.levels() != layout.levels() {
        return Err(Error::DimensionMismatch {
            expected: layout.levels(),
            got: grid.levels(),
        });
    }
    let mut seq = condition_prefix(cond, layout)?;
    seq.push(Special::CotBos.id(), Segment::Special, true);
    for (level, code) in flatten_cot(grid) {
        seq.push(layout.cot_id(level, code)?, Segment::Cot, true);
    }
    seq.push(Special::CotEos.id(), Segment::Special, true);
    for t in audio_tokens {
        seq.push(layout.audio_id(*t)?, Segment::Audio, true);
    }
    seq.push(Special::Eos.id(), Segment::Special, true);
    Ok(seq)
}

/// Baseline (no-CoT) stream: identical layout without the CoT markers and ids.
pub fn assemble_baseline_sequence(
    cond: &ConditionBundle,
    audio_tokens: &[u32],
    layout: &VocabLayout,
) -> Result<TokenSequence> {
    let mut seq = condition_prefix(cond, layout)?;
    for t in audio_tokens {
        seq.push(layout.audio_id(*t)?, Segment::Audio, true);
    }
    seq.push(Special::Eos.id(), Segment::Special, true);
    Ok(seq)
}

/// Recovers the CoT grid and audio tokens from a generated or assembled stream.
///
/// A stream without `cot_bos` is a baseline stream and yields an empty grid.
pub fn parse_generated(ids: &[u32], layout: &VocabLayout) -> Result<(CotGrid, Vec<u32>)> {
    let levels = layout.levels();
    let cot_start = ids.iter().position(|&id| id == Special::CotBos.id());
    let (grid, audio_from) = match cot_start {
        None => {
            let first_audio = ids
                .iter()
                .position(|&id| matches!(layout.kind(id), Ok(TokenKind::Audio(_))))
                .unwrap_or(ids.len());
            (CotGrid::empty(levels), first_audio)
        }
        Some(start) => {
            let end = ids[start + 1..]
                .iter()
                .position(|&id| id == Special::CotEos.id())
                .map(|p| start + 1 + p)
                .ok_or_else(|| Error::MalformedCot("missing cot_eos".into()))?;
            let mut flat = Vec::with_capacity(end - start - 1);
            for (offset, &id) in ids[start + 1..end].iter().enumerate() {
                match layout.kind(id)? {
                    TokenKind::Cot { level, index } => flat.push((level, index)),
                    TokenKind::Audio(_) => {
                        return Err(Error::SegmentViolation(format!(
                            "audio id {id} inside cot region at offset {offset}"
                        )))
                    }
                    other => {
                        return Err(Error::SegmentViolation(format!(
                            "{other:?} inside cot region at offset {offset}"
                        )))
                    }
                }
            }
            (unflatten_cot(&flat, levels)?, end + 1)
        }
    };
    let mut audio = Vec::new();
    for &id in &ids[audio_from..] {
        match layout.kind(id)? {
            TokenKind::Audio(t) => audio.push(t),
            TokenKind::Special(Special::Eos) => break,
            other => {
                return Err(Error::SegmentViolation(format!("{other:?} inside audio region")));
            }
        }
    }
    Ok((grid, audio))
}

/// Tracks the time frame of each token while a stream is read left to right.
///
/// CoT tokens take their position within their level block, audio tokens
/// `count / tokens_per_frame`. Frame `m` is reported as `m + 1`; zero marks
/// tokens without a frame.
#[derive(Debug, Clone)]
pub struct FrameTracker {
    tokens_per_frame: usize,
    cot_level: Option<usize>,
    cot_count: usize,
    audio_count: usize,
    max_frame: usize,
}

impl FrameTracker {
    pub fn new(tokens_per_frame: usize, max_frame: usize) -> Self {
        Self {
            tokens_per_frame: tokens_per_frame.max(1),
            cot_level: None,
            cot_count: 0,
            audio_count: 0,
            max_frame,
        }
    }

    pub fn next(&mut self, id: u32, layout: &VocabLayout) -> usize {
        let frame = match layout.kind(id) {
            Ok(TokenKind::Cot { level, .. }) => {
                if self.cot_level != Some(level) {
                    self.cot_level = Some(level);
                    self.cot_count = 0;
                }
                self.cot_count += 1;
                self.cot_count
            }
            Ok(TokenKind::Audio(_)) => {
                self.audio_count += 1;
                (self.audio_count - 1) / self.tokens_per_frame + 1
            }
            _ => 0,
        };
        frame.min(self.max_frame)
    }
}

pub fn frame_positions(ids: &[u32], layout: &VocabLayout, tokens_per_frame: usize, max_frame: usize) -> Vec<usize> {
    let mut tracker = FrameTracker::new(tokens_per_frame, max_frame);
    ids.iter().map(|&id| tracker.next(id, layout)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(10, vec!["a".into(), "b".into(), "c".into()], 2, 5, 20).unwrap()
    }

    fn cond(dropped: bool) -> ConditionBundle {
        ConditionBundle {
            clap: Embedding::new(vec![1.0, 0.0]).unwrap(),
            tags: vec!["b".into(), "c".into()],
            lyrics: vec![3, 3, 1],
            dropped,
        }
    }

    #[test]
    fn layout_blocks_are_contiguous_and_bijective() {
        let l = layout();
        assert_eq!(l.text_base(), 8);
        assert_eq!(l.tag_base(), 18);
        assert_eq!(l.cot_base(), 21);
        assert_eq!(l.audio_base(), 31);
        assert_eq!(l.vocab_size(), 51);
        assert_eq!(l.cot_id(1, 3).unwrap(), 21 + 5 + 3);
        let mut seen = std::collections::HashSet::new();
        for level in 0..2 {
            for q in 0..5 {
                let id = l.cot_id(level, q).unwrap();
                assert!(seen.insert(id));
                assert_eq!(l.kind(id).unwrap(), TokenKind::Cot { level, index: q });
            }
        }
        for id in 0..51u32 {
            assert!(l.kind(id).is_ok());
        }
        assert!(l.kind(51).is_err());
        assert!(l.cot_id(2, 0).is_err());
        assert!(l.cot_id(0, 5).is_err());
    }

    #[test]
    fn flatten_is_codebook_major() {
        let grid = CotGrid::from_rows(2, &[vec![1, 2], vec![3, 4], vec![5, 6]]).unwrap();
        let codes: Vec<u32> = flatten_cot(&grid).into_iter().map(|(_, c)| c).collect();
        assert_eq!(codes, vec![1, 3, 5, 2, 4, 6]);
        let one = CotGrid::from_rows(3, &[vec![7, 8, 9]]).unwrap();
        assert_eq!(flatten_cot(&one), vec![(0, 7), (1, 8), (2, 9)]);
    }

    #[test]
    fn assembled_order_and_mask() {
        let l = layout();
        let grid = CotGrid::from_rows(2, &[vec![1, 2], vec![3, 4]]).unwrap();
        let seq = assemble_training_sequence(&cond(false), &grid, &[0, 19], &l).unwrap();
        let expected = vec![1, 7, 19, 20, 5, 11, 11, 9, 3, 22, 24, 28, 30, 4, 31, 50, 2];
        assert_eq!(seq.ids, expected);
        assert_eq!(seq.loss_mask.iter().filter(|m| **m).count(), 1 + 4 + 1 + 2 + 1);
        assert!(seq.loss_mask[..8].iter().all(|m| !m));
        seq.validate().unwrap();
        assert!(seq.clap.is_some());

        let dropped = assemble_training_sequence(&cond(true), &grid, &[0], &l).unwrap();
        assert_eq!(&dropped.ids[..3], &[1, 6, 3]);
        assert!(dropped.clap.is_none());
    }

    #[test]
    fn instrumental_and_empty_cot() {
        let l = layout();
        let mut c = cond(false);
        c.lyrics.clear();
        let seq = assemble_training_sequence(&c, &CotGrid::empty(2), &[4, 5], &l).unwrap();
        let bos = seq.ids.iter().position(|&i| i == Special::CotBos.id()).unwrap();
        assert_eq!(seq.ids[bos + 1], Special::CotEos.id());
        assert_eq!(seq.ids[bos - 1], Special::Sep.id());
        let (grid, audio) = parse_generated(&seq.ids, &l).unwrap();
        assert_eq!(grid.frames(), 0);
        assert_eq!(audio, vec![4, 5]);
    }

    #[test]
    fn parse_errors() {
        let l = layout();
        let c0 = l.cot_id(0, 0).unwrap();
        let c1 = l.cot_id(1, 0).unwrap();
        let a = l.audio_id(0).unwrap();
        let (bos, eos, cb, ce) = (
            Special::Bos.id(),
            Special::Eos.id(),
            Special::CotBos.id(),
            Special::CotEos.id(),
        );
        assert!(matches!(
            parse_generated(&[bos, cb, c0, c1, a, eos], &l),
            Err(Error::MalformedCot(_))
        ));
        assert!(matches!(
            parse_generated(&[bos, cb, c0, c0, c0, c1, c1, ce], &l),
            Err(Error::MalformedCot(_))
        ));
        assert!(matches!(
            parse_generated(&[bos, cb, c0, c0, c1, c0, ce], &l),
            Err(Error::MalformedCot(_))
        ));
        assert!(matches!(
            parse_generated(&[bos, cb, c1, c0, ce], &l),
            Err(Error::MalformedCot(_))
        ));
        assert!(matches!(
            parse_generated(&[bos, cb, c0, a, c1, ce], &l),
            Err(Error::SegmentViolation(_))
        ));
        assert!(matches!(
            parse_generated(&[bos, cb, c0, c1, ce, a, c0, eos], &l),
            Err(Error::SegmentViolation(_))
        ));
        let (grid, audio) = parse_generated(&[bos, 7, 5, a, a, eos], &l).unwrap();
        assert!(grid.is_empty());
        assert_eq!(audio, vec![0, 0]);
    }

    #[test]
    fn baseline_sequence_has_no_cot() {
        let l = layout();
        let seq = assemble_baseline_sequence(&cond(false), &[1, 2, 3], &l).unwrap();
        assert!(!seq.ids.contains(&Special::CotBos.id()));
        seq.validate().unwrap();
        assert_eq!(parse_generated(&seq.ids, &l).unwrap().1, vec![1, 2, 3]);
    }

    #[test]
    fn frames_follow_time() {
        let l = layout();
        let grid = CotGrid::from_rows(2, &[vec![1, 2], vec![3, 4], vec![0, 0]]).unwrap();
        let seq = assemble_training_sequence(&cond(false), &grid, &[0, 1, 2, 3, 4], &l).unwrap();
        let frames = frame_positions(&seq.ids, &l, 2, 100);
        let cot_start = 9;
        assert_eq!(&frames[cot_start..cot_start + 6], &[1, 2, 3, 1, 2, 3]);
        let audio_start = cot_start + 7;
        assert_eq!(&frames[audio_start..audio_start + 5], &[1, 1, 2, 2, 3]);
        assert_eq!(frames[0], 0);
    }

    fn grid_strategy() -> impl Strategy<Value = CotGrid> {
        (1usize..5, 0usize..7).prop_flat_map(|(levels, frames)| {
            prop::collection::vec(prop::collection::vec(0u32..5, levels), frames)
                .prop_map(move |rows| CotGrid::from_rows(levels, &rows).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flatten_round_trip(grid in grid_strategy()) {
            let back = unflatten_cot(&flatten_cot(&grid), grid.levels()).unwrap();
            prop_assert_eq!(back, grid);
        }

        #[test]
        fn assemble_parse_round_trip(
            rows in prop::collection::vec(prop::collection::vec(0u32..5, 2), 0..6),
            audio in prop::collection::vec(0u32..20, 0..30),
            lyrics in prop::collection::vec(0u32..10, 0..5),
            dropped in any::<bool>(),
        ) {
            let l = layout();
            let grid = CotGrid::from_rows(2, &rows).unwrap();
            let c = ConditionBundle { lyrics, dropped, ..cond(false) };
            let seq = assemble_training_sequence(&c, &grid, &audio, &l).unwrap();
            seq.validate().unwrap();
            let (g, a) = parse_generated(&seq.ids, &l).unwrap();
            prop_assert_eq!(g, grid);
            prop_assert_eq!(a, audio);
        }
    }
}
