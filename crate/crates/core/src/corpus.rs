//! Segment corpora, multimodal questions, answer sets and video-level splits.
//!
//! A [`SegmentCorpus`] is immutable once constructed; [`SegmentCorpus::new`]
//! checks every structural invariant and derives the unseen-scenario set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

/// Soft lower bound on segment duration, seconds.
pub const MIN_SEGMENT_S: f64 = 30.0;
/// Soft upper bound on segment duration, seconds.
pub const MAX_SEGMENT_S: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryType {
    /// Text clues only.
    #[serde(rename = "t")]
    T,
    /// Visual clues only.
    #[serde(rename = "v")]
    V,
    /// Both.
    #[serde(rename = "tv")]
    TV,
}

impl QueryType {
    pub const ALL: [QueryType; 3] = [QueryType::T, QueryType::V, QueryType::TV];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::T => "t",
            QueryType::V => "v",
            QueryType::TV => "tv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "t" => Some(QueryType::T),
            "v" => Some(QueryType::V),
            "tv" => Some(QueryType::TV),
            _ => None,
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, QueryType::T | QueryType::TV)
    }

    pub fn uses_visual(self) -> bool {
        matches!(self, QueryType::V | QueryType::TV)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub visual: usize,
    pub text: usize,
}

/// A 1.5 s sub-unit of a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_index: usize,
    pub appearance: Vec<f32>,
    pub transcript: Vec<f32>,
    pub has_transcript: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSegment {
    pub segment_id: String,
    pub video_id: String,
    pub scenario: String,
    pub start_s: f64,
    pub end_s: f64,
    pub clips: Vec<Clip>,
}

impl VideoSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub video_id: String,
    pub scenario: String,
    pub segments: Vec<VideoSegment>,
}

/// Half-open token range `[start, end)` a region is aligned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Vec<f32>,
    pub aligned_token_span: Option<TokenSpan>,
}

/// Text-token features plus image/region features. Region 0 is the whole query image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalQuestion {
    pub question_id: String,
    pub text_tokens: Matrix<f32>,
    pub regions: Vec<Region>,
    pub query_type: QueryType,
    pub scenario: String,
    pub answers: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut BTreeSet<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("{id}: expected dimension {expected}, found {found}")]
    DimMismatch { id: String, expected: usize, found: usize },
    #[error("question {question} references unknown segment {answer}")]
    DanglingAnswer { question: String, answer: String },
    #[error("video {0} appears in more than one split")]
    SplitOverlap(String),
    #[error("video {0} is not assigned to any split")]
    UnassignedVideo(String),
    #[error("split lists unknown video {0}")]
    UnknownSplitVideo(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("segment {0} has no clips")]
    EmptySegment(String),
    #[error("segment {0}: end_s must exceed start_s")]
    InvalidBounds(String),
    #[error("segment {segment}: clip indices must be 0..l in order (found {found} at {position})")]
    ClipOrder { segment: String, position: usize, found: usize },
    #[error("segment {segment}: clip {clip} has no transcript but a non-zero transcript vector")]
    NonZeroMissingTranscript { segment: String, clip: usize },
    #[error("segment {segment} belongs to video {video} but declares video {declared}")]
    SegmentVideo { segment: String, video: String, declared: String },
    #[error("question {0} has no regions")]
    NoRegions(String),
    #[error("question {0} has no answers")]
    EmptyAnswers(String),
    #[error("question {question}: aligned span {start}..{end} outside 0..{tokens}")]
    SpanOutOfRange { question: String, start: usize, end: usize, tokens: usize },
    #[error("question {0} has answers in more than one split")]
    QuestionCrossesSplits(String),
    #[error("split fractions must be non-negative and sum to 1")]
    InvalidFractions,
    #[error("{videos} videos cannot fill {splits} non-empty splits")]
    TooFewVideos { videos: usize, splits: usize },
}

/// The full retrieval corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCorpus {
    dims: Dims,
    videos: Vec<Video>,
    questions: Vec<MultimodalQuestion>,
    splits: Splits,
    unseen_scenarios: BTreeSet<String>,
    segment_index: BTreeMap<String, (usize, usize)>,
    video_split: BTreeMap<String, Split>,
}

impl SegmentCorpus {
    /// Validates all invariants and derives the unseen-scenario set.
    pub fn new(dims: Dims, videos: Vec<Video>, questions: Vec<MultimodalQuestion>, splits: Splits) -> Result<Self, CorpusError> {
        let mut segment_index = BTreeMap::new();
        let mut video_ids = BTreeSet::new();
        for (vi, video) in videos.iter().enumerate() {
            if !video_ids.insert(video.video_id.clone()) {
                return Err(CorpusError::DuplicateId(video.video_id.clone()));
            }
            for (si, seg) in video.segments.iter().enumerate() {
                validate_segment(seg, dims)?;
                if seg.video_id != video.video_id {
                    return Err(CorpusError::SegmentVideo {
                        segment: seg.segment_id.clone(),
                        video: video.video_id.clone(),
                        declared: seg.video_id.clone(),
                    });
                }
                if segment_index.insert(seg.segment_id.clone(), (vi, si)).is_some() {
                    return Err(CorpusError::DuplicateId(seg.segment_id.clone()));
                }
            }
        }

        let mut video_split = BTreeMap::new();
        for split in Split::ALL {
            for v in splits.get(split) {
                if !video_ids.contains(v) {
                    return Err(CorpusError::UnknownSplitVideo(v.clone()));
                }
                if video_split.insert(v.clone(), split).is_some() {
                    return Err(CorpusError::SplitOverlap(v.clone()));
                }
            }
        }
        if let Some(v) = video_ids.iter().find(|v| !video_split.contains_key(*v)) {
            return Err(CorpusError::UnassignedVideo(v.clone()));
        }

        let mut question_ids = BTreeSet::new();
        for q in &questions {
            if !question_ids.insert(q.question_id.clone()) {
                return Err(CorpusError::DuplicateId(q.question_id.clone()));
            }
            validate_question(q, dims)?;
            let mut home = None;
            for a in &q.answers {
                let Some(&(vi, _)) = segment_index.get(a) else {
                    return Err(CorpusError::DanglingAnswer { question: q.question_id.clone(), answer: a.clone() });
                };
                let s = video_split[&videos[vi].video_id];
                if *home.get_or_insert(s) != s {
                    return Err(CorpusError::QuestionCrossesSplits(q.question_id.clone()));
                }
            }
        }

        let mut corpus = Self { dims, videos, questions, splits, unseen_scenarios: BTreeSet::new(), segment_index, video_split };
        corpus.unseen_scenarios = corpus.compute_unseen();
        Ok(corpus)
    }

    pub fn empty(dims: Dims) -> Self {
        Self::new(dims, Vec::new(), Vec::new(), Splits::default()).expect("empty corpus is valid")
    }

    fn compute_unseen(&self) -> BTreeSet<String> {
        let mut train = BTreeSet::new();
        let mut held_out = BTreeSet::new();
        for q in &self.questions {
            match self.question_split(q) {
                Some(Split::Train) => {
                    train.insert(q.scenario.clone());
                }
                Some(_) => {
                    held_out.insert(q.scenario.clone());
                }
                None => {}
            }
        }
        held_out.difference(&train).cloned().collect()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn questions(&self) -> &[MultimodalQuestion] {
        &self.questions
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn into_parts(self) -> (Dims, Vec<Video>, Vec<MultimodalQuestion>, Splits) {
        (self.dims, self.videos, self.questions, self.splits)
    }

    /// Scenarios that occur in val/test questions but in no train question.
    pub fn unseen_scenarios(&self) -> &BTreeSet<String> {
        &self.unseen_scenarios
    }

    pub fn is_unseen(&self, scenario: &str) -> bool {
        self.unseen_scenarios.contains(scenario)
    }

    pub fn segments(&self) -> impl Iterator<Item = &VideoSegment> {
        self.videos.iter().flat_map(|v| v.segments.iter())
    }

    pub fn num_segments(&self) -> usize {
        self.segment_index.len()
    }

    pub fn segment(&self, id: &str) -> Option<&VideoSegment> {
        self.segment_index.get(id).map(|&(v, s)| &self.videos[v].segments[s])
    }

    pub fn question(&self, id: &str) -> Option<&MultimodalQuestion> {
        self.questions.iter().find(|q| q.question_id == id)
    }

    pub fn video_split(&self, video_id: &str) -> Option<Split> {
        self.video_split.get(video_id).copied()
    }

    pub fn segment_split(&self, segment_id: &str) -> Option<Split> {
        self.segment_index.get(segment_id).and_then(|&(v, _)| self.video_split(&self.videos[v].video_id))
    }

    /// Questions inherit the split of the video their answers belong to.
    pub fn question_split(&self, q: &MultimodalQuestion) -> Option<Split> {
        q.answers.iter().next().and_then(|a| self.segment_split(a))
    }

    pub fn segments_in(&self, split: Split) -> impl Iterator<Item = &VideoSegment> + '_ {
        self.videos.iter().filter(move |v| self.video_split(&v.video_id) == Some(split)).flat_map(|v| v.segments.iter())
    }

    pub fn questions_in(&self, split: Split) -> impl Iterator<Item = &MultimodalQuestion> + '_ {
        self.questions.iter().filter(move |q| self.question_split(q) == Some(split))
    }

    /// Answers of `q` whose segments lie in `split`.
    pub fn answers_in<'a>(&'a self, q: &'a MultimodalQuestion, split: Split) -> impl Iterator<Item = &'a String> + 'a {
        q.answers.iter().filter(move |a| self.segment_split(a) == Some(split))
    }

    /// One warning per segment whose duration lies outside the soft 30–120 s range.
    pub fn validate_segmentation(&self) -> Vec<SegmentationWarning> {
        self.segments()
            .filter_map(|s| {
                let d = s.duration_s();
                if d < MIN_SEGMENT_S {
                    Some(SegmentationWarning::TooShort { segment_id: s.segment_id.clone(), duration_s: d })
                } else if d > MAX_SEGMENT_S {
                    Some(SegmentationWarning::TooLong { segment_id: s.segment_id.clone(), duration_s: d })
                } else {
                    None
                }
            })
            .collect()
    }

    /// Assigns whole videos to splits: `floor(train·n)`, `floor(val·n)`, remainder to test.
    pub fn split_by_video(&self, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment, CorpusError> {
        fractions.validate()?;
        let mut ids: Vec<String> = self.videos.iter().map(|v| v.video_id.clone()).collect();
        ids.sort();
        let n = ids.len();
        let nonzero = [fractions.train, fractions.val, fractions.test].iter().filter(|&&f| f > 0.0).count();
        if n < nonzero {
            return Err(CorpusError::TooFewVideos { videos: n, splits: nonzero });
        }
        let mut rng = crate::rng::substream(seed, "split");
        ids.shuffle(&mut rng);
        let n_train = split_count(fractions.train, n);
        let n_val = split_count(fractions.val, n).min(n - n_train);
        let mut splits = Splits::default();
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            splits.get_mut(s).insert(id);
        }
        let assigned = self.clone().with_splits(splits.clone())?;
        let mut type_histogram = BTreeMap::new();
        for split in Split::ALL {
            let mut h = TypeHistogram::default();
            for q in assigned.questions_in(split) {
                h.add(q.query_type);
            }
            type_histogram.insert(split, h);
        }
        Ok(SplitAssignment { splits, unseen_scenarios: assigned.unseen_scenarios, type_histogram })
    }

    /// Same corpus under a different split assignment.
    pub fn with_splits(self, splits: Splits) -> Result<Self, CorpusError> {
        Self::new(self.dims, self.videos, self.questions, splits)
    }
}

fn split_count(fraction: f64, n: usize) -> usize {
    // tolerance absorbs representation error such as 0.1 * 10 = 1.0000000000000002
    num_traits::Float::floor(fraction * n as f64 + 1e-9) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidFractions);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TypeHistogram {
    pub t: usize,
    pub v: usize,
    pub tv: usize,
}

impl TypeHistogram {
    pub fn add(&mut self, ty: QueryType) {
        match ty {
            QueryType::T => self.t += 1,
            QueryType::V => self.v += 1,
            QueryType::TV => self.tv += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.t + self.v + self.tv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub splits: Splits,
    pub unseen_scenarios: BTreeSet<String>,
    pub type_histogram: BTreeMap<Split, TypeHistogram>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentationWarning {
    TooShort { segment_id: String, duration_s: f64 },
    TooLong { segment_id: String, duration_s: f64 },
}

impl core::fmt::Display for SegmentationWarning {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::TooShort { segment_id, duration_s } => {
                write!(f, "segment {segment_id} is {duration_s:.1} s long (soft minimum {MIN_SEGMENT_S} s)")
            }
            Self::TooLong { segment_id, duration_s } => {
                write!(f, "segment {segment_id} is {duration_s:.1} s long (soft maximum {MAX_SEGMENT_S} s)")
            }
        }
    }
}

fn validate_segment(seg: &VideoSegment, dims: Dims) -> Result<(), CorpusError> {
    if !(seg.end_s > seg.start_s) {
        return Err(CorpusError::InvalidBounds(seg.segment_id.clone()));
    }
    if seg.clips.is_empty() {
        return Err(CorpusError::EmptySegment(seg.segment_id.clone()));
    }
    for (pos, clip) in seg.clips.iter().enumerate() {
        if clip.clip_index != pos {
            return Err(CorpusError::ClipOrder { segment: seg.segment_id.clone(), position: pos, found: clip.clip_index });
        }
        let id = || format!("{}#{}", seg.segment_id, pos);
        if clip.appearance.len() != dims.visual {
            return Err(CorpusError::DimMismatch { id: id(), expected: dims.visual, found: clip.appearance.len() });
        }
        if clip.transcript.len() != dims.text {
            return Err(CorpusError::DimMismatch { id: id(), expected: dims.text, found: clip.transcript.len() });
        }
        if !clip.has_transcript && clip.transcript.iter().any(|&v| v != 0.0) {
            return Err(CorpusError::NonZeroMissingTranscript { segment: seg.segment_id.clone(), clip: pos });
        }
    }
    Ok(())
}

fn validate_question(q: &MultimodalQuestion, dims: Dims) -> Result<(), CorpusError> {
    if q.text_tokens.cols() != dims.text && q.text_tokens.rows() > 0 {
        return Err(CorpusError::DimMismatch { id: q.question_id.clone(), expected: dims.text, found: q.text_tokens.cols() });
    }
    if q.regions.is_empty() {
        return Err(CorpusError::NoRegions(q.question_id.clone()));
    }
    if q.answers.is_empty() {
        return Err(CorpusError::EmptyAnswers(q.question_id.clone()));
    }
    let tokens = q.text_tokens.rows();
    for (i, r) in q.regions.iter().enumerate() {
        if r.feature.len() != dims.visual {
            return Err(CorpusError::DimMismatch {
                id: format!("{}/region{}", q.question_id, i),
                expected: dims.visual,
                found: r.feature.len(),
            });
        }
        if let Some(span) = r.aligned_token_span {
            if span.start >= span.end || span.end > tokens {
                return Err(CorpusError::SpanOutOfRange { question: q.question_id.clone(), start: span.start, end: span.end, tokens });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    pub(crate) fn tiny_segment(video: &str, id: &str, start: f64, end: f64, n: usize, dims: Dims) -> VideoSegment {
        VideoSegment {
            segment_id: id.to_string(),
            video_id: video.to_string(),
            scenario: "s".to_string(),
            start_s: start,
            end_s: end,
            clips: (0..n)
                .map(|j| Clip {
                    clip_index: j,
                    appearance: vec![j as f32; dims.visual],
                    transcript: vec![0.5; dims.text],
                    has_transcript: true,
                })
                .collect(),
        }
    }

    pub(crate) fn tiny_question(id: &str, answers: &[&str], scenario: &str, dims: Dims) -> MultimodalQuestion {
        MultimodalQuestion {
            question_id: id.to_string(),
            text_tokens: Matrix::from_vec(2, dims.text, vec![0.25; 2 * dims.text]),
            regions: vec![Region { feature: vec![1.0; dims.visual], aligned_token_span: None }],
            query_type: QueryType::T,
            scenario: scenario.to_string(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn video(id: &str, scenario: &str, segs: Vec<VideoSegment>) -> Video {
        Video { video_id: id.to_string(), scenario: scenario.to_string(), segments: segs }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    const D: Dims = Dims { visual: 3, text: 2 };

    fn two_videos() -> (Vec<Video>, Vec<MultimodalQuestion>) {
        let v1 = video("vid_1", "kitchen", vec![tiny_segment("vid_1", "seg_1", 0.0, 40.0, 2, D)]);
        let v2 = video("vid_2", "garden", vec![tiny_segment("vid_2", "seg_2", 0.0, 70.5, 3, D)]);
        let q1 = tiny_question("q1", &["seg_1"], "kitchen", D);
        let q2 = tiny_question("q2", &["seg_2"], "garden", D);
        (vec![v1, v2], vec![q1, q2])
    }

    #[test]
    fn valid_corpus_derives_unseen_scenarios() {
        let (videos, questions) = two_videos();
        let splits = Splits { train: set(&["vid_1"]), val: set(&["vid_2"]), test: BTreeSet::new() };
        let c = SegmentCorpus::new(D, videos, questions, splits).unwrap();
        assert_eq!(c.unseen_scenarios(), &set(&["garden"]));
        assert_eq!(c.questions_in(Split::Val).count(), 1);
        assert_eq!(c.segments_in(Split::Train).count(), 1);
    }

    #[test]
    fn dangling_answer_names_the_segment() {
        let (videos, mut questions) = two_videos();
        questions[0].answers = set(&["seg_999"]);
        let splits = Splits { train: set(&["vid_1", "vid_2"]), ..Default::default() };
        let err = SegmentCorpus::new(D, videos, questions, splits).unwrap_err();
        assert_eq!(err, CorpusError::DanglingAnswer { question: "q1".into(), answer: "seg_999".into() });
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let (videos, questions) = two_videos();
        let splits = Splits { train: set(&["vid_1", "vid_2"]), val: set(&["vid_1"]), test: BTreeSet::new() };
        assert_eq!(SegmentCorpus::new(D, videos, questions, splits).unwrap_err(), CorpusError::SplitOverlap("vid_1".into()));
    }

    #[test]
    fn dim_mismatch_and_missing_transcript_checks() {
        let (mut videos, questions) = two_videos();
        videos[0].segments[0].clips[1].appearance.push(0.0);
        let splits = Splits { train: set(&["vid_1", "vid_2"]), ..Default::default() };
        assert!(matches!(
            SegmentCorpus::new(D, videos, questions.clone(), splits.clone()),
            Err(CorpusError::DimMismatch { expected: 3, found: 4, .. })
        ));

        let (mut videos, _) = two_videos();
        videos[1].segments[0].clips[0].has_transcript = false;
        assert!(matches!(SegmentCorpus::new(D, videos, questions, splits), Err(CorpusError::NonZeroMissingTranscript { clip: 0, .. })));
    }

    #[test]
    fn span_must_lie_inside_text() {
        let (videos, mut questions) = two_videos();
        questions[0].regions[0].aligned_token_span = Some(TokenSpan { start: 1, end: 3 });
        let splits = Splits { train: set(&["vid_1", "vid_2"]), ..Default::default() };
        assert!(matches!(SegmentCorpus::new(D, videos, questions, splits), Err(CorpusError::SpanOutOfRange { .. })));
    }

    #[test]
    fn segmentation_warnings() {
        let segs = vec![
            tiny_segment("v", "ok", 0.0, 70.5, 1, D),
            tiny_segment("v", "short", 0.0, 10.0, 1, D),
            tiny_segment("v", "long", 0.0, 300.0, 1, D),
            tiny_segment("v", "edge", 10.0, 40.0, 1, D),
        ];
        let c = SegmentCorpus::new(D, vec![video("v", "s", segs)], vec![], Splits { train: set(&["v"]), ..Default::default() }).unwrap();
        let w = c.validate_segmentation();
        assert_eq!(w.len(), 2);
        assert!(matches!(&w[0], SegmentationWarning::TooShort { segment_id, .. } if segment_id == "short"));
        assert!(matches!(&w[1], SegmentationWarning::TooLong { segment_id, .. } if segment_id == "long"));
    }

    fn many_videos(n: usize) -> SegmentCorpus {
        let videos: Vec<Video> = (0..n)
            .map(|i| {
                let vid = format!("vid_{i:03}");
                let seg = tiny_segment(&vid, &format!("seg_{i:03}"), 0.0, 60.0, 1, D);
                video(&vid, "s", vec![seg])
            })
            .collect();
        let splits = Splits { train: videos.iter().map(|v| v.video_id.clone()).collect(), ..Default::default() };
        SegmentCorpus::new(D, videos, vec![], splits).unwrap()
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let c = many_videos(10);
        let a = c.split_by_video(SplitFractions::default(), 7).unwrap();
        assert_eq!((a.splits.train.len(), a.splits.val.len(), a.splits.test.len()), (8, 1, 1));
        assert_eq!(a, c.split_by_video(SplitFractions::default(), 7).unwrap());

        let c = many_videos(210);
        let a = c.split_by_video(SplitFractions::default(), 1).unwrap();
        assert_eq!((a.splits.train.len(), a.splits.val.len(), a.splits.test.len()), (168, 21, 21));

        let c = many_videos(5);
        let a = c.split_by_video(SplitFractions { train: 1.0, val: 0.0, test: 0.0 }, 3).unwrap();
        assert_eq!(a.splits.train.len(), 5);
        assert!(a.unseen_scenarios.is_empty());
    }

    #[test]
    fn split_errors() {
        let c = many_videos(2);
        assert_eq!(c.split_by_video(SplitFractions::default(), 0).unwrap_err(), CorpusError::TooFewVideos { videos: 2, splits: 3 });
        assert_eq!(c.split_by_video(SplitFractions { train: 0.5, val: 0.1, test: 0.1 }, 0).unwrap_err(), CorpusError::InvalidFractions);
    }
}
