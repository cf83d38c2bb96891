//! On-disk corpus: `manifest.json` plus one `TQVF` file per segment channel
//! and per question, and a shared file of question-region features.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tqvsr_core::corpus::{Clip, CorpusError, Dims, MultimodalQuestion, Region, Splits, TokenSpan, Video, VideoSegment};
use tqvsr_core::{Matrix, QueryType, SegmentCorpus};

use crate::features::{self, FeatureFileError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const REGIONS_FILE: &str = "questions/regions.tqvf";

#[derive(Debug, thiserror::Error)]
pub enum CorpusIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Features(#[from] FeatureFileError),
    #[error("manifest version {0} is not supported")]
    Version(u32),
    #[error("{id}: {what} has {found} rows, manifest says {expected}")]
    RowCount { id: String, what: &'static str, expected: usize, found: usize },
    #[error("segment {id}: transcript_mask has {found} entries for {expected} clips")]
    MaskLength { id: String, expected: usize, found: usize },
    #[error("question {id}: region row {row} is outside the regions file")]
    RegionRow { id: String, row: usize },
    #[error("question {id}: unknown query_type {value:?}")]
    QueryType { id: String, value: String },
    #[error("question {id}: span [{start}, {end}) is empty")]
    EmptySpan { id: String, start: usize, end: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dims: Dims,
    pub videos: Vec<VideoEntry>,
    pub questions: Vec<QuestionEntry>,
    /// Rows referenced by `RegionEntry::feature_row`.
    pub regions_ref: String,
    pub splits: SplitsEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub scenario: String,
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub segment_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub n_clips: usize,
    pub appearance_ref: String,
    pub transcript_ref: String,
    pub transcript_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionEntry {
    pub question_id: String,
    pub text_ref: String,
    pub n_tokens: usize,
    pub regions: Vec<RegionEntry>,
    pub query_type: String,
    pub scenario: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionEntry {
    pub feature_row: usize,
    /// Half-open `[start, end)` over the question's tokens.
    pub aligned_token_span: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsEntry {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusIoError + '_ {
    move |source| CorpusIoError::Io { path: path.to_path_buf(), source }
}

fn stack(rows: impl Iterator<Item = Vec<f32>>, dim: usize) -> Matrix<f32> {
    let data: Vec<f32> = rows.flatten().collect();
    Matrix::from_vec(data.len() / dim.max(1), dim, data)
}

/// Writes `corpus` under `dir` and returns the manifest path.
pub fn save_corpus(corpus: &SegmentCorpus, dir: &Path) -> Result<PathBuf, CorpusIoError> {
    for sub in ["segments", "questions"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let dims = corpus.dims();
    let mut seg_index = 0usize;
    let mut videos = Vec::with_capacity(corpus.videos().len());
    for v in corpus.videos() {
        let mut segments = Vec::with_capacity(v.segments.len());
        for s in &v.segments {
            let appearance_ref = format!("segments/{seg_index:05}.appearance.tqvf");
            let transcript_ref = format!("segments/{seg_index:05}.transcript.tqvf");
            seg_index += 1;
            features::write(&dir.join(&appearance_ref), &stack(s.clips.iter().map(|c| c.appearance.clone()), dims.visual))?;
            features::write(&dir.join(&transcript_ref), &stack(s.clips.iter().map(|c| c.transcript.clone()), dims.text))?;
            segments.push(SegmentEntry {
                segment_id: s.segment_id.clone(),
                start_s: s.start_s,
                end_s: s.end_s,
                n_clips: s.clips.len(),
                appearance_ref,
                transcript_ref,
                transcript_mask: s.clips.iter().map(|c| c.has_transcript).collect(),
            });
        }
        videos.push(VideoEntry { video_id: v.video_id.clone(), scenario: v.scenario.clone(), segments });
    }

    let mut region_rows = Vec::new();
    let mut questions = Vec::with_capacity(corpus.questions().len());
    for (qi, q) in corpus.questions().iter().enumerate() {
        let text_ref = format!("questions/{qi:05}.text.tqvf");
        features::write(&dir.join(&text_ref), &q.text_tokens)?;
        let regions = q
            .regions
            .iter()
            .map(|r| {
                region_rows.push(r.feature.clone());
                RegionEntry { feature_row: region_rows.len() - 1, aligned_token_span: r.aligned_token_span.map(|s| [s.start, s.end]) }
            })
            .collect();
        questions.push(QuestionEntry {
            question_id: q.question_id.clone(),
            text_ref,
            n_tokens: q.text_tokens.rows(),
            regions,
            query_type: q.query_type.as_str().to_string(),
            scenario: q.scenario.clone(),
            answers: q.answers.iter().cloned().collect(),
        });
    }
    features::write(&dir.join(REGIONS_FILE), &stack(region_rows.into_iter(), dims.visual))?;

    let splits = corpus.splits();
    let list = |s: &BTreeSet<String>| s.iter().cloned().collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dims,
        videos,
        questions,
        regions_ref: REGIONS_FILE.to_string(),
        splits: SplitsEntry { train: list(&splits.train), val: list(&splits.val), test: list(&splits.test) },
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a corpus from a manifest path or from the directory holding `manifest.json`.
pub fn load_corpus(path: &Path) -> Result<SegmentCorpus, CorpusIoError> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CorpusIoError::Json { path: manifest_path.clone(), source })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusIoError::Version(manifest.version));
    }
    let dims = manifest.dims;

    let rows = |m: &Matrix<f32>, id: &str, what: &'static str, expected: usize| {
        if m.rows() == expected {
            Ok(())
        } else {
            Err(CorpusIoError::RowCount { id: id.to_string(), what, expected, found: m.rows() })
        }
    };

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for v in manifest.videos {
        let mut segments = Vec::with_capacity(v.segments.len());
        for s in v.segments {
            let app = features::read_dim(&dir.join(&s.appearance_ref), dims.visual)?;
            let tr = features::read_dim(&dir.join(&s.transcript_ref), dims.text)?;
            rows(&app, &s.segment_id, "appearance", s.n_clips)?;
            rows(&tr, &s.segment_id, "transcript", s.n_clips)?;
            if s.transcript_mask.len() != s.n_clips {
                return Err(CorpusIoError::MaskLength { id: s.segment_id, expected: s.n_clips, found: s.transcript_mask.len() });
            }
            let clips = (0..s.n_clips)
                .map(|j| Clip {
                    clip_index: j,
                    appearance: app.row(j).to_vec(),
                    transcript: tr.row(j).to_vec(),
                    has_transcript: s.transcript_mask[j],
                })
                .collect();
            segments.push(VideoSegment {
                segment_id: s.segment_id,
                video_id: v.video_id.clone(),
                scenario: v.scenario.clone(),
                start_s: s.start_s,
                end_s: s.end_s,
                clips,
            });
        }
        videos.push(Video { video_id: v.video_id, scenario: v.scenario, segments });
    }

    let region_rows = features::read_dim(&dir.join(&manifest.regions_ref), dims.visual)?;
    let mut questions = Vec::with_capacity(manifest.questions.len());
    for q in manifest.questions {
        let text_tokens = features::read_dim(&dir.join(&q.text_ref), dims.text)?;
        rows(&text_tokens, &q.question_id, "text", q.n_tokens)?;
        let query_type = QueryType::parse(&q.query_type)
            .ok_or_else(|| CorpusIoError::QueryType { id: q.question_id.clone(), value: q.query_type.clone() })?;
        let mut regions = Vec::with_capacity(q.regions.len());
        for r in &q.regions {
            if r.feature_row >= region_rows.rows() {
                return Err(CorpusIoError::RegionRow { id: q.question_id.clone(), row: r.feature_row });
            }
            let aligned_token_span = match r.aligned_token_span {
                Some([start, end]) if start >= end => {
                    return Err(CorpusIoError::EmptySpan { id: q.question_id.clone(), start, end });
                }
                Some([start, end]) => Some(TokenSpan { start, end }),
                None => None,
            };
            regions.push(Region { feature: region_rows.row(r.feature_row).to_vec(), aligned_token_span });
        }
        questions.push(MultimodalQuestion {
            question_id: q.question_id,
            text_tokens,
            regions,
            query_type,
            scenario: q.scenario,
            answers: q.answers.into_iter().collect(),
        });
    }

    let set = |v: Vec<String>| v.into_iter().collect::<BTreeSet<_>>();
    let splits = Splits { train: set(manifest.splits.train), val: set(manifest.splits.val), test: set(manifest.splits.test) };
    Ok(SegmentCorpus::new(dims, videos, questions, splits)?)
}
