//! Cached segment embeddings and exhaustive dot-product search.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::{MultimodalQuestion, SegmentCorpus, Split, VideoSegment};
use crate::dme::{DmeError, DmeModel, MaskSpec};
use crate::exec::Executor;
use crate::matrix::{dot, l2_norm};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate segment id `{0}` in index")]
    DuplicateId(String),
    #[error("entry `{id}` has dimension {found}, index expects {expected}")]
    Dim { id: String, expected: usize, found: usize },
    #[error("entry `{0}` is not unit-norm")]
    NotUnit(String),
    #[error("question `{0}` has no regions")]
    NoRegion(String),
    #[error(transparent)]
    Model(#[from] DmeError),
}

/// One ranked result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub segment_id: String,
    pub score: f32,
}

/// Segment embeddings plus the provenance needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    pub checkpoint_id: String,
    pub mask: MaskSpec,
}

const UNIT_TOL: f64 = 1e-5;

impl EmbeddingIndex {
    /// Validates ids (unique) and vectors (dimension `dim`, unit norm).
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>, checkpoint_id: String, mask: MaskSpec) -> Result<Self, RetrievalError> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        let mut seen = alloc::collections::BTreeSet::new();
        for (id, v) in entries {
            if v.len() != dim {
                return Err(RetrievalError::Dim { id, expected: dim, found: v.len() });
            }
            if (f64::from(l2_norm(&v)) - 1.0).abs() > UNIT_TOL {
                return Err(RetrievalError::NotUnit(id));
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            ids.push(id);
            vectors.extend_from_slice(&v);
        }
        Ok(Self { dim, ids, vectors, checkpoint_id, mask })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), self.vector(i)))
    }

    /// Top `min(k, N)` entries by descending dot product.
    pub fn search(&self, hq: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let scores: Vec<f32> = (0..self.len()).map(|i| dot(hq, self.vector(i))).collect();
        let mut order = rank_scores(&self.ids, &scores);
        order.truncate(k);
        Ok(order.into_iter().map(|i| Hit { segment_id: self.ids[i].clone(), score: scores[i] }).collect())
    }

    pub fn rank_all(&self, hq: &[f32]) -> Result<Vec<Hit>, RetrievalError> {
        self.search(hq, self.len().max(1))
    }
}

/// Indices ordered by descending score, ties by ascending id.
pub fn rank_scores<T: Real>(ids: &[String], scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a].as_f64(), scores[b].as_f64());
        match sb.total_cmp(&sa) {
            Ordering::Equal => ids[a].cmp(&ids[b]),
            o => o,
        }
    });
    order
}

/// Embeds every segment of `split` with the video encoder.
pub fn build_index<E: Executor>(
    model: &DmeModel<f32>,
    corpus: &SegmentCorpus,
    split: Split,
    mask: &MaskSpec,
    checkpoint_id: &str,
    exec: &E,
) -> Result<EmbeddingIndex, RetrievalError> {
    let segments: Vec<&VideoSegment> = corpus.segments_in(split).collect();
    let vectors = exec.map(&segments, |s| model.encode_video(s, mask));
    let entries = segments.iter().zip(vectors).map(|(s, v)| Ok((s.segment_id.clone(), v?))).collect::<Result<Vec<_>, DmeError>>()?;
    EmbeddingIndex::new(model.config().encoder.d, entries, checkpoint_id.into(), *mask)
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Untrained stand-in for a visual matcher: cosine between the question's
/// first region and the element-wise max of each segment's appearance clips.
pub fn visual_match_rank(corpus: &SegmentCorpus, split: Split, q: &MultimodalQuestion) -> Result<Vec<Hit>, RetrievalError> {
    let region = q.regions.first().ok_or_else(|| RetrievalError::NoRegion(q.question_id.clone()))?;
    let segments: Vec<&VideoSegment> = corpus.segments_in(split).collect();
    let ids: Vec<String> = segments.iter().map(|s| s.segment_id.clone()).collect();
    let scores: Vec<f32> = segments
        .iter()
        .map(|s| {
            let mut pooled = alloc::vec![f32::NEG_INFINITY; corpus.dims().visual];
            for c in &s.clips {
                for (p, &v) in pooled.iter_mut().zip(&c.appearance) {
                    *p = p.max(v);
                }
            }
            cosine(&region.feature, &pooled)
        })
        .collect();
    Ok(rank_scores(&ids, &scores).into_iter().map(|i| Hit { segment_id: ids[i].clone(), score: scores[i] }).collect())
}
