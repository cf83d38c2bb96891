//! Ranking metrics and sliced evaluation reports.
//!
//! AP is non-interpolated; R@K is a per-query hit indicator averaged over the
//! queries of a slice.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{MultimodalQuestion, QueryType, SegmentCorpus, Split};
use crate::exec::Executor;
use crate::rng;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("trials must be at least 1")]
    ZeroTrials,
    #[error("split has no segments")]
    EmptySplit,
}

/// `(1/|R|) Σ precision@k` over the ranks `k` holding a relevant id. Relevant
/// ids absent from the ranking contribute 0.
pub fn average_precision(ranking: &[String], relevant: &BTreeSet<String>) -> Result<f64, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::EmptyRelevant);
    }
    let mut positions: Vec<usize> = ranking.iter().enumerate().filter(|(_, id)| relevant.contains(*id)).map(|(i, _)| i + 1).collect();
    positions.sort_unstable();
    Ok(ap_from_positions(&positions, relevant.len()))
}

/// AP from the sorted 1-based ranks of the retrieved relevant items.
fn ap_from_positions(positions: &[usize], n_relevant: usize) -> f64 {
    let mut sum = 0.0;
    for (hits, &p) in positions.iter().enumerate() {
        sum += (hits + 1) as f64 / p as f64;
    }
    sum / n_relevant as f64
}

/// 1 iff any relevant id is among the first `k` entries.
pub fn recall_at_k(ranking: &[String], relevant: &BTreeSet<String>, k: usize) -> Result<u8, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    Ok(u8::from(ranking.iter().take(k).any(|id| relevant.contains(id))))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@50")]
    pub r50: f64,
    pub n_queries: usize,
}

impl SliceMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            50 => Some(self.r50),
            _ => None,
        }
    }
}

/// Per-query outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub question_id: String,
    pub query_type: QueryType,
    pub unseen: bool,
    pub ap: f64,
    /// Hit indicators (possibly trial-averaged) for [`RECALL_KS`].
    pub recall: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportProvenance {
    pub split: String,
    pub ranker: String,
    pub checkpoint: Option<String>,
    pub mask: Option<String>,
    pub fusion: Option<String>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub slices: BTreeMap<String, SliceMetrics>,
    /// Questions skipped because none of their answers lie in the split.
    pub excluded: usize,
    pub provenance: ReportProvenance,
}

pub const SLICE_NAMES: [&str; 6] = ["all", "type:t", "type:v", "type:tv", "seen", "unseen"];

impl EvalReport {
    /// Slice means over `results`, in their given order.
    pub fn from_results(results: &[QueryResult], excluded: usize, provenance: ReportProvenance) -> Self {
        let mut slices = BTreeMap::new();
        for name in SLICE_NAMES {
            let members = results.iter().filter(|r| match name {
                "all" => true,
                "seen" => !r.unseen,
                "unseen" => r.unseen,
                other => other.strip_prefix("type:") == Some(r.query_type.as_str()),
            });
            slices.insert(name.to_string(), mean_metrics(members));
        }
        Self { slices, excluded, provenance }
    }

    pub fn slice(&self, name: &str) -> Option<&SliceMetrics> {
        self.slices.get(name)
    }
}

fn mean_metrics<'a>(results: impl Iterator<Item = &'a QueryResult>) -> SliceMetrics {
    let mut m = SliceMetrics::default();
    let mut sums = [0.0; 4];
    for r in results {
        m.n_queries += 1;
        m.map += r.ap;
        for (s, v) in sums.iter_mut().zip(r.recall) {
            *s += v;
        }
    }
    if m.n_queries > 0 {
        let n = m.n_queries as f64;
        m.map /= n;
        [m.r1, m.r5, m.r10, m.r50] = sums.map(|s| s / n);
    }
    m
}

/// Per-query results plus the ids of excluded questions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub results: Vec<QueryResult>,
    pub excluded: Vec<String>,
}

impl Evaluation {
    pub fn report(&self, provenance: ReportProvenance) -> EvalReport {
        EvalReport::from_results(&self.results, self.excluded.len(), provenance)
    }
}

fn in_split_answers(corpus: &SegmentCorpus, q: &MultimodalQuestion, split: Split) -> BTreeSet<String> {
    corpus.answers_in(q, split).cloned().collect()
}

/// Scores every question of `split` against the ranking `rank_fn` returns for it.
pub fn evaluate<E, F, Err>(corpus: &SegmentCorpus, split: Split, rank_fn: F, exec: &E) -> Result<Evaluation, Err>
where
    E: Executor,
    F: Fn(&MultimodalQuestion) -> Result<Vec<String>, Err> + Sync + Send,
    Err: Send,
{
    let mut excluded = Vec::new();
    let mut queries = Vec::new();
    for q in corpus.questions_in(split) {
        let relevant = in_split_answers(corpus, q, split);
        if relevant.is_empty() {
            excluded.push(q.question_id.clone());
        } else {
            queries.push((q, relevant));
        }
    }
    let results = exec.map(&queries, |(q, relevant)| {
        let ranking = rank_fn(q)?;
        let ap = average_precision(&ranking, relevant).unwrap_or(0.0);
        let recall = RECALL_KS.map(|k| f64::from(recall_at_k(&ranking, relevant, k).unwrap_or(0)));
        Ok(QueryResult { question_id: q.question_id.clone(), query_type: q.query_type, unseen: corpus.is_unseen(&q.scenario), ap, recall })
    });
    Ok(Evaluation { results: results.into_iter().collect::<Result<_, _>>()?, excluded })
}

/// Metrics of uniformly shuffled rankings of the split's segments, averaged
/// over `trials` shuffles per question.
///
/// Metrics depend only on where the relevant ids land, and under a uniform
/// shuffle those ranks are a uniform random subset of `1..=N`, so each trial
/// draws that subset directly.
pub fn random_baseline(corpus: &SegmentCorpus, split: Split, trials: usize, seed: u64) -> Result<Evaluation, MetricsError> {
    if trials == 0 {
        return Err(MetricsError::ZeroTrials);
    }
    let n = corpus.segments_in(split).count();
    if n == 0 {
        return Err(MetricsError::EmptySplit);
    }
    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for (qi, q) in corpus.questions_in(split).enumerate() {
        let r = corpus.answers_in(q, split).count();
        if r == 0 {
            excluded.push(q.question_id.clone());
            continue;
        }
        let mut rng = rng::derive(seed, "random-baseline", &[qi as u64]);
        let mut ap = 0.0;
        let mut recall = [0.0; 4];
        let mut positions = vec![0usize; r];
        for _ in 0..trials {
            for (p, i) in positions.iter_mut().zip(rand::seq::index::sample(&mut rng, n, r)) {
                *p = i + 1;
            }
            positions.sort_unstable();
            ap += ap_from_positions(&positions, r);
            for (acc, k) in recall.iter_mut().zip(RECALL_KS) {
                *acc += f64::from(u8::from(positions[0] <= k));
            }
        }
        let t = trials as f64;
        results.push(QueryResult {
            question_id: q.question_id.clone(),
            query_type: q.query_type,
            unseen: corpus.is_unseen(&q.scenario),
            ap: ap / t,
            recall: recall.map(|x| x / t),
        });
    }
    Ok(Evaluation { results, excluded })
}

/// `H_n = Σ_{i=1}^{n} 1/i`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}
