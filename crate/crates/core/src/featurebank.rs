//! Clip-level pooling of frame and token feature streams.
//!
//! Streams are max-pooled over half-open windows `[start + j·w, start + (j+1)·w)`
//! clipped to the segment end; an empty window yields a zero row.

use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::Clip;
use crate::matrix::Matrix;

pub const DEFAULT_WINDOW_S: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("timestamps must be strictly increasing (violated at index {0})")]
    NonIncreasing(usize),
    #[error("{timestamps} timestamps for {rows} feature rows")]
    LengthMismatch { timestamps: usize, rows: usize },
    #[error("segment end must exceed start")]
    InvalidBounds,
    #[error("window length must be positive")]
    InvalidWindow,
    #[error("expected feature dimension {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
}

/// Timestamped feature rows (frames at a fixed rate, or transcript tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    timestamps: Vec<f64>,
    features: Matrix<f32>,
}

impl FeatureStream {
    pub fn new(timestamps: Vec<f64>, features: Matrix<f32>) -> Result<Self, FeatureError> {
        if timestamps.len() != features.rows() {
            return Err(FeatureError::LengthMismatch { timestamps: timestamps.len(), rows: features.rows() });
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(FeatureError::NonIncreasing(i + 1));
        }
        Ok(Self { timestamps, features })
    }

    pub fn empty(dim: usize) -> Self {
        Self { timestamps: Vec::new(), features: Matrix::zeros(0, dim) }
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn features(&self) -> &Matrix<f32> {
        &self.features
    }
}

/// Pooled rows plus which windows had at least one contributing entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub rows: Matrix<f32>,
    pub nonempty: Vec<bool>,
}

/// Number of windows covering `[start, end)`: `ceil((end − start) / w)`.
pub fn window_count(start_s: f64, end_s: f64, window_s: f64) -> usize {
    let x = (end_s - start_s) / window_s;
    // absorb representation error in exact multiples
    (num_traits::Float::ceil(x - 1e-9) as usize).max(1)
}

pub fn pool_windows(stream: &FeatureStream, start_s: f64, end_s: f64, window_s: f64) -> Result<Pooled, FeatureError> {
    if !(end_s > start_s) {
        return Err(FeatureError::InvalidBounds);
    }
    if !(window_s > 0.0) {
        return Err(FeatureError::InvalidWindow);
    }
    let l = window_count(start_s, end_s, window_s);
    let d = stream.dim();
    let mut rows = Matrix::from_vec(l, d, vec![f32::NEG_INFINITY; l * d]);
    let mut nonempty = vec![false; l];
    for (i, &t) in stream.timestamps.iter().enumerate() {
        if t < start_s || t >= end_s {
            continue;
        }
        let j = (num_traits::Float::floor((t - start_s) / window_s) as usize).min(l - 1);
        nonempty[j] = true;
        for (o, &v) in rows.row_mut(j).iter_mut().zip(stream.features.row(i)) {
            if v > *o {
                *o = v;
            }
        }
    }
    for (j, &filled) in nonempty.iter().enumerate() {
        if !filled {
            rows.row_mut(j).fill(0.0);
        }
    }
    Ok(Pooled { rows, nonempty })
}

/// Clips of one segment plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltClips {
    pub clips: Vec<Clip>,
    /// Clip indices whose appearance window had no frames (stored as zero rows).
    pub empty_appearance: Vec<usize>,
}

/// Pools both channels on the same window grid so clip `j` is temporally aligned.
pub fn build_segment(
    appearance: &FeatureStream,
    transcript: &FeatureStream,
    start_s: f64,
    end_s: f64,
    window_s: f64,
) -> Result<BuiltClips, FeatureError> {
    let app = pool_windows(appearance, start_s, end_s, window_s)?;
    let txt = pool_windows(transcript, start_s, end_s, window_s)?;
    debug_assert_eq!(app.rows.rows(), txt.rows.rows());
    let clips = (0..app.rows.rows())
        .map(|j| Clip {
            clip_index: j,
            appearance: app.rows.row(j).to_vec(),
            transcript: txt.rows.row(j).to_vec(),
            has_transcript: txt.nonempty[j],
        })
        .collect();
    let empty_appearance = app.nonempty.iter().enumerate().filter(|(_, &f)| !f).map(|(j, _)| j).collect();
    Ok(BuiltClips { clips, empty_appearance })
}

/// Like [`build_segment`], checking channel dimensions against the corpus.
pub fn build_segment_checked(
    appearance: &FeatureStream,
    transcript: &FeatureStream,
    dims: crate::corpus::Dims,
    start_s: f64,
    end_s: f64,
    window_s: f64,
) -> Result<BuiltClips, FeatureError> {
    if appearance.dim() != dims.visual {
        return Err(FeatureError::DimMismatch { expected: dims.visual, found: appearance.dim() });
    }
    if transcript.dim() != dims.text {
        return Err(FeatureError::DimMismatch { expected: dims.text, found: transcript.dim() });
    }
    build_segment(appearance, transcript, start_s, end_s, window_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::vec::Vec as StdVec;

    fn stream(ts: &[f64], rows: &[&[f32]]) -> FeatureStream {
        FeatureStream::new(ts.to_vec(), Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn constant_stream_pools_to_itself() {
        let ts: StdVec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let rows: StdVec<&[f32]> = (0..30).map(|_| &[3.0f32, -1.0][..]).collect();
        let p = pool_windows(&stream(&ts, &rows), 0.0, 3.0, 1.5).unwrap();
        assert_eq!(p.rows.as_slice(), &[3.0, -1.0, 3.0, -1.0]);
        assert_eq!(p.nonempty, vec![true, true]);
    }

    #[test]
    fn elementwise_max_per_window() {
        let s = stream(&[0.2, 1.0, 2.0], &[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]);
        let p = pool_windows(&s, 0.0, 3.0, 1.5).unwrap();
        assert_eq!(p.rows.row(0), &[1.0, 2.0]);
        assert_eq!(p.rows.row(1), &[3.0, 1.0]);
    }

    #[test]
    fn empty_window_is_zero_and_flagged() {
        let s = stream(&[0.5], &[&[-2.0, 4.0]]);
        let p = pool_windows(&s, 0.0, 3.0, 1.5).unwrap();
        assert_eq!(p.rows.row(1), &[0.0, 0.0]);
        assert_eq!(p.nonempty, vec![true, false]);
    }

    #[test]
    fn clip_counts() {
        assert_eq!(window_count(0.0, 70.5, 1.5), 47);
        assert_eq!(window_count(5.0, 6.0, 1.5), 1);
        assert_eq!(window_count(0.0, 3.0, 1.5), 2);
        assert_eq!(window_count(0.0, 3.1, 1.5), 3);
    }

    #[test]
    fn missing_transcripts_yield_masked_zero_clips() {
        let ts: StdVec<f64> = (0..705).map(|i| i as f64 * 0.1).collect();
        let data: StdVec<f32> = (0..705 * 2).map(|i| (i % 7) as f32).collect();
        let app = FeatureStream::new(ts, Matrix::from_vec(705, 2, data)).unwrap();
        let built = build_segment(&app, &FeatureStream::empty(3), 0.0, 70.5, 1.5).unwrap();
        assert_eq!(built.clips.len(), 47);
        assert!(built.clips.iter().all(|c| !c.has_transcript && c.transcript == vec![0.0; 3]));
        assert!(built.empty_appearance.is_empty());

        let one = build_segment(&app, &FeatureStream::empty(3), 0.0, 1.0, 1.5).unwrap();
        assert_eq!(one.clips.len(), 1);
    }

    #[test]
    fn stream_errors() {
        assert_eq!(FeatureStream::new(vec![0.0, 0.0], Matrix::zeros(2, 1)).unwrap_err(), FeatureError::NonIncreasing(1));
        assert!(matches!(FeatureStream::new(vec![0.0], Matrix::zeros(2, 1)), Err(FeatureError::LengthMismatch { .. })));
        let s = FeatureStream::empty(2);
        assert_eq!(pool_windows(&s, 1.0, 1.0, 1.5).unwrap_err(), FeatureError::InvalidBounds);
        assert_eq!(pool_windows(&s, 0.0, 1.0, 0.0).unwrap_err(), FeatureError::InvalidWindow);
        let dims = crate::corpus::Dims { visual: 3, text: 2 };
        assert!(matches!(build_segment_checked(&s, &s, dims, 0.0, 1.0, 1.5), Err(FeatureError::DimMismatch { .. })));
    }

    proptest! {
        #[test]
        fn pooled_rows_match_brute_force_scan(
            gaps in proptest::collection::vec(0.01f64..0.7, 0..60),
            start in 0.0f64..2.0,
            len in 0.3f64..12.0,
            window in 0.2f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut t = 0.0;
            let ts: StdVec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
            let mut rng = crate::rng::derive(seed, "prop", &[]);
            let data: StdVec<f32> = (0..ts.len() * 3).map(|_| rand::Rng::random_range(&mut rng, -5.0f32..5.0)).collect();
            let s = FeatureStream::new(ts.clone(), Matrix::from_vec(ts.len(), 3, data)).unwrap();
            let end = start + len;
            let p = pool_windows(&s, start, end, window).unwrap();
            prop_assert_eq!(p.rows.rows(), window_count(start, end, window));
            for j in 0..p.rows.rows() {
                let lo = start + j as f64 * window;
                let hi = (start + (j + 1) as f64 * window).min(end);
                let members: StdVec<usize> = (0..ts.len()).filter(|&i| ts[i] >= lo && ts[i] < hi).collect();
                // boundary rounding can move an entry exactly on a window edge; skip those windows
                if ts.iter().any(|&x| (x - lo).abs() < 1e-9 || (x - hi).abs() < 1e-9) { continue; }
                prop_assert_eq!(p.nonempty[j], !members.is_empty());
                for c in 0..3 {
                    let expect = members.iter().map(|&i| s.features()[(i, c)]).fold(f32::NEG_INFINITY, f32::max);
                    let expect = if members.is_empty() { 0.0 } else { expect };
                    prop_assert_eq!(p.rows[(j, c)], expect);
                }
            }
        }
    }
}
