//! In-batch contrastive training.
//!
//! Each batch pairs `B` questions with one answer segment each; every other
//! pairing in the batch is a negative. The loss is the sum of the
//! video-to-question and question-to-video cross entropies over the
//! temperature-scaled similarity matrix.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Clip, Dims, MultimodalQuestion, QueryType, Region, SegmentCorpus, Split, TokenSpan, VideoSegment};
use crate::dme::{DmeConfig, DmeError, DmeModel, EncoderConfig, FusionMode, MaskSpec};
use crate::exec::{Executor, Sequential};
use crate::matrix::Matrix;
use crate::nn::{adam_step, grad_check, AdamConfig, Fault, GradCheckReport, Grads, NnError, ParamStore, Tape};
use crate::real::Real;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite embeddings passed to the loss")]
    NonFiniteInput,
    #[error("embedding matrices differ in shape: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("question `{0}` has no answer in the sampled split")]
    NoAnswer(String),
    #[error("split has {found} questions, need at least {need}")]
    TooFewQuestions { need: usize, found: usize },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Model(#[from] DmeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("observer failed: {0}")]
    Observer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp from 0 to `lr` over the first `steps` optimizer steps.
    Warmup { steps: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Warmup { steps } if step < steps => base * (step + 1) as f64 / steps as f64,
            LrSchedule::Warmup { .. } => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Softmax temperature σ.
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Optimizer steps between checkpoint callbacks; 0 means end of training only.
    pub eval_every: u64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            temperature: 0.05,
            lr: 3e-5,
            epochs: 20,
            seed: 0,
            eval_every: 0,
            schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Temperature(self.temperature));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Loss value plus its gradients with respect to both embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub d_hq: Matrix<T>,
    pub d_hv: Matrix<T>,
}

/// `L = L1 + L2` over `S = HQ·HVᵀ / σ`: `L2` is the mean row-wise (question →
/// segments) cross entropy, `L1` the column-wise (segment → questions) one.
pub fn contrastive_loss<T: Real>(hq: &Matrix<T>, hv: &Matrix<T>, sigma: f64) -> Result<LossOutput<T>, TrainError> {
    if !(sigma > 0.0) {
        return Err(TrainError::Temperature(sigma));
    }
    if hq.shape() != hv.shape() {
        return Err(TrainError::Shape(hq.shape(), hv.shape()));
    }
    if !hq.is_finite() || !hv.is_finite() {
        return Err(TrainError::NonFiniteInput);
    }
    let b = hq.rows();
    let inv_sigma = T::lit(1.0 / sigma);
    let mut s = hq.matmul_nt(hv);
    s.scale(inv_sigma);

    // row softmax (fixed question) and column softmax (fixed segment)
    let mut g = Matrix::zeros(b, b);
    let mut loss = T::zero();
    let inv_b = T::lit(1.0 / b as f64);
    for i in 0..b {
        let row: Vec<T> = s.row(i).to_vec();
        let (lse, p) = log_softmax_parts(&row);
        loss = loss + (lse - row[i]) * inv_b;
        for j in 0..b {
            g[(i, j)] = g[(i, j)] + p[j] * inv_b;
        }
        g[(i, i)] = g[(i, i)] - inv_b;
    }
    for i in 0..b {
        let col: Vec<T> = (0..b).map(|j| s[(j, i)]).collect();
        let (lse, p) = log_softmax_parts(&col);
        loss = loss + (lse - col[i]) * inv_b;
        for j in 0..b {
            g[(j, i)] = g[(j, i)] + p[j] * inv_b;
        }
        g[(i, i)] = g[(i, i)] - inv_b;
    }
    g.scale(inv_sigma);
    let d_hq = g.matmul(hv);
    let d_hv = g.matmul_tn(hq);
    Ok(LossOutput { loss, d_hq, d_hv })
}

/// Log-sum-exp with max shift, and the softmax probabilities.
fn log_softmax_parts<T: Real>(x: &[T]) -> (T, Vec<T>) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    // the max term contributes exactly 1, so ln z = ln1p(z − 1)
    let lse = m + (z - T::one()).ln_1p();
    (lse, e.into_iter().map(|v| v / z).collect())
}

/// Questions paired with one answer segment each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSample {
    pub question_ids: Vec<String>,
    pub segment_ids: Vec<String>,
    /// Positions whose segment already appeared earlier in the batch.
    pub collisions: usize,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.question_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.question_ids.is_empty()
    }
}

fn pair_batch(corpus: &SegmentCorpus, split: Split, questions: &[&MultimodalQuestion], rng: &mut Rng) -> Result<BatchSample, TrainError> {
    let mut question_ids = Vec::with_capacity(questions.len());
    let mut segment_ids: Vec<String> = Vec::with_capacity(questions.len());
    let mut collisions = 0;
    for q in questions {
        let answers: Vec<&String> = corpus.answers_in(q, split).collect();
        let seg = answers.choose(rng).ok_or_else(|| TrainError::NoAnswer(q.question_id.clone()))?;
        if segment_ids.iter().any(|s| s == *seg) {
            collisions += 1;
        }
        question_ids.push(q.question_id.clone());
        segment_ids.push((*seg).clone());
    }
    Ok(BatchSample { question_ids, segment_ids, collisions })
}

/// `b` distinct questions from `split`, each with one uniformly drawn in-split answer.
pub fn sample_batch(corpus: &SegmentCorpus, split: Split, b: usize, rng: &mut Rng) -> Result<BatchSample, TrainError> {
    let pool: Vec<&MultimodalQuestion> = corpus.questions_in(split).collect();
    if pool.len() < b {
        return Err(TrainError::TooFewQuestions { need: b, found: pool.len() });
    }
    let picked: Vec<&MultimodalQuestion> = rand::seq::index::sample(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect();
    pair_batch(corpus, split, &picked, rng)
}

/// One epoch: a shuffled pass over the split's questions cut into batches of
/// `b`. A trailing batch smaller than `min(2, b)` is dropped since it carries
/// no negatives.
pub fn epoch_batches(corpus: &SegmentCorpus, split: Split, b: usize, seed: u64, epoch: u64) -> Result<Vec<BatchSample>, TrainError> {
    let mut pool: Vec<&MultimodalQuestion> = corpus.questions_in(split).collect();
    if pool.is_empty() {
        return Err(TrainError::TooFewQuestions { need: 1, found: 0 });
    }
    pool.shuffle(&mut rng::derive(seed, "epoch-order", &[epoch]));
    let mut answer_rng = rng::derive(seed, "answer-draw", &[epoch]);
    pool.chunks(b).filter(|c| c.len() >= b.min(2)).map(|c| pair_batch(corpus, split, c, &mut answer_rng)).collect()
}

/// Loss and accumulated parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub grads: Grads<T>,
}

/// Options for [`batch_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub sigma: f64,
    /// Dropout rate; 0 disables dropout.
    pub dropout: f64,
    /// Keys the dropout streams: `(seed, step)`.
    pub dropout_key: (u64, u64),
    pub mask: MaskSpec,
    pub fault: Option<Fault>,
}

/// Forward both encoders for every pair, evaluate the loss, and backpropagate
/// through each per-sample tape. Gradients are merged in pair order.
pub fn batch_gradients<T: Real, E: Executor>(
    model: &DmeModel<T>,
    pairs: &[(&MultimodalQuestion, &VideoSegment)],
    opts: &StepOptions,
    exec: &E,
) -> Result<BatchGradients<T>, TrainError> {
    let b = pairs.len();
    let d = model.config().encoder.d;
    let (seed, step) = opts.dropout_key;
    let jobs: Vec<(usize, bool)> = (0..b).flat_map(|i| [(i, true), (i, false)]).collect();
    let tape_for = |i: usize, side: u64| {
        let mut t = if opts.dropout > 0.0 {
            Tape::with_dropout(model.store(), opts.dropout, rng::derive(seed, "dropout", &[step, i as u64, side]))
        } else {
            Tape::new(model.store())
        };
        if let Some(f) = opts.fault {
            t.inject_fault(f);
        }
        t
    };
    let forwards = exec.map(&jobs, |&(i, is_q)| {
        let mut tape = tape_for(i, u64::from(!is_q));
        let out = if is_q {
            model.question_forward(&mut tape, pairs[i].0, &opts.mask)
        } else {
            model.video_forward(&mut tape, pairs[i].1, &opts.mask)
        };
        out.map(|h| (tape, h))
    });
    let forwards = forwards.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut hq = Matrix::zeros(b, d);
    let mut hv = Matrix::zeros(b, d);
    for (k, (tape, h)) in forwards.iter().enumerate() {
        let (i, is_q) = jobs[k];
        let dst = if is_q { hq.row_mut(i) } else { hv.row_mut(i) };
        dst.copy_from_slice(tape.value(*h).as_slice());
    }
    let out = contrastive_loss(&hq, &hv, opts.sigma)?;
    let idx: Vec<usize> = (0..jobs.len()).collect();
    let partial = exec.map(&idx, |&k| {
        let (tape, h) = &forwards[k];
        let (i, is_q) = jobs[k];
        let seed = Matrix::row_vector(if is_q { out.d_hq.row(i).to_vec() } else { out.d_hv.row(i).to_vec() });
        let mut g = Grads::for_store(model.store());
        tape.backward(*h, seed).map(|gr| {
            gr.accumulate_params(tape, &mut g);
            g
        })
    });
    let mut grads = Grads::for_store(model.store());
    for g in partial {
        grads.merge(&g?);
    }
    Ok(BatchGradients { loss: out.loss, grads })
}

/// Loss of one batch without gradients (dropout off).
pub fn batch_loss<T: Real, E: Executor>(
    model: &DmeModel<T>,
    pairs: &[(&MultimodalQuestion, &VideoSegment)],
    sigma: f64,
    mask: &MaskSpec,
    exec: &E,
) -> Result<T, TrainError> {
    let d = model.config().encoder.d;
    let b = pairs.len();
    let hs = exec.map(pairs, |(q, v)| Ok::<_, DmeError>((model.encode_question(q, mask)?, model.encode_video(v, mask)?)));
    let mut hq = Matrix::zeros(b, d);
    let mut hv = Matrix::zeros(b, d);
    for (i, h) in hs.into_iter().enumerate() {
        let (q, v) = h?;
        hq.row_mut(i).copy_from_slice(&q);
        hv.row_mut(i).copy_from_slice(&v);
    }
    Ok(contrastive_loss(&hq, &hv, sigma)?.loss)
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub collisions: usize,
}

/// Where a run stands; persisted in checkpoints so training can resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Hooks for tracing, checkpointing and periodic evaluation.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<(), String> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _model: &DmeModel<T>, _progress: TrainProgress) -> Result<(), String> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _model: &DmeModel<T>, _progress: TrainProgress) -> Result<(), String> {
        Ok(())
    }
}

/// Keeps the trace in memory.
#[derive(Debug, Clone, Default)]
pub struct TraceRecorder {
    pub records: Vec<StepRecord>,
}

impl<T> TrainObserver<T> for TraceRecorder {
    fn on_step(&mut self, record: &StepRecord) -> Result<(), String> {
        self.records.push(*record);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub progress: TrainProgress,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub collisions: usize,
}

/// Trains on the corpus's train split from `start` until `cfg.epochs` epochs are complete.
///
/// A non-finite loss or gradient aborts with [`TrainError::Diverged`] before
/// the offending update touches the model.
pub fn train<T: Real, E: Executor>(
    model: &mut DmeModel<T>,
    corpus: &SegmentCorpus,
    cfg: &TrainConfig,
    start: TrainProgress,
    exec: &E,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let mut progress = start;
    let mut summary = TrainSummary { progress, first_loss: None, last_loss: None, collisions: 0 };
    let dropout = model.config().encoder.dropout;
    for epoch in start.epoch..cfg.epochs as u64 {
        for batch in epoch_batches(corpus, Split::Train, cfg.batch_size, cfg.seed, epoch)? {
            let pairs = resolve(corpus, &batch)?;
            let opts =
                StepOptions { sigma: cfg.temperature, dropout, dropout_key: (cfg.seed, progress.step), mask: MaskSpec::NONE, fault: None };
            let out = batch_gradients(model, &pairs, &opts, exec)?;
            let loss = out.loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step: progress.step, reason: "loss is not finite".to_string() });
            }
            let lr = cfg.schedule.lr_at(cfg.lr, progress.step);
            adam_step(model.store_mut(), &out.grads, &cfg.adam(lr))
                .map_err(|e| TrainError::Diverged { step: progress.step, reason: e.to_string() })?;
            progress.step += 1;
            summary.first_loss.get_or_insert(loss);
            summary.last_loss = Some(loss);
            summary.collisions += batch.collisions;
            let record = StepRecord { step: progress.step, epoch, loss, lr, collisions: batch.collisions };
            observer.on_step(&record).map_err(TrainError::Observer)?;
            if cfg.eval_every > 0 && progress.step.is_multiple_of(cfg.eval_every) {
                observer.on_checkpoint(model, progress).map_err(TrainError::Observer)?;
            }
        }
        progress.epoch = epoch + 1;
        observer.on_epoch_end(model, progress).map_err(TrainError::Observer)?;
    }
    summary.progress = progress;
    observer.on_checkpoint(model, progress).map_err(TrainError::Observer)?;
    Ok(summary)
}

/// Looks up the question and segment records of a batch.
pub fn resolve<'c>(corpus: &'c SegmentCorpus, batch: &BatchSample) -> Result<Vec<(&'c MultimodalQuestion, &'c VideoSegment)>, TrainError> {
    batch
        .question_ids
        .iter()
        .zip(&batch.segment_ids)
        .map(|(q, s)| {
            let q = corpus.question(q).ok_or_else(|| TrainError::NoAnswer(q.clone()))?;
            let s = corpus.segment(s).ok_or_else(|| TrainError::NoAnswer(q.question_id.clone()))?;
            Ok((q, s))
        })
        .collect()
}

/// Finite-difference check of the full batch loss on a tiny 64-bit model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCheck {
    pub fusion: FusionMode,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch: usize,
    pub question_tokens: usize,
    pub regions: usize,
    pub clips: usize,
    pub dims: Dims,
    pub coords: usize,
    pub step: f64,
    pub sigma: f64,
    /// Half-width of the uniform offset added to every initial parameter, so
    /// that the check does not run at the near-linear fresh initialization.
    pub perturb: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for LossCheck {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Concat,
            d: 8,
            layers: 1,
            heads: 2,
            batch: 2,
            question_tokens: 3,
            regions: 2,
            clips: 4,
            dims: Dims { visual: 5, text: 4 },
            coords: 200,
            step: 1e-5,
            sigma: 0.05,
            perturb: 0.3,
            seed: 0,
            fault: None,
        }
    }
}

pub fn check_loss_gradients(check: &LossCheck) -> Result<GradCheckReport, TrainError> {
    let dims = check.dims;
    let cfg = DmeConfig {
        encoder: EncoderConfig {
            layers: check.layers,
            d: check.d,
            heads: check.heads,
            ffn_mult: 4,
            dropout: 0.0,
            max_seq_len: (check.question_tokens + check.regions).max(check.clips * 2) + 1,
        },
        dims,
        fusion: check.fusion,
    };
    let mut model = DmeModel::<f64>::new(cfg, check.seed)?;
    let mut rng = rng::substream(check.seed, "gradcheck-perturb");
    if check.perturb > 0.0 {
        for p in model.store_mut().iter_mut() {
            p.value.as_mut_slice().iter_mut().for_each(|x| *x += rng.random_range(-check.perturb..check.perturb));
        }
    }
    let uniform = |n: usize, rng: &mut Rng| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
    let mut questions = Vec::with_capacity(check.batch);
    let mut segments = Vec::with_capacity(check.batch);
    for i in 0..check.batch {
        let mut rng = rng::derive(check.seed, "gradcheck-data", &[i as u64]);
        let lq = check.question_tokens;
        questions.push(MultimodalQuestion {
            question_id: format!("q{i}"),
            text_tokens: Matrix::from_vec(lq, dims.text, uniform(lq * dims.text, &mut rng)),
            regions: (0..check.regions)
                .map(|r| Region {
                    feature: uniform(dims.visual, &mut rng),
                    aligned_token_span: (r > 0).then(|| TokenSpan { start: (r - 1) % lq, end: lq }),
                })
                .collect(),
            query_type: QueryType::TV,
            scenario: "s".to_string(),
            answers: [format!("seg{i}")].into_iter().collect(),
        });
        segments.push(VideoSegment {
            segment_id: format!("seg{i}"),
            video_id: format!("vid{i}"),
            scenario: "s".to_string(),
            start_s: 0.0,
            end_s: 1.5 * check.clips as f64,
            clips: (0..check.clips)
                .map(|j| Clip {
                    clip_index: j,
                    appearance: uniform(dims.visual, &mut rng),
                    transcript: uniform(dims.text, &mut rng),
                    has_transcript: true,
                })
                .collect(),
        });
    }
    let pairs: Vec<_> = questions.iter().zip(&segments).collect();
    let opts = StepOptions { sigma: check.sigma, dropout: 0.0, dropout_key: (0, 0), mask: MaskSpec::NONE, fault: check.fault };
    let analytic = batch_gradients(&model, &pairs, &opts, &Sequential)?;
    let loss = |s: &ParamStore<f64>| match DmeModel::from_store(cfg, s.clone()) {
        Ok(m) => batch_loss(&m, &pairs, check.sigma, &MaskSpec::NONE, &Sequential).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    };
    Ok(grad_check(loss, model.store(), &analytic.grads, check.step, check.coords, check.seed)?)
}
