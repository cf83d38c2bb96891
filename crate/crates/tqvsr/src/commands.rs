//! What each subcommand does, callable in-process.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tqvsr_core::corpus::{MultimodalQuestion, QueryType, Region, TokenSpan, TypeHistogram};
use tqvsr_core::metrics::{self, EvalReport, ReportProvenance, SliceMetrics, SLICE_NAMES};
use tqvsr_core::nn::{Fault, GradCheckReport};
use tqvsr_core::retrieval::{self, EmbeddingIndex, Hit};
use tqvsr_core::synth::{self, SynthLatents};
use tqvsr_core::trainer::{self, LossCheck, StepRecord, TrainConfig, TrainObserver, TrainProgress, TrainSummary};
use tqvsr_core::{DmeConfig, DmeModel, Executor, FusionMode, MaskSpec, SegmentCorpus, Split};

use crate::checkpoint;
use crate::config::{Baseline, RunConfig};
use crate::features;
use crate::index_file;
use crate::manifest::{load_corpus, save_corpus};

pub const LATENTS_FILE: &str = "latents.json";
pub const MODEL_FILE: &str = "model.tqvc";
pub const TRACE_FILE: &str = "trace.ndjson";
pub const EVAL_LOG_FILE: &str = "eval.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_latents(corpus_dir: &Path) -> anyhow::Result<SynthLatents> {
    read_json(&corpus_dir.join(LATENTS_FILE))
}

fn type_histograms(corpus: &SegmentCorpus) -> BTreeMap<Split, TypeHistogram> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let h: &mut TypeHistogram = out.entry(split).or_default();
        corpus.questions_in(split).for_each(|q| h.add(q.query_type));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub videos: usize,
    pub segments: usize,
    pub questions: usize,
    pub split_videos: BTreeMap<Split, usize>,
    pub types: BTreeMap<Split, TypeHistogram>,
    pub unseen_scenarios: BTreeSet<String>,
    pub warnings: Vec<String>,
}

impl CorpusSummary {
    pub fn of(corpus: &SegmentCorpus) -> Self {
        Self {
            videos: corpus.videos().len(),
            segments: corpus.num_segments(),
            questions: corpus.questions().len(),
            split_videos: Split::ALL.iter().map(|&s| (s, corpus.splits().get(s).len())).collect(),
            types: type_histograms(corpus),
            unseen_scenarios: corpus.unseen_scenarios().clone(),
            warnings: corpus.validate_segmentation().iter().map(ToString::to_string).collect(),
        }
    }
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} videos, {} segments, {} questions", self.videos, self.segments, self.questions)?;
        for (split, n) in &self.split_videos {
            let h = &self.types[split];
            writeln!(f, "  {:<5} {:>4} videos  t={} v={} tv={}", split.as_str(), n, h.t, h.v, h.tv)?;
        }
        let unseen: Vec<&str> = self.unseen_scenarios.iter().map(String::as_str).collect();
        writeln!(f, "  unseen scenarios: {}", if unseen.is_empty() { "none".to_string() } else { unseen.join(", ") })?;
        write!(f, "  segmentation warnings: {}", self.warnings.len())
    }
}

/// Generates a synthetic corpus under `paths.out`, latents alongside.
pub fn gen_synth(cfg: &RunConfig) -> anyhow::Result<CorpusSummary> {
    let out = cfg.out_path()?;
    let generated = synth::generate(&cfg.synth)?;
    save_corpus(&generated.corpus, out)?;
    write_json(&out.join(LATENTS_FILE), &generated.latents)?;
    Ok(CorpusSummary::of(&generated.corpus))
}

pub fn inspect(cfg: &RunConfig) -> anyhow::Result<CorpusSummary> {
    Ok(CorpusSummary::of(&load_corpus(cfg.corpus_path()?)?))
}

/// Ranks every split question against a fresh index built from `model`.
pub fn evaluate_model<E: Executor>(
    model: &DmeModel<f32>,
    checkpoint_id: &str,
    corpus: &SegmentCorpus,
    split: Split,
    mask: &MaskSpec,
    exec: &E,
) -> anyhow::Result<EvalReport> {
    mask.validate()?;
    let index = retrieval::build_index(model, corpus, split, mask, checkpoint_id, exec)?;
    let rank = |q: &MultimodalQuestion| -> anyhow::Result<Vec<String>> {
        let hq = model.encode_question(q, mask)?;
        Ok(index.rank_all(&hq)?.into_iter().map(|h| h.segment_id).collect())
    };
    let evaluation = metrics::evaluate(corpus, split, rank, exec)?;
    Ok(evaluation.report(ReportProvenance {
        split: split.as_str().into(),
        ranker: "dme".into(),
        checkpoint: Some(checkpoint_id.into()),
        mask: Some(mask.to_string()),
        fusion: Some(model.fusion().as_str().into()),
        seed: None,
        trials: None,
    }))
}

struct RunObserver<'a, E> {
    trace: BufWriter<File>,
    eval_log: BufWriter<File>,
    out: &'a Path,
    train: &'a TrainConfig,
    corpus: &'a SegmentCorpus,
    exec: &'a E,
}

#[derive(Serialize)]
struct EvalLogRecord<'a> {
    step: u64,
    epoch: u64,
    checkpoint: &'a str,
    split: &'static str,
    #[serde(flatten)]
    metrics: SliceMetrics,
}

impl<E: Executor> RunObserver<'_, E> {
    fn checkpoint(&mut self, model: &DmeModel<f32>, progress: TrainProgress) -> anyhow::Result<()> {
        let step_path = self.out.join(CHECKPOINT_DIR).join(format!("step-{:07}.tqvc", progress.step));
        let id = checkpoint::save(&step_path, model, progress, Some(self.train))?;
        checkpoint::save(&self.out.join(MODEL_FILE), model, progress, Some(self.train))?;
        if self.corpus.questions_in(Split::Val).next().is_some() {
            let report = evaluate_model(model, &id, self.corpus, Split::Val, &MaskSpec::NONE, self.exec)?;
            let rec =
                EvalLogRecord { step: progress.step, epoch: progress.epoch, checkpoint: &id, split: "val", metrics: report.slices["all"] };
            serde_json::to_writer(&mut self.eval_log, &rec)?;
            self.eval_log.write_all(b"\n")?;
            self.eval_log.flush()?;
        }
        Ok(())
    }
}

impl<E: Executor> TrainObserver<f32> for RunObserver<'_, E> {
    fn on_step(&mut self, record: &StepRecord) -> Result<(), String> {
        serde_json::to_writer(&mut self.trace, record).map_err(|e| e.to_string())?;
        self.trace.write_all(b"\n").map_err(|e| e.to_string())
    }

    fn on_checkpoint(&mut self, model: &DmeModel<f32>, progress: TrainProgress) -> Result<(), String> {
        self.trace.flush().map_err(|e| e.to_string())?;
        self.checkpoint(model, progress).map_err(|e| format!("{e:#}"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub summary: TrainSummary,
    pub model: DmeModel<f32>,
    /// Final validation metrics, when the corpus has validation questions.
    pub val: Option<EvalReport>,
}

fn open_log(path: &Path, append: bool) -> anyhow::Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Trains on the corpus' train split, writing checkpoints, the step trace and
/// validation metrics under `paths.out`. `paths.resume` continues a run.
pub fn train<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<TrainOutcome> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let out = cfg.out_path()?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).with_context(|| format!("creating {}", out.display()))?;
    let (mut model, start) = match &cfg.paths.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.model.config().dims != corpus.dims() {
                bail!("checkpoint dims {:?} do not match corpus dims {:?}", ck.model.config().dims, corpus.dims());
            }
            (ck.model, ck.header.progress)
        }
        None => {
            let model_cfg = DmeConfig { encoder: cfg.encoder, dims: corpus.dims(), fusion: cfg.fusion };
            (DmeModel::new(model_cfg, cfg.train.seed)?, TrainProgress::default())
        }
    };
    let resuming = cfg.paths.resume.is_some();
    let mut observer = RunObserver {
        trace: open_log(&out.join(TRACE_FILE), resuming)?,
        eval_log: open_log(&out.join(EVAL_LOG_FILE), resuming)?,
        out,
        train: &cfg.train,
        corpus: &corpus,
        exec,
    };
    let summary = trainer::train(&mut model, &corpus, &cfg.train, start, exec, &mut observer)?;
    observer.trace.flush()?;
    let checkpoint = out.join(MODEL_FILE);
    let checkpoint_id = checkpoint::checkpoint_id(&model);
    let val = if corpus.questions_in(Split::Val).next().is_some() {
        let report = evaluate_model(&model, &checkpoint_id, &corpus, Split::Val, &MaskSpec::NONE, exec)?;
        write_json(&out.join("val_report.json"), &report)?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutcome { checkpoint, checkpoint_id, summary, model, val })
}

/// Evaluates a checkpoint (or a baseline) on `eval.split`; writes the report to `paths.out` if set.
pub fn eval<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<EvalReport> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let split = cfg.eval.split;
    let report = match cfg.eval.baseline {
        Some(Baseline::Random) => {
            let evaluation = metrics::random_baseline(&corpus, split, cfg.eval.trials, cfg.train.seed)?;
            evaluation.report(ReportProvenance {
                split: split.as_str().into(),
                ranker: "random".into(),
                seed: Some(cfg.train.seed),
                trials: Some(cfg.eval.trials),
                ..ReportProvenance::default()
            })
        }
        Some(Baseline::Visual) => {
            let rank = |q: &MultimodalQuestion| -> anyhow::Result<Vec<String>> {
                Ok(retrieval::visual_match_rank(&corpus, split, q)?.into_iter().map(|h| h.segment_id).collect())
            };
            let evaluation = metrics::evaluate(&corpus, split, rank, exec)?;
            evaluation.report(ReportProvenance {
                split: split.as_str().into(),
                ranker: "visual-match (simplified, untrained)".into(),
                ..ReportProvenance::default()
            })
        }
        None => {
            let ck = checkpoint::load(cfg.checkpoint_path()?)?;
            evaluate_model(&ck.model, &ck.header.checkpoint_id, &corpus, split, &cfg.mask()?, exec)?
        }
    };
    if let Some(out) = &cfg.paths.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// Every mask that leaves at least one channel on each side, in bit order.
pub fn valid_masks() -> Vec<MaskSpec> {
    (0u8..16).filter_map(|b| MaskSpec::from_bits(b).ok()).filter(|m| m.validate().is_ok()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub mask: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub checkpoint: String,
    pub split: String,
    pub rows: Vec<AblationRow>,
}

pub fn ablate_model<E: Executor>(
    model: &DmeModel<f32>,
    checkpoint_id: &str,
    corpus: &SegmentCorpus,
    split: Split,
    exec: &E,
) -> anyhow::Result<AblationReport> {
    let rows = valid_masks()
        .into_iter()
        .map(|mask| Ok(AblationRow { mask: mask.to_string(), report: evaluate_model(model, checkpoint_id, corpus, split, &mask, exec)? }))
        .collect::<anyhow::Result<_>>()?;
    Ok(AblationReport { checkpoint: checkpoint_id.into(), split: split.as_str().into(), rows })
}

/// Evaluates a checkpoint under every valid channel mask.
pub fn ablate<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<AblationReport> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let ck = checkpoint::load(cfg.checkpoint_path()?)?;
    let report = ablate_model(&ck.model, &ck.header.checkpoint_id, &corpus, cfg.eval.split, exec)?;
    if let Some(out) = &cfg.paths.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionComparison {
    pub split: String,
    pub concat: EvalReport,
    pub add: EvalReport,
    /// Whether concat fusion reached at least the mAP of add fusion on "all".
    pub concat_at_least_add: bool,
}

/// Trains one model per fusion mode from the same seed and compares them on `eval.split`.
/// Models go to `paths.out/{concat,add}`, the comparison to `paths.out/fusion_report.json`.
pub fn compare_fusion<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<FusionComparison> {
    let out = cfg.out_path()?.to_path_buf();
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let mut reports = Vec::new();
    for fusion in [FusionMode::Concat, FusionMode::Add] {
        let mut run = cfg.clone();
        run.fusion = fusion;
        run.paths.resume = None;
        run.paths.out = Some(out.join(fusion.as_str()));
        let trained = train(&run, exec)?;
        reports.push(evaluate_model(&trained.model, &trained.checkpoint_id, &corpus, cfg.eval.split, &MaskSpec::NONE, exec)?);
    }
    let add = reports.pop().unwrap();
    let concat = reports.pop().unwrap();
    let comparison = FusionComparison {
        split: cfg.eval.split.as_str().into(),
        concat_at_least_add: concat.slices["all"].map >= add.slices["all"].map,
        concat,
        add,
    };
    write_json(&out.join("fusion_report.json"), &comparison)?;
    Ok(comparison)
}

/// Builds the segment index for `eval.split` under `eval.mask` and writes it to `paths.out`.
pub fn index<E: Executor>(cfg: &RunConfig, exec: &E) -> anyhow::Result<EmbeddingIndex> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let ck = checkpoint::load(cfg.checkpoint_path()?)?;
    let index = retrieval::build_index(&ck.model, &corpus, cfg.eval.split, &cfg.mask()?, &ck.header.checkpoint_id, exec)?;
    let out = cfg.out_path()?;
    create_parent(out)?;
    index_file::save(out, &index)?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Id(String),
    /// Token features, region features, and per-region aligned spans (region 0 is the query image).
    Features {
        text: PathBuf,
        regions: PathBuf,
        spans: Vec<Option<TokenSpan>>,
    },
}

/// Parses `r=a:b` entries (comma separated) into per-region spans.
pub fn parse_spans(s: &str, regions: usize) -> anyhow::Result<Vec<Option<TokenSpan>>> {
    let mut spans = vec![None; regions];
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = || -> Option<(usize, usize, usize)> {
            let (r, span) = part.split_once('=')?;
            let (a, b) = span.split_once(':')?;
            Some((r.trim().parse().ok()?, a.trim().parse().ok()?, b.trim().parse().ok()?))
        };
        let (r, start, end) = parse().with_context(|| format!("bad span {part:?}, expected region=start:end"))?;
        if r >= regions || start >= end {
            bail!("span {part:?} names region {r} of {regions} or is empty");
        }
        spans[r] = Some(TokenSpan { start, end });
    }
    Ok(spans)
}

/// Top-`eval.k` segments for one question. Uses `paths.index` when given, else builds the index.
pub fn search<E: Executor>(cfg: &RunConfig, query: &Query, exec: &E) -> anyhow::Result<Vec<Hit>> {
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let ck = checkpoint::load(cfg.checkpoint_path()?)?;
    let index = match &cfg.paths.index {
        Some(path) => {
            let index = index_file::load(path)?;
            if index.checkpoint_id != ck.header.checkpoint_id {
                bail!("index was built from checkpoint {}, not {}", index.checkpoint_id, ck.header.checkpoint_id);
            }
            index
        }
        None => retrieval::build_index(&ck.model, &corpus, cfg.eval.split, &cfg.mask()?, &ck.header.checkpoint_id, exec)?,
    };
    let owned;
    let question = match query {
        Query::Id(id) => corpus.question(id).with_context(|| format!("unknown question id {id:?}"))?,
        Query::Features { text, regions, spans } => {
            let dims = corpus.dims();
            let text_tokens = features::read_dim(text, dims.text)?;
            let rows = features::read_dim(regions, dims.visual)?;
            if rows.rows() == 0 || spans.len() != rows.rows() {
                bail!("need at least one region and one span entry per region");
            }
            owned = MultimodalQuestion {
                question_id: "query".into(),
                text_tokens,
                regions: (0..rows.rows()).map(|i| Region { feature: rows.row(i).to_vec(), aligned_token_span: spans[i] }).collect(),
                query_type: QueryType::TV,
                scenario: String::new(),
                answers: BTreeSet::new(),
            };
            &owned
        }
    };
    let hq = ck.model.encode_question(question, &index.mask)?;
    Ok(index.search(&hq, cfg.eval.k)?)
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub fusion: FusionMode,
    pub report: GradCheckReport,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

/// 64-bit finite-difference check of the full loss on the tiny model, once per fusion mode.
pub fn gradcheck(fusions: &[FusionMode], coords: usize, seed: u64, inject_fault: bool) -> anyhow::Result<Vec<GradCheckOutcome>> {
    fusions
        .iter()
        .map(|&fusion| {
            let check = LossCheck { fusion, coords, seed, fault: inject_fault.then_some(Fault::GeluBackward), ..LossCheck::default() };
            Ok(GradCheckOutcome { fusion, report: trainer::check_loss_gradients(&check)? })
        })
        .collect()
}

/// Slice table with fractions and percentages.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let p = &report.provenance;
    let _ = writeln!(
        s,
        "split={} ranker={} checkpoint={} mask={}",
        p.split,
        p.ranker,
        p.checkpoint.as_deref().unwrap_or("-"),
        p.mask.as_deref().unwrap_or("-")
    );
    let _ = writeln!(s, "{:<8} {:>5}  {:>15} {:>15} {:>15} {:>15} {:>15}", "slice", "n", "mAP", "R@1", "R@5", "R@10", "R@50");
    for name in SLICE_NAMES {
        let m = &report.slices[name];
        let cell = |x: f64| format!("{x:.4} ({:.2}%)", 100.0 * x);
        let _ = writeln!(
            s,
            "{:<8} {:>5}  {:>15} {:>15} {:>15} {:>15} {:>15}",
            name,
            m.n_queries,
            cell(m.map),
            cell(m.r1),
            cell(m.r5),
            cell(m.r10),
            cell(m.r50)
        );
    }
    if report.excluded > 0 {
        let _ = writeln!(s, "{} questions had no answer in the split and were skipped", report.excluded);
    }
    s
}
