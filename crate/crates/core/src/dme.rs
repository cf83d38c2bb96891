//! Dual multimodal encoder.
//!
//! Two independent transformer encoders map a multimodal question and a video
//! segment to unit vectors `H^Q`, `H^V`; relevance is their dot product.
//!
//! Question sequence (concat fusion):
//! `[CLS] ⊕ text tokens ([txt], positions 0..l_q) ⊕ regions ([vis], position =
//! sum of the aligned words' position embeddings, zero when unaligned)`.
//!
//! Video sequence (concat fusion):
//! `[CLS] ⊕ transcript clips ([txt], positions 0..l) ⊕ appearance clips ([vis], positions 0..l)`.
//!
//! Every non-CLS token is `projection(feature) + type + position`. In add
//! fusion the clip channels are summed into one token per clip, aligned regions
//! are summed onto their words, and type embeddings are not used.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dims, MultimodalQuestion, VideoSegment};
use crate::matrix::{dot, Matrix};
use crate::nn::layers::{feed_forward, linear};
use crate::nn::{NnError, ParamId, ParamStore, Tape, Var};
use crate::real::Real;

const TYPE_VIS: usize = 0;
const TYPE_TXT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 4, d: 768, heads: 12, ffn_mult: 4, dropout: 0.1, max_seq_len: 256 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), DmeError> {
        if self.layers == 0 {
            return Err(DmeError::Config("layers must be at least 1".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(DmeError::Nn(NnError::HeadsDoNotDivide { dim: self.d, heads: self.heads }));
        }
        if self.ffn_mult == 0 || self.max_seq_len < 2 {
            return Err(DmeError::Config("ffn_mult must be ≥ 1 and max_seq_len ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DmeError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Concat,
    Add,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "concat" => Some(FusionMode::Concat),
            "add" => Some(FusionMode::Add),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmeConfig {
    pub encoder: EncoderConfig,
    pub dims: Dims,
    pub fusion: FusionMode,
}

/// Which input channels are kept (`true`) or zeroed (`false`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub question_text: bool,
    pub question_image: bool,
    pub video_transcript: bool,
    pub video_appearance: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::NONE
    }
}

impl MaskSpec {
    /// Nothing masked.
    pub const NONE: MaskSpec = MaskSpec { question_text: true, question_image: true, video_transcript: true, video_appearance: true };

    pub const CHANNELS: [&'static str; 4] = ["question_text", "question_image", "video_transcript", "video_appearance"];

    /// Parses a comma list of channels to mask, or `none`.
    pub fn parse(s: &str) -> Result<Self, DmeError> {
        let mut m = Self::NONE;
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "none" => {}
                "question_text" => m.question_text = false,
                "question_image" => m.question_image = false,
                "video_transcript" => m.video_transcript = false,
                "video_appearance" => m.video_appearance = false,
                other => return Err(DmeError::Mask(format!("unknown channel `{other}`"))),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DmeError> {
        if !self.question_text && !self.question_image {
            return Err(DmeError::Mask("every question channel is masked".into()));
        }
        if !self.video_transcript && !self.video_appearance {
            return Err(DmeError::Mask("every video channel is masked".into()));
        }
        Ok(())
    }

    /// Bit `i` set means channel `CHANNELS[i]` is masked.
    pub fn to_bits(self) -> u8 {
        u8::from(!self.question_text)
            | u8::from(!self.question_image) << 1
            | u8::from(!self.video_transcript) << 2
            | u8::from(!self.video_appearance) << 3
    }

    pub fn from_bits(bits: u8) -> Result<Self, DmeError> {
        if bits >> 4 != 0 {
            return Err(DmeError::Mask(format!("invalid mask bits {bits:#x}")));
        }
        let m = Self {
            question_text: bits & 1 == 0,
            question_image: bits & 2 == 0,
            video_transcript: bits & 4 == 0,
            video_appearance: bits & 8 == 0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn masked_channels(&self) -> Vec<&'static str> {
        let keep = [self.question_text, self.question_image, self.video_transcript, self.video_appearance];
        Self::CHANNELS.iter().zip(keep).filter(|(_, k)| !k).map(|(c, _)| *c).collect()
    }
}

impl core::fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let masked = self.masked_channels();
        if masked.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&masked.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Question,
    Video,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Question => "question",
            Side::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DmeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{side} sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { side: &'static str, len: usize, max: usize },
    #[error("feature dimension mismatch: model expects {expected}, input has {found}")]
    Dims { expected: usize, found: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("sequence was assembled for the {0} encoder")]
    WrongSide(&'static str),
    #[error("non-finite activations in {0} encoder")]
    NonFinite(&'static str),
    #[error("parameter `{0}` missing or mis-shaped")]
    Param(String),
    #[error("aligned span {start}..{end} is empty or outside 0..{tokens}")]
    Span { start: usize, end: usize, tokens: usize },
}

/// Where each position of an assembled sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cls,
    Text(usize),
    Region(usize),
    TranscriptClip(usize),
    AppearanceClip(usize),
    /// Add fusion: text token with aligned regions, or transcript + appearance of a clip.
    Fused(usize),
    Padding,
}

/// The input matrix `Z` of one encoder plus its attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence<T> {
    pub side: Side,
    pub z: Matrix<T>,
    pub attention_mask: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

impl<T: Real> AssembledSequence<T> {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    /// Appends masked padding rows (any values) that no position may attend to.
    pub fn with_padding(mut self, rows: &Matrix<T>) -> Self {
        assert_eq!(rows.cols(), self.z.cols());
        let mut data = self.z.clone().into_vec();
        data.extend_from_slice(rows.as_slice());
        self.z = Matrix::from_vec(self.z.rows() + rows.rows(), rows.cols(), data);
        self.attention_mask.extend(core::iter::repeat_n(false, rows.rows()));
        self.provenance.extend(core::iter::repeat_n(Provenance::Padding, rows.rows()));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderParams {
    text_w: ParamId,
    text_b: ParamId,
    vis_w: ParamId,
    vis_b: ParamId,
    token_type: ParamId,
    position: ParamId,
    cls: ParamId,
    layers: Vec<LayerParams>,
}

/// Parameter initializer: `(name, rows, cols, kind)`.
#[derive(Clone, Copy)]
enum Init {
    Normal,
    /// σ = 1/√fan_in, for the feature projections whose inputs are O(1) per coordinate.
    FanIn,
    Zeros,
    Ones,
}

const INIT_STD: f64 = 0.02;

fn build_encoder<T: Real>(
    store: &mut ParamStore<T>,
    side: Side,
    cfg: &DmeConfig,
    init: &mut dyn FnMut(usize, usize, Init) -> Matrix<T>,
) -> EncoderParams {
    let d = cfg.encoder.d;
    let ffn = d * cfg.encoder.ffn_mult;
    let p = side.as_str();
    let mut add = |store: &mut ParamStore<T>, name: String, r: usize, c: usize, kind: Init| store.add(name, init(r, c, kind));
    let text_w = add(store, format!("{p}.proj_text.w"), cfg.dims.text, d, Init::FanIn);
    let text_b = add(store, format!("{p}.proj_text.b"), 1, d, Init::Zeros);
    let vis_w = add(store, format!("{p}.proj_vis.w"), cfg.dims.visual, d, Init::FanIn);
    let vis_b = add(store, format!("{p}.proj_vis.b"), 1, d, Init::Zeros);
    let token_type = add(store, format!("{p}.token_type"), 2, d, Init::Normal);
    let position = add(store, format!("{p}.position"), cfg.encoder.max_seq_len, d, Init::Normal);
    let cls = add(store, format!("{p}.cls"), 1, d, Init::Normal);
    let layers = (0..cfg.encoder.layers)
        .map(|i| {
            let n = |s: &str| format!("{p}.layer{i}.{s}");
            LayerParams {
                wq: add(store, n("attn.wq"), d, d, Init::Normal),
                bq: add(store, n("attn.bq"), 1, d, Init::Zeros),
                wk: add(store, n("attn.wk"), d, d, Init::Normal),
                bk: add(store, n("attn.bk"), 1, d, Init::Zeros),
                wv: add(store, n("attn.wv"), d, d, Init::Normal),
                bv: add(store, n("attn.bv"), 1, d, Init::Zeros),
                wo: add(store, n("attn.wo"), d, d, Init::Normal),
                bo: add(store, n("attn.bo"), 1, d, Init::Zeros),
                ln1_g: add(store, n("ln1.g"), 1, d, Init::Ones),
                ln1_b: add(store, n("ln1.b"), 1, d, Init::Zeros),
                w1: add(store, n("ffn.w1"), d, ffn, Init::Normal),
                b1: add(store, n("ffn.b1"), 1, ffn, Init::Zeros),
                w2: add(store, n("ffn.w2"), ffn, d, Init::Normal),
                b2: add(store, n("ffn.b2"), 1, d, Init::Zeros),
                ln2_g: add(store, n("ln2.g"), 1, d, Init::Ones),
                ln2_b: add(store, n("ln2.b"), 1, d, Init::Zeros),
            }
        })
        .collect();
    EncoderParams { text_w, text_b, vis_w, vis_b, token_type, position, cls, layers }
}

/// All learnable parameters of both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DmeModel<T> {
    config: DmeConfig,
    store: ParamStore<T>,
    question: EncoderParams,
    video: EncoderParams,
}

/// Input blocks of one sequence before projection.
struct SequenceInputs<T> {
    side: Side,
    /// Features projected by the text projection.
    text: Matrix<T>,
    /// Features projected by the visual projection.
    vis: Matrix<T>,
    /// `(block, row)` → token rows; see [`Layout`].
    layout: Layout,
}

enum Layout {
    /// `[CLS] ⊕ text ⊕ vis`, each block with its type and position lists.
    Concat { text_type: usize, vis_type: usize, text_pos: Vec<Vec<usize>>, vis_pos: Vec<Vec<usize>> },
    /// Video add fusion: one token per clip, `text[j] + vis[j] + pos[j]`.
    AddPaired,
    /// Question add fusion: `text + A · vis[aligned] + pos`, then unaligned regions with zero position.
    AddAligned { assign: Vec<Vec<usize>>, aligned: Vec<usize>, unaligned: Vec<usize> },
}

impl<T: Real> DmeModel<T> {
    /// Fresh model: truncated-normal weights (σ = 0.02, feature projections σ = 1/√fan_in),
    /// zero biases and unit layer-norm gains.
    pub fn new(config: DmeConfig, seed: u64) -> Result<Self, DmeError> {
        config.encoder.validate()?;
        let mut rng = crate::rng::substream(seed, "init");
        let mut init = |r: usize, c: usize, kind: Init| match kind {
            Init::Normal => crate::nn::truncated_normal(r, c, INIT_STD, &mut rng),
            Init::FanIn => crate::nn::truncated_normal(r, c, 1.0 / num_traits::Float::sqrt(r.max(1) as f64), &mut rng),
            Init::Zeros => Matrix::zeros(r, c),
            Init::Ones => Matrix::from_vec(r, c, vec![T::one(); r * c]),
        };
        Self::build(config, &mut init)
    }

    fn build(config: DmeConfig, init: &mut dyn FnMut(usize, usize, Init) -> Matrix<T>) -> Result<Self, DmeError> {
        let mut store = ParamStore::new();
        let question = build_encoder(&mut store, Side::Question, &config, init);
        let video = build_encoder(&mut store, Side::Video, &config, init);
        Ok(Self { config, store, question, video })
    }

    /// Rebuilds a model around stored parameter values; names and shapes must match the config.
    pub fn from_store(config: DmeConfig, store: ParamStore<T>) -> Result<Self, DmeError> {
        config.encoder.validate()?;
        let mut model = Self::build(config, &mut |r, c, _| Matrix::zeros(r, c))?;
        if store.len() != model.store.len() {
            return Err(DmeError::Param(format!("expected {} tensors, found {}", model.store.len(), store.len())));
        }
        for (want, have) in model.store.iter().zip(store.iter()) {
            if want.name != have.name || want.value.shape() != have.value.shape() {
                return Err(DmeError::Param(want.name.clone()));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &DmeConfig {
        &self.config
    }

    pub fn fusion(&self) -> FusionMode {
        self.config.fusion
    }

    pub fn set_fusion(&mut self, mode: FusionMode) {
        self.config.fusion = mode;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Real>(&self) -> DmeModel<U> {
        DmeModel { config: self.config, store: self.store.cast(), question: self.question.clone(), video: self.video.clone() }
    }

    fn encoder(&self, side: Side) -> &EncoderParams {
        match side {
            Side::Question => &self.question,
            Side::Video => &self.video,
        }
    }

    /// Names of every parameter belonging to `side`'s encoder.
    pub fn parameter_names(&self, side: Side) -> Vec<&str> {
        let prefix = format!("{}.", side.as_str());
        self.store.iter().filter(|p| p.name.starts_with(&prefix)).map(|p| p.name.as_str()).collect()
    }

    fn check_len(&self, side: Side, len: usize, positions: usize) -> Result<(), DmeError> {
        let max = self.config.encoder.max_seq_len;
        if len > max || positions > max {
            return Err(DmeError::SequenceTooLong { side: side.as_str(), len, max });
        }
        Ok(())
    }

    fn question_inputs(&self, q: &MultimodalQuestion, mask: &MaskSpec) -> Result<SequenceInputs<T>, DmeError> {
        let dims = self.config.dims;
        let lq = q.text_tokens.rows();
        if lq > 0 && q.text_tokens.cols() != dims.text {
            return Err(DmeError::Dims { expected: dims.text, found: q.text_tokens.cols() });
        }
        if let Some(r) = q.regions.iter().find(|r| r.feature.len() != dims.visual) {
            return Err(DmeError::Dims { expected: dims.visual, found: r.feature.len() });
        }
        if let Some(span) = q.regions.iter().filter_map(|r| r.aligned_token_span).find(|s| s.start >= s.end || s.end > lq) {
            return Err(DmeError::Span { start: span.start, end: span.end, tokens: lq });
        }
        let text = if mask.question_text { q.text_tokens.cast() } else { Matrix::zeros(lq, dims.text) };
        let text = if lq == 0 { Matrix::zeros(0, dims.text) } else { text };
        let nr = q.regions.len();
        let vis = if mask.question_image {
            Matrix::from_vec(nr, dims.visual, q.regions.iter().flat_map(|r| r.feature.iter().map(|&v| T::lit(f64::from(v)))).collect())
        } else {
            Matrix::zeros(nr, dims.visual)
        };
        let span_of = |r: &crate::corpus::Region| r.aligned_token_span.map(|s| (s.start..s.end).collect::<Vec<_>>());
        let layout = match self.config.fusion {
            FusionMode::Concat => {
                self.check_len(Side::Question, 1 + lq + nr, lq)?;
                Layout::Concat {
                    text_type: TYPE_TXT,
                    vis_type: TYPE_VIS,
                    text_pos: (0..lq).map(|i| vec![i]).collect(),
                    vis_pos: q.regions.iter().map(|r| span_of(r).unwrap_or_default()).collect(),
                }
            }
            FusionMode::Add => {
                let aligned: Vec<usize> = (0..nr).filter(|&i| q.regions[i].aligned_token_span.is_some()).collect();
                let unaligned: Vec<usize> = (0..nr).filter(|&i| q.regions[i].aligned_token_span.is_none()).collect();
                let mut assign = vec![Vec::new(); lq];
                for (k, &ri) in aligned.iter().enumerate() {
                    for t in span_of(&q.regions[ri]).unwrap_or_default() {
                        assign[t].push(k);
                    }
                }
                self.check_len(Side::Question, 1 + lq + unaligned.len(), lq)?;
                Layout::AddAligned { assign, aligned, unaligned }
            }
        };
        Ok(SequenceInputs { side: Side::Question, text, vis, layout })
    }

    fn video_inputs(&self, v: &VideoSegment, mask: &MaskSpec) -> Result<SequenceInputs<T>, DmeError> {
        let dims = self.config.dims;
        let l = v.clips.len();
        for c in &v.clips {
            if c.appearance.len() != dims.visual {
                return Err(DmeError::Dims { expected: dims.visual, found: c.appearance.len() });
            }
            if c.transcript.len() != dims.text {
                return Err(DmeError::Dims { expected: dims.text, found: c.transcript.len() });
            }
        }
        let cast = |f: &[f32]| f.iter().map(|&x| T::lit(f64::from(x))).collect::<Vec<_>>();
        let text = if mask.video_transcript {
            Matrix::from_vec(l, dims.text, v.clips.iter().flat_map(|c| cast(&c.transcript)).collect())
        } else {
            Matrix::zeros(l, dims.text)
        };
        let vis = if mask.video_appearance {
            Matrix::from_vec(l, dims.visual, v.clips.iter().flat_map(|c| cast(&c.appearance)).collect())
        } else {
            Matrix::zeros(l, dims.visual)
        };
        let layout = match self.config.fusion {
            FusionMode::Concat => {
                self.check_len(Side::Video, 1 + 2 * l, l)?;
                let pos: Vec<Vec<usize>> = (0..l).map(|j| vec![j]).collect();
                Layout::Concat { text_type: TYPE_TXT, vis_type: TYPE_VIS, text_pos: pos.clone(), vis_pos: pos }
            }
            FusionMode::Add => {
                self.check_len(Side::Video, 1 + l, l)?;
                Layout::AddPaired
            }
        };
        Ok(SequenceInputs { side: Side::Video, text, vis, layout })
    }

    /// Records `Z` on the tape; returns it with the provenance of each row.
    fn build_z(&self, tape: &mut Tape<'_, T>, inputs: SequenceInputs<T>) -> Result<(Var, Vec<Provenance>), DmeError> {
        let enc = self.encoder(inputs.side);
        let cls = tape.param(enc.cls);
        let (text_w, text_b) = (tape.param(enc.text_w), tape.param(enc.text_b));
        let (vis_w, vis_b) = (tape.param(enc.vis_w), tape.param(enc.vis_b));
        let types = tape.param(enc.token_type);
        let pos = tape.param(enc.position);
        let (lt, lv) = (inputs.text.rows(), inputs.vis.rows());
        let side = inputs.side;
        let mut parts = vec![cls];
        let mut prov = vec![Provenance::Cls];
        match inputs.layout {
            Layout::Concat { text_type, vis_type, text_pos, vis_pos } => {
                for (feats, w, b, ty, positions, block) in
                    [(inputs.text, text_w, text_b, text_type, text_pos, 0usize), (inputs.vis, vis_w, vis_b, vis_type, vis_pos, 1usize)]
                {
                    let n = feats.rows();
                    if n == 0 {
                        continue;
                    }
                    let x = tape.input(feats);
                    let e = linear(tape, x, w, b)?;
                    let t = tape.gather_sum(types, vec![vec![ty]; n])?;
                    let p = tape.gather_sum(pos, positions)?;
                    let z = tape.add(e, t)?;
                    parts.push(tape.add(z, p)?);
                    prov.extend((0..n).map(|i| match (side, block) {
                        (Side::Question, 0) => Provenance::Text(i),
                        (Side::Question, _) => Provenance::Region(i),
                        (Side::Video, 0) => Provenance::TranscriptClip(i),
                        (Side::Video, _) => Provenance::AppearanceClip(i),
                    }));
                }
            }
            Layout::AddPaired => {
                let xt = tape.input(inputs.text);
                let xv = tape.input(inputs.vis);
                let et = linear(tape, xt, text_w, text_b)?;
                let ev = linear(tape, xv, vis_w, vis_b)?;
                let p = tape.gather_sum(pos, (0..lt).map(|j| vec![j]).collect())?;
                let z = tape.add(et, ev)?;
                parts.push(tape.add(z, p)?);
                prov.extend((0..lt).map(Provenance::Fused));
            }
            Layout::AddAligned { assign, aligned, unaligned } => {
                let dims_v = inputs.vis.cols();
                let pick = |rows: &[usize]| {
                    let mut m = Matrix::zeros(rows.len(), dims_v);
                    for (k, &r) in rows.iter().enumerate() {
                        m.row_mut(k).copy_from_slice(inputs.vis.row(r));
                    }
                    m
                };
                if lt > 0 {
                    let xt = tape.input(inputs.text);
                    let mut z = linear(tape, xt, text_w, text_b)?;
                    if !aligned.is_empty() {
                        let xa = tape.input(pick(&aligned));
                        let ea = linear(tape, xa, vis_w, vis_b)?;
                        let mut a = Matrix::zeros(lt, aligned.len());
                        for (t, ks) in assign.iter().enumerate() {
                            for &k in ks {
                                a[(t, k)] = a[(t, k)] + T::one();
                            }
                        }
                        let a = tape.input(a);
                        let spread = tape.matmul(a, ea)?;
                        z = tape.add(z, spread)?;
                    }
                    let p = tape.gather_sum(pos, (0..lt).map(|j| vec![j]).collect())?;
                    parts.push(tape.add(z, p)?);
                    prov.extend((0..lt).map(Provenance::Fused));
                }
                if !unaligned.is_empty() {
                    let xu = tape.input(pick(&unaligned));
                    parts.push(linear(tape, xu, vis_w, vis_b)?);
                    prov.extend(unaligned.iter().map(|&r| Provenance::Region(r)));
                }
                let _ = lv;
            }
        }
        let z = tape.concat_rows(&parts)?;
        Ok((z, prov))
    }

    /// Transformer stack over `z`, CLS pooling and L2 normalization. Returns the `1 × d` embedding.
    fn encode_z(&self, tape: &mut Tape<'_, T>, side: Side, z: Var, mask: &[bool]) -> Result<Var, DmeError> {
        let enc = self.encoder(side);
        let heads = self.config.encoder.heads;
        let mut x = z;
        for lp in &enc.layers {
            let p = |tape: &mut Tape<'_, T>, id: ParamId| tape.param(id);
            let (wq, bq, wk, bk) = (p(tape, lp.wq), p(tape, lp.bq), p(tape, lp.wk), p(tape, lp.bk));
            let (wv, bv, wo, bo) = (p(tape, lp.wv), p(tape, lp.bv), p(tape, lp.wo), p(tape, lp.bo));
            let q = linear(tape, x, wq, bq)?;
            let k = linear(tape, x, wk, bk)?;
            let v = linear(tape, x, wv, bv)?;
            let a = tape.attention(q, k, v, mask, heads)?;
            let o = linear(tape, a, wo, bo)?;
            let r = tape.add(x, o)?;
            let (g1, b1) = (p(tape, lp.ln1_g), p(tape, lp.ln1_b));
            let h = tape.layer_norm(r, g1, b1)?;
            let (w1, fb1, w2, fb2) = (p(tape, lp.w1), p(tape, lp.b1), p(tape, lp.w2), p(tape, lp.b2));
            let f = feed_forward(tape, h, (w1, fb1), (w2, fb2))?;
            let r = tape.add(h, f)?;
            let (g2, b2) = (p(tape, lp.ln2_g), p(tape, lp.ln2_b));
            x = tape.layer_norm(r, g2, b2)?;
        }
        let cls = tape.rows(x, 0, 1)?;
        let h = tape.l2_normalize_rows(cls);
        if !tape.value(h).is_finite() {
            return Err(DmeError::NonFinite(side.as_str()));
        }
        Ok(h)
    }

    /// Records the full question encoder on `tape`; the returned var is `H^Q` (`1 × d`).
    pub fn question_forward(&self, tape: &mut Tape<'_, T>, q: &MultimodalQuestion, mask: &MaskSpec) -> Result<Var, DmeError> {
        let inputs = self.question_inputs(q, mask)?;
        let (z, _) = self.build_z(tape, inputs)?;
        let n = tape.value(z).rows();
        self.encode_z(tape, Side::Question, z, &vec![true; n])
    }

    /// Records the full video encoder on `tape`; the returned var is `H^V` (`1 × d`).
    pub fn video_forward(&self, tape: &mut Tape<'_, T>, v: &VideoSegment, mask: &MaskSpec) -> Result<Var, DmeError> {
        let inputs = self.video_inputs(v, mask)?;
        let (z, _) = self.build_z(tape, inputs)?;
        let n = tape.value(z).rows();
        self.encode_z(tape, Side::Video, z, &vec![true; n])
    }

    fn assemble(&self, inputs: SequenceInputs<T>) -> Result<AssembledSequence<T>, DmeError> {
        let side = inputs.side;
        let mut tape = Tape::new(&self.store);
        let (z, provenance) = self.build_z(&mut tape, inputs)?;
        let z = tape.value(z).clone();
        Ok(AssembledSequence { side, attention_mask: vec![true; z.rows()], z, provenance })
    }

    pub fn assemble_question(&self, q: &MultimodalQuestion, mask: &MaskSpec) -> Result<AssembledSequence<T>, DmeError> {
        self.assemble(self.question_inputs(q, mask)?)
    }

    pub fn assemble_video(&self, v: &VideoSegment, mask: &MaskSpec) -> Result<AssembledSequence<T>, DmeError> {
        self.assemble(self.video_inputs(v, mask)?)
    }

    /// Runs `side`'s encoder over an assembled sequence; returns the unit embedding.
    pub fn encode(&self, seq: &AssembledSequence<T>, side: Side) -> Result<Vec<T>, DmeError> {
        if seq.side != side {
            return Err(DmeError::WrongSide(seq.side.as_str()));
        }
        if seq.z.cols() != self.config.encoder.d {
            return Err(DmeError::Dims { expected: self.config.encoder.d, found: seq.z.cols() });
        }
        let mut tape = Tape::new(&self.store);
        let z = tape.input(seq.z.clone());
        let h = self.encode_z(&mut tape, side, z, &seq.attention_mask)?;
        Ok(tape.value(h).as_slice().to_vec())
    }

    pub fn encode_question(&self, q: &MultimodalQuestion, mask: &MaskSpec) -> Result<Vec<T>, DmeError> {
        let mut tape = Tape::new(&self.store);
        let h = self.question_forward(&mut tape, q, mask)?;
        Ok(tape.value(h).as_slice().to_vec())
    }

    pub fn encode_video(&self, v: &VideoSegment, mask: &MaskSpec) -> Result<Vec<T>, DmeError> {
        let mut tape = Tape::new(&self.store);
        let h = self.video_forward(&mut tape, v, mask)?;
        Ok(tape.value(h).as_slice().to_vec())
    }
}

/// Relevance of a segment to a question: `H^Q · H^V`.
pub fn score<T: Real>(hq: &[T], hv: &[T]) -> T {
    dot(hq, hv)
}
