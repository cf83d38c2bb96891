//! Run configuration: one JSON document covering every command, with
//! command-line flags layered on top. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tqvsr_core::synth::SynthConfig;
use tqvsr_core::trainer::TrainConfig;
use tqvsr_core::{EncoderConfig, FusionMode, MaskSpec, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Uniformly shuffled rankings, averaged over `trials`.
    Random,
    /// Untrained cosine match of the query image against pooled appearance.
    Visual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Comma list of channels to zero, or `none`.
    pub mask: String,
    pub k: usize,
    pub trials: usize,
    pub baseline: Option<Baseline>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test, mask: "none".into(), k: 10, trials: 100, baseline: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of `train` and `synth`.
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub fusion: FusionMode,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copies the top-level seed into every component that draws randomness.
    pub fn resolved(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
        self
    }

    pub fn mask(&self) -> anyhow::Result<MaskSpec> {
        let mask = MaskSpec::parse(&self.eval.mask)?;
        mask.validate()?;
        Ok(mask)
    }

    pub fn corpus_path(&self) -> anyhow::Result<&Path> {
        self.paths.corpus.as_deref().context("no corpus given (--corpus or paths.corpus)")
    }

    pub fn out_path(&self) -> anyhow::Result<&Path> {
        self.paths.out.as_deref().context("no output path given (--out or paths.out)")
    }

    pub fn checkpoint_path(&self) -> anyhow::Result<&Path> {
        self.paths.checkpoint.as_deref().context("no checkpoint given (--checkpoint or paths.checkpoint)")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.mask()?;
        if self.eval.k == 0 {
            bail!("k must be at least 1");
        }
        if self.eval.trials == 0 {
            bail!("trials must be at least 1");
        }
        Ok(())
    }
}
