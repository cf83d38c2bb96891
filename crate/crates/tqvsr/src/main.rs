use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tqvsr::commands::{self, Query};
use tqvsr::config::{Baseline, RunConfig};
use tqvsr::parallel::Parallel;
use tqvsr_core::synth::TypeMix;
use tqvsr_core::{FusionMode, Split};

#[derive(Parser)]
#[command(name = "tqvsr", version, about = "Question-driven video segment retrieval with a dual multimodal encoder")]
struct Cli {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted relevance.
    GenSynth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        synth: SynthFlags,
    },
    /// Train the dual encoder on the corpus' train split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint (step counter and optimizer state included).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint or a baseline and write an EvalReport.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Shuffles per question for the random baseline.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Build and save the segment embedding index of a split.
    Index {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Rank segments for one question, given by id or by feature files.
    Search {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Saved index; built on the fly when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["text", "regions"])]
        question: Option<String>,
        /// TQVF file of token features.
        #[arg(long, requires = "regions")]
        text: Option<PathBuf>,
        /// TQVF file of region features; row 0 is the query image.
        #[arg(long, requires = "text")]
        regions: Option<PathBuf>,
        /// Aligned token spans, e.g. `1=0:2,2=3:4`.
        #[arg(long, default_value = "")]
        spans: String,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Evaluate a checkpoint under every valid channel mask.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Train concat and add fusion from the same seed and compare them.
    CompareFusion {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Finite-difference check of the full loss on a tiny 64-bit model.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, value_enum, default_value_t = FusionArg::Both)]
        fusion: FusionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print corpus statistics and segmentation warnings.
    Inspect {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Random,
    Visual,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FusionArg {
    Concat,
    Add,
    Both,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train, val, test)"))
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    FusionMode::parse(s).ok_or_else(|| format!("unknown fusion {s:?} (concat, add)"))
}

fn parse_type_mix(s: &str) -> Result<TypeMix, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [t, v, tv] => Ok(TypeMix { t, v, tv }),
        _ => Err("expected three fractions t,v,tv".into()),
    }
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.encoder;
        set(&mut e.layers, self.layers);
        set(&mut e.d, self.dim);
        set(&mut e.heads, self.heads);
        set(&mut e.dropout, self.dropout);
        set(&mut e.max_seq_len, self.max_seq_len);
        set(&mut cfg.fusion, self.fusion);
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Softmax temperature.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint (and validate) every this many steps; 0 = only at the end.
    #[arg(long)]
    eval_every: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.temperature, self.sigma);
        set(&mut t.epochs, self.epochs);
        set(&mut t.eval_every, self.eval_every);
    }
}

#[derive(Args)]
struct SynthFlags {
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    segments_per_video: Option<usize>,
    #[arg(long)]
    questions_per_segment: Option<usize>,
    /// Fractions of T, V and TV questions, e.g. `0.4,0.3,0.3`.
    #[arg(long, value_parser = parse_type_mix)]
    type_mix: Option<TypeMix>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    multi_answer_prob: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_t: Option<usize>,
    #[arg(long)]
    channel_correlation: Option<f64>,
}

impl SynthFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.synth;
        set(&mut s.n_videos, self.n_videos);
        set(&mut s.segments_per_video, self.segments_per_video);
        set(&mut s.questions_per_segment, self.questions_per_segment);
        set(&mut s.type_mix, self.type_mix);
        set(&mut s.noise_sigma, self.noise_sigma);
        set(&mut s.multi_answer_prob, self.multi_answer_prob);
        set(&mut s.latent_dim, self.latent_dim);
        set(&mut s.d_v, self.d_v);
        set(&mut s.d_t, self.d_t);
        set(&mut s.channel_correlation, self.channel_correlation);
    }
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Channels to zero: comma list of question_text, question_image,
    /// video_transcript, video_appearance; or `none`.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    k: Option<usize>,
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.split, self.split);
        set(&mut cfg.eval.mask, self.mask.clone());
        set(&mut cfg.eval.k, self.k);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let exec = Parallel::from_env();
    match &cli.command {
        Command::GenSynth { out, seed, synth } => {
            set_path(&mut cfg.paths.out, out);
            if seed.is_some() {
                cfg.seed = *seed;
            }
            synth.apply(&mut cfg);
            let cfg = cfg.resolved();
            cfg.validate()?;
            let summary = commands::gen_synth(&cfg)?;
            println!("wrote {}", cfg.out_path()?.display());
            println!("{summary}");
        }
        Command::Train { corpus, out, seed, resume, model, train } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.out, out);
            set_path(&mut cfg.paths.resume, resume);
            if seed.is_some() {
                cfg.seed = *seed;
            }
            model.apply(&mut cfg);
            train.apply(&mut cfg);
            let cfg = cfg.resolved();
            cfg.validate()?;
            let outcome = commands::train(&cfg, &exec)?;
            let s = &outcome.summary;
            println!(
                "trained to step {} (epoch {}); loss {} -> {}; {} answer collisions",
                s.progress.step,
                s.progress.epoch,
                s.first_loss.map_or("-".into(), |l| format!("{l:.6}")),
                s.last_loss.map_or("-".into(), |l| format!("{l:.6}")),
                s.collisions
            );
            println!("checkpoint {} (id {})", outcome.checkpoint.display(), outcome.checkpoint_id);
            if let Some(val) = &outcome.val {
                print!("{}", commands::format_report(val));
            }
        }
        Command::Eval { corpus, checkpoint, out, seed, baseline, trials, eval } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.out, out);
            if seed.is_some() {
                cfg.seed = *seed;
            }
            set(&mut cfg.eval.trials, *trials);
            if let Some(b) = baseline {
                cfg.eval.baseline = Some(match b {
                    BaselineArg::Random => Baseline::Random,
                    BaselineArg::Visual => Baseline::Visual,
                });
            }
            eval.apply(&mut cfg);
            let cfg = cfg.resolved();
            cfg.validate()?;
            let report = commands::eval(&cfg, &exec)?;
            print!("{}", commands::format_report(&report));
            if let Some(out) = &cfg.paths.out {
                println!("wrote {}", out.display());
            }
        }
        Command::Index { corpus, checkpoint, out, eval } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.out, out);
            eval.apply(&mut cfg);
            cfg.validate()?;
            let index = commands::index(&cfg, &exec)?;
            println!("indexed {} segments (d = {}, checkpoint {}, mask {})", index.len(), index.dim(), index.checkpoint_id, index.mask);
        }
        Command::Search { corpus, checkpoint, index, question, text, regions, spans, eval } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.index, index);
            eval.apply(&mut cfg);
            cfg.validate()?;
            let query = match (question, text, regions) {
                (Some(id), _, _) => Query::Id(id.clone()),
                (None, Some(text), Some(regions)) => {
                    let n = tqvsr::features::read(regions)?.rows();
                    Query::Features { text: text.clone(), regions: regions.clone(), spans: commands::parse_spans(spans, n)? }
                }
                _ => bail!("give --question or both --text and --regions"),
            };
            for (rank, hit) in commands::search(&cfg, &query, &exec)?.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, hit.segment_id, hit.score);
            }
        }
        Command::Ablate { corpus, checkpoint, out, split } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.out, out);
            set(&mut cfg.eval.split, *split);
            cfg.validate()?;
            let report = commands::ablate(&cfg, &exec)?;
            println!("{:<44} {:>8} {:>8} {:>8} {:>8}", "masked channels", "all", "type:t", "type:v", "type:tv");
            for row in &report.rows {
                let m = |s: &str| format!("{:.4}", row.report.slices[s].map);
                println!("{:<44} {:>8} {:>8} {:>8} {:>8}", row.mask, m("all"), m("type:t"), m("type:v"), m("type:tv"));
            }
        }
        Command::CompareFusion { corpus, out, seed, split, model, train } => {
            set_path(&mut cfg.paths.corpus, corpus);
            set_path(&mut cfg.paths.out, out);
            if seed.is_some() {
                cfg.seed = *seed;
            }
            set(&mut cfg.eval.split, *split);
            model.apply(&mut cfg);
            train.apply(&mut cfg);
            let cfg = cfg.resolved();
            cfg.validate()?;
            let cmp = commands::compare_fusion(&cfg, &exec)?;
            for (name, report) in [("concat", &cmp.concat), ("add", &cmp.add)] {
                let all = &report.slices["all"];
                println!("{name:<7} mAP {:.4}  R@1 {:.4}", all.map, all.r1);
            }
            println!("concat >= add on mAP: {}", cmp.concat_at_least_add);
        }
        Command::Gradcheck { coords, fusion, seed, inject_fault } => {
            let fusions = match fusion {
                FusionArg::Concat => vec![FusionMode::Concat],
                FusionArg::Add => vec![FusionMode::Add],
                FusionArg::Both => vec![FusionMode::Concat, FusionMode::Add],
            };
            let mut ok = true;
            for o in commands::gradcheck(&fusions, *coords, *seed, *inject_fault)? {
                let r = &o.report;
                println!(
                    "{:<7} max rel error {:.3e} over {} coords (worst {}[{}]: analytic {:.6e}, numeric {:.6e}) {}",
                    o.fusion.as_str(),
                    r.max_rel_error,
                    r.coords_checked,
                    r.worst_param,
                    r.worst_offset,
                    r.worst_analytic,
                    r.worst_numeric,
                    if o.passed() { "PASS" } else { "FAIL" }
                );
                ok &= o.passed();
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Inspect { corpus } => {
            set_path(&mut cfg.paths.corpus, corpus);
            let summary = commands::inspect(&cfg).context("inspecting corpus")?;
            println!("{summary}");
            for w in &summary.warnings {
                println!("  {w}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
