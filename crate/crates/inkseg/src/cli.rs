//! Command-line pipeline: synthesize corpora, approximate ground truth,
//! train, segment, evaluate, ablate, render, and dump diagnostics.
//!
//! Every subcommand writes its resolved configuration next to its outputs
//! (`<file>.run.json`, or `run_config.json` inside output directories), all
//! randomness flows from the single `--seed` flag, file outputs are written
//! atomically, and errors print one `error: ...` line with a non-zero exit.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::boundary::{Backbone, BoundaryModel, BoundaryModelConfig};
use crate::charquery::{pe_diagnostic, pe_diagnostic_csv, CharQueryConfig, CharQueryModel, QueryPosEncoding};
use crate::error::{Error, Result};
use crate::eval::{ablate_ctc, evaluate_predictions, Segmenter};
use crate::features::{attach_simulated_spikes, Vocabulary};
use crate::groundtruth::{approximate_truth, SyntheticScorer};
use crate::ink::LabeledSample;
use crate::jsonl::{read_corpus, write_corpus, CorpusEntry};
use crate::kmeans::{KMeansConfig, KMeansInit, KMeansSegmenter};
use crate::svg::render_svg;
use crate::synth::{builtin_alphabet, builtin_glyph, generate, SynthConfig};
use crate::training::{train, Model, NeuralSegmenter, TrainConfig};

#[derive(Parser)]
#[command(
    name = "inkseg",
    about = "On-line handwriting character segmentation pipeline",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Approximate ground truth with the iterative first-character search.
    GtApprox(GtApproxArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Segment a corpus with a trained model or the k-means baseline.
    Segment(SegmentArgs),
    /// Score predictions against ground truth (mIoU report).
    Eval(EvalArgs),
    /// Compare a method with and without CTC spikes.
    AblateCtc(AblateArgs),
    /// Render segmentations as SVG files.
    Render(RenderArgs),
    /// Dump the positional-encoding diagnostic CSV.
    PeDiag(PeDiagArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Kmeans,
    Lstm,
    Transformer,
    Charquery,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output corpus (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated glyph labels from the built-in set (default: all 12).
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long, default_value_t = 3)]
    chars_min: usize,
    #[arg(long, default_value_t = 7)]
    chars_max: usize,
    #[arg(long, default_value_t = 0.0)]
    slant_min: f64,
    #[arg(long, default_value_t = 0.12)]
    slant_max: f64,
    #[arg(long, default_value_t = 0.0)]
    overlap_min: f64,
    #[arg(long, default_value_t = 0.15)]
    overlap_max: f64,
    #[arg(long, default_value_t = 0.25)]
    delayed_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    join_rate: f64,
    #[arg(long, default_value_t = 10)]
    points_min: usize,
    #[arg(long, default_value_t = 16)]
    points_max: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Attach simulated CTC spikes.
    #[arg(long, default_value_t = false)]
    spikes: bool,
    #[arg(long, default_value_t = 1)]
    spike_jitter: usize,
    #[arg(long, default_value_t = 0.1)]
    spike_drop: f64,
    /// Full SynthConfig as a JSON file; overrides the shape flags above
    /// (but not --seed or the spike flags).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct GtApproxArgs {
    /// Input corpus; samples must carry generator truth, which seeds the
    /// synthetic likelihood scorer.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output corpus with truth replaced by the approximation.
    #[arg(long)]
    out: PathBuf,
    /// Gaussian score noise of the synthetic scorer.
    #[arg(long, default_value_t = 0.0)]
    score_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an mIoU report of approximation vs generator truth.
    #[arg(long)]
    compare_report: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Output directory for model.json/model.bin, vocab.json, metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Final projection width of the character-query model (defaults to
    /// --hidden).
    #[arg(long)]
    final_dim: Option<usize>,
    /// Learned query-position table size (defaults to the corpus maximum).
    #[arg(long)]
    max_chars: Option<usize>,
    /// Point capacity (defaults to the corpus maximum plus slack).
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, value_enum, default_value_t = QueryPos::Learned)]
    query_pos: QueryPos,
    /// Peak learning rate (defaults to 3e-3 for lstm, 1e-3 otherwise).
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long, default_value_t = 4000)]
    warmup: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.98)]
    beta2: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 0.999)]
    ema_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    /// Train without CTC spike features.
    #[arg(long, default_value_t = false)]
    no_spikes: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum QueryPos {
    Learned,
    Sinusoidal,
}

#[derive(Args, Serialize)]
struct SegmentArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long = "in")]
    input: PathBuf,
    /// Output corpus with the `pred` field filled.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint stem (e.g. `run/model`); required for neural methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary path (defaults to `vocab.json` next to the checkpoint).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Ignore spike features/initialization.
    #[arg(long, default_value_t = false)]
    no_spikes: bool,
    // k-means parameters.
    #[arg(long, default_value_t = 1.0)]
    weight_x: f64,
    #[arg(long, default_value_t = 0.04)]
    weight_y: f64,
    #[arg(long, default_value_t = 224.0)]
    weight_stroke: f64,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Corpus with both `truth` and `pred` fields.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Method label recorded in the report.
    #[arg(long, default_value = "file")]
    method: String,
    /// Also write per-sample CSV rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also dump one SVG per evaluated sample.
    #[arg(long)]
    svg_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Checkpoint trained with spikes (neural methods).
    #[arg(long)]
    with_checkpoint: Option<PathBuf>,
    /// Checkpoint trained without spikes (neural methods).
    #[arg(long)]
    without_checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Serialize)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Which segmentation to color.
    #[arg(long, value_enum, default_value_t = RenderSource::Truth)]
    source: RenderSource,
    /// Render only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum RenderSource {
    Truth,
    Pred,
}

#[derive(Args, Serialize)]
struct PeDiagArgs {
    /// Character-query checkpoint stem.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    max_pos: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point for the binary: parse, dispatch, report.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => with_pool(args.jobs, || cmd_synth(&args)),
        Command::GtApprox(args) => with_pool(args.jobs, || cmd_gt_approx(&args)),
        Command::Train(args) => cmd_train(&args),
        Command::Segment(args) => with_pool(args.jobs, || cmd_segment(&args)),
        Command::Eval(args) => with_pool(args.jobs, || cmd_eval(&args)),
        Command::AblateCtc(args) => with_pool(args.jobs, || cmd_ablate(&args)),
        Command::Render(args) => cmd_render(&args),
        Command::PeDiag(args) => cmd_pe_diag(&args),
    }
}

fn with_pool(jobs: Option<usize>, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            pool.install(f)
        }
        None => f(),
    }
}

/// Write bytes atomically: a temporary sibling is renamed into place, so
/// failures never leave partial outputs.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_corpus_atomic(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for entry in entries {
        buf.extend_from_slice(crate::jsonl::write_jsonl(entry)?.as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Resolved run configuration next to a file output.
fn write_run_config_for_file(out: &Path, config: &impl Serialize) -> Result<()> {
    let mut path = out.as_os_str().to_owned();
    path.push(".run.json");
    write_atomic(
        &PathBuf::from(path),
        serde_json::to_string_pretty(config)?.as_bytes(),
    )
}

fn write_run_config_in_dir(dir: &Path, config: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join("run_config.json"),
        serde_json::to_string_pretty(config)?.as_bytes(),
    )
}

fn parse_alphabet(spec: &Option<String>) -> Result<Vec<crate::synth::GlyphTemplate>> {
    match spec {
        None => Ok(builtin_alphabet()),
        Some(labels) => labels
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                builtin_glyph(l).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown glyph {l:?}; built-ins: {}",
                        builtin_alphabet()
                            .iter()
                            .map(|g| g.label.clone())
                            .collect::<Vec<_>>()
                            .join(",")
                    ))
                })
            })
            .collect(),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => {
            let mut cfg: SynthConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            cfg.seed = args.seed;
            cfg
        }
        None => SynthConfig {
            alphabet: parse_alphabet(&args.alphabet)?,
            chars_per_sample: (args.chars_min, args.chars_max),
            slant: (args.slant_min, args.slant_max),
            overlap: (args.overlap_min, args.overlap_max),
            delayed_stroke_rate: args.delayed_rate,
            cursive_join_rate: args.join_rate,
            points_per_glyph: (args.points_min, args.points_max),
            noise_sigma: args.noise,
            seed: args.seed,
        },
    };
    let mut samples = generate(&config, args.n)?;
    if args.spikes {
        attach_simulated_spikes(&mut samples, args.spike_jitter, args.spike_drop, args.seed)?;
    }
    let entries = crate::jsonl::entries_from_samples(samples);
    write_corpus_atomic(&args.out, &entries)?;
    write_run_config_for_file(&args.out, &serde_json::json!({"synth": args, "resolved": config}))?;
    eprintln!("wrote {} samples to {}", entries.len(), args.out.display());
    Ok(())
}

fn cmd_gt_approx(args: &GtApproxArgs) -> Result<()> {
    use rayon::prelude::*;
    let entries = read_corpus(&args.input)?;
    let approximated: Vec<CorpusEntry> = entries
        .par_iter()
        .map(|entry| {
            let sample = &entry.sample;
            let scorer = SyntheticScorer::with_noise(sample, args.score_noise, args.seed)?;
            let approx = approximate_truth(sample, &scorer)?;
            Ok(CorpusEntry {
                sample: LabeledSample {
                    truth: Some(approx),
                    ..sample.clone()
                },
                pred: entry.pred.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(report_path) = &args.compare_report {
        let pairs: Vec<(LabeledSample, Option<crate::ink::Segmentation>)> = entries
            .iter()
            .zip(&approximated)
            .map(|(orig, approx)| (orig.sample.clone(), approx.sample.truth.clone()))
            .collect();
        let report = evaluate_predictions(&pairs, "gt_approximation")?;
        write_atomic(report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
        eprintln!(
            "approximation vs generator truth: mIoU {:.4} over {} samples",
            report.corpus_miou, report.samples_evaluated
        );
    }

    write_corpus_atomic(&args.out, &approximated)?;
    write_run_config_for_file(&args.out, args)?;
    Ok(())
}

fn load_corpus_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    Ok(read_corpus(path)?.into_iter().map(|e| e.sample).collect())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let train_samples = load_corpus_samples(&args.corpus)?;
    let val_samples = load_corpus_samples(&args.val)?;
    let vocab = Vocabulary::from_samples(train_samples.iter().chain(val_samples.iter()));

    let observed_max_points = train_samples
        .iter()
        .chain(val_samples.iter())
        .map(|s| s.ink.point_count())
        .max()
        .unwrap_or(1);
    let max_points = args.max_points.unwrap_or(observed_max_points + 16);
    let observed_max_chars = train_samples
        .iter()
        .chain(val_samples.iter())
        .filter_map(|s| s.transcription.as_ref())
        .map(|t| t.len())
        .max()
        .unwrap_or(1);
    let max_chars = args.max_chars.unwrap_or(observed_max_chars + 4);

    let mut model = match args.method {
        Method::Kmeans => {
            return Err(Error::Usage("k-means requires no training; use `segment`".into()))
        }
        Method::Lstm | Method::Transformer => {
            let backbone = if args.method == Method::Lstm {
                Backbone::Bilstm
            } else {
                Backbone::Transformer
            };
            let cfg = BoundaryModelConfig {
                hidden_dim: args.hidden,
                layers: args.layers,
                heads: args.heads,
                dropout: args.dropout,
                ..BoundaryModelConfig::new(backbone, vocab.size(), max_points)
            };
            Model::Boundary(BoundaryModel::new(cfg, args.seed)?)
        }
        Method::Charquery => {
            let cfg = CharQueryConfig {
                hidden_dim: args.hidden,
                final_dim: args.final_dim.unwrap_or(args.hidden),
                encoder_layers: args.layers,
                decoder_layers: args.layers,
                heads: args.heads,
                dropout: args.dropout,
                query_pos_encoding: match args.query_pos {
                    QueryPos::Learned => QueryPosEncoding::Learned,
                    QueryPos::Sinusoidal => QueryPosEncoding::Sinusoidal,
                },
                ..CharQueryConfig::new(vocab.size(), max_chars, max_points)
            };
            Model::CharQuery(CharQueryModel::new(cfg, args.seed)?)
        }
    };

    let peak_lr = args.peak_lr.unwrap_or(match args.method {
        Method::Lstm => 3e-3,
        _ => 1e-3,
    });
    let train_cfg = TrainConfig {
        peak_lr,
        warmup_steps: args.warmup,
        weight_decay: args.weight_decay,
        beta1: args.beta1,
        beta2: args.beta2,
        label_smoothing: args.label_smoothing,
        ema_decay: args.ema_decay,
        batch_size: args.batch_size,
        max_steps: args.steps,
        seed: args.seed,
        use_spikes: !args.no_spikes,
        eval_every: args.eval_every,
    };

    std::fs::create_dir_all(&args.out)?;
    vocab.save(&args.out.join("vocab.json"))?;
    write_run_config_in_dir(&args.out, &serde_json::json!({"train": args, "resolved": train_cfg}))?;
    let result = train(
        &mut model,
        &train_samples,
        &val_samples,
        &vocab,
        &train_cfg,
        Some(&args.out),
    )?;
    eprintln!(
        "best validation mIoU {:.4} at step {}; checkpoint at {}",
        result.best_val_miou,
        result.best_step,
        args.out.join("model").display()
    );
    Ok(())
}

fn load_model_and_vocab(
    checkpoint: &Option<PathBuf>,
    vocab: &Option<PathBuf>,
) -> Result<(Model, Vocabulary)> {
    let stem = checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("neural methods need --checkpoint".into()))?;
    let model = Model::load(stem)?;
    let vocab_path = match vocab {
        Some(p) => p.clone(),
        None => stem
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json"),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    Ok((model, vocab))
}

fn check_method_matches(method: Method, model: &Model) -> Result<()> {
    let expected = match method {
        Method::Lstm => "lstm",
        Method::Transformer => "transformer",
        Method::Charquery => "charquery",
        Method::Kmeans => return Ok(()),
    };
    if model.kind_name() != expected {
        return Err(Error::Usage(format!(
            "checkpoint holds a {} model but --method is {expected}",
            model.kind_name()
        )));
    }
    Ok(())
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    use rayon::prelude::*;
    let entries = read_corpus(&args.input)?;

    let segmenter: Box<dyn Segmenter> = match args.method {
        Method::Kmeans => Box::new(KMeansSegmenter {
            cfg: KMeansConfig {
                weight_x: args.weight_x,
                weight_y: args.weight_y,
                weight_stroke: args.weight_stroke,
                max_iters: args.max_iters,
                tol: args.tol,
                init: if args.no_spikes {
                    KMeansInit::Random
                } else {
                    KMeansInit::CtcSpikes
                },
                seed: args.seed,
            },
        }),
        _ => {
            let (model, vocab) = load_model_and_vocab(&args.checkpoint, &args.vocab)?;
            check_method_matches(args.method, &model)?;
            Box::new(OwnedNeuralSegmenter {
                model,
                vocab,
                use_spikes: !args.no_spikes,
            })
        }
    };

    let predictions: Vec<CorpusEntry> = entries
        .par_iter()
        .map(|entry| {
            let pred = segmenter.segment(&entry.sample)?;
            Ok(CorpusEntry {
                sample: entry.sample.clone(),
                pred: Some(pred),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_corpus_atomic(&args.out, &predictions)?;
    write_run_config_for_file(&args.out, args)?;
    eprintln!(
        "segmented {} samples with {}",
        predictions.len(),
        segmenter.describe()
    );
    Ok(())
}

/// Owning variant of [`NeuralSegmenter`] for boxed dispatch.
struct OwnedNeuralSegmenter {
    model: Model,
    vocab: Vocabulary,
    use_spikes: bool,
}

impl Segmenter for OwnedNeuralSegmenter {
    fn segment(&self, sample: &LabeledSample) -> Result<crate::ink::Segmentation> {
        NeuralSegmenter {
            model: &self.model,
            vocab: &self.vocab,
            use_spikes: self.use_spikes,
        }
        .segment(sample)
    }

    fn describe(&self) -> String {
        NeuralSegmenter {
            model: &self.model,
            vocab: &self.vocab,
            use_spikes: self.use_spikes,
        }
        .describe()
    }

    fn architecture_id(&self) -> String {
        self.model.architecture_id()
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let entries = read_corpus(&args.input)?;
    let pairs: Vec<(LabeledSample, Option<crate::ink::Segmentation>)> = entries
        .iter()
        .map(|e| (e.sample.clone(), e.pred.clone()))
        .collect();
    let report = evaluate_predictions(&pairs, &args.method)?;

    if let Some(csv) = &args.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
    }
    if let Some(svg_dir) = &args.svg_dir {
        std::fs::create_dir_all(svg_dir)?;
        for (i, entry) in entries.iter().enumerate() {
            if let Some(pred) = &entry.pred {
                let svg = render_svg(&entry.sample.ink, pred)?;
                write_atomic(&svg_dir.join(format!("sample_{i:05}.svg")), &svg)?;
            }
        }
    }
    write_atomic(&args.report, serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_run_config_for_file(&args.report, args)?;
    eprintln!(
        "corpus mIoU {:.4} over {} samples ({} skipped)",
        report.corpus_miou, report.samples_evaluated, report.samples_skipped
    );
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let samples = load_corpus_samples(&args.input)?;
    let report = match args.method {
        Method::Kmeans => {
            let with = KMeansSegmenter {
                cfg: KMeansConfig {
                    init: KMeansInit::CtcSpikes,
                    seed: args.seed,
                    ..KMeansConfig::default()
                },
            };
            let without = KMeansSegmenter {
                cfg: KMeansConfig {
                    init: KMeansInit::Random,
                    seed: args.seed,
                    ..KMeansConfig::default()
                },
            };
            ablate_ctc(&samples, &with, &without)?
        }
        _ => {
            let (with_model, vocab) = load_model_and_vocab(&args.with_checkpoint, &args.vocab)?;
            check_method_matches(args.method, &with_model)?;
            let without_stem = args
                .without_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Usage("neural ablation needs --without-checkpoint".into()))?;
            let without_model = Model::load(without_stem)?;
            check_method_matches(args.method, &without_model)?;
            let with = NeuralSegmenter {
                model: &with_model,
                vocab: &vocab,
                use_spikes: true,
            };
            let without = NeuralSegmenter {
                model: &without_model,
                vocab: &vocab,
                use_spikes: false,
            };
            ablate_ctc(&samples, &with, &without)?
        }
    };
    write_atomic(&args.report, serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_run_config_for_file(&args.report, args)?;
    eprintln!(
        "with spikes {:.4} vs without {:.4} (mean delta {:+.4})",
        report.with_spikes.corpus_miou, report.without_spikes.corpus_miou, report.mean_delta
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let entries = read_corpus(&args.input)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let limit = args.limit.unwrap_or(entries.len());
    let mut written = 0usize;
    for (i, entry) in entries.iter().take(limit).enumerate() {
        let seg = match args.source {
            RenderSource::Truth => entry.sample.truth.clone(),
            RenderSource::Pred => entry.pred.clone(),
        };
        let Some(seg) = seg else { continue };
        let svg = render_svg(&entry.sample.ink, &seg)?;
        write_atomic(&args.out_dir.join(format!("sample_{i:05}.svg")), &svg)?;
        written += 1;
    }
    write_run_config_in_dir(&args.out_dir, args)?;
    eprintln!("rendered {written} SVG files to {}", args.out_dir.display());
    Ok(())
}

fn cmd_pe_diag(args: &PeDiagArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint)?;
    let Model::CharQuery(model) = model else {
        return Err(Error::Usage(
            "pe-diag needs a character-query checkpoint".into(),
        ));
    };
    let rows = pe_diagnostic(&model, args.max_pos)?;
    write_atomic(&args.out, pe_diagnostic_csv(&rows).as_bytes())?;
    write_run_config_for_file(&args.out, args)?;
    Ok(())
}
