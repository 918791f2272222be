//! Temporary calibration harness for acceptance-suite configs.

use inkseg::boundary::{Backbone, BoundaryModel, BoundaryModelConfig};
use inkseg::charquery::{CharQueryConfig, CharQueryModel};
use inkseg::eval::evaluate;
use inkseg::features::{attach_simulated_spikes, Vocabulary};
use inkseg::ink::LabeledSample;
use inkseg::kmeans::{KMeansConfig, KMeansInit, KMeansSegmenter};
use inkseg::synth::{builtin_glyph, SynthConfig};
use inkseg::training::{train, Model, NeuralSegmenter, TrainConfig};

fn monotone_corpus() -> SynthConfig {
    SynthConfig {
        alphabet: ["c", "l", "o", "u", "n", "m", "v", "w", "s", "z"]
            .iter()
            .map(|l| builtin_glyph(l).unwrap())
            .collect(),
        chars_per_sample: (2, 5),
        slant: (0.0, 0.12),
        overlap: (0.0, 0.15),
        delayed_stroke_rate: 0.0,
        cursive_join_rate: 0.5,
        points_per_glyph: (8, 12),
        noise_sigma: 0.01,
        seed: 101,
    }
}

fn delayed_corpus() -> SynthConfig {
    SynthConfig {
        alphabet: ["i", "t", "u"]
            .iter()
            .map(|l| builtin_glyph(l).unwrap())
            .collect(),
        chars_per_sample: (3, 6),
        slant: (0.0, 0.1),
        overlap: (0.0, 0.1),
        delayed_stroke_rate: 0.8,
        cursive_join_rate: 0.0,
        points_per_glyph: (8, 12),
        noise_sigma: 0.01,
        seed: 202,
    }
}

fn make(cfg: &SynthConfig, n: usize, spike_seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut samples = inkseg::synth::generate(cfg, n).unwrap();
    attach_simulated_spikes(&mut samples, 1, 0.1, spike_seed).unwrap();
    let val = samples.split_off(n - 120);
    (samples, val)
}

fn train_one(
    kind: &str,
    train_set: &[LabeledSample],
    val: &[LabeledSample],
    vocab: &Vocabulary,
    use_spikes: bool,
    steps: usize,
) -> (Model, f64) {
    let max_points = train_set
        .iter()
        .chain(val.iter())
        .map(|s| s.ink.point_count())
        .max()
        .unwrap()
        + 8;
    let max_chars = 10;
    let mut model = match kind {
        "lstm" | "transformer" => {
            let backbone = if kind == "lstm" {
                Backbone::Bilstm
            } else {
                Backbone::Transformer
            };
            Model::Boundary(
                BoundaryModel::new(
                    BoundaryModelConfig {
                        hidden_dim: 32,
                        layers: 2,
                        heads: 4,
                        dropout: 0.0,
                        ..BoundaryModelConfig::new(backbone, vocab.size(), max_points)
                    },
                    7,
                )
                .unwrap(),
            )
        }
        _ => Model::CharQuery(
            CharQueryModel::new(
                CharQueryConfig {
                    hidden_dim: 32,
                    final_dim: 32,
                    encoder_layers: 2,
                    decoder_layers: 2,
                    heads: 4,
                    dropout: 0.0,
                    ..CharQueryConfig::new(vocab.size(), max_chars, max_points)
                },
                7,
            )
            .unwrap(),
        ),
    };
    let cfg = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 150,
        batch_size: 16,
        max_steps: steps,
        eval_every: 250,
        ema_decay: 0.99,
        seed: 7,
        use_spikes,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let result = train(&mut model, train_set, val, vocab, &cfg, None).unwrap();
    println!(
        "  {kind} (spikes={use_spikes}): best val mIoU {:.4} at step {} [{:.0?}]",
        result.best_val_miou,
        result.best_step,
        start.elapsed()
    );
    (model, result.best_val_miou)
}

fn kmeans_miou(val: &[LabeledSample], init: KMeansInit) -> f64 {
    let report = evaluate(
        val,
        &KMeansSegmenter {
            cfg: KMeansConfig {
                init,
                seed: 5,
                ..KMeansConfig::default()
            },
        },
    )
    .unwrap();
    report.corpus_miou
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if which == "all" || which == "mono" {
        println!("=== monotone corpus ===");
        let (train_set, val) = make(&monotone_corpus(), 2000, 303);
        let vocab = Vocabulary::from_samples(train_set.iter().chain(val.iter()));
        println!(
            "  kmeans spike-init {:.4}, random-init {:.4}",
            kmeans_miou(&val, KMeansInit::CtcSpikes),
            kmeans_miou(&val, KMeansInit::Random)
        );
        for kind in ["lstm", "transformer", "charquery"] {
            let (model, _) = train_one(kind, &train_set, &val, &vocab, true, 1200);
            let no_spike = evaluate(
                &val,
                &NeuralSegmenter {
                    model: &model,
                    vocab: &vocab,
                    use_spikes: true,
                },
            )
            .unwrap();
            println!("    eval(with spikes fed): {:.4}", no_spike.corpus_miou);
        }
        for kind in ["lstm", "transformer", "charquery"] {
            train_one(kind, &train_set, &val, &vocab, false, 1200);
        }
    }

    if which == "all" || which == "delayed" {
        println!("=== delayed corpus ===");
        let (train_set, val) = make(&delayed_corpus(), 1200, 404);
        let vocab = Vocabulary::from_samples(train_set.iter().chain(val.iter()));
        println!(
            "  kmeans spike-init {:.4}, random-init {:.4}",
            kmeans_miou(&val, KMeansInit::CtcSpikes),
            kmeans_miou(&val, KMeansInit::Random)
        );
        for kind in ["lstm", "transformer", "charquery"] {
            train_one(kind, &train_set, &val, &vocab, true, 1200);
        }
        for kind in ["lstm", "transformer", "charquery"] {
            train_one(kind, &train_set, &val, &vocab, false, 1200);
        }
    }
}
