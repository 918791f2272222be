//! Train a small Character Query Transformer on a synthetic corpus with
//! delayed strokes and report its validation mIoU.
//!
//!     cargo run --release --example train_character_queries

use inkseg::charquery::{CharQueryConfig, CharQueryModel};
use inkseg::eval::evaluate;
use inkseg::features::{attach_simulated_spikes, Vocabulary};
use inkseg::synth::{generate, SynthConfig};
use inkseg::training::{train, Model, NeuralSegmenter, TrainConfig};

fn main() -> inkseg::Result<()> {
    let synth = SynthConfig {
        chars_per_sample: (2, 5),
        delayed_stroke_rate: 0.3,
        seed: 11,
        ..SynthConfig::default()
    };
    let mut samples = generate(&synth, 400)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 11)?;
    let (val, train_set) = samples.split_at(80);
    let vocab = Vocabulary::from_samples(train_set.iter());

    let max_points = samples.iter().map(|s| s.ink.point_count()).max().unwrap();
    let cfg = CharQueryConfig {
        hidden_dim: 32,
        final_dim: 32,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        dropout: 0.0,
        ..CharQueryConfig::new(vocab.size(), 8, max_points + 8)
    };
    let mut model = Model::CharQuery(CharQueryModel::new(cfg, 1)?);

    let train_cfg = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 150,
        batch_size: 16,
        max_steps: 1500,
        eval_every: 250,
        ema_decay: 0.99,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let result = train(&mut model, train_set, val, &vocab, &train_cfg, None)?;
    println!(
        "trained {} steps in {:.1?}; best validation mIoU {:.4} at step {}",
        train_cfg.max_steps,
        start.elapsed(),
        result.best_val_miou,
        result.best_step
    );

    let report = evaluate(
        val,
        &NeuralSegmenter {
            model: &model,
            vocab: &vocab,
            use_spikes: true,
        },
    )?;
    println!(
        "final corpus mIoU {:.4} over {} samples",
        report.corpus_miou, report.samples_evaluated
    );
    for (label, iou) in report.per_char_miou.iter().take(5) {
        println!("  char {label:?}: mean IoU {iou:.4}");
    }
    Ok(())
}
