//! Small CTC-spike ablation: k-means with spike initialization vs random
//! initialization, and a character-query model trained with vs without
//! spike features.
//!
//!     cargo run --release --example ctc_spike_ablation

use inkseg::charquery::{CharQueryConfig, CharQueryModel};
use inkseg::eval::ablate_ctc;
use inkseg::features::{attach_simulated_spikes, Vocabulary};
use inkseg::kmeans::{KMeansConfig, KMeansInit, KMeansSegmenter};
use inkseg::synth::{generate, SynthConfig};
use inkseg::training::{train, Model, NeuralSegmenter, TrainConfig};

fn main() -> inkseg::Result<()> {
    let synth = SynthConfig {
        chars_per_sample: (2, 5),
        cursive_join_rate: 0.5,
        seed: 51,
        ..SynthConfig::default()
    };
    let mut samples = generate(&synth, 400)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 51)?;
    let val = samples.split_off(320);
    let vocab = Vocabulary::from_samples(samples.iter().chain(val.iter()));

    // k-means: the spike ablation swaps the initialization.
    let kmeans = |init| KMeansSegmenter {
        cfg: KMeansConfig {
            init,
            seed: 5,
            ..KMeansConfig::default()
        },
    };
    let report = ablate_ctc(&val, &kmeans(KMeansInit::CtcSpikes), &kmeans(KMeansInit::Random))?;
    println!(
        "kmeans:    with spikes {:.4}, without {:.4}, mean delta {:+.4}",
        report.with_spikes.corpus_miou, report.without_spikes.corpus_miou, report.mean_delta
    );

    // Character queries: train twice, with and without spike features.
    let max_points = samples
        .iter()
        .chain(val.iter())
        .map(|s| s.ink.point_count())
        .max()
        .unwrap();
    let mut trained = Vec::new();
    for use_spikes in [true, false] {
        let cfg = CharQueryConfig {
            hidden_dim: 32,
            final_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            dropout: 0.0,
            ..CharQueryConfig::new(vocab.size(), 8, max_points + 8)
        };
        let mut model = Model::CharQuery(CharQueryModel::new(cfg, 6)?);
        train(
            &mut model,
            &samples,
            &val,
            &vocab,
            &TrainConfig {
                peak_lr: 3e-3,
                warmup_steps: 100,
                batch_size: 16,
                max_steps: 800,
                eval_every: 200,
                ema_decay: 0.99,
                use_spikes,
                seed: 6,
                ..TrainConfig::default()
            },
            None,
        )?;
        trained.push(model);
    }
    let report = ablate_ctc(
        &val,
        &NeuralSegmenter {
            model: &trained[0],
            vocab: &vocab,
            use_spikes: true,
        },
        &NeuralSegmenter {
            model: &trained[1],
            vocab: &vocab,
            use_spikes: false,
        },
    )?;
    println!(
        "charquery: with spikes {:.4}, without {:.4}, mean delta {:+.4}",
        report.with_spikes.corpus_miou, report.without_spikes.corpus_miou, report.mean_delta
    );
    Ok(())
}
