//! Train the two boundary-prediction backbones (bidirectional recurrent and
//! transformer encoder) on a synthetic corpus and compare validation mIoU.
//!
//!     cargo run --release --example train_boundary_predictor

use inkseg::boundary::{Backbone, BoundaryModel, BoundaryModelConfig};
use inkseg::features::{attach_simulated_spikes, Vocabulary};
use inkseg::synth::{generate, SynthConfig};
use inkseg::training::{train, Model, TrainConfig};

fn main() -> inkseg::Result<()> {
    let synth = SynthConfig {
        chars_per_sample: (2, 5),
        delayed_stroke_rate: 0.0,
        seed: 21,
        ..SynthConfig::default()
    };
    let mut samples = generate(&synth, 400)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 21)?;
    let (val, train_set) = samples.split_at(80);
    let vocab = Vocabulary::from_samples(train_set.iter());
    let max_points = samples.iter().map(|s| s.ink.point_count()).max().unwrap();

    for backbone in [Backbone::Bilstm, Backbone::Transformer] {
        let cfg = BoundaryModelConfig {
            hidden_dim: 32,
            layers: 2,
            heads: 4,
            dropout: 0.0,
            ..BoundaryModelConfig::new(backbone, vocab.size(), max_points + 8)
        };
        let mut model = Model::Boundary(BoundaryModel::new(cfg, 2)?);
        let train_cfg = TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 150,
            batch_size: 16,
            max_steps: 1000,
            eval_every: 250,
            ema_decay: 0.99,
            seed: 2,
            ..TrainConfig::default()
        };
        let start = std::time::Instant::now();
        let result = train(&mut model, train_set, val, &vocab, &train_cfg, None)?;
        println!(
            "{backbone:?}: best validation mIoU {:.4} at step {} ({:.1?})",
            result.best_val_miou,
            result.best_step,
            start.elapsed()
        );
    }
    Ok(())
}
