//! Segment with the weighted k-means baseline, comparing random and
//! CTC-spike centroid initialization.
//!
//!     cargo run --example kmeans_baseline

use inkseg::eval::evaluate;
use inkseg::features::attach_simulated_spikes;
use inkseg::kmeans::{KMeansConfig, KMeansInit, KMeansSegmenter};
use inkseg::synth::{generate, SynthConfig};

fn main() -> inkseg::Result<()> {
    let cfg = SynthConfig {
        cursive_join_rate: 0.4,
        delayed_stroke_rate: 0.2,
        seed: 3,
        ..SynthConfig::default()
    };
    let mut samples = generate(&cfg, 150)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 3)?;

    for init in [KMeansInit::Random, KMeansInit::CtcSpikes] {
        let segmenter = KMeansSegmenter {
            cfg: KMeansConfig {
                init,
                seed: 3,
                ..KMeansConfig::default()
            },
        };
        let report = evaluate(&samples, &segmenter)?;
        println!(
            "{:<20} corpus mIoU {:.4} over {} samples",
            report.method, report.corpus_miou, report.samples_evaluated
        );
        let mut worst: Vec<(String, f64)> = report
            .per_char_miou
            .iter()
            .map(|(c, v)| (c.clone(), *v))
            .collect();
        worst.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (label, iou) in worst.iter().take(3) {
            println!("    hardest char {label:?}: {iou:.4}");
        }
    }
    Ok(())
}
