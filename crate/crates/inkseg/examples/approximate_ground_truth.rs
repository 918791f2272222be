//! Recover point-level labels with the iterative first-character search and
//! compare them against the generator's exact labels.
//!
//!     cargo run --example approximate_ground_truth

use inkseg::eval::sample_miou;
use inkseg::groundtruth::{approximate_truth, enumerate_cuts, CutParams, SyntheticScorer};
use inkseg::synth::{generate, SynthConfig};

fn main() -> inkseg::Result<()> {
    let cfg = SynthConfig {
        delayed_stroke_rate: 0.25,
        seed: 7,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg, 200)?;

    let mut total = 0.0;
    let mut exact = 0usize;
    let mut monotone = 0usize;
    for sample in &samples {
        let truth = sample.truth.as_ref().unwrap();
        let scorer = SyntheticScorer::new(sample)?;
        let approx = approximate_truth(sample, &scorer)?;
        let c = sample.transcription.as_ref().unwrap().len();
        total += sample_miou(&approx, truth, c)?;
        if approx == *truth {
            exact += 1;
        }
        if truth.is_monotone() {
            monotone += 1;
        }
    }
    println!(
        "approximation vs generator truth over {} samples: mIoU {:.4}",
        samples.len(),
        total / samples.len() as f64
    );
    println!("exact on {exact}/{} samples ({monotone} monotone)", samples.len());

    let cuts = enumerate_cuts(&samples[0].ink, &CutParams::default());
    println!(
        "sample 0 candidate cuts: {} over {} points",
        cuts.len(),
        samples[0].ink.point_count()
    );
    Ok(())
}
