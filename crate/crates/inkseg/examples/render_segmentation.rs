//! Render the same ink twice: colored by ground truth and by a k-means
//! prediction, for side-by-side comparison.
//!
//!     cargo run --example render_segmentation

use inkseg::features::attach_simulated_spikes;
use inkseg::kmeans::{kmeans_segment, KMeansConfig, KMeansInit};
use inkseg::svg::render_svg;
use inkseg::synth::{generate, SynthConfig};

fn main() -> inkseg::Result<()> {
    let cfg = SynthConfig {
        chars_per_sample: (4, 6),
        delayed_stroke_rate: 0.5,
        seed: 12,
        ..SynthConfig::default()
    };
    let mut samples = generate(&cfg, 4)?;
    attach_simulated_spikes(&mut samples, 1, 0.0, 12)?;
    let out_dir = std::env::temp_dir().join("inkseg_render_example");
    std::fs::create_dir_all(&out_dir)?;

    for (i, sample) in samples.iter().enumerate() {
        let truth = sample.truth.as_ref().unwrap();
        let pred = kmeans_segment(
            sample,
            &KMeansConfig {
                init: KMeansInit::CtcSpikes,
                seed: 12,
                ..KMeansConfig::default()
            },
        )?;
        std::fs::write(
            out_dir.join(format!("sample_{i}_truth.svg")),
            render_svg(&sample.ink, truth)?,
        )?;
        std::fs::write(
            out_dir.join(format!("sample_{i}_kmeans.svg")),
            render_svg(&sample.ink, &pred)?,
        )?;
        println!(
            "sample {i} ({:?}) rendered",
            sample.transcription.as_ref().unwrap().text()
        );
    }
    println!("SVG pairs in {}", out_dir.display());
    Ok(())
}
