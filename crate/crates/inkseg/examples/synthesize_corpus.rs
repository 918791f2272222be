//! Generate a small synthetic corpus with exact labels, attach simulated
//! CTC spikes, and write it as JSON lines plus one SVG preview.
//!
//!     cargo run --example synthesize_corpus

use inkseg::features::attach_simulated_spikes;
use inkseg::jsonl::{entries_from_samples, write_corpus};
use inkseg::svg::render_svg;
use inkseg::synth::{generate, SynthConfig};

fn main() -> inkseg::Result<()> {
    let cfg = SynthConfig {
        chars_per_sample: (3, 6),
        delayed_stroke_rate: 0.4,
        cursive_join_rate: 0.3,
        seed: 42,
        ..SynthConfig::default()
    };
    let mut samples = generate(&cfg, 25)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 42)?;

    let out_dir = std::env::temp_dir().join("inkseg_synth_example");
    std::fs::create_dir_all(&out_dir)?;

    for (i, sample) in samples.iter().take(3).enumerate() {
        let truth = sample.truth.as_ref().expect("generator truth");
        let svg = render_svg(&sample.ink, truth)?;
        let path = out_dir.join(format!("sample_{i}.svg"));
        std::fs::write(&path, svg)?;
        println!(
            "sample {i}: {:?} — {} strokes, {} points, monotone: {} -> {}",
            sample.transcription.as_ref().unwrap().text(),
            sample.ink.stroke_count(),
            sample.ink.point_count(),
            truth.is_monotone(),
            path.display()
        );
    }

    let corpus_path = out_dir.join("corpus.jsonl");
    write_corpus(&corpus_path, &entries_from_samples(samples))?;
    println!("corpus written to {}", corpus_path.display());
    Ok(())
}
