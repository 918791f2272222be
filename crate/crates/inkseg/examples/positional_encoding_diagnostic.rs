//! Compare the sinusoidal and learned query positional encodings: train a
//! tiny character-query model, then dump the per-position normalized mean
//! values as CSV. The learned table shows much larger jumps between
//! neighboring positions, which is what lets it separate repeated
//! characters.
//!
//!     cargo run --example positional_encoding_diagnostic

use inkseg::charquery::{
    mean_successive_difference, pe_diagnostic, pe_diagnostic_csv, sinusoidal_pe, CharQueryConfig,
    CharQueryModel,
};
use inkseg::features::{attach_simulated_spikes, Vocabulary};
use inkseg::synth::{generate, SynthConfig};
use inkseg::training::{train, Model, TrainConfig};

fn main() -> inkseg::Result<()> {
    // Eq.-style spot values of the sinusoidal table.
    let pe = sinusoidal_pe(4, 8)?;
    println!("PE[0, 0..4] = {:?} (sin 0, cos 0, ...)", &pe[..4]);
    println!("PE[3, 0] = {:.6} = sin(3) = {:.6}", pe[3 * 8], 3f64.sin());

    let synth = SynthConfig {
        chars_per_sample: (2, 6),
        seed: 31,
        ..SynthConfig::default()
    };
    let mut samples = generate(&synth, 300)?;
    attach_simulated_spikes(&mut samples, 1, 0.1, 31)?;
    let val = samples.split_off(240);
    let vocab = Vocabulary::from_samples(samples.iter().chain(val.iter()));
    let max_points = samples
        .iter()
        .chain(val.iter())
        .map(|s| s.ink.point_count())
        .max()
        .unwrap();

    let cfg = CharQueryConfig {
        hidden_dim: 32,
        final_dim: 32,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 4,
        dropout: 0.0,
        ..CharQueryConfig::new(vocab.size(), 8, max_points + 8)
    };
    let mut model = Model::CharQuery(CharQueryModel::new(cfg, 4)?);
    train(
        &mut model,
        &samples,
        &val,
        &vocab,
        &TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 100,
            batch_size: 16,
            max_steps: 600,
            eval_every: 200,
            ema_decay: 0.99,
            seed: 4,
            ..TrainConfig::default()
        },
        None,
    )?;

    let Model::CharQuery(trained) = &model else { unreachable!() };
    let rows = pe_diagnostic(trained, 8)?;
    print!("{}", pe_diagnostic_csv(&rows));

    let sinusoidal: Vec<f64> = rows.iter().map(|r| r.sinusoidal).collect();
    let learned: Vec<f64> = rows.iter().map(|r| r.learned).collect();
    println!(
        "mean successive difference: sinusoidal {:.4}, learned {:.4}",
        mean_successive_difference(&sinusoidal),
        mean_successive_difference(&learned)
    );
    Ok(())
}
