//! Synthetic handwriting generator with exact point-level labels: glyph
//! templates placed left to right with configurable overlap, slant, cursive
//! joins, sampling noise, and delayed diacritic strokes that are emitted
//! only after one to three further characters (and displaced sideways, the
//! way hasty writing leaves diacritics hanging over later letters).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ink::{Ink, LabeledSample, Point, Segmentation, Stroke, Transcription};
use crate::nn::normal;

/// A character prototype: polyline strokes in the unit box, plus an optional
/// diacritic-like mark stroke that may be written late.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlyphTemplate {
    pub label: String,
    pub strokes: Vec<Vec<(f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mark: Option<Vec<(f64, f64)>>,
    /// Width of the glyph in units of its height.
    pub aspect: f64,
}

impl GlyphTemplate {
    fn new(label: &str, strokes: Vec<Vec<(f64, f64)>>, mark: Option<Vec<(f64, f64)>>, aspect: f64) -> Self {
        GlyphTemplate {
            label: label.to_owned(),
            strokes,
            mark,
            aspect,
        }
    }
}

fn arc(cx: f64, cy: f64, r: f64, from_deg: f64, to_deg: f64, steps: usize) -> Vec<(f64, f64)> {
    (0..=steps)
        .map(|i| {
            let t = from_deg + (to_deg - from_deg) * i as f64 / steps as f64;
            let rad = t.to_radians();
            (cx + r * rad.cos(), cy + r * rad.sin())
        })
        .collect()
}

/// The 12 built-in templates: 10 single-stroke base glyphs and 2
/// diacritic-bearing ones (`i` with a dot, `t` with a crossbar).
pub fn builtin_alphabet() -> Vec<GlyphTemplate> {
    vec![
        GlyphTemplate::new("c", vec![arc(0.55, 0.35, 0.35, 50.0, 310.0, 10)], None, 0.75),
        GlyphTemplate::new(
            "l",
            vec![vec![(0.35, 1.0), (0.32, 0.5), (0.3, 0.05), (0.45, 0.0), (0.55, 0.08)]],
            None,
            0.5,
        ),
        GlyphTemplate::new("o", vec![arc(0.5, 0.35, 0.33, 60.0, 420.0, 12)], None, 0.75),
        GlyphTemplate::new(
            "u",
            vec![vec![
                (0.1, 0.7),
                (0.12, 0.35),
                (0.25, 0.05),
                (0.5, 0.0),
                (0.75, 0.08),
                (0.85, 0.35),
                (0.9, 0.7),
            ]],
            None,
            0.8,
        ),
        GlyphTemplate::new(
            "n",
            vec![vec![
                (0.1, 0.0),
                (0.1, 0.55),
                (0.2, 0.7),
                (0.5, 0.72),
                (0.8, 0.6),
                (0.88, 0.3),
                (0.9, 0.0),
            ]],
            None,
            0.8,
        ),
        GlyphTemplate::new(
            "m",
            vec![vec![
                (0.05, 0.0),
                (0.05, 0.6),
                (0.2, 0.72),
                (0.35, 0.6),
                (0.42, 0.0),
                (0.5, 0.6),
                (0.66, 0.72),
                (0.85, 0.6),
                (0.95, 0.0),
            ]],
            None,
            1.1,
        ),
        GlyphTemplate::new(
            "v",
            vec![vec![(0.1, 0.7), (0.3, 0.35), (0.5, 0.0), (0.7, 0.35), (0.9, 0.7)]],
            None,
            0.75,
        ),
        GlyphTemplate::new(
            "w",
            vec![vec![
                (0.05, 0.7),
                (0.2, 0.2),
                (0.3, 0.0),
                (0.45, 0.45),
                (0.6, 0.0),
                (0.72, 0.2),
                (0.95, 0.7),
            ]],
            None,
            1.0,
        ),
        GlyphTemplate::new(
            "s",
            vec![vec![
                (0.75, 0.65),
                (0.45, 0.72),
                (0.25, 0.55),
                (0.5, 0.38),
                (0.72, 0.2),
                (0.5, 0.02),
                (0.2, 0.08),
            ]],
            None,
            0.7,
        ),
        GlyphTemplate::new(
            "z",
            vec![vec![(0.12, 0.7), (0.85, 0.7), (0.15, 0.02), (0.88, 0.0)]],
            None,
            0.75,
        ),
        GlyphTemplate::new(
            "i",
            vec![vec![(0.5, 0.68), (0.48, 0.35), (0.5, 0.0)]],
            Some(vec![(0.48, 0.92), (0.52, 0.98), (0.55, 0.93)]),
            0.45,
        ),
        GlyphTemplate::new(
            "t",
            vec![vec![(0.45, 1.0), (0.42, 0.5), (0.45, 0.05), (0.6, 0.0)]],
            Some(vec![(0.15, 0.72), (0.5, 0.74), (0.85, 0.72)]),
            0.6,
        ),
    ]
}

/// Look up a built-in template by label.
pub fn builtin_glyph(label: &str) -> Option<GlyphTemplate> {
    builtin_alphabet().into_iter().find(|g| g.label == label)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub alphabet: Vec<GlyphTemplate>,
    /// Inclusive range of characters per sample.
    pub chars_per_sample: (usize, usize),
    /// Slant range in radians (sheared as `x += tan(slant)·y`).
    pub slant: (f64, f64),
    /// Horizontal overlap fraction range between neighboring characters.
    pub overlap: (f64, f64),
    /// Probability that a mark stroke is written 1..=3 characters late.
    pub delayed_stroke_rate: f64,
    /// Probability that a character joins the previous one into one stroke.
    pub cursive_join_rate: f64,
    /// Inclusive range of sampling points per glyph.
    pub points_per_glyph: (usize, usize),
    /// Standard deviation of per-coordinate Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alphabet: builtin_alphabet(),
            chars_per_sample: (3, 7),
            slant: (0.0, 0.12),
            overlap: (0.0, 0.15),
            delayed_stroke_rate: 0.25,
            cursive_join_rate: 0.0,
            points_per_glyph: (10, 16),
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        let ranges_ok = self.chars_per_sample.0 >= 1
            && self.chars_per_sample.0 <= self.chars_per_sample.1
            && self.slant.0 <= self.slant.1
            && self.overlap.0 <= self.overlap.1
            && self.points_per_glyph.0 <= self.points_per_glyph.1;
        if !ranges_ok {
            return Err(Error::Config("a sampling range is empty".into()));
        }
        if self.points_per_glyph.0 < 2 {
            return Err(Error::Config("points_per_glyph must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.delayed_stroke_rate)
            || !(0.0..=1.0).contains(&self.cursive_join_rate)
        {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn polyline_length(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

/// Resample a polyline to exactly `n >= 2` points, uniformly by arclength.
fn resample(points: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
    debug_assert!(points.len() >= 2 && n >= 2);
    let mut cumulative = vec![0.0];
    for w in points.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cumulative.push(cumulative.last().unwrap() + d);
    }
    let total = *cumulative.last().unwrap();
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            let seg = cumulative
                .windows(2)
                .position(|w| target <= w[1] + 1e-12)
                .unwrap_or(points.len() - 2);
            let lo = cumulative[seg];
            let hi = cumulative[seg + 1];
            let t = if hi > lo { (target - lo) / (hi - lo) } else { 0.0 };
            let a = points[seg];
            let b = points[seg + 1];
            (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
        })
        .collect()
}

/// A stroke under construction, with the character slot of every point.
struct SlottedStroke {
    points: Vec<(f64, f64)>,
    slots: Vec<usize>,
}

struct PendingMark {
    due_after_char: usize,
    points: Vec<(f64, f64)>,
    slot: usize,
}

/// Generate `n` labeled samples. Deterministic per seed; each sample draws
/// from an independent stream so corpora of different sizes share prefixes.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    (0..n).map(|i| generate_one(cfg, i as u64)).collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

fn generate_one(cfg: &SynthConfig, index: u64) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index));
    let n_chars = rng.random_range(cfg.chars_per_sample.0..=cfg.chars_per_sample.1);
    let glyphs: Vec<&GlyphTemplate> = (0..n_chars)
        .map(|_| &cfg.alphabet[rng.random_range(0..cfg.alphabet.len())])
        .collect();
    let shear = rng.random_range(cfg.slant.0..=cfg.slant.1).tan();

    let mut strokes: Vec<SlottedStroke> = Vec::new();
    let mut pending: Vec<PendingMark> = Vec::new();
    let mut x_cursor = 0.0f64;
    // Index into `strokes` of the last base stroke, for cursive joins; a
    // flushed mark in between breaks joinability.
    let mut last_base: Option<usize> = None;

    for (slot, glyph) in glyphs.iter().enumerate() {
        let width = glyph.aspect;
        let budget = rng.random_range(cfg.points_per_glyph.0..=cfg.points_per_glyph.1);

        // Split the point budget over base strokes and mark by arclength,
        // at least 2 points each.
        let mut parts: Vec<&Vec<(f64, f64)>> = glyph.strokes.iter().collect();
        if let Some(mark) = &glyph.mark {
            parts.push(mark);
        }
        let lengths: Vec<f64> = parts.iter().map(|p| polyline_length(p)).collect();
        let total_len: f64 = lengths.iter().sum();
        let mut counts: Vec<usize> = lengths
            .iter()
            .map(|l| ((budget as f64 * l / total_len).round() as usize).max(2))
            .collect();
        // Keep the total roughly at the budget without dropping below 2.
        while counts.iter().sum::<usize>() > budget.max(2 * counts.len()) {
            if let Some(c) = counts.iter_mut().max_by_key(|c| **c) {
                if *c > 2 {
                    *c -= 1;
                } else {
                    break;
                }
            }
        }

        let place = |pts: &[(f64, f64)], x0: f64| -> Vec<(f64, f64)> {
            pts.iter()
                .map(|&(gx, gy)| (x0 + gx * width + shear * gy, gy))
                .collect()
        };

        let join_this = slot > 0 && rng.random_range(0.0..1.0) < cfg.cursive_join_rate;
        for (i, part) in glyph.strokes.iter().enumerate() {
            let placed = place(&resample(part, counts[i]), x_cursor);
            if i == 0 && join_this && last_base == Some(strokes.len().wrapping_sub(1)) && !strokes.is_empty() {
                // Bridge the pen travel from the previous character into one
                // continuous stroke; the two bridge points split between the
                // neighbors.
                let prev = strokes.last_mut().expect("joinable stroke");
                let (ex, ey) = *prev.points.last().unwrap();
                let (sx, sy) = placed[0];
                prev.points.push((ex + (sx - ex) / 3.0, ey + (sy - ey) / 3.0));
                prev.slots.push(slot - 1);
                prev.points.push((ex + 2.0 * (sx - ex) / 3.0, ey + 2.0 * (sy - ey) / 3.0));
                prev.slots.push(slot);
                prev.points.extend(placed.iter().copied());
                prev.slots.extend(std::iter::repeat_n(slot, placed.len()));
            } else {
                let n = placed.len();
                strokes.push(SlottedStroke {
                    points: placed,
                    slots: vec![slot; n],
                });
            }
            last_base = Some(strokes.len() - 1);
        }

        if let Some(mark) = &glyph.mark {
            let mark_count = *counts.last().unwrap();
            let delayed = rng.random_range(0.0..1.0) < cfg.delayed_stroke_rate;
            if delayed && slot + 1 < glyphs.len() {
                let due = slot + rng.random_range(1..=3usize);
                // Hasty delayed marks drift toward the following characters.
                let drift = rng.random_range(0.35..0.9) * width;
                let pts: Vec<(f64, f64)> = place(&resample(mark, mark_count), x_cursor)
                    .into_iter()
                    .map(|(x, y)| (x + drift, y))
                    .collect();
                pending.push(PendingMark {
                    due_after_char: due,
                    points: pts,
                    slot,
                });
            } else {
                let n = mark_count;
                strokes.push(SlottedStroke {
                    points: place(&resample(mark, n), x_cursor),
                    slots: vec![slot; n],
                });
            }
        }

        // Flush marks that are due once this character is finished.
        let mut flushed = false;
        let mut i = 0;
        while i < pending.len() {
            if pending[i].due_after_char <= slot {
                let mark = pending.remove(i);
                let n = mark.points.len();
                strokes.push(SlottedStroke {
                    points: mark.points,
                    slots: vec![mark.slot; n],
                });
                flushed = true;
            } else {
                i += 1;
            }
        }
        if flushed {
            last_base = None;
        }

        let advance = 1.0 - rng.random_range(cfg.overlap.0..=cfg.overlap.1);
        x_cursor += width * advance;
    }

    // Whatever marks remain land at the very end.
    for mark in pending {
        let n = mark.points.len();
        strokes.push(SlottedStroke {
            points: mark.points,
            slots: vec![mark.slot; n],
        });
    }

    let mut truth = Vec::new();
    let mut built = Vec::with_capacity(strokes.len());
    for s in strokes {
        let points = s
            .points
            .iter()
            .map(|&(x, y)| {
                Point::new(
                    x + normal(&mut rng) * cfg.noise_sigma,
                    y + normal(&mut rng) * cfg.noise_sigma,
                )
            })
            .collect();
        built.push(Stroke::new(points)?);
        truth.extend(s.slots);
    }

    let transcription = Transcription::from_chars(glyphs.iter().map(|g| g.label.clone()).collect())?;
    Ok(LabeledSample {
        ink: Ink::new(built)?,
        transcription: Some(transcription),
        spikes: None,
        truth: Some(Segmentation::total(truth)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_alphabet_has_ten_base_and_two_marked() {
        let alphabet = builtin_alphabet();
        assert_eq!(alphabet.len(), 12);
        assert_eq!(alphabet.iter().filter(|g| g.mark.is_some()).count(), 2);
        for g in &alphabet {
            for s in &g.strokes {
                assert!(s.len() >= 2);
                for &(x, y) in s {
                    assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y), "{}", g.label);
                }
            }
        }
    }

    #[test]
    fn resample_endpoints_and_count() {
        let line = vec![(0.0, 0.0), (1.0, 0.0)];
        let r = resample(&line, 5);
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], (0.0, 0.0));
        assert!((r[4].0 - 1.0).abs() < 1e-12);
        assert!((r[2].0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_when_delays_and_joins_disabled() {
        let cfg = SynthConfig {
            delayed_stroke_rate: 0.0,
            cursive_join_rate: 0.0,
            seed: 1,
            ..SynthConfig::default()
        };
        for sample in generate(&cfg, 30).unwrap() {
            let truth = sample.truth.as_ref().unwrap();
            assert!(truth.is_total());
            assert!(truth.is_monotone());
            sample.validate().unwrap();
            // Every slot has points.
            let c = sample.transcription.as_ref().unwrap().len();
            for k in 0..c {
                assert!(!truth.points_of(k).is_empty());
            }
        }
    }

    #[test]
    fn full_delay_rate_produces_non_monotone_samples() {
        let cfg = SynthConfig {
            delayed_stroke_rate: 1.0,
            chars_per_sample: (4, 6),
            seed: 2,
            ..SynthConfig::default()
        };
        let samples = generate(&cfg, 40).unwrap();
        assert!(
            samples
                .iter()
                .any(|s| !s.truth.as_ref().unwrap().is_monotone()),
            "expected at least one delayed-stroke sample"
        );
    }

    #[test]
    fn cursive_joins_reduce_stroke_count() {
        let base = SynthConfig {
            delayed_stroke_rate: 0.0,
            cursive_join_rate: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let joined_cfg = SynthConfig {
            cursive_join_rate: 1.0,
            ..base.clone()
        };
        let plain: usize = generate(&base, 20)
            .unwrap()
            .iter()
            .map(|s| s.ink.stroke_count())
            .sum();
        let joined: usize = generate(&joined_cfg, 20)
            .unwrap()
            .iter()
            .map(|s| s.ink.stroke_count())
            .sum();
        assert!(joined < plain, "{joined} vs {plain}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 9,
            ..SynthConfig::default()
        };
        let a = generate(&cfg, 10).unwrap();
        let b = generate(&cfg, 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ink, y.ink);
            assert_eq!(x.truth, y.truth);
        }
        let other = generate(
            &SynthConfig {
                seed: 10,
                ..cfg.clone()
            },
            10,
        )
        .unwrap();
        assert!(a.iter().zip(&other).any(|(x, y)| x.ink != y.ink));
    }

    #[test]
    fn impossible_config_is_a_config_error() {
        let cfg = SynthConfig {
            points_per_glyph: (1, 1),
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
        let cfg = SynthConfig {
            alphabet: vec![],
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
    }
}
