//! Iterative ground-truth approximation: repeatedly split the first
//! character off the remaining ink by exhaustively scoring candidate cuts
//! (stroke boundaries, spatial outlier steps, optional temporal gaps) with a
//! pluggable likelihood scorer. The bundled [`SyntheticScorer`] derives its
//! likelihoods from generator metadata, standing in for the external
//! recognizer of a production pipeline.
//!
//! Head/tail splits are contiguous in the global point order, so the
//! approximation is monotone by construction; delayed strokes bound its
//! accuracy.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ink::{Ink, LabeledSample, Point, Segmentation, Transcription};
use crate::nn::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutKind {
    StrokeBoundary,
    TemporalGap,
    SpatialGap,
}

/// A potential character boundary: the split is *before* `global_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutCandidate {
    pub global_index: usize,
    pub kind: CutKind,
}

#[derive(Debug, Clone)]
pub struct CutParams {
    /// A within-stroke step qualifies as a spatial gap when it exceeds the
    /// stroke's mean step distance by this many standard deviations.
    pub spatial_sigma_factor: f64,
    /// Same rule for time deltas, when timestamps are available.
    pub temporal_sigma_factor: f64,
    /// Per-point timestamps in global-index order; temporal gaps are only
    /// emitted when these existed at ingestion.
    pub timestamps: Option<Vec<f64>>,
}

impl Default for CutParams {
    fn default() -> Self {
        CutParams {
            spatial_sigma_factor: 2.0,
            temporal_sigma_factor: 2.0,
            timestamps: None,
        }
    }
}

fn outlier_indices(values: &[f64], sigma_factor: f64) -> Vec<usize> {
    if values.len() < 2 {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + sigma_factor * var.sqrt();
    values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| (*v > threshold).then_some(i))
        .collect()
}

/// Enumerate candidate cuts: every stroke boundary, within-stroke spatial
/// outlier steps, and (when timestamps exist) temporal outlier steps.
/// Strictly increasing indices in `(0, p)`, deduplicated.
pub fn enumerate_cuts(ink: &Ink, params: &CutParams) -> Vec<CutCandidate> {
    let p = ink.point_count();
    let mut by_index: std::collections::BTreeMap<usize, CutKind> = std::collections::BTreeMap::new();

    for start in ink.stroke_starts().into_iter().skip(1) {
        by_index.insert(start, CutKind::StrokeBoundary);
    }

    let mut base = 0usize;
    for stroke in ink.strokes() {
        let pts = stroke.points();
        let steps: Vec<f64> = pts
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .collect();
        for i in outlier_indices(&steps, params.spatial_sigma_factor) {
            // Step i runs from point i to point i+1; cut before i+1.
            by_index.entry(base + i + 1).or_insert(CutKind::SpatialGap);
        }
        if let Some(ts) = &params.timestamps {
            let dts: Vec<f64> = (1..pts.len())
                .map(|i| ts[base + i] - ts[base + i - 1])
                .collect();
            for i in outlier_indices(&dts, params.temporal_sigma_factor) {
                by_index.entry(base + i + 1).or_insert(CutKind::TemporalGap);
            }
        }
        base += pts.len();
    }

    by_index
        .into_iter()
        .filter(|(i, _)| *i > 0 && *i < p)
        .map(|(global_index, kind)| CutCandidate { global_index, kind })
        .collect()
}

/// Scores how well an ink fragment matches a piece of text; higher is
/// better, always finite for non-empty inputs.
pub trait LikelihoodScorer: Sync {
    fn score(&self, fragment: &Ink, text: &Transcription) -> Result<f64>;
}

/// Assign every point to a character by repeatedly separating the first
/// character from the remaining ink at the best-scoring candidate cut. The
/// final character takes all remaining points. When no candidate falls in a
/// required range, every single-point split is scanned instead.
pub fn approximate_truth(
    sample: &LabeledSample,
    scorer: &dyn LikelihoodScorer,
) -> Result<Segmentation> {
    approximate_truth_with(sample, scorer, &CutParams::default())
}

pub fn approximate_truth_with(
    sample: &LabeledSample,
    scorer: &dyn LikelihoodScorer,
    params: &CutParams,
) -> Result<Segmentation> {
    let transcription = sample.require_transcription()?;
    let c = transcription.len();
    let p = sample.ink.point_count();
    if p < c {
        return Err(Error::Input(format!(
            "{p} points cannot cover {c} characters"
        )));
    }
    let mut assignment = vec![None; p];
    if c == 1 {
        return Ok(Segmentation::total(vec![0; p]));
    }

    let cuts = enumerate_cuts(&sample.ink, params);
    let mut start = 0usize;
    for slot in 0..c - 1 {
        let remaining = c - slot;
        // The head needs one point; the tail must keep at least one point
        // per remaining character.
        let min_cut = start + 1;
        let max_cut = p - (remaining - 1);
        let mut candidates: Vec<usize> = cuts
            .iter()
            .map(|cut| cut.global_index)
            .filter(|&i| i >= min_cut && i <= max_cut)
            .collect();
        if candidates.is_empty() {
            candidates = (min_cut..=max_cut).collect();
        }

        let head_text = transcription.slice(slot..slot + 1)?;
        let tail_text = transcription.slice(slot + 1..c)?;
        let mut best_cut = candidates[0];
        let mut best_score = f64::NEG_INFINITY;
        for cut in candidates {
            let head = sample.ink.slice_range(start, cut)?;
            let tail = sample.ink.slice_range(cut, p)?;
            let score = scorer.score(&head, &head_text)? + scorer.score(&tail, &tail_text)?;
            if score.is_nan() {
                return Err(Error::Scorer("scorer returned NaN".into()));
            }
            if score > best_score {
                best_score = score;
                best_cut = cut;
            }
        }
        for slot_assignment in assignment.iter_mut().take(best_cut).skip(start) {
            *slot_assignment = Some(slot);
        }
        start = best_cut;
    }
    for slot_assignment in assignment.iter_mut().take(p).skip(start) {
        *slot_assignment = Some(c - 1);
    }
    Ok(Segmentation::new(assignment))
}

/// Reference scorer built from generator metadata: it recovers which global
/// index window a fragment occupies (fragments are exact point slices) and
/// scores `matched − missing − spurious` points against the true point set
/// of the claimed text, maximized over every position where the text occurs
/// in the transcription. Optional Gaussian score noise simulates an
/// imperfect recognizer, deterministically per (fragment, text).
pub struct SyntheticScorer {
    points: Vec<Point>,
    index_of_first: HashMap<(u64, u64), Vec<usize>>,
    truth: Vec<Option<usize>>,
    chars: Vec<String>,
    slot_counts: Vec<usize>,
    noise_sigma: f64,
    noise_seed: u64,
}

const NO_MATCH_SCORE: f64 = -1e15;

impl SyntheticScorer {
    pub fn new(sample: &LabeledSample) -> Result<SyntheticScorer> {
        Self::with_noise(sample, 0.0, 0)
    }

    pub fn with_noise(sample: &LabeledSample, noise_sigma: f64, noise_seed: u64) -> Result<SyntheticScorer> {
        let transcription = sample.require_transcription()?;
        let truth = sample
            .truth
            .as_ref()
            .ok_or_else(|| Error::Input("synthetic scorer needs generator truth".into()))?;
        let points = sample.ink.flat_points();
        let mut index_of_first: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
        for (i, pt) in points.iter().enumerate() {
            index_of_first
                .entry((pt.x.to_bits(), pt.y.to_bits()))
                .or_default()
                .push(i);
        }
        let mut slot_counts = vec![0usize; transcription.len()];
        for i in 0..truth.len() {
            if let Some(slot) = truth.get(i) {
                slot_counts[slot] += 1;
            }
        }
        Ok(SyntheticScorer {
            points,
            index_of_first,
            truth: truth.assignment().to_vec(),
            chars: transcription.chars().to_vec(),
            slot_counts,
            noise_sigma,
            noise_seed,
        })
    }

    /// Locate the contiguous window of the original ink the fragment spans.
    fn locate(&self, fragment: &[Point]) -> Option<usize> {
        let key = (fragment[0].x.to_bits(), fragment[0].y.to_bits());
        for &start in self.index_of_first.get(&key)? {
            if start + fragment.len() > self.points.len() {
                continue;
            }
            let matches = fragment.iter().zip(&self.points[start..]).all(|(a, b)| {
                a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits()
            });
            if matches {
                return Some(start);
            }
        }
        None
    }
}

impl LikelihoodScorer for SyntheticScorer {
    fn score(&self, fragment: &Ink, text: &Transcription) -> Result<f64> {
        let flat = fragment.flat_points();
        let m = flat.len();
        let Some(start) = self.locate(&flat) else {
            return Ok(NO_MATCH_SCORE);
        };
        let window = start..start + m;

        let c = self.chars.len();
        let l = text.len();
        let mut best: Option<f64> = None;
        for offset in 0..=c.saturating_sub(l) {
            if self.chars[offset..offset + l] != *text.chars() {
                continue;
            }
            let truth_count: usize = self.slot_counts[offset..offset + l].iter().sum();
            let matched = window
                .clone()
                .filter(|&i| {
                    self.truth[i]
                        .map(|slot| (offset..offset + l).contains(&slot))
                        .unwrap_or(false)
                })
                .count();
            let spurious = m - matched;
            let missing = truth_count - matched;
            let score = matched as f64 - spurious as f64 - missing as f64;
            best = Some(best.map_or(score, |b: f64| b.max(score)));
        }
        let Some(mut score) = best else {
            return Ok(NO_MATCH_SCORE);
        };
        if self.noise_sigma > 0.0 {
            let mut h = self.noise_seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            h ^= (m as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= (text.len() as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            score += normal(&mut rng) * self.noise_sigma;
        }
        Ok(score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::Stroke;
    use crate::synth::{generate, SynthConfig};

    fn ink_from(points: &[&[(f64, f64)]]) -> Ink {
        Ink::new(
            points
                .iter()
                .map(|ps| Stroke::new(ps.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn stroke_boundaries_become_candidates() {
        let ink = ink_from(&[
            &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)],
            &[(3.0, 0.0), (4.0, 0.0)],
        ]);
        let cuts = enumerate_cuts(&ink, &CutParams::default());
        assert!(cuts
            .iter()
            .any(|c| c.global_index == 3 && c.kind == CutKind::StrokeBoundary));
    }

    #[test]
    fn evenly_spaced_stroke_has_no_spatial_gaps() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 0.0)).collect();
        let ink = ink_from(&[&pts]);
        let cuts = enumerate_cuts(&ink, &CutParams::default());
        assert!(cuts.iter().all(|c| c.kind != CutKind::SpatialGap));
    }

    #[test]
    fn planted_jump_is_a_spatial_gap() {
        let mut pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        for p in pts.iter_mut().skip(5) {
            p.0 += 10.0; // 11x median step between index 4 and 5
        }
        let ink = ink_from(&[&pts]);
        let cuts = enumerate_cuts(&ink, &CutParams::default());
        assert!(
            cuts.iter()
                .any(|c| c.global_index == 5 && c.kind == CutKind::SpatialGap),
            "{cuts:?}"
        );
    }

    #[test]
    fn temporal_gaps_require_timestamps() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        let ink = ink_from(&[&pts]);
        let mut ts: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        for t in ts.iter_mut().skip(6) {
            *t += 5.0;
        }
        let without = enumerate_cuts(&ink, &CutParams::default());
        assert!(without.iter().all(|c| c.kind != CutKind::TemporalGap));
        let with = enumerate_cuts(
            &ink,
            &CutParams {
                timestamps: Some(ts),
                ..CutParams::default()
            },
        );
        assert!(with
            .iter()
            .any(|c| c.global_index == 6 && c.kind == CutKind::TemporalGap));
    }

    #[test]
    fn cuts_are_strictly_increasing_and_interior() {
        let cfg = SynthConfig {
            seed: 4,
            ..SynthConfig::default()
        };
        for sample in generate(&cfg, 20).unwrap() {
            let cuts = enumerate_cuts(&sample.ink, &CutParams::default());
            let p = sample.ink.point_count();
            for w in cuts.windows(2) {
                assert!(w[0].global_index < w[1].global_index);
            }
            assert!(cuts.iter().all(|c| c.global_index > 0 && c.global_index < p));
        }
    }

    #[test]
    fn single_character_takes_everything() {
        let ink = ink_from(&[&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]]);
        let sample = LabeledSample {
            truth: Some(Segmentation::total(vec![0, 0, 0])),
            ..LabeledSample::new(ink, Some(Transcription::new("a").unwrap()))
        };
        let scorer = SyntheticScorer::new(&sample).unwrap();
        let seg = approximate_truth(&sample, &scorer).unwrap();
        assert_eq!(seg.assignment(), &[Some(0), Some(0), Some(0)]);
    }

    #[test]
    fn noise_free_scorer_recovers_monotone_truth_exactly() {
        let cfg = SynthConfig {
            delayed_stroke_rate: 0.0,
            cursive_join_rate: 0.0,
            seed: 5,
            ..SynthConfig::default()
        };
        for sample in generate(&cfg, 50).unwrap() {
            let scorer = SyntheticScorer::new(&sample).unwrap();
            let approx = approximate_truth(&sample, &scorer).unwrap();
            assert_eq!(&approx, sample.truth.as_ref().unwrap());
        }
    }

    #[test]
    fn scorer_is_deterministic_with_noise() {
        let cfg = SynthConfig {
            seed: 6,
            ..SynthConfig::default()
        };
        let sample = &generate(&cfg, 1).unwrap()[0];
        let scorer = SyntheticScorer::with_noise(sample, 1.0, 42).unwrap();
        let a = approximate_truth(sample, &scorer).unwrap();
        let b = approximate_truth(sample, &scorer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn approximation_is_monotone_by_construction() {
        let cfg = SynthConfig {
            delayed_stroke_rate: 0.9,
            seed: 7,
            ..SynthConfig::default()
        };
        for sample in generate(&cfg, 20).unwrap() {
            let scorer = SyntheticScorer::new(&sample).unwrap();
            let approx = approximate_truth(&sample, &scorer).unwrap();
            assert!(approx.is_monotone());
            assert!(approx.is_total());
        }
    }

    #[test]
    fn foreign_fragment_scores_very_low() {
        let cfg = SynthConfig {
            seed: 8,
            ..SynthConfig::default()
        };
        let samples = generate(&cfg, 2).unwrap();
        let scorer = SyntheticScorer::new(&samples[0]).unwrap();
        let foreign = &samples[1];
        let text = foreign.transcription.clone().unwrap();
        let score = scorer.score(&foreign.ink, &text).unwrap();
        assert!(score <= NO_MATCH_SCORE);
        assert!(score.is_finite());
    }
}
