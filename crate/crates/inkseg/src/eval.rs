//! Mean-Intersection-over-Union evaluation: the per-sample metric, corpus
//! reports with a per-character histogram, and the paired CTC-spike
//! ablation driver.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ink::{LabeledSample, Segmentation};

/// Anything that can assign the points of a sample to its characters.
pub trait Segmenter: Sync {
    fn segment(&self, sample: &LabeledSample) -> Result<Segmentation>;

    /// Human-readable method name for reports.
    fn describe(&self) -> String;

    /// Identity of the underlying architecture; two segmenters with
    /// different ids cannot be compared in an ablation.
    fn architecture_id(&self) -> String {
        self.describe()
    }
}

/// Per-slot IoU values; `None` where the truth has no points for the slot.
fn per_slot_ious(pred: &Segmentation, truth: &Segmentation, c: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "prediction length {} does not match truth length {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut intersection = vec![0usize; c];
    let mut pred_count = vec![0usize; c];
    let mut truth_count = vec![0usize; c];
    for i in 0..pred.len() {
        let p = pred.get(i);
        let t = truth.get(i);
        if let Some(p) = p {
            pred_count[p] += 1;
        }
        if let Some(t) = t {
            truth_count[t] += 1;
            if p == Some(t) {
                intersection[t] += 1;
            }
        }
    }
    Ok((0..c)
        .map(|k| {
            if truth_count[k] == 0 {
                None
            } else {
                let union = pred_count[k] + truth_count[k] - intersection[k];
                Some(intersection[k] as f64 / union as f64)
            }
        })
        .collect())
}

/// Mean IoU between predicted and reference point sets over the character
/// slots that have reference points. A slot the prediction never uses
/// counts as zero; slots empty on both sides are skipped.
pub fn sample_miou(pred: &Segmentation, truth: &Segmentation, c: usize) -> Result<f64> {
    let ious: Vec<f64> = per_slot_ious(pred, truth, c)?.into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::Validation(
            "truth assigns no points to any character".into(),
        ));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouReport {
    pub schema_version: u32,
    pub method: String,
    pub corpus_miou: f64,
    pub per_sample_miou: Vec<f64>,
    /// Mean IoU per character label over all its instances.
    pub per_char_miou: BTreeMap<String, f64>,
    pub samples_evaluated: usize,
    pub samples_skipped: usize,
}

impl IouReport {
    /// CSV rows `sample_index,miou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_index,miou\n");
        for (i, v) in self.per_sample_miou.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

fn aggregate(
    method: String,
    results: Vec<Option<(f64, Vec<(String, f64)>)>>,
) -> Result<IouReport> {
    let mut per_sample = Vec::new();
    let mut char_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut skipped = 0usize;
    for r in results {
        match r {
            Some((miou, chars)) => {
                per_sample.push(miou);
                for (label, iou) in chars {
                    let e = char_sums.entry(label).or_insert((0.0, 0));
                    e.0 += iou;
                    e.1 += 1;
                }
            }
            None => skipped += 1,
        }
    }
    if per_sample.is_empty() {
        return Err(Error::Input("no sample with ground truth to evaluate".into()));
    }
    let corpus_miou = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(IouReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        corpus_miou,
        samples_evaluated: per_sample.len(),
        samples_skipped: skipped,
        per_sample_miou: per_sample,
        per_char_miou: char_sums
            .into_iter()
            .map(|(label, (sum, n))| (label, sum / n as f64))
            .collect(),
    })
}

fn score_one(
    sample: &LabeledSample,
    pred: &Segmentation,
) -> Result<(f64, Vec<(String, f64)>)> {
    let transcription = sample.require_transcription()?;
    let truth = sample
        .truth
        .as_ref()
        .ok_or_else(|| Error::Input("sample has no truth".into()))?;
    let c = transcription.len();
    let ious = per_slot_ious(pred, truth, c)?;
    let mut present = Vec::new();
    let mut by_char = Vec::new();
    for (k, iou) in ious.into_iter().enumerate() {
        if let Some(iou) = iou {
            present.push(iou);
            by_char.push((transcription.chars()[k].clone(), iou));
        }
    }
    if present.is_empty() {
        return Err(Error::Validation("truth assigns no points".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, by_char))
}

/// Run a segmenter over every sample carrying truth and report corpus mIoU.
/// Samples without truth are skipped and counted. Iteration order is the
/// corpus order regardless of parallelism.
pub fn evaluate(samples: &[LabeledSample], segmenter: &dyn Segmenter) -> Result<IouReport> {
    let results: Vec<Option<(f64, Vec<(String, f64)>)>> = samples
        .par_iter()
        .map(|sample| {
            if sample.truth.is_none() {
                return Ok(None);
            }
            let pred = segmenter.segment(sample)?;
            score_one(sample, &pred).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(segmenter.describe(), results)
}

/// Score already-made predictions (for corpus files written by the
/// `segment` pipeline stage). Entries missing either side are skipped.
pub fn evaluate_predictions(
    pairs: &[(LabeledSample, Option<Segmentation>)],
    method: &str,
) -> Result<IouReport> {
    let results: Vec<Option<(f64, Vec<(String, f64)>)>> = pairs
        .iter()
        .map(|(sample, pred)| match (&sample.truth, pred) {
            (Some(_), Some(pred)) => score_one(sample, pred).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(method.to_owned(), results)
}

/// Paired comparison of a method with and without CTC-spike information.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub with_spikes: IouReport,
    pub without_spikes: IouReport,
    /// `with - without` per evaluated sample.
    pub per_sample_delta: Vec<f64>,
    pub mean_delta: f64,
}

/// Evaluate two comparable segmenters (same architecture, with/without
/// spike input) on the same corpus.
pub fn ablate_ctc(
    samples: &[LabeledSample],
    with_spikes: &dyn Segmenter,
    without_spikes: &dyn Segmenter,
) -> Result<AblationReport> {
    if with_spikes.architecture_id() != without_spikes.architecture_id() {
        return Err(Error::Usage(format!(
            "ablation sides have different architectures: {} vs {}",
            with_spikes.architecture_id(),
            without_spikes.architecture_id()
        )));
    }
    let with = evaluate(samples, with_spikes)?;
    let without = evaluate(samples, without_spikes)?;
    if with.per_sample_miou.len() != without.per_sample_miou.len() {
        return Err(Error::Usage(
            "ablation sides evaluated different sample counts".into(),
        ));
    }
    let per_sample_delta: Vec<f64> = with
        .per_sample_miou
        .iter()
        .zip(&without.per_sample_miou)
        .map(|(a, b)| a - b)
        .collect();
    let mean_delta = per_sample_delta.iter().sum::<f64>() / per_sample_delta.len() as f64;
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        with_spikes: with,
        without_spikes: without,
        per_sample_delta,
        mean_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::{Ink, Point, Stroke, Transcription};

    fn seg(slots: &[i64]) -> Segmentation {
        Segmentation::new(
            slots
                .iter()
                .map(|&s| if s < 0 { None } else { Some(s as usize) })
                .collect(),
        )
    }

    #[test]
    fn identical_segmentations_score_one() {
        let t = seg(&[0, 0, 1, 1]);
        assert_eq!(sample_miou(&t, &t, 2).unwrap(), 1.0);
    }

    #[test]
    fn hand_enumerated_case() {
        // truth [0,0,1,1], pred [0,0,0,1]: IoU0 = 2/3, IoU1 = 1/2.
        let truth = seg(&[0, 0, 1, 1]);
        let pred = seg(&[0, 0, 0, 1]);
        let miou = sample_miou(&pred, &truth, 2).unwrap();
        assert!((miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn collapsed_prediction() {
        // Everything predicted slot 0, truth has two equal halves of 4.
        let truth = seg(&[0, 0, 0, 0, 1, 1, 1, 1]);
        let pred = seg(&[0; 8]);
        let miou = sample_miou(&pred, &truth, 2).unwrap();
        assert!((miou - 0.25).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_a_validation_error() {
        assert!(matches!(
            sample_miou(&seg(&[0]), &seg(&[0, 1]), 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_truth_slots_are_skipped() {
        // c = 3 but slot 2 never appears in the truth.
        let truth = seg(&[0, 0, 1, 1]);
        let pred = seg(&[0, 0, 1, 2]);
        // IoU0 = 1, IoU1 = 1/2; slot 2 skipped.
        let miou = sample_miou(&pred, &truth, 3).unwrap();
        assert!((miou - 0.75).abs() < 1e-15);
    }

    #[test]
    fn predicted_none_points_shrink_intersections() {
        let truth = seg(&[0, 0, 1, 1]);
        let pred = seg(&[0, -1, 1, 1]);
        // IoU0 = 1/2, IoU1 = 1.
        let miou = sample_miou(&pred, &truth, 2).unwrap();
        assert!((miou - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metric_is_symmetric_per_slot() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(4..30);
            let c = rng.random_range(1..4);
            let a = Segmentation::total((0..n).map(|_| rng.random_range(0..c)).collect());
            let b = Segmentation::total((0..n).map(|_| rng.random_range(0..c)).collect());
            // Swapping pred and truth can change WHICH slots are counted
            // (empty-truth slots are skipped), so compare on slot-complete
            // pairs only.
            let a_complete = (0..c).all(|k| !a.points_of(k).is_empty());
            let b_complete = (0..c).all(|k| !b.points_of(k).is_empty());
            if a_complete && b_complete {
                let ab = sample_miou(&a, &b, c).unwrap();
                let ba = sample_miou(&b, &a, c).unwrap();
                assert!((ab - ba).abs() < 1e-12);
            }
        }
    }

    struct TruthEcho;
    impl Segmenter for TruthEcho {
        fn segment(&self, sample: &LabeledSample) -> Result<Segmentation> {
            Ok(sample.truth.clone().expect("truth"))
        }
        fn describe(&self) -> String {
            "truth-echo".into()
        }
    }

    fn sample_with_truth(slots: Vec<usize>, text: &str) -> LabeledSample {
        let n = slots.len();
        let ink = Ink::new(vec![Stroke::new(
            (0..n).map(|i| Point::new(i as f64, 0.0)).collect(),
        )
        .unwrap()])
        .unwrap();
        LabeledSample {
            truth: Some(Segmentation::total(slots)),
            ..LabeledSample::new(ink, Some(Transcription::new(text).unwrap()))
        }
    }

    #[test]
    fn perfect_predictions_make_corpus_miou_one() {
        let samples = vec![
            sample_with_truth(vec![0, 0, 1], "ab"),
            sample_with_truth(vec![0, 1, 1], "ab"),
        ];
        let report = evaluate(&samples, &TruthEcho).unwrap();
        assert_eq!(report.corpus_miou, 1.0);
        assert_eq!(report.samples_evaluated, 2);
        assert_eq!(report.per_char_miou["a"], 1.0);
    }

    #[test]
    fn corpus_mean_matches_per_sample_mean() {
        struct HalfWrong;
        impl Segmenter for HalfWrong {
            fn segment(&self, sample: &LabeledSample) -> Result<Segmentation> {
                // Assign everything to slot 0.
                Ok(Segmentation::total(vec![0; sample.ink.point_count()]))
            }
            fn describe(&self) -> String {
                "all-zero".into()
            }
        }
        let samples = vec![
            sample_with_truth(vec![0, 0, 1, 1], "ab"),
            sample_with_truth(vec![0, 1, 1, 1], "ab"),
        ];
        let report = evaluate(&samples, &HalfWrong).unwrap();
        let mean = report.per_sample_miou.iter().sum::<f64>() / 2.0;
        assert!((report.corpus_miou - mean).abs() < 1e-12);
    }

    #[test]
    fn samples_without_truth_are_skipped() {
        let mut no_truth = sample_with_truth(vec![0, 1], "ab");
        no_truth.truth = None;
        let samples = vec![sample_with_truth(vec![0, 1], "ab"), no_truth];
        let report = evaluate(&samples, &TruthEcho).unwrap();
        assert_eq!(report.samples_evaluated, 1);
        assert_eq!(report.samples_skipped, 1);
    }

    #[test]
    fn evaluation_is_order_invariant_in_aggregate() {
        let mut samples = vec![
            sample_with_truth(vec![0, 0, 1], "ab"),
            sample_with_truth(vec![0, 1, 1], "ab"),
            sample_with_truth(vec![0, 0, 0, 1], "ab"),
        ];
        let fwd = evaluate(&samples, &TruthEcho).unwrap();
        samples.reverse();
        let rev = evaluate(&samples, &TruthEcho).unwrap();
        assert!((fwd.corpus_miou - rev.corpus_miou).abs() < 1e-12);
        assert_eq!(fwd.samples_evaluated, rev.samples_evaluated);
    }

    #[test]
    fn identical_ablation_sides_have_zero_delta() {
        let samples = vec![sample_with_truth(vec![0, 0, 1], "ab")];
        let report = ablate_ctc(&samples, &TruthEcho, &TruthEcho).unwrap();
        assert_eq!(report.mean_delta, 0.0);
        assert!(report.per_sample_delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn mismatched_architectures_are_a_usage_error() {
        struct Other;
        impl Segmenter for Other {
            fn segment(&self, sample: &LabeledSample) -> Result<Segmentation> {
                Ok(Segmentation::total(vec![0; sample.ink.point_count()]))
            }
            fn describe(&self) -> String {
                "other".into()
            }
        }
        let samples = vec![sample_with_truth(vec![0, 1], "ab")];
        assert!(matches!(
            ablate_ctc(&samples, &TruthEcho, &Other),
            Err(Error::Usage(_))
        ));
    }
}
