//! Core ink data model: strokes of sampling points, transcriptions, and
//! per-point segmentations.
//!
//! A point's *global index* enumerates all points of an ink stroke by
//! stroke, point by point, starting at 0. Every per-point structure in this
//! crate (segmentations, CTC spikes, feature rows) is keyed by that index.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::features::CtcSpikes;

/// A single sampling point of the stylus trajectory, in abstract ink units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A contiguous pen-down segment: the points between touch-down and lift-off,
/// in temporal acquisition order. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Stroke {
    points: Vec<Point>,
}

impl Stroke {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("stroke must contain at least one point".into()));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite coordinate ({}, {}) in stroke",
                p.x, p.y
            )));
        }
        Ok(Stroke { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// An ordered collection of strokes; the segmentation substrate.
#[derive(Debug, Clone, PartialEq)]
pub struct Ink {
    strokes: Vec<Stroke>,
}

impl Ink {
    pub fn new(strokes: Vec<Stroke>) -> Result<Self> {
        if strokes.is_empty() {
            return Err(Error::Validation("ink must contain at least one stroke".into()));
        }
        Ok(Ink { strokes })
    }

    pub fn strokes(&self) -> &[Stroke] {
        &self.strokes
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }

    /// Total number of sampling points over all strokes.
    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Stroke::len).sum()
    }

    /// Iterate points in global-index order as `(stroke_index, point_index, point)`.
    pub fn iter_points(&self) -> impl Iterator<Item = (usize, usize, Point)> + '_ {
        self.strokes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| s.points.iter().enumerate().map(move |(pi, p)| (si, pi, *p)))
    }

    /// All points flattened in global-index order.
    pub fn flat_points(&self) -> Vec<Point> {
        self.iter_points().map(|(_, _, p)| p).collect()
    }

    /// Map a global point index to its `(stroke, point-in-stroke)` pair.
    pub fn locate(&self, global_index: usize) -> Result<(usize, usize)> {
        let mut remaining = global_index;
        for (si, s) in self.strokes.iter().enumerate() {
            if remaining < s.len() {
                return Ok((si, remaining));
            }
            remaining -= s.len();
        }
        Err(Error::Validation(format!(
            "global index {} out of range for ink with {} points",
            global_index,
            self.point_count()
        )))
    }

    /// Inverse of [`Ink::locate`].
    pub fn global_index(&self, stroke: usize, point: usize) -> usize {
        self.strokes[..stroke].iter().map(Stroke::len).sum::<usize>() + point
    }

    /// Global index of the first point of each stroke.
    pub fn stroke_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.strokes.len());
        let mut acc = 0;
        for s in &self.strokes {
            starts.push(acc);
            acc += s.len();
        }
        starts
    }

    /// Rebuild an ink from a contiguous global-index range, splitting at the
    /// original stroke boundaries. Errors when the range is empty.
    pub fn slice_range(&self, start: usize, end: usize) -> Result<Ink> {
        if start >= end || end > self.point_count() {
            return Err(Error::Input(format!(
                "invalid point range [{start}, {end}) for ink with {} points",
                self.point_count()
            )));
        }
        let mut strokes = Vec::new();
        let mut current = Vec::new();
        let mut idx = 0;
        for s in &self.strokes {
            for p in s.points() {
                if idx >= start && idx < end {
                    current.push(*p);
                }
                idx += 1;
            }
            if !current.is_empty() {
                strokes.push(Stroke::new(std::mem::take(&mut current))?);
            }
        }
        Ink::new(strokes)
    }
}

/// Normalize an ink: translate so the minimum x and y are 0, then uniformly
/// scale so the y-extent is 1.0 (aspect ratio preserved). Degenerate inks
/// with zero y-extent are scaled by their x-extent instead; an ink that is a
/// single repeated location is only translated.
pub fn normalize(ink: &Ink) -> Ink {
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (_, _, p) in ink.iter_points() {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let y_extent = max_y - min_y;
    let x_extent = max_x - min_x;
    let scale = if y_extent > 0.0 {
        1.0 / y_extent
    } else if x_extent > 0.0 {
        1.0 / x_extent
    } else {
        1.0
    };
    let strokes = ink
        .strokes()
        .iter()
        .map(|s| {
            Stroke::new(
                s.points()
                    .iter()
                    .map(|p| Point::new((p.x - min_x) * scale, (p.y - min_y) * scale))
                    .collect(),
            )
            .expect("normalize preserves stroke non-emptiness")
        })
        .collect();
    Ink::new(strokes).expect("normalize preserves stroke count")
}

/// The characters an ink is known to spell: NFC-normalized unicode grapheme
/// clusters, so a base letter plus combining diacritics counts as one
/// character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcription {
    chars: Vec<String>,
}

impl Transcription {
    /// Split `text` into NFC grapheme clusters.
    pub fn new(text: &str) -> Result<Self> {
        let nfc: String = text.nfc().collect();
        let chars: Vec<String> = nfc.graphemes(true).map(str::to_owned).collect();
        Self::from_chars(chars)
    }

    pub fn from_chars(chars: Vec<String>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Validation("transcription must not be empty".into()));
        }
        if chars.iter().any(String::is_empty) {
            return Err(Error::Validation("transcription contains an empty label".into()));
        }
        Ok(Transcription { chars })
    }

    pub fn chars(&self) -> &[String] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text(&self) -> String {
        self.chars.concat()
    }

    /// The sub-transcription covering `range` of character slots.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Transcription> {
        Self::from_chars(self.chars[range].to_vec())
    }
}

/// Sentinel-free per-point character assignment: entry `j` is the character
/// slot of global point `j`, or `None` for points not assigned to any
/// character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    assignment: Vec<Option<usize>>,
}

impl Segmentation {
    pub fn new(assignment: Vec<Option<usize>>) -> Self {
        Segmentation { assignment }
    }

    /// A segmentation where every point is assigned (no `None`).
    pub fn total(slots: Vec<usize>) -> Self {
        Segmentation {
            assignment: slots.into_iter().map(Some).collect(),
        }
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<usize> {
        self.assignment[index]
    }

    /// True when no point is `None`.
    pub fn is_total(&self) -> bool {
        self.assignment.iter().all(Option::is_some)
    }

    /// True when assigned slots never decrease along the global point order.
    pub fn is_monotone(&self) -> bool {
        let mut last = 0usize;
        for slot in self.assignment.iter().flatten() {
            if *slot < last {
                return false;
            }
            last = *slot;
        }
        true
    }

    /// Check the invariants against an ink of `p` points and `c` characters.
    pub fn validate(&self, p: usize, c: usize) -> Result<()> {
        if self.assignment.len() != p {
            return Err(Error::Validation(format!(
                "segmentation length {} does not match point count {}",
                self.assignment.len(),
                p
            )));
        }
        if let Some(slot) = self.assignment.iter().flatten().find(|&&s| s >= c) {
            return Err(Error::Validation(format!(
                "segmentation slot {slot} out of range for {c} characters"
            )));
        }
        Ok(())
    }

    /// Global point indices assigned to `slot`.
    pub fn points_of(&self, slot: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| (*a == Some(slot)).then_some(i))
            .collect()
    }
}

/// One corpus entry: an ink, the text it spells, and (optionally) simulated
/// recognizer spikes and a reference segmentation.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub ink: Ink,
    /// Absent only for inks ingested from annotation-free InkML; every
    /// model operation requires it.
    pub transcription: Option<Transcription>,
    pub spikes: Option<CtcSpikes>,
    pub truth: Option<Segmentation>,
}

impl LabeledSample {
    pub fn new(ink: Ink, transcription: Option<Transcription>) -> Self {
        LabeledSample {
            ink,
            transcription,
            spikes: None,
            truth: None,
        }
    }

    /// Validate the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.ink.point_count();
        if let (Some(truth), Some(t)) = (&self.truth, &self.transcription) {
            truth.validate(p, t.len())?;
        } else if let Some(truth) = &self.truth {
            if truth.len() != p {
                return Err(Error::Validation(format!(
                    "truth length {} does not match point count {}",
                    truth.len(),
                    p
                )));
            }
        }
        if let Some(spikes) = &self.spikes {
            spikes.validate(p)?;
        }
        Ok(())
    }

    pub fn require_transcription(&self) -> Result<&Transcription> {
        self.transcription
            .as_ref()
            .ok_or_else(|| Error::Input("sample has no transcription".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn global_index_is_a_bijection() {
        let ink = ink_from(&[&[(0.0, 0.0), (1.0, 1.0)], &[(5.0, 0.0)], &[(2.0, 2.0), (3.0, 3.0)]]);
        assert_eq!(ink.point_count(), 5);
        for g in 0..5 {
            let (si, pi) = ink.locate(g).unwrap();
            assert_eq!(ink.global_index(si, pi), g);
        }
        assert!(ink.locate(5).is_err());
    }

    #[test]
    fn empty_stroke_rejected() {
        assert!(Stroke::new(vec![]).is_err());
        assert!(Ink::new(vec![]).is_err());
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        assert!(Stroke::new(vec![Point::new(f64::NAN, 0.0)]).is_err());
        assert!(Stroke::new(vec![Point::new(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn normalize_translates_and_scales_by_y_extent() {
        let ink = ink_from(&[&[(2.0, 3.0), (2.0, 5.0)]]);
        let n = normalize(&ink);
        let pts = n.flat_points();
        assert_eq!(pts[0], Point::new(0.0, 0.0));
        assert_eq!(pts[1], Point::new(0.0, 1.0));
    }

    #[test]
    fn normalize_single_point_translates_only() {
        let ink = ink_from(&[&[(7.0, 9.0)]]);
        let n = normalize(&ink);
        assert_eq!(n.flat_points()[0], Point::new(0.0, 0.0));
    }

    #[test]
    fn normalize_zero_y_extent_uses_x_extent() {
        let ink = ink_from(&[&[(1.0, 4.0), (5.0, 4.0)]]);
        let n = normalize(&ink);
        let pts = n.flat_points();
        assert_eq!(pts[0], Point::new(0.0, 0.0));
        assert_eq!(pts[1], Point::new(1.0, 0.0));
    }

    #[test]
    fn normalize_is_idempotent() {
        let ink = ink_from(&[&[(2.0, 3.0), (4.0, 8.0), (1.0, -2.0)], &[(0.0, 0.5)]]);
        let once = normalize(&ink);
        let twice = normalize(&once);
        for ((_, _, a), (_, _, b)) in once.iter_points().zip(twice.iter_points()) {
            assert!((a.x - b.x).abs() < 1e-12);
            assert!((a.y - b.y).abs() < 1e-12);
        }
    }

    #[test]
    fn transcription_groups_grapheme_clusters() {
        // "e" followed by a combining acute accent is one cluster after NFC.
        let t = Transcription::new("e\u{0301}t").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.chars()[0], "\u{00e9}");
        assert_eq!(t.chars()[1], "t");
    }

    #[test]
    fn segmentation_validation() {
        let seg = Segmentation::total(vec![0, 0, 1]);
        assert!(seg.validate(3, 2).is_ok());
        assert!(seg.validate(4, 2).is_err());
        assert!(seg.validate(3, 1).is_err());
        assert!(seg.is_total());
        assert!(seg.is_monotone());
        assert!(!Segmentation::total(vec![0, 1, 0]).is_monotone());
    }

    #[test]
    fn slice_range_splits_at_stroke_boundaries() {
        let ink = ink_from(&[&[(0.0, 0.0), (1.0, 0.0)], &[(2.0, 0.0), (3.0, 0.0)]]);
        let head = ink.slice_range(0, 3).unwrap();
        assert_eq!(head.stroke_count(), 2);
        assert_eq!(head.point_count(), 3);
        let tail = ink.slice_range(3, 4).unwrap();
        assert_eq!(tail.stroke_count(), 1);
        assert_eq!(tail.point_count(), 1);
        assert!(ink.slice_range(2, 2).is_err());
    }
}
