//! InkML (XML) ingestion and serialization.
//!
//! Reads the VNOnDB-style subset: one `<trace>` element per stroke holding
//! comma-separated `"x y [t]"` tuples, plus an optional `<annotation>`
//! element carrying the transcription. Timestamps are parsed for validation
//! and then discarded; the models consume only coordinates and stroke/point
//! indices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ink::{Ink, LabeledSample, Point, Stroke, Transcription};

fn parse_error(doc: &roxmltree::Document, offset: usize, message: String) -> Error {
    let pos = doc.text_pos_at(offset);
    Error::Parse {
        line: pos.row as usize,
        column: pos.col as usize,
        message,
    }
}

/// Parse an InkML document into a [`LabeledSample`].
///
/// The transcription is populated when an annotation element is present
/// (preferring `type="transcription"`), otherwise left absent for the caller
/// to supply. Spikes and truth are never carried by InkML.
pub fn parse_inkml(bytes: &[u8]) -> Result<LabeledSample> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        column: 0,
        message: format!("document is not valid UTF-8: {e}"),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        Error::Parse {
            line: pos.row as usize,
            column: pos.col as usize,
            message: e.to_string(),
        }
    })?;

    let mut strokes = Vec::new();
    let mut trace_no = 0usize;
    for node in doc.descendants().filter(|n| n.has_tag_name("trace")) {
        trace_no += 1;
        let offset = node.range().start;
        let content = node.text().unwrap_or("");
        let mut points = Vec::new();
        for tuple in content.split(',') {
            let tuple = tuple.trim();
            if tuple.is_empty() {
                continue;
            }
            let fields: Vec<&str> = tuple.split_whitespace().collect();
            if fields.len() < 2 {
                return Err(parse_error(
                    &doc,
                    offset,
                    format!("trace {trace_no}: tuple {tuple:?} has fewer than two coordinates"),
                ));
            }
            let mut values = Vec::with_capacity(fields.len());
            for f in &fields {
                let v: f64 = f.parse().map_err(|_| {
                    parse_error(
                        &doc,
                        offset,
                        format!("trace {trace_no}: cannot parse number {f:?}"),
                    )
                })?;
                values.push(v);
            }
            let (x, y) = (values[0], values[1]);
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Validation(format!(
                    "trace {trace_no}: non-finite coordinate ({x}, {y})"
                )));
            }
            // values[2], when present, is a timestamp: validated and dropped.
            points.push(Point::new(x, y));
        }
        if points.is_empty() {
            return Err(parse_error(
                &doc,
                offset,
                format!("trace {trace_no} contains no parsable tuple"),
            ));
        }
        strokes.push(Stroke::new(points)?);
    }

    if strokes.is_empty() {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: "no traces".into(),
        });
    }

    let transcription = find_annotation(&doc)
        .map(|t| Transcription::new(&t))
        .transpose()?;

    Ok(LabeledSample::new(Ink::new(strokes)?, transcription))
}

fn find_annotation(doc: &roxmltree::Document) -> Option<String> {
    let annotations: Vec<_> = doc
        .descendants()
        .filter(|n| n.has_tag_name("annotation"))
        .collect();
    let preferred = annotations
        .iter()
        .find(|n| n.attribute("type") == Some("transcription"))
        .or_else(|| annotations.first());
    preferred.and_then(|n| n.text()).map(str::to_owned)
}

fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Serialize a sample to InkML bytes. Only the ink structure and the
/// transcription survive this format; spikes and truth do not.
pub fn serialize_inkml(sample: &LabeledSample) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<ink xmlns=\"http://www.w3.org/2003/InkML\">\n");
    if let Some(t) = &sample.transcription {
        let _ = writeln!(
            out,
            "  <annotation type=\"transcription\">{}</annotation>",
            escape_xml(&t.text())
        );
    }
    for stroke in sample.ink.strokes() {
        out.push_str("  <trace>");
        for (i, p) in stroke.points().iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{} {}", p.x, p.y);
        }
        out.push_str("</trace>\n");
    }
    out.push_str("</ink>\n");
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parses_traces_in_document_order() {
        let doc = br#"<ink><trace>0 0, 1 1</trace><trace>5 0</trace></ink>"#;
        let sample = parse_inkml(doc).unwrap();
        assert_eq!(sample.ink.stroke_count(), 2);
        assert_eq!(sample.ink.strokes()[0].len(), 2);
        assert_eq!(sample.ink.strokes()[1].len(), 1);
        assert_eq!(sample.ink.point_count(), 3);
        assert!(sample.transcription.is_none());
    }

    #[test]
    fn parses_annotation_and_timestamps() {
        let doc = br#"<ink>
            <annotation type="transcription">ab</annotation>
            <trace>0 0 0.5, 1 1 0.75</trace>
        </ink>"#;
        let sample = parse_inkml(doc).unwrap();
        let t = sample.transcription.unwrap();
        assert_eq!(t.text(), "ab");
        assert_eq!(sample.ink.point_count(), 2);
    }

    #[test]
    fn zero_traces_is_a_parse_error() {
        let err = parse_inkml(b"<ink></ink>").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("no traces"));
    }

    #[test]
    fn malformed_xml_reports_position() {
        let err = parse_inkml(b"<ink><trace>0 0</ink>").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line >= 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unparsable_trace_names_the_trace() {
        let err = parse_inkml(b"<ink><trace>, ,</trace></ink>").unwrap_err();
        assert!(err.to_string().contains("trace 1"), "{err}");
        let err = parse_inkml(b"<ink><trace>0 zero</trace></ink>").unwrap_err();
        assert!(err.to_string().contains("trace 1"), "{err}");
    }

    #[test]
    fn non_finite_coordinate_is_a_validation_error() {
        let err = parse_inkml(b"<ink><trace>inf 0</trace></ink>").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn round_trip_preserves_structure_on_random_inks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let stroke_count = rng.random_range(1..=5);
            let strokes: Vec<Stroke> = (0..stroke_count)
                .map(|_| {
                    let n = rng.random_range(1..=20);
                    Stroke::new(
                        (0..n)
                            .map(|_| {
                                Point::new(
                                    rng.random_range(-100.0..100.0),
                                    rng.random_range(-100.0..100.0),
                                )
                            })
                            .collect(),
                    )
                    .unwrap()
                })
                .collect();
            let ink = Ink::new(strokes).unwrap();
            let sample = LabeledSample::new(ink.clone(), Some(Transcription::new("xy<&>").unwrap()));
            let bytes = serialize_inkml(&sample);
            let reparsed = parse_inkml(&bytes).unwrap();
            assert_eq!(reparsed.ink, ink);
            assert_eq!(reparsed.transcription.unwrap().text(), "xy<&>");
        }
    }
}
