//! Parse an InkML document, inspect it, and serialize it back.
//!
//!     cargo run --example inkml_round_trip

use inkseg::inkml::{parse_inkml, serialize_inkml};

const DOCUMENT: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<ink xmlns="http://www.w3.org/2003/InkML">
  <annotation type="transcription">it</annotation>
  <trace>10 80 0.00, 10 45 0.02, 11 10 0.04</trace>
  <trace>30 85 0.10, 30 40 0.12, 32 8 0.14, 40 5 0.15</trace>
  <trace>22 98 0.20, 25 100 0.21</trace>
  <trace>18 70 0.30, 45 72 0.32</trace>
</ink>
"#;

fn main() -> inkseg::Result<()> {
    let sample = parse_inkml(DOCUMENT.as_bytes())?;
    println!(
        "parsed {:?}: {} strokes, {} points",
        sample.transcription.as_ref().map(|t| t.text()),
        sample.ink.stroke_count(),
        sample.ink.point_count()
    );
    for (i, stroke) in sample.ink.strokes().iter().enumerate() {
        let first = stroke.points()[0];
        println!("  stroke {i}: {} points, starts at ({}, {})", stroke.len(), first.x, first.y);
    }

    let bytes = serialize_inkml(&sample);
    let reparsed = parse_inkml(&bytes)?;
    assert_eq!(reparsed.ink, sample.ink);
    println!("round trip preserved the stroke/point structure");
    println!("---\n{}", String::from_utf8_lossy(&bytes));
    Ok(())
}
