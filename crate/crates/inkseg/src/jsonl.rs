//! Native JSON-lines corpus format: one sample per line.
//!
//! Schema per line:
//! `{"strokes": [[[x,y],...],...], "text": "...",`
//! ` "spikes": [[index,"char"],...]?, "truth": [slot|null,...]?,`
//! ` "pred": [slot|null,...]?}`
//!
//! `pred` is the prediction slot written by the `segment` pipeline stage and
//! consumed by `eval`; it mirrors the `truth` encoding.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CtcSpikes;
use crate::ink::{Ink, LabeledSample, Point, Segmentation, Stroke, Transcription};

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    strokes: Vec<Vec<[f64; 2]>>,
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    spikes: Option<Vec<(usize, String)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<Option<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<Vec<Option<usize>>>,
}

/// A sample plus the prediction slot carried by the corpus file.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub sample: LabeledSample,
    pub pred: Option<Segmentation>,
}

/// Parse one JSON line into a sample (plus optional prediction).
pub fn parse_jsonl(line: &[u8]) -> Result<CorpusEntry> {
    let value: serde_json::Value = serde_json::from_slice(line)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("line is not a JSON object".into()))?;
    if !obj.contains_key("strokes") {
        return Err(Error::Schema("missing required field \"strokes\"".into()));
    }
    if !obj.contains_key("text") {
        return Err(Error::Schema("missing required field \"text\"".into()));
    }
    let record: SampleRecord =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;

    let strokes: Result<Vec<Stroke>> = record
        .strokes
        .iter()
        .map(|pts| Stroke::new(pts.iter().map(|&[x, y]| Point::new(x, y)).collect()))
        .collect();
    let ink = Ink::new(strokes?)?;
    let p = ink.point_count();
    let transcription = Transcription::new(&record.text)?;
    let c = transcription.len();

    let truth = match record.truth {
        Some(slots) => {
            let seg = Segmentation::new(slots);
            seg.validate(p, c)?;
            Some(seg)
        }
        None => None,
    };
    let pred = match record.pred {
        Some(slots) => {
            let seg = Segmentation::new(slots);
            seg.validate(p, c)?;
            Some(seg)
        }
        None => None,
    };
    let spikes = match record.spikes {
        Some(entries) => {
            let spikes = CtcSpikes::new(entries)?;
            spikes.validate(p)?;
            Some(spikes)
        }
        None => None,
    };

    Ok(CorpusEntry {
        sample: LabeledSample {
            ink,
            transcription: Some(transcription),
            spikes,
            truth,
        },
        pred,
    })
}

/// Serialize a sample (plus optional prediction) to one JSON line, without a
/// trailing newline.
pub fn write_jsonl(entry: &CorpusEntry) -> Result<String> {
    let sample = &entry.sample;
    let transcription = sample.require_transcription()?;
    let record = SampleRecord {
        strokes: sample
            .ink
            .strokes()
            .iter()
            .map(|s| s.points().iter().map(|p| [p.x, p.y]).collect())
            .collect(),
        text: transcription.text(),
        spikes: sample
            .spikes
            .as_ref()
            .map(|s| s.entries().iter().map(|(i, c)| (*i, c.clone())).collect()),
        truth: sample.truth.as_ref().map(|t| t.assignment().to_vec()),
        pred: entry.pred.as_ref().map(|t| t.assignment().to_vec()),
    };
    Ok(serde_json::to_string(&record)?)
}

/// Read a whole corpus file, reporting the first failing line.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_jsonl(line.as_bytes()).map_err(|e| match e {
            Error::Parse { column, message, .. } => Error::Parse {
                line: no + 1,
                column,
                message,
            },
            Error::Schema(m) => Error::Schema(format!("line {}: {m}", no + 1)),
            Error::Validation(m) => Error::Validation(format!("line {}: {m}", no + 1)),
            other => other,
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Write a corpus file, one JSON object per line.
pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in entries {
        writeln!(file, "{}", write_jsonl(entry)?)?;
    }
    Ok(())
}

/// Convenience: samples without predictions.
pub fn entries_from_samples(samples: Vec<LabeledSample>) -> Vec<CorpusEntry> {
    samples
        .into_iter()
        .map(|sample| CorpusEntry { sample, pred: None })
        .collect()
}
