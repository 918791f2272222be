//! Per-point feature rows consumed by all models, the vocabulary that maps
//! character labels to embedding ids, and the CTC-spike simulator.
//!
//! Feature extraction does not normalize coordinates; callers are expected
//! to pass inks through [`crate::ink::normalize`] first when a method wants
//! normalized geometry.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ink::{LabeledSample, Segmentation, Transcription};

/// Sparse mapping from global point index to a recognized character,
/// simulating the spikes of a CTC-based recognizer's logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcSpikes {
    entries: Vec<(usize, String)>,
}

impl CtcSpikes {
    pub fn new(entries: Vec<(usize, String)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Validation(format!(
                    "spike indices must be strictly increasing, got {} after {}",
                    w[1].0, w[0].0
                )));
            }
        }
        if entries.iter().any(|(_, c)| c.is_empty()) {
            return Err(Error::Validation("spike with empty character label".into()));
        }
        Ok(CtcSpikes { entries })
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let Some((i, _)) = self.entries.iter().find(|(i, _)| *i >= p) {
            return Err(Error::Validation(format!(
                "spike index {i} out of range for ink with {p} points"
            )));
        }
        Ok(())
    }
}

/// Reserved id for padding positions in batched id sequences.
pub const PAD_ID: usize = 0;
/// Reserved id for characters outside the vocabulary.
pub const UNK_ID: usize = 1;

/// Index features are fed to the models as raw integers scaled by this
/// factor before the input projection.
pub const INDEX_SCALE: f64 = 0.01;

/// Bijective character-label ↔ id map with reserved PAD and UNK entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    char_to_id: BTreeMap<String, usize>,
    id_to_char: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pad_id: usize,
    unk_id: usize,
    chars: Vec<(String, usize)>,
}

impl Vocabulary {
    /// Build from the set of labels, sorted for stable ids.
    pub fn build<I, S>(labels: I) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut unique: Vec<String> = labels
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        unique.sort();
        let mut id_to_char = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        let mut char_to_id = BTreeMap::new();
        for c in unique {
            char_to_id.insert(c.clone(), id_to_char.len());
            id_to_char.push(c);
        }
        Vocabulary { char_to_id, id_to_char }
    }

    /// Build from every transcription character in a corpus.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a LabeledSample>) -> Vocabulary {
        let labels = samples
            .into_iter()
            .filter_map(|s| s.transcription.as_ref())
            .flat_map(|t| t.chars().iter().map(String::as_str).collect::<Vec<_>>());
        Self::build(labels)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.char_to_id.get(label).copied()
    }

    pub fn id_or_unk(&self, label: &str) -> usize {
        self.id(label).unwrap_or(UNK_ID)
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.id_to_char.get(id).map(String::as_str)
    }

    /// Total id count including PAD and UNK.
    pub fn size(&self) -> usize {
        self.id_to_char.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            pad_id: PAD_ID,
            unk_id: UNK_ID,
            chars: self.char_to_id.iter().map(|(c, i)| (c.clone(), *i)).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut id_to_char = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        let mut by_id: Vec<(usize, String)> = file.chars.iter().map(|(c, i)| (*i, c.clone())).collect();
        by_id.sort();
        let mut char_to_id = BTreeMap::new();
        for (id, c) in by_id {
            if id != id_to_char.len() {
                return Err(Error::Schema(format!(
                    "vocabulary ids must be dense, expected {} got {id}",
                    id_to_char.len()
                )));
            }
            char_to_id.insert(c.clone(), id);
            id_to_char.push(c);
        }
        Ok(Vocabulary { char_to_id, id_to_char })
    }
}

/// Coordinate channel selection for [`extract_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Deltas to the previous global point, plus the global index channel;
    /// consumed by the recurrent backbone.
    Recurrent,
    /// Coordinates as given (normalized upstream), no global index; the
    /// positional encoding carries that information instead.
    Absolute,
}

/// One per-point model input row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub coord_a: f64,
    pub coord_b: f64,
    /// 0-based position within the stroke.
    pub index_point: usize,
    /// 0-based stroke index.
    pub index_stroke: usize,
    /// Present iff the recurrent feature mode is selected.
    pub index_global: Option<usize>,
    /// Vocabulary id of the spike character at this point, if any.
    pub spike_char: Option<usize>,
}

/// Extraction output: the rows plus the count of spike characters that were
/// outside the vocabulary and mapped to UNK.
#[derive(Debug, Clone)]
pub struct FeatureExtraction {
    pub rows: Vec<FeatureRow>,
    pub unknown_spike_count: usize,
}

/// Convert a sample into per-point feature rows.
pub fn extract_features(
    sample: &LabeledSample,
    mode: FeatureMode,
    vocab: &Vocabulary,
) -> FeatureExtraction {
    let p = sample.ink.point_count();
    let mut spike_at: Vec<Option<usize>> = vec![None; p];
    let mut unknown = 0usize;
    if let Some(spikes) = &sample.spikes {
        for (idx, label) in spikes.entries() {
            let id = match vocab.id(label) {
                Some(id) => id,
                None => {
                    unknown += 1;
                    UNK_ID
                }
            };
            spike_at[*idx] = Some(id);
        }
    }

    let mut rows = Vec::with_capacity(p);
    let mut prev: Option<(f64, f64)> = None;
    let mut global = 0usize;
    for (si, pi, pt) in sample.ink.iter_points() {
        let (coord_a, coord_b) = match mode {
            FeatureMode::Absolute => (pt.x, pt.y),
            FeatureMode::Recurrent => match prev {
                Some((px, py)) => (pt.x - px, pt.y - py),
                None => (0.0, 0.0),
            },
        };
        rows.push(FeatureRow {
            coord_a,
            coord_b,
            index_point: pi,
            index_stroke: si,
            index_global: matches!(mode, FeatureMode::Recurrent).then_some(global),
            spike_char: spike_at[global],
        });
        prev = Some((pt.x, pt.y));
        global += 1;
    }
    FeatureExtraction { rows, unknown_spike_count: unknown }
}

/// Number of dense input channels per row for a mode (spike ids excluded;
/// those enter through an embedding).
pub fn input_dim(mode: FeatureMode) -> usize {
    match mode {
        FeatureMode::Recurrent => 5,
        FeatureMode::Absolute => 4,
    }
}

/// Dense input vector for one row: coordinates followed by the index
/// channels scaled by [`INDEX_SCALE`].
pub fn input_vector(row: &FeatureRow, mode: FeatureMode) -> Vec<f64> {
    let mut v = vec![
        row.coord_a,
        row.coord_b,
        row.index_point as f64 * INDEX_SCALE,
        row.index_stroke as f64 * INDEX_SCALE,
    ];
    if matches!(mode, FeatureMode::Recurrent) {
        v.push(row.index_global.expect("recurrent rows carry index_global") as f64 * INDEX_SCALE);
    }
    v
}

/// Simulate recognizer CTC spikes from a reference segmentation: one spike
/// per character slot at the last point of that slot, drawn uniformly from
/// the jitter window intersected with the slot's index range, then dropped
/// independently with `drop_rate`. Ties on the final index keep the later
/// character.
pub fn simulate_ctc_spikes(
    truth: &Segmentation,
    transcription: &Transcription,
    jitter: usize,
    drop_rate: f64,
    rng_seed: u64,
) -> Result<CtcSpikes> {
    let c = transcription.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(c);
    for slot in 0..c {
        let points = truth.points_of(slot);
        let (min_idx, max_idx, last) = match (points.first(), points.last()) {
            (Some(&first), Some(&last)) => (first, last, last),
            _ => {
                return Err(Error::Input(format!(
                    "character slot {slot} has no ground-truth points"
                )))
            }
        };
        let lo = min_idx.max(last.saturating_sub(jitter));
        let hi = max_idx.min(last + jitter);
        let index = rng.random_range(lo..=hi);
        placed.push((slot, index));
    }

    let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
    for (slot, index) in placed {
        let dropped = rng.random_range(0.0..1.0) < drop_rate;
        if !dropped {
            // Later slots overwrite earlier ones on index collisions.
            kept.insert(index, slot);
        }
    }

    CtcSpikes::new(
        kept.into_iter()
            .map(|(index, slot)| (index, transcription.chars()[slot].clone()))
            .collect(),
    )
}

/// Attach simulated spikes to every sample of a corpus that carries truth,
/// deriving one rng stream per sample so corpora of different sizes agree on
/// shared prefixes.
pub fn attach_simulated_spikes(
    samples: &mut [LabeledSample],
    jitter: usize,
    drop_rate: f64,
    seed: u64,
) -> Result<()> {
    for (i, sample) in samples.iter_mut().enumerate() {
        let (Some(truth), Some(transcription)) = (&sample.truth, &sample.transcription) else {
            return Err(Error::Input(format!(
                "sample {i} lacks truth or transcription for spike simulation"
            )));
        };
        let mixed = seed
            .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .rotate_left(17);
        sample.spikes = Some(simulate_ctc_spikes(truth, transcription, jitter, drop_rate, mixed)?);
    }
    Ok(())
}
