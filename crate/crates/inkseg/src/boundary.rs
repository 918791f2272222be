//! Character-boundary prediction: classify every point as `<start>`,
//! `<char>` or `<none>` with a bidirectional recurrent or self-attention
//! backbone, then post-process the token sequence into a segmentation
//! limited to the expected character count.

use serde::{Deserialize, Serialize};

use crate::charquery::sinusoidal_pe;
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureRow};
use crate::ink::Segmentation;
use crate::nn::{self, Bound, ParamStore, SeedStream};
use crate::tensor::{Tape, Tensor};

/// Per-point target/prediction token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryToken {
    /// First point of a character.
    Start,
    /// Further point of the currently open character.
    Char,
    /// Point not belonging to the currently open character (delayed strokes)
    /// or to any character.
    None,
}

impl BoundaryToken {
    pub const COUNT: usize = 3;

    pub fn class_index(self) -> usize {
        match self {
            BoundaryToken::Start => 0,
            BoundaryToken::Char => 1,
            BoundaryToken::None => 2,
        }
    }

    pub fn from_class_index(i: usize) -> BoundaryToken {
        match i {
            0 => BoundaryToken::Start,
            1 => BoundaryToken::Char,
            _ => BoundaryToken::None,
        }
    }
}

/// Backbone selection for the boundary model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Bilstm,
    Transformer,
}

impl Backbone {
    /// The feature mode this backbone consumes: deltas with a global index
    /// for the recurrent net, absolute coordinates for the transformer
    /// (whose positional encoding replaces the global index).
    pub fn feature_mode(self) -> FeatureMode {
        match self {
            Backbone::Bilstm => FeatureMode::Recurrent,
            Backbone::Transformer => FeatureMode::Absolute,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryModelConfig {
    pub backbone: Backbone,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Attention heads (transformer backbone only).
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_points: usize,
}

impl BoundaryModelConfig {
    pub fn new(backbone: Backbone, vocab_size: usize, max_points: usize) -> Self {
        BoundaryModelConfig {
            backbone,
            hidden_dim: 256,
            layers: 3,
            heads: 8,
            dropout: 0.2,
            vocab_size,
            max_points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.backbone, Backbone::Transformer) && self.hidden_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Parameter("layers and hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct BoundaryModel {
    pub cfg: BoundaryModelConfig,
    pub params: ParamStore,
}

impl BoundaryModel {
    /// Initialize parameters deterministically from `seed`.
    pub fn new(cfg: BoundaryModelConfig, seed: u64) -> Result<BoundaryModel> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = cfg.hidden_dim;
        let in_dim = crate::features::input_dim(cfg.backbone.feature_mode());

        nn::init_linear(&mut params, &mut rng, "proj", in_dim, h);
        nn::init_embedding(&mut params, &mut rng, "spike_embedding", cfg.vocab_size, h, 1.0);
        match cfg.backbone {
            Backbone::Bilstm => {
                for l in 0..cfg.layers {
                    let input = if l == 0 { h } else { 2 * h };
                    nn::init_lstm(&mut params, &mut rng, &format!("lstm.l{l}.fwd"), input, h);
                    nn::init_lstm(&mut params, &mut rng, &format!("lstm.l{l}.bwd"), input, h);
                }
                nn::init_linear(&mut params, &mut rng, "classifier", 2 * h, BoundaryToken::COUNT);
            }
            Backbone::Transformer => {
                for l in 0..cfg.layers {
                    nn::init_encoder_layer(&mut params, &mut rng, &format!("enc.l{l}"), h, h);
                }
                nn::init_linear(&mut params, &mut rng, "classifier", h, BoundaryToken::COUNT);
            }
        }
        Ok(BoundaryModel { cfg, params })
    }

    /// Forward pass to `(p, 3)` logits. `rows` may contain padded tail rows;
    /// `valid_len` marks the true sequence length. Padded rows are excluded
    /// from attention (transformer) or skipped entirely (recurrent), so
    /// their presence never changes valid outputs.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        rows: &[FeatureRow],
        valid_len: usize,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Tensor<'t>> {
        self.forward_bound(tape, rows, valid_len, train, dropout_seed)
            .map(|(logits, _)| logits)
    }

    /// [`BoundaryModel::forward`] that also returns the parameter binding,
    /// for reading gradients after backward.
    pub fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        rows: &[FeatureRow],
        valid_len: usize,
        train: bool,
        dropout_seed: u64,
    ) -> Result<(Tensor<'t>, Bound<'t>)> {
        let p = rows.len();
        if p == 0 || valid_len == 0 || valid_len > p {
            return Err(Error::Usage(format!(
                "invalid lengths: {valid_len} valid of {p} rows"
            )));
        }
        if valid_len > self.cfg.max_points {
            return Err(Error::Capacity(format!(
                "{valid_len} points exceed max_points {}",
                self.cfg.max_points
            )));
        }
        let mode = self.cfg.backbone.feature_mode();
        let have_global = rows[0].index_global.is_some();
        if have_global != matches!(mode, FeatureMode::Recurrent) {
            return Err(Error::Usage(format!(
                "feature rows do not match the {:?} backbone's expected mode {:?}",
                self.cfg.backbone, mode
            )));
        }

        let store = &self.params;
        let bound = Bound::bind(tape, store)?;
        let mut seeds = SeedStream::new(dropout_seed);
        let h = self.cfg.hidden_dim;

        let logits = match self.cfg.backbone {
            Backbone::Bilstm => {
                // The recurrence cannot mask, so padded rows are sliced away
                // and zero logits are appended for them afterwards.
                let valid_rows = &rows[..valid_len];
                let (x, spike_ids) = nn::assemble_inputs(tape, valid_rows, mode)?;
                let proj = nn::linear(&bound, store, "proj", x)?;
                let emb = bound
                    .get(store, "spike_embedding")?
                    .embedding_lookup(&spike_ids)?;
                let mut x = proj.add(emb)?;
                for l in 0..self.cfg.layers {
                    let fwd = nn::lstm_direction(
                        &bound,
                        store,
                        &format!("lstm.l{l}.fwd"),
                        x,
                        h,
                        false,
                    )?;
                    let bwd = nn::lstm_direction(
                        &bound,
                        store,
                        &format!("lstm.l{l}.bwd"),
                        x,
                        h,
                        true,
                    )?;
                    x = tape.concat(&[fwd, bwd], 1)?;
                    if l + 1 < self.cfg.layers {
                        x = x
                            .relu()
                            .dropout(self.cfg.dropout, train, seeds.next_seed())?;
                    }
                }
                let logits = nn::linear(&bound, store, "classifier", x)?;
                if valid_len == p {
                    logits
                } else {
                    let pad = tape.constant(
                        &[p - valid_len, BoundaryToken::COUNT],
                        vec![0.0; (p - valid_len) * BoundaryToken::COUNT],
                    )?;
                    tape.concat(&[logits, pad], 0)?
                }
            }
            Backbone::Transformer => {
                let (x, spike_ids) = nn::assemble_inputs(tape, rows, mode)?;
                let proj = nn::linear(&bound, store, "proj", x)?;
                let emb = bound
                    .get(store, "spike_embedding")?
                    .embedding_lookup(&spike_ids)?;
                let pe = tape.constant(&[p, h], sinusoidal_pe(p, h)?)?;
                let mut x = proj
                    .add(emb)?
                    .add(pe)?
                    .dropout(self.cfg.dropout, train, seeds.next_seed())?;
                let mask = padding_mask(p, p, valid_len);
                let mask_ref = (valid_len < p).then_some(mask.as_slice());
                for l in 0..self.cfg.layers {
                    x = nn::encoder_layer(
                        &bound,
                        store,
                        &format!("enc.l{l}"),
                        x,
                        self.cfg.heads,
                        mask_ref,
                        self.cfg.dropout,
                        train,
                        &mut seeds,
                    )?;
                }
                nn::linear(&bound, store, "classifier", x.layer_norm(1)?)?
            }
        };
        Ok((logits, bound))
    }
}

/// Attention mask over an `(n, m)` grid blocking keys at or beyond
/// `valid_len`.
pub fn padding_mask(n: usize, m: usize, valid_len: usize) -> Vec<bool> {
    let mut mask = vec![false; n * m];
    for row in 0..n {
        for col in valid_len..m {
            mask[row * m + col] = true;
        }
    }
    mask
}

/// Token targets for a (total) reference segmentation, in reading order:
/// the first point of a slot's first contiguous run opens that character
/// with `Start`; its further points are `Char`; points of any other
/// already-opened slot (delayed strokes, returns) are `None`.
pub fn boundary_targets(truth: &Segmentation) -> Vec<BoundaryToken> {
    let mut opened: Vec<bool> = Vec::new();
    let mut open: Option<usize> = None;
    let mut tokens = Vec::with_capacity(truth.len());
    for i in 0..truth.len() {
        let tok = match truth.get(i) {
            Option::None => BoundaryToken::None,
            Some(slot) => {
                if opened.len() <= slot {
                    opened.resize(slot + 1, false);
                }
                if !opened[slot] {
                    opened[slot] = true;
                    open = Some(slot);
                    BoundaryToken::Start
                } else if open == Some(slot) {
                    BoundaryToken::Char
                } else {
                    BoundaryToken::None
                }
            }
        };
        tokens.push(tok);
    }
    tokens
}

/// Greedy per-point argmax over `(p, 3)` logits; ties break toward the
/// lower class index.
pub fn argmax_tokens(logits: &[f64], p: usize) -> Vec<BoundaryToken> {
    debug_assert_eq!(logits.len(), p * BoundaryToken::COUNT);
    (0..p)
        .map(|i| {
            let row = &logits[i * 3..(i + 1) * 3];
            let mut best = 0usize;
            for k in 1..3 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            BoundaryToken::from_class_index(best)
        })
        .collect()
}

/// Post-process token predictions into a segmentation with at most `c`
/// characters: segments open at `Start` and absorb later `Char` points;
/// when more than `c` segments emerge, the smallest (rightmost on ties) are
/// deleted and their points become unassigned; surviving segments fill the
/// first slots in temporal order.
pub fn decode_tokens(tokens: &[BoundaryToken], c: usize) -> Segmentation {
    let mut segments: Vec<Vec<usize>> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        match tok {
            BoundaryToken::Start => segments.push(vec![i]),
            BoundaryToken::Char => {
                if let Some(open) = segments.last_mut() {
                    open.push(i);
                }
            }
            BoundaryToken::None => {}
        }
    }

    while segments.len() > c {
        let victim = segments
            .iter()
            .enumerate()
            .min_by(|(ai, a), (bi, b)| a.len().cmp(&b.len()).then(bi.cmp(ai)))
            .map(|(i, _)| i)
            .expect("non-empty segment list");
        segments.remove(victim);
    }

    let mut assignment = vec![None; tokens.len()];
    for (slot, segment) in segments.iter().enumerate() {
        for &i in segment {
            assignment[i] = Some(slot);
        }
    }
    Segmentation::new(assignment)
}

/// Argmax + post-processing over raw logits.
pub fn decode_boundaries(logits: &[f64], p: usize, c: usize) -> Segmentation {
    decode_tokens(&argmax_tokens(logits, p), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, Vocabulary};
    use crate::ink::{Ink, LabeledSample, Point, Stroke, Transcription};
    use BoundaryToken::{Char, None as TNone, Start};

    fn one_hot(tokens: &[BoundaryToken]) -> Vec<f64> {
        let mut logits = vec![0.0; tokens.len() * 3];
        for (i, t) in tokens.iter().enumerate() {
            logits[i * 3 + t.class_index()] = 1.0;
        }
        logits
    }

    #[test]
    fn targets_for_monotone_truth() {
        let truth = Segmentation::total(vec![0, 0, 1, 1]);
        assert_eq!(boundary_targets(&truth), vec![Start, Char, Start, Char]);
    }

    #[test]
    fn targets_mark_returns_as_none() {
        let truth = Segmentation::total(vec![0, 1, 1, 0]);
        assert_eq!(boundary_targets(&truth), vec![Start, Start, Char, TNone]);
    }

    #[test]
    fn targets_resume_open_character_after_interruption() {
        let truth = Segmentation::total(vec![0, 1, 0, 1]);
        assert_eq!(boundary_targets(&truth), vec![Start, Start, TNone, Char]);
    }

    #[test]
    fn decode_direct_reading() {
        let seg = decode_tokens(&[Start, Char, Start, Char], 2);
        assert_eq!(seg.assignment(), &[Some(0), Some(0), Some(1), Some(1)]);
    }

    #[test]
    fn decode_deletes_smallest_rightmost_segment() {
        let seg = decode_tokens(&[Start, Start, Char, Start], 2);
        assert_eq!(seg.assignment(), &[Some(0), Some(1), Some(1), None]);
    }

    #[test]
    fn decode_keeps_points_before_first_start_unassigned() {
        let seg = decode_tokens(&[TNone, Start, Char], 1);
        assert_eq!(seg.assignment(), &[None, Some(0), Some(0)]);
        let seg = decode_tokens(&[Char, Start, Char], 1);
        assert_eq!(seg.assignment(), &[None, Some(0), Some(0)]);
    }

    #[test]
    fn decode_undersegmentation_leaves_trailing_slots_empty() {
        let seg = decode_tokens(&[Start, Char, Char], 3);
        assert_eq!(seg.assignment(), &[Some(0), Some(0), Some(0)]);
    }

    #[test]
    fn round_trip_on_monotone_segmentations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c = rng.random_range(1..6);
            let mut slots = Vec::new();
            for slot in 0..c {
                let run = rng.random_range(1..5);
                slots.extend(std::iter::repeat_n(slot, run));
            }
            let truth = Segmentation::total(slots);
            let targets = boundary_targets(&truth);
            let decoded = decode_boundaries(&one_hot(&targets), truth.len(), c);
            assert_eq!(decoded, truth);
        }
    }

    fn toy_sample(p: usize) -> LabeledSample {
        let ink = Ink::new(vec![Stroke::new(
            (0..p)
                .map(|i| Point::new(i as f64 * 0.1, (i as f64 * 0.7).sin() * 0.5))
                .collect(),
        )
        .unwrap()])
        .unwrap();
        LabeledSample::new(ink, Some(Transcription::new("ab").unwrap()))
    }

    fn toy_model(backbone: Backbone) -> BoundaryModel {
        let cfg = BoundaryModelConfig {
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            ..BoundaryModelConfig::new(backbone, 6, 64)
        };
        BoundaryModel::new(cfg, 99).unwrap()
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        for backbone in [Backbone::Bilstm, Backbone::Transformer] {
            let model = toy_model(backbone);
            let sample = toy_sample(17);
            let vocab = Vocabulary::build(["a", "b"]);
            let rows = extract_features(&sample, backbone.feature_mode(), &vocab).rows;
            let tape = Tape::new();
            let logits = model.forward(&tape, &rows, rows.len(), false, 1).unwrap();
            assert_eq!(logits.shape(), vec![17, 3]);

            let tape2 = Tape::new();
            let logits2 = model.forward(&tape2, &rows, rows.len(), false, 2).unwrap();
            assert_eq!(logits.value(), logits2.value(), "{backbone:?}");
        }
    }

    #[test]
    fn wrong_feature_mode_is_a_usage_error() {
        let model = toy_model(Backbone::Bilstm);
        let sample = toy_sample(5);
        let vocab = Vocabulary::build(["a", "b"]);
        let rows = extract_features(&sample, FeatureMode::Absolute, &vocab).rows;
        let tape = Tape::new();
        assert!(matches!(
            model.forward(&tape, &rows, 5, false, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn capacity_error_past_max_points() {
        let model = toy_model(Backbone::Transformer);
        let sample = toy_sample(70);
        let vocab = Vocabulary::build(["a", "b"]);
        let rows = extract_features(&sample, FeatureMode::Absolute, &vocab).rows;
        let tape = Tape::new();
        assert!(matches!(
            model.forward(&tape, &rows, 70, false, 0),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn padding_does_not_change_valid_logits() {
        for backbone in [Backbone::Bilstm, Backbone::Transformer] {
            let model = toy_model(backbone);
            let sample = toy_sample(9);
            let vocab = Vocabulary::build(["a", "b"]);
            let rows = extract_features(&sample, backbone.feature_mode(), &vocab).rows;

            let tape = Tape::new();
            let plain = model.forward(&tape, &rows, 9, false, 0).unwrap().value();

            let mut padded_rows = rows.clone();
            for extra in 0..4 {
                padded_rows.push(FeatureRow {
                    coord_a: 0.0,
                    coord_b: 0.0,
                    index_point: 9 + extra,
                    index_stroke: 0,
                    index_global: rows[0].index_global.map(|_| 9 + extra),
                    spike_char: None,
                });
            }
            let tape2 = Tape::new();
            let padded = model
                .forward(&tape2, &padded_rows, 9, false, 0)
                .unwrap()
                .value();
            assert_eq!(&padded[..9 * 3], &plain[..], "{backbone:?}");
        }
    }
}
