//! Character Query Transformer: an encoder over the points and a decoder
//! whose queries are the transcription's characters (character embedding
//! plus a positional embedding), classified by a matrix product between the
//! two projected outputs. Every point is assigned to some character, so
//! delayed strokes need no special handling.

use serde::{Deserialize, Serialize};

use crate::boundary::padding_mask;
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureRow, Vocabulary};
use crate::ink::{Segmentation, Transcription};
use crate::nn::{self, Bound, ParamStore, SeedStream};
use crate::tensor::{Tape, Tensor};

/// Sinusoidal positional encoding table, row-major `(length, dim)`:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1]` the matching
/// cosine.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Parameter(format!(
            "sinusoidal encoding dimension must be even, got {dim}"
        )));
    }
    let mut table = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            table[pos * dim + 2 * i] = angle.sin();
            table[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(table)
}

/// Positional identity given to decoder queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPosEncoding {
    /// Trainable per-position vectors; the default, needed to tell repeated
    /// characters apart.
    Learned,
    /// Fixed sinusoidal rows, kept for the encoding comparison experiment.
    Sinusoidal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharQueryConfig {
    pub hidden_dim: usize,
    /// Width of the two projections ahead of the classification product.
    pub final_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Learned query-position table size; bounds the transcription length.
    pub max_chars: usize,
    pub query_pos_encoding: QueryPosEncoding,
    pub max_points: usize,
}

impl CharQueryConfig {
    pub fn new(vocab_size: usize, max_chars: usize, max_points: usize) -> Self {
        CharQueryConfig {
            hidden_dim: 256,
            final_dim: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            dropout: 0.2,
            vocab_size,
            max_chars,
            query_pos_encoding: QueryPosEncoding::Learned,
            max_points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Parameter("hidden_dim must be even for the sinusoidal encoding".into()));
        }
        if self.max_chars == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Parameter("layer counts and max_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CharQueryModel {
    pub cfg: CharQueryConfig,
    pub params: ParamStore,
}

impl CharQueryModel {
    pub fn new(cfg: CharQueryConfig, seed: u64) -> Result<CharQueryModel> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = cfg.hidden_dim;
        let in_dim = crate::features::input_dim(FeatureMode::Absolute);

        nn::init_linear(&mut params, &mut rng, "proj", in_dim, h);
        nn::init_embedding(&mut params, &mut rng, "spike_embedding", cfg.vocab_size, h, 1.0);
        for l in 0..cfg.encoder_layers {
            nn::init_encoder_layer(&mut params, &mut rng, &format!("enc.l{l}"), h, h);
        }
        nn::init_embedding(&mut params, &mut rng, "char_embedding", cfg.vocab_size, h, 1.0);
        // Learned query positions start near zero so that positions only
        // differentiate where training demands it.
        nn::init_embedding(&mut params, &mut rng, "query_pos", cfg.max_chars, h, 0.02);
        for l in 0..cfg.decoder_layers {
            nn::init_decoder_layer(&mut params, &mut rng, &format!("dec.l{l}"), h, h);
        }
        nn::init_linear(&mut params, &mut rng, "head_enc", h, cfg.final_dim);
        nn::init_linear(&mut params, &mut rng, "head_dec", h, cfg.final_dim);
        Ok(CharQueryModel { cfg, params })
    }

    /// Build the `(c, hidden)` query matrix for character ids: embedding of
    /// the character plus the positional encoding of its slot.
    fn queries<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        char_ids: &[Option<usize>],
    ) -> Result<Tensor<'t>> {
        let c = char_ids.len();
        let emb = bound
            .get(&self.params, "char_embedding")?
            .embedding_lookup(char_ids)?;
        let pos = match self.cfg.query_pos_encoding {
            QueryPosEncoding::Learned => bound
                .get(&self.params, "query_pos")?
                .slice(0, 0, c)?,
            QueryPosEncoding::Sinusoidal => {
                tape.constant(&[c, self.cfg.hidden_dim], sinusoidal_pe(c, self.cfg.hidden_dim)?)?
            }
        };
        emb.add(pos)
    }

    /// Forward pass to `(p, c)` logits. `rows`/`char_ids` may carry padded
    /// tails beyond `valid_len`/`valid_c`; padded entries are excluded from
    /// every attention, so valid outputs are unchanged by padding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        rows: &[FeatureRow],
        char_ids: &[Option<usize>],
        valid_len: usize,
        valid_c: usize,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Tensor<'t>> {
        self.forward_bound(tape, rows, char_ids, valid_len, valid_c, train, dropout_seed)
            .map(|(logits, _)| logits)
    }

    /// [`CharQueryModel::forward`] that also returns the parameter binding,
    /// for reading gradients after backward.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        rows: &[FeatureRow],
        char_ids: &[Option<usize>],
        valid_len: usize,
        valid_c: usize,
        train: bool,
        dropout_seed: u64,
    ) -> Result<(Tensor<'t>, Bound<'t>)> {
        let p = rows.len();
        let c = char_ids.len();
        if p == 0 || valid_len == 0 || valid_len > p {
            return Err(Error::Input(format!(
                "invalid lengths: {valid_len} valid of {p} rows"
            )));
        }
        if valid_c == 0 || valid_c > c {
            return Err(Error::Input(format!(
                "invalid character counts: {valid_c} valid of {c} queries"
            )));
        }
        if valid_c > self.cfg.max_chars {
            return Err(Error::Capacity(format!(
                "{valid_c} characters exceed max_chars {}",
                self.cfg.max_chars
            )));
        }
        if c > self.cfg.max_chars {
            return Err(Error::Capacity(format!(
                "{c} padded queries exceed max_chars {}",
                self.cfg.max_chars
            )));
        }
        if valid_len > self.cfg.max_points {
            return Err(Error::Capacity(format!(
                "{valid_len} points exceed max_points {}",
                self.cfg.max_points
            )));
        }
        if rows[0].index_global.is_some() {
            return Err(Error::Usage(
                "character query model consumes absolute-mode features".into(),
            ));
        }

        let store = &self.params;
        let bound = Bound::bind(tape, store)?;
        let mut seeds = SeedStream::new(dropout_seed);
        let h = self.cfg.hidden_dim;

        // Encoder over the points.
        let (x, spike_ids) = nn::assemble_inputs(tape, rows, FeatureMode::Absolute)?;
        let proj = nn::linear(&bound, store, "proj", x)?;
        let emb = bound
            .get(store, "spike_embedding")?
            .embedding_lookup(&spike_ids)?;
        let pe = tape.constant(&[p, h], sinusoidal_pe(p, h)?)?;
        let mut enc = proj
            .add(emb)?
            .add(pe)?
            .dropout(self.cfg.dropout, train, seeds.next_seed())?;
        let enc_mask = padding_mask(p, p, valid_len);
        let enc_mask_ref = (valid_len < p).then_some(enc_mask.as_slice());
        for l in 0..self.cfg.encoder_layers {
            enc = nn::encoder_layer(
                &bound,
                store,
                &format!("enc.l{l}"),
                enc,
                self.cfg.heads,
                enc_mask_ref,
                self.cfg.dropout,
                train,
                &mut seeds,
            )?;
        }
        let enc = enc.layer_norm(1)?; // E: (p, h)

        // Decoder over the character queries.
        let mut dec = self
            .queries(tape, &bound, char_ids)?
            .dropout(self.cfg.dropout, train, seeds.next_seed())?;
        let self_mask = padding_mask(c, c, valid_c);
        let self_mask_ref = (valid_c < c).then_some(self_mask.as_slice());
        let cross_mask = padding_mask(c, p, valid_len);
        let cross_mask_ref = (valid_len < p).then_some(cross_mask.as_slice());
        for l in 0..self.cfg.decoder_layers {
            dec = nn::decoder_layer(
                &bound,
                store,
                &format!("dec.l{l}"),
                dec,
                enc,
                self.cfg.heads,
                self_mask_ref,
                cross_mask_ref,
                self.cfg.dropout,
                train,
                &mut seeds,
            )?;
        }
        let dec = dec.layer_norm(1)?; // D: (c, h)

        // Classification: separate linear maps, then E'·D'ᵀ.
        let e_proj = nn::linear(&bound, store, "head_enc", enc)?; // (p, d_f)
        let d_proj = nn::linear(&bound, store, "head_dec", dec)?; // (c, d_f)
        let logits = e_proj.matmul(d_proj.transpose(0, 1)?)?;
        Ok((logits, bound))
    }

    /// Map a transcription to vocabulary ids (UNK for unseen labels).
    pub fn char_ids(transcription: &Transcription, vocab: &Vocabulary) -> Vec<Option<usize>> {
        transcription
            .chars()
            .iter()
            .map(|ch| Some(vocab.id_or_unk(ch)))
            .collect()
    }
}

/// Per-point argmax over the character axis; ties break toward the lower
/// slot. Never produces an unassigned point.
pub fn charquery_segment(logits: &[f64], p: usize, c: usize) -> Segmentation {
    debug_assert_eq!(logits.len(), p * c);
    Segmentation::total(
        (0..p)
            .map(|i| {
                let row = &logits[i * c..(i + 1) * c];
                let mut best = 0usize;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect(),
    )
}

/// One row of the positional-encoding diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct PeDiagnosticRow {
    pub pos: usize,
    pub sinusoidal: f64,
    pub learned: f64,
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - min) / span } else { 0.5 })
        .collect()
}

/// Per-position mean of the positional-embedding vector, min-max normalized
/// over positions, for the sinusoidal table and the model's learned table.
pub fn pe_diagnostic(model: &CharQueryModel, max_pos: usize) -> Result<Vec<PeDiagnosticRow>> {
    let table_id = model
        .params
        .id_of("query_pos")
        .ok_or_else(|| Error::Usage("model has no learned query position table".into()))?;
    let entry = model.params.entry(table_id);
    let rows = entry.shape[0];
    let dim = entry.shape[1];
    if max_pos > rows {
        return Err(Error::Capacity(format!(
            "max_pos {max_pos} exceeds the learned table size {rows}"
        )));
    }
    let sin_table = sinusoidal_pe(max_pos, dim)?;
    let sin_means: Vec<f64> = (0..max_pos)
        .map(|pos| sin_table[pos * dim..(pos + 1) * dim].iter().sum::<f64>() / dim as f64)
        .collect();
    let learned_means: Vec<f64> = (0..max_pos)
        .map(|pos| entry.data[pos * dim..(pos + 1) * dim].iter().sum::<f64>() / dim as f64)
        .collect();
    let sin_norm = min_max_normalize(&sin_means);
    let learned_norm = min_max_normalize(&learned_means);
    Ok((0..max_pos)
        .map(|pos| PeDiagnosticRow {
            pos,
            sinusoidal: sin_norm[pos],
            learned: learned_norm[pos],
        })
        .collect())
}

/// Serialize diagnostic rows as CSV with columns `pos,sinusoidal,learned`.
pub fn pe_diagnostic_csv(rows: &[PeDiagnosticRow]) -> String {
    let mut out = String::from("pos,sinusoidal,learned\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.pos, r.sinusoidal, r.learned));
    }
    out
}

/// Mean absolute difference between consecutive positions of a normalized
/// diagnostic column; the learned table shows a larger value than the
/// smooth sinusoidal one.
pub fn mean_successive_difference(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    values
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum::<f64>()
        / (values.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::ink::{Ink, LabeledSample, Point, Stroke};

    #[test]
    fn sinusoidal_pe_spot_values() {
        let dim = 8;
        let pe = sinusoidal_pe(4, dim).unwrap();
        for i in 0..dim / 2 {
            assert_eq!(pe[2 * i], 0.0, "sin at pos 0");
            assert_eq!(pe[2 * i + 1], 1.0, "cos at pos 0");
        }
        for pos in 0..4 {
            assert!((pe[pos * dim] - (pos as f64).sin()).abs() < 1e-15);
        }
        assert!(matches!(sinusoidal_pe(4, 7), Err(Error::Parameter(_))));
    }

    #[test]
    fn sinusoidal_pe_entries_bounded() {
        let pe = sinusoidal_pe(512, 256).unwrap();
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    fn toy_model(vocab_size: usize) -> CharQueryModel {
        let cfg = CharQueryConfig {
            hidden_dim: 8,
            final_dim: 6,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            dropout: 0.1,
            ..CharQueryConfig::new(vocab_size, 8, 64)
        };
        CharQueryModel::new(cfg, 3).unwrap()
    }

    fn toy_rows(p: usize, vocab: &Vocabulary) -> Vec<FeatureRow> {
        let ink = Ink::new(vec![Stroke::new(
            (0..p)
                .map(|i| Point::new(i as f64 * 0.2, (i as f64 * 0.9).cos()))
                .collect(),
        )
        .unwrap()])
        .unwrap();
        let sample = LabeledSample::new(ink, Some(Transcription::new("abcd").unwrap()));
        extract_features(&sample, FeatureMode::Absolute, vocab).rows
    }

    #[test]
    fn logits_shape_contract() {
        let vocab = Vocabulary::build(["a", "b", "c", "d"]);
        let model = toy_model(vocab.size());
        let rows = toy_rows(20, &vocab);
        let ids = CharQueryModel::char_ids(&Transcription::new("abcd").unwrap(), &vocab);
        let tape = Tape::new();
        let logits = model
            .forward(&tape, &rows, &ids, rows.len(), ids.len(), false, 0)
            .unwrap();
        assert_eq!(logits.shape(), vec![20, 4]);
    }

    #[test]
    fn query_rows_depend_on_character_and_position() {
        let vocab = Vocabulary::build(["a", "b"]);
        let model = toy_model(vocab.size());
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &model.params).unwrap();
        // Same character at two positions must differ through the learned
        // positional table; different characters differ through embeddings.
        let q = model
            .queries(&tape, &bound, &[
                Some(vocab.id("a").unwrap()),
                Some(vocab.id("a").unwrap()),
                Some(vocab.id("b").unwrap()),
            ])
            .unwrap()
            .value();
        let h = model.cfg.hidden_dim;
        assert_ne!(q[..h], q[h..2 * h], "repeated character, distinct positions");
        assert_ne!(q[..h], q[2 * h..], "distinct characters");
    }

    #[test]
    fn swapping_characters_moves_query_rows() {
        let vocab = Vocabulary::build(["a", "b"]);
        let model = toy_model(vocab.size());
        let tape = Tape::new();
        let bound = Bound::bind(&tape, &model.params).unwrap();
        let ab = model
            .queries(&tape, &bound, &[Some(2), Some(3)])
            .unwrap()
            .value();
        let ba = model
            .queries(&tape, &bound, &[Some(3), Some(2)])
            .unwrap()
            .value();
        let h = model.cfg.hidden_dim;
        // Row i is char embedding + position i: swapping the characters
        // swaps the embedding part but keeps the positional part.
        let pos = model.params.entry(model.params.id_of("query_pos").unwrap());
        for d in 0..h {
            let p0 = pos.data[d];
            let p1 = pos.data[h + d];
            assert!((ab[d] - p0 - (ba[h + d] - p1)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let vocab = Vocabulary::build(["a", "b", "c", "d"]);
        let model = toy_model(vocab.size());
        let rows = toy_rows(12, &vocab);
        let ids = CharQueryModel::char_ids(&Transcription::new("ab").unwrap(), &vocab);
        let tape1 = Tape::new();
        let a = model
            .forward(&tape1, &rows, &ids, rows.len(), ids.len(), false, 1)
            .unwrap()
            .value();
        let tape2 = Tape::new();
        let b = model
            .forward(&tape2, &rows, &ids, rows.len(), ids.len(), false, 99)
            .unwrap()
            .value();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_does_not_change_valid_logits() {
        let vocab = Vocabulary::build(["a", "b", "c", "d"]);
        let model = toy_model(vocab.size());
        let rows = toy_rows(10, &vocab);
        let ids = CharQueryModel::char_ids(&Transcription::new("abc").unwrap(), &vocab);

        let tape = Tape::new();
        let plain = model
            .forward(&tape, &rows, &ids, 10, 3, false, 0)
            .unwrap()
            .value();

        let mut rows_padded = rows.clone();
        for extra in 0..3 {
            rows_padded.push(FeatureRow {
                coord_a: 0.0,
                coord_b: 0.0,
                index_point: 10 + extra,
                index_stroke: 0,
                index_global: None,
                spike_char: None,
            });
        }
        let mut ids_padded = ids.clone();
        ids_padded.push(Some(crate::features::PAD_ID));
        ids_padded.push(Some(crate::features::PAD_ID));

        let tape2 = Tape::new();
        let padded = model
            .forward(&tape2, &rows_padded, &ids_padded, 10, 3, false, 0)
            .unwrap()
            .value();
        let c_padded = ids_padded.len();
        for row in 0..10 {
            for col in 0..3 {
                assert_eq!(plain[row * 3 + col], padded[row * c_padded + col]);
            }
        }
    }

    #[test]
    fn capacity_and_input_errors() {
        let vocab = Vocabulary::build(["a", "b", "c", "d"]);
        let model = toy_model(vocab.size());
        let rows = toy_rows(5, &vocab);
        let tape = Tape::new();
        let too_many: Vec<Option<usize>> = vec![Some(2); model.cfg.max_chars + 1];
        assert!(matches!(
            model.forward(&tape, &rows, &too_many, 5, too_many.len(), false, 0),
            Err(Error::Capacity(_))
        ));
        let none: Vec<Option<usize>> = vec![];
        assert!(matches!(
            model.forward(&tape, &rows, &none, 5, 0, false, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn segment_argmax_and_ties() {
        let logits = vec![
            5.0, 1.0, 1.0, // row 0 -> slot 0
            0.0, 3.0, 1.0, // row 1 -> slot 1
            2.0, 2.0, 2.0, // row 2 -> tie, lower slot wins
        ];
        let seg = charquery_segment(&logits, 3, 3);
        assert_eq!(seg.assignment(), &[Some(0), Some(1), Some(0)]);
        assert!(seg.is_total());
    }

    #[test]
    fn argmax_invariant_under_row_shifts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (p, c) = (6, 4);
            let logits: Vec<f64> = (0..p * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = logits
                .chunks(c)
                .flat_map(|row| {
                    let shift: f64 = rng.random_range(-5.0..5.0);
                    row.iter().map(move |v| v + shift).collect::<Vec<_>>()
                })
                .collect();
            assert_eq!(
                charquery_segment(&logits, p, c),
                charquery_segment(&shifted, p, c)
            );
        }
    }

    #[test]
    fn pe_diagnostic_shape_and_bounds() {
        let vocab = Vocabulary::build(["a", "b"]);
        let model = toy_model(vocab.size());
        let rows = pe_diagnostic(&model, 8).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.sinusoidal));
            assert!((0.0..=1.0).contains(&r.learned));
        }
        assert!(matches!(
            pe_diagnostic(&model, 9),
            Err(Error::Capacity(_))
        ));
        let csv = pe_diagnostic_csv(&rows);
        assert!(csv.starts_with("pos,sinusoidal,learned\n"));
        assert_eq!(csv.lines().count(), 9);
    }
}
