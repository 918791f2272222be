//! Optimization recipe shared by all neural models: label-smoothed
//! cross-entropy, AdamW with decoupled weight decay, linear warmup followed
//! by inverse-square-root decay, and an exponential moving average of the
//! weights used for every evaluation and for the final checkpoint.
//!
//! Batches are padded to the longest sample (and longest transcription for
//! the character-query model) with attention and loss masks; padded entries
//! contribute exactly zero gradient.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{boundary_targets, decode_boundaries, BoundaryModel, BoundaryToken};
use crate::charquery::{charquery_segment, CharQueryModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Segmenter};
use crate::features::{extract_features, FeatureMode, FeatureRow, Vocabulary, PAD_ID};
use crate::ink::{normalize, LabeledSample, Segmentation};
use crate::nn::ParamStore;
use crate::tensor::{checkpoint, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// 3e-3 suits the recurrent backbone, 1e-3 the transformer ones.
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub label_smoothing: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Feed CTC spike features during training and validation.
    pub use_spikes: bool,
    /// Validate (and checkpoint on improvement) every this many steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 4000,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            label_smoothing: 0.1,
            ema_decay: 0.999,
            batch_size: 32,
            max_steps: 20_000,
            seed: 0,
            use_spikes: true,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter("label_smoothing must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_decay == 0.0 {
            return Err(Error::Parameter("ema_decay must be in (0, 1)".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Parameter("warmup_steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Parameter(
                "batch_size, max_steps and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy summed over unmasked rows, with the row
/// count; building block for exact batch averaging.
pub fn smoothed_ce_sum<'t>(
    logits: Tensor<'t>,
    targets: &[usize],
    eps: f64,
    mask: &[bool],
) -> Result<(Tensor<'t>, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Usage(format!(
            "smoothed_ce expects (n, k) logits, got {shape:?}"
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if targets.len() != n || mask.len() != n {
        return Err(Error::Usage(format!(
            "targets/mask lengths {}/{} do not match {n} rows",
            targets.len(),
            mask.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter("label smoothing must be in [0, 1)".into()));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Input("all rows are masked".into()));
    }
    let mut q = vec![0.0; n * k];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        if targets[i] >= k {
            return Err(Error::Usage(format!(
                "target {} out of range for {k} classes",
                targets[i]
            )));
        }
        for j in 0..k {
            q[i * k + j] = eps / k as f64;
        }
        q[i * k + targets[i]] += 1.0 - eps;
    }
    let logp = logits.log_softmax(1)?;
    let weights = logits.tape().constant(&[n, k], q)?;
    let loss = logp.mul(weights)?.sum(None)?.neg();
    Ok((loss, count))
}

/// Mean label-smoothed cross-entropy over unmasked rows:
/// `-(1/|M|) Σ_{i∈M} Σ_j q_ij log p_ij` with
/// `q = (1-ε)·one_hot + ε/k`.
pub fn smoothed_ce<'t>(
    logits: Tensor<'t>,
    targets: &[usize],
    eps: f64,
    mask: &[bool],
) -> Result<Tensor<'t>> {
    let (sum, count) = smoothed_ce_sum(logits, targets, eps, mask)?;
    Ok(sum.scale(1.0 / count as f64))
}

/// Learning rate at `step` (1-based): linear warmup to the peak, then
/// inverse-square-root decay.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps as f64;
    cfg.peak_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Per-parameter AdamW moment buffers.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> OptimState {
        OptimState {
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            step: 0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam
/// step. Aborts on non-finite gradients, naming the parameter.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Usage(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (id, grad) in grads.iter().enumerate() {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {}",
                store.entry(id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, grad) in grads.iter().enumerate() {
        let entry = store.entry_mut(id);
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        for ((w, g), (m, v)) in entry
            .data
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *w -= lr * cfg.weight_decay * *w;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Shadow copy of all parameters, updated once per optimizer step and
/// swapped in for every evaluation.
#[derive(Debug, Clone)]
pub struct EmaState {
    shadow: Vec<Vec<f64>>,
}

impl EmaState {
    pub fn new(store: &ParamStore) -> EmaState {
        EmaState {
            shadow: store.entries().iter().map(|e| e.data.clone()).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1-decay)·params`.
    pub fn update(&mut self, store: &ParamStore, decay: f64) {
        for (shadow, entry) in self.shadow.iter_mut().zip(store.entries()) {
            for (s, p) in shadow.iter_mut().zip(&entry.data) {
                *s = decay * *s + (1.0 - decay) * p;
            }
        }
    }

    /// Exchange the shadow and live weights; calling twice restores the
    /// original state bit-exactly.
    pub fn swap_in(&mut self, store: &mut ParamStore) {
        for (id, shadow) in self.shadow.iter_mut().enumerate() {
            std::mem::swap(shadow, &mut store.entry_mut(id).data);
        }
    }

    pub fn swap_out(&mut self, store: &mut ParamStore) {
        self.swap_in(store);
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }
}

/// The trainable/evaluable segmentation models.
#[derive(Debug, Clone)]
pub enum Model {
    Boundary(BoundaryModel),
    CharQuery(CharQueryModel),
}

impl Model {
    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Boundary(m) => &m.params,
            Model::CharQuery(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Boundary(m) => &mut m.params,
            Model::CharQuery(m) => &mut m.params,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Boundary(m) => match m.cfg.backbone {
                crate::boundary::Backbone::Bilstm => "lstm",
                crate::boundary::Backbone::Transformer => "transformer",
            },
            Model::CharQuery(_) => "charquery",
        }
    }

    pub fn feature_mode(&self) -> FeatureMode {
        match self {
            Model::Boundary(m) => m.cfg.backbone.feature_mode(),
            Model::CharQuery(_) => FeatureMode::Absolute,
        }
    }

    /// Stable identity for ablation compatibility checks: kind plus full
    /// configuration.
    pub fn architecture_id(&self) -> String {
        match self {
            Model::Boundary(m) => format!(
                "boundary:{}",
                serde_json::to_string(&m.cfg).expect("config serializes")
            ),
            Model::CharQuery(m) => format!(
                "charquery:{}",
                serde_json::to_string(&m.cfg).expect("config serializes")
            ),
        }
    }

    /// Persist weights plus configuration under `<stem>.json` / `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let hyper = match self {
            Model::Boundary(m) => serde_json::json!({"model": "boundary", "config": m.cfg}),
            Model::CharQuery(m) => serde_json::json!({"model": "charquery", "config": m.cfg}),
        };
        checkpoint::save(stem, &self.params().to_named_tensors(), hyper)
    }

    pub fn load(stem: &Path) -> Result<Model> {
        let (tensors, hyper) = checkpoint::load(stem)?;
        let params = ParamStore::from_named_tensors(tensors);
        let kind = hyper
            .get("model")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Schema("checkpoint manifest lacks a model kind".into()))?;
        let config = hyper
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Schema("checkpoint manifest lacks a config".into()))?;
        match kind {
            "boundary" => Ok(Model::Boundary(BoundaryModel {
                cfg: serde_json::from_value(config)?,
                params,
            })),
            "charquery" => Ok(Model::CharQuery(CharQueryModel {
                cfg: serde_json::from_value(config)?,
                params,
            })),
            other => Err(Error::Schema(format!("unknown model kind {other:?}"))),
        }
    }

    /// Inference: segment one sample (dropout disabled). Coordinates are
    /// normalized internally; spikes are ignored unless `use_spikes`.
    pub fn segment_sample(
        &self,
        sample: &LabeledSample,
        vocab: &Vocabulary,
        use_spikes: bool,
    ) -> Result<Segmentation> {
        let transcription = sample.require_transcription()?;
        let c = transcription.len();
        let prepared = LabeledSample {
            ink: normalize(&sample.ink),
            spikes: if use_spikes { sample.spikes.clone() } else { None },
            ..sample.clone()
        };
        let rows = extract_features(&prepared, self.feature_mode(), vocab).rows;
        let p = rows.len();
        let tape = Tape::new();
        match self {
            Model::Boundary(m) => {
                let logits = m.forward(&tape, &rows, p, false, 0)?;
                Ok(decode_boundaries(&logits.value(), p, c))
            }
            Model::CharQuery(m) => {
                let ids = CharQueryModel::char_ids(transcription, vocab);
                let logits = m.forward(&tape, &rows, &ids, p, c, false, 0)?;
                Ok(charquery_segment(&logits.value(), p, c))
            }
        }
    }
}

/// [`Segmenter`] adapter around a trained model.
pub struct NeuralSegmenter<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub use_spikes: bool,
}

impl Segmenter for NeuralSegmenter<'_> {
    fn segment(&self, sample: &LabeledSample) -> Result<Segmentation> {
        self.model.segment_sample(sample, self.vocab, self.use_spikes)
    }

    fn describe(&self) -> String {
        if self.use_spikes {
            self.model.kind_name().to_string()
        } else {
            format!("{}_no_spikes", self.model.kind_name())
        }
    }

    fn architecture_id(&self) -> String {
        self.model.architecture_id()
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub best_val_miou: f64,
    pub best_step: usize,
    pub metrics: Vec<MetricsRecord>,
}

struct Prepared {
    rows: Vec<FeatureRow>,
    char_ids: Vec<Option<usize>>,
    targets: Vec<usize>,
    mask: Vec<bool>,
    valid_c: usize,
}

fn prepare(sample: &LabeledSample, model: &Model, vocab: &Vocabulary, use_spikes: bool) -> Result<Prepared> {
    let transcription = sample.require_transcription()?;
    let truth = sample
        .truth
        .as_ref()
        .ok_or_else(|| Error::Input("training sample has no truth".into()))?;
    let normalized = LabeledSample {
        ink: normalize(&sample.ink),
        spikes: if use_spikes { sample.spikes.clone() } else { None },
        ..sample.clone()
    };
    let rows = extract_features(&normalized, model.feature_mode(), vocab).rows;
    let p = rows.len();
    let (targets, mask, char_ids) = match model {
        Model::Boundary(_) => {
            let targets: Vec<usize> = boundary_targets(truth)
                .into_iter()
                .map(BoundaryToken::class_index)
                .collect();
            (targets, vec![true; p], Vec::new())
        }
        Model::CharQuery(_) => {
            let mut targets = vec![0usize; p];
            let mut mask = vec![false; p];
            for i in 0..p {
                if let Some(slot) = truth.get(i) {
                    targets[i] = slot;
                    mask[i] = true;
                }
            }
            (targets, mask, CharQueryModel::char_ids(transcription, vocab))
        }
    };
    Ok(Prepared {
        rows,
        char_ids,
        targets,
        mask,
        valid_c: transcription.len(),
    })
}

fn pad_rows(rows: &mut Vec<FeatureRow>, to_len: usize, mode: FeatureMode) {
    let last_stroke = rows.last().map(|r| r.index_stroke).unwrap_or(0);
    while rows.len() < to_len {
        let i = rows.len();
        rows.push(FeatureRow {
            coord_a: 0.0,
            coord_b: 0.0,
            index_point: i,
            index_stroke: last_stroke,
            index_global: matches!(mode, FeatureMode::Recurrent).then_some(i),
            spike_char: None,
        });
    }
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Loss (sum over unmasked points), unmasked count, and per-parameter
/// gradients for one padded sample.
fn sample_pass(
    model: &Model,
    prep: &Prepared,
    pad_len: usize,
    pad_c: usize,
    eps: f64,
    dropout_seed: u64,
) -> Result<(f64, usize, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let valid_len = prep.rows.len();
    let mut rows = prep.rows.clone();
    pad_rows(&mut rows, pad_len, model.feature_mode());
    let mut targets = prep.targets.clone();
    targets.resize(pad_len, 0);
    let mut mask = prep.mask.clone();
    mask.resize(pad_len, false);

    let (loss, count, bound) = match model {
        Model::Boundary(m) => {
            let (logits, bound) = m.forward_bound(&tape, &rows, valid_len, true, dropout_seed)?;
            let (loss, count) = smoothed_ce_sum(logits, &targets, eps, &mask)?;
            (loss, count, bound)
        }
        Model::CharQuery(m) => {
            let mut char_ids = prep.char_ids.clone();
            char_ids.resize(pad_c, Some(PAD_ID));
            let (logits, bound) = m.forward_bound(
                &tape,
                &rows,
                &char_ids,
                valid_len,
                prep.valid_c,
                true,
                dropout_seed,
            )?;
            // Slice away padded query columns so that the softmax normalizes
            // over the true character count.
            let logits = logits.slice(1, 0, prep.valid_c)?;
            let (loss, count) = smoothed_ce_sum(logits, &targets, eps, &mask)?;
            (loss, count, bound)
        }
    };
    tape.backward(loss)?;
    Ok((loss.item(), count, bound.collect_grads()))
}

/// Train a model, validating by corpus mIoU with EMA weights. On return the
/// model holds the best-validation EMA weights; when `out_dir` is given the
/// best checkpoint (`model.json`/`model.bin`) and a `metrics.jsonl` log are
/// written there.
pub fn train(
    model: &mut Model,
    train_samples: &[LabeledSample],
    val_samples: &[LabeledSample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Input("training and validation corpora must be non-empty".into()));
    }
    let prepared: Vec<Prepared> = train_samples
        .iter()
        .map(|s| prepare(s, model, vocab, cfg.use_spikes))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };

    let mut optim = OptimState::new(model.params());
    let mut ema = EmaState::new(model.params());
    let mut metrics = Vec::with_capacity(cfg.max_steps);
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut best_weights: Option<Vec<Vec<f64>>> = None;

    let n = prepared.len();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;

    for step in 1..=cfg.max_steps {
        let mut batch: Vec<usize> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE90C, epoch));
                order.shuffle(&mut rng);
                epoch += 1;
            }
            batch.push(order.pop().expect("refilled order"));
        }

        let pad_len = batch.iter().map(|&i| prepared[i].rows.len()).max().unwrap();
        let pad_c = batch.iter().map(|&i| prepared[i].char_ids.len()).max().unwrap();

        let passes: Vec<Result<(f64, usize, Vec<Vec<f64>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                sample_pass(
                    model,
                    &prepared[idx],
                    pad_len,
                    pad_c,
                    cfg.label_smoothing,
                    mix_seed(cfg.seed, step as u64, k as u64),
                )
            })
            .collect();

        let mut total_loss = 0.0;
        let mut total_count = 0usize;
        let mut grads: Vec<Vec<f64>> = model
            .params()
            .entries()
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        for pass in passes {
            let (loss, count, sample_grads) = pass?;
            total_loss += loss;
            total_count += count;
            for (acc, g) in grads.iter_mut().zip(&sample_grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        let scale = 1.0 / total_count as f64;
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        let loss = total_loss * scale;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged at step {step}; last good checkpoint is from step {best_step}"
            )));
        }

        let lr = lr_schedule(step, cfg);
        adamw_step(model.params_mut(), &grads, &mut optim, cfg, lr)?;
        ema.update(model.params(), cfg.ema_decay);

        let mut record = MetricsRecord {
            step,
            loss,
            lr,
            val_miou: None,
        };

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            ema.swap_in(model.params_mut());
            let report = {
                let segmenter = NeuralSegmenter {
                    model,
                    vocab,
                    use_spikes: cfg.use_spikes,
                };
                evaluate(val_samples, &segmenter)?
            };
            record.val_miou = Some(report.corpus_miou);
            if report.corpus_miou > best_val_miou {
                best_val_miou = report.corpus_miou;
                best_step = step;
                best_weights = Some(
                    model
                        .params()
                        .entries()
                        .iter()
                        .map(|e| e.data.clone())
                        .collect(),
                );
                if let Some(dir) = out_dir {
                    model.save(&dir.join("model"))?;
                }
            }
            ema.swap_out(model.params_mut());
        }

        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        metrics.push(record);
    }

    if let Some(weights) = best_weights {
        for (id, data) in weights.into_iter().enumerate() {
            model.params_mut().entry_mut(id).data = data;
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }

    Ok(TrainResult {
        best_val_miou,
        best_step,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn smoothed_ce_limits() {
        let tape = Tape::new();
        // Perfect prediction with huge logits and no smoothing: loss -> 0.
        let logits = tape
            .param(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0])
            .unwrap();
        let loss = smoothed_ce(logits, &[0, 1], 0.0, &[true, true]).unwrap();
        assert!(loss.item() < 1e-12, "{}", loss.item());

        // Uniform logits: loss = ln k regardless of smoothing.
        let uniform = tape.param(&[1, 4], vec![0.7; 4]).unwrap();
        for eps in [0.0, 0.1, 0.5] {
            let loss = smoothed_ce(uniform, &[2], eps, &[true]).unwrap();
            assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_ce_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (n, k) = (5, 3);
            let data: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mask: Vec<bool> = (0..n).map(|i| i != 2).collect();
            let eps = 0.1;

            let tape = Tape::new();
            let logits = tape.param(&[n, k], data.clone()).unwrap();
            let loss = smoothed_ce(logits, &targets, eps, &mask).unwrap().item();

            // Independent elementwise oracle.
            let mut expected = 0.0;
            let mut count = 0;
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let row = &data[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                for j in 0..k {
                    let q = if j == targets[i] { 1.0 - eps + eps / k as f64 } else { eps / k as f64 };
                    expected -= q * (row[j] - log_z);
                }
                count += 1;
            }
            expected /= count as f64;
            assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        }
    }

    #[test]
    fn smoothed_ce_all_masked_is_an_input_error() {
        let tape = Tape::new();
        let logits = tape.param(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            smoothed_ce(logits, &[0, 0], 0.1, &[false, false]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            peak_lr: 2e-3,
            warmup_steps: 4000,
            ..cfg()
        };
        assert!((lr_schedule(4000, &cfg) - 2e-3).abs() < 1e-18);
        assert!((lr_schedule(2000, &cfg) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(16_000, &cfg) - 1e-3).abs() < 1e-18);
        // Continuous at the warmup boundary and strictly decreasing after.
        let just_before = lr_schedule(3999, &cfg);
        let at = lr_schedule(4000, &cfg);
        assert!(just_before < at && at - just_before < 1e-6);
        let mut last = at;
        for step in 4001..4100 {
            let lr = lr_schedule(step, &cfg);
            assert!(lr < last);
            last = lr;
        }
    }

    fn tiny_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![1.0]);
        store
    }

    #[test]
    fn adamw_zero_grads_without_decay_keep_parameters() {
        let mut store = tiny_store();
        let mut state = OptimState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut store, &[vec![0.0]], &mut state, &cfg, 0.1).unwrap();
        assert_eq!(store.entry(0).data[0], 1.0);
    }

    #[test]
    fn adamw_first_step_hand_computed() {
        let mut store = tiny_store();
        let mut state = OptimState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        adamw_step(&mut store, &[vec![1.0]], &mut state, &cfg, 0.1).unwrap();
        // Bias-corrected m̂/√v̂ = 1 on the first step.
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + ADAM_EPS);
        assert!((store.entry(0).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_is_geometric_under_zero_grads() {
        let mut store = tiny_store();
        let mut state = OptimState::new(&store);
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..cfg()
        };
        let lr = 0.1;
        for step in 1..=5 {
            adamw_step(&mut store, &[vec![0.0]], &mut state, &cfg, lr).unwrap();
            let expected = (1.0 - lr * cfg.weight_decay).powi(step);
            assert!((store.entry(0).data[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_nan_grad_names_the_parameter() {
        let mut store = tiny_store();
        let mut state = OptimState::new(&store);
        let err = adamw_step(&mut store, &[vec![f64::NAN]], &mut state, &cfg(), 0.1).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn ema_zero_decay_copies_params() {
        let store = tiny_store();
        let mut ema = EmaState::new(&store);
        ema.update(&store, 0.0);
        assert_eq!(ema.shadow()[0], vec![1.0]);
    }

    #[test]
    fn ema_closed_form_for_constant_params() {
        let store = tiny_store(); // param = 1.0
        let mut ema = EmaState::new(&store);
        ema.shadow = vec![vec![5.0]];
        let decay = 0.9;
        for n in 1..=10 {
            ema.update(&store, decay);
            let expected = decay.powi(n) * 5.0 + (1.0 - decay.powi(n)) * 1.0;
            assert!((ema.shadow()[0][0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_swap_round_trip_is_bit_exact() {
        let mut store = tiny_store();
        let mut ema = EmaState::new(&store);
        ema.update(&store, 0.5);
        store.entry_mut(0).data[0] = 0.123456789;
        let before = store.entry(0).data.clone();
        ema.swap_in(&mut store);
        assert_eq!(store.entry(0).data[0], 1.0); // shadow value
        ema.swap_out(&mut store);
        assert_eq!(store.entry(0).data, before);
    }
}
