//! Mini-batch training with the random-then-hardest negative schedule,
//! adaptive-moment updates, gradient clipping and loss tracing.
//!
//! Per batch, encoders run on one tape per item (texts and unique
//! videos) so items can be processed in parallel; the batch loss is a
//! separate graph over the resulting embeddings. Backward runs on the
//! loss graph first, then each item tape is seeded with its embedding
//! cotangents. Per-item gradients are reduced in a fixed order, so
//! results are bit-identical regardless of worker count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_sentence, encode_video, init_model_params, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{self, config_fingerprint};
use crate::objectives::{batch_loss_graph, BatchRelevance, LossComponents, LossConfig, SimilarityWeights};
use crate::params::{GradSet, ParamSet, TapeParams};
use crate::synthetic::Corpus;
use crate::tensor::{Tape, Tensor};

/// Fixed number of gradient-reduction chunks. A constant (rather than
/// the worker count) keeps summation order machine-independent.
const GRAD_CHUNKS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup epochs; 0 keeps the rate constant throughout.
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; non-positive disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub weights: SimilarityWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 3e-4,
            warmup_epochs: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 1,
            loss: LossConfig::default(),
            weights: SimilarityWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        self.loss.validate()?;
        self.weights.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        config_fingerprint(&value)
    }
}

/// A trained (or freshly initialized) model snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub model: ModelConfig,
    pub epoch: usize,
    pub config_fingerprint: String,
    pub version_tag: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "config_fingerprint": self.config_fingerprint,
            "version_tag": self.version_tag,
            "model": serde_json::to_value(&self.model)?,
        });
        let records: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|(path, tensor)| (path.as_str(), tensor))
            .collect();
        io::write_container(path, &io::CHECKPOINT_MAGIC, &meta, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, records) = io::read_container(path, &io::CHECKPOINT_MAGIC)?;
        let model: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    reason: "missing model config in checkpoint meta".into(),
                })?,
        )?;
        let mut params = ParamSet::new();
        for (record_path, tensor) in records {
            params.insert(record_path, tensor);
        }
        Ok(Self {
            params,
            model,
            epoch: meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            config_fingerprint: meta
                .get("config_fingerprint")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            version_tag: meta
                .get("version_tag")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
        })
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub trip_clip: f64,
    pub trip_video: f64,
    pub nce_clip: f64,
    pub nce_video: f64,
    pub diverse: f64,
    pub hardest_negatives: bool,
}

pub fn loss_trace_csv(rows: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,total,trip_clip,trip_video,nce_clip,nce_video,diverse,hardest\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.total, r.trip_clip, r.trip_video, r.nce_clip, r.nce_video, r.diverse,
            r.hardest_negatives
        ));
    }
    out
}

struct EncodedItem {
    tape: Tape,
    bindings: Vec<(String, usize)>,
    /// (node id, value) of each output embedding.
    outputs: Vec<(usize, Tensor)>,
}

fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let size = n.div_ceil(chunks);
    (0..n.div_ceil(size))
        .map(|c| c * size..((c + 1) * size).min(n))
        .collect()
}

fn encode_text_item(params: &ParamSet, cfg: &ModelConfig, words: &Tensor) -> Result<EncodedItem> {
    let tape = Tape::new();
    let bound = TapeParams::new(&tape, params);
    let q = encode_sentence(&bound, words, cfg)?;
    let outputs = vec![(q.id(), q.value())];
    let bindings = bound.binding_ids();
    Ok(EncodedItem { tape, bindings, outputs })
}

fn encode_video_item(params: &ParamSet, cfg: &ModelConfig, frames: &Tensor) -> Result<EncodedItem> {
    let tape = Tape::new();
    let bound = TapeParams::new(&tape, params);
    let (clips, video) = encode_video(&bound, frames, cfg)?;
    let outputs = vec![(clips.id(), clips.value()), (video.id(), video.value())];
    let bindings = bound.binding_ids();
    Ok(EncodedItem { tape, bindings, outputs })
}

/// Encodes items in parallel chunks, preserving order.
fn encode_all<'a, T: Sync>(
    params: &ParamSet,
    cfg: &ModelConfig,
    inputs: &'a [T],
    encode: impl Fn(&ParamSet, &ModelConfig, &'a T) -> Result<EncodedItem> + Sync,
) -> Result<Vec<EncodedItem>> {
    let ranges = chunk_ranges(inputs.len(), GRAD_CHUNKS);
    let chunks: Vec<Result<Vec<EncodedItem>>> = ranges
        .into_par_iter()
        .map(|range| range.map(|i| encode(params, cfg, &inputs[i])).collect())
        .collect();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Backpropagates cotangents through each item tape and reduces the
/// per-parameter gradients in fixed chunk order.
fn accumulate_item_gradients(
    items: &[EncodedItem],
    cotangents: &[Vec<Tensor>],
) -> Result<GradSet> {
    let ranges = chunk_ranges(items.len(), GRAD_CHUNKS);
    let partials: Vec<Result<GradSet>> = ranges
        .into_par_iter()
        .map(|range| {
            let mut acc = GradSet::new();
            for i in range {
                let item = &items[i];
                let seeds: Vec<(usize, Tensor)> = item
                    .outputs
                    .iter()
                    .zip(&cotangents[i])
                    .map(|((id, _), grad)| (*id, grad.clone()))
                    .collect();
                let grads = item.tape.backward_seeded_ids(&seeds)?;
                for (path, id) in &item.bindings {
                    let g = grads.get_id(*id);
                    match acc.get(path) {
                        Some(_) => acc.accumulate(path, &g)?,
                        None => acc.insert(path.clone(), g),
                    }
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = GradSet::new();
    for partial in partials {
        total.merge(&partial?)?;
    }
    Ok(total)
}

struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (path, value) in params.iter_mut() {
            let Some(grad) = grads.get(path) else { continue };
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()[0], value.shape()[1]));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()[0], value.shape()[1]));
            let pd = value.data_mut();
            for ((p, g), (mi, vi)) in pd
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Trains from a fresh initialization, returning the final checkpoint
/// and the per-epoch loss trace. Deterministic under a fixed config.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochTrace>)> {
    cfg.validate()?;
    if corpus.videos.len() < 2 {
        return Err(Error::InvalidArgument(
            "training requires at least 2 videos".into(),
        ));
    }
    if corpus.config.d_in != cfg.model.dims.d_in {
        return Err(Error::DimMismatch {
            expected: cfg.model.dims.d_in,
            found: corpus.config.d_in,
        });
    }
    if corpus.config.d_word != cfg.model.dims.d_word {
        return Err(Error::DimMismatch {
            expected: cfg.model.dims.d_word,
            found: corpus.config.d_word,
        });
    }

    let mut params = init_model_params(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = if cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs {
            cfg.learning_rate * (epoch + 1) as f64 / cfg.warmup_epochs as f64
        } else {
            cfg.learning_rate
        };

        let mut order: Vec<usize> = (0..corpus.queries.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_components = LossComponents::default();
        let mut epoch_total = 0.0;
        let mut batches = 0usize;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Unique batch videos in first-occurrence order.
            let mut video_indices = Vec::new();
            let mut position = BTreeMap::new();
            let mut positives = Vec::with_capacity(batch.len());
            for &qi in batch {
                let vi = corpus.queries[qi].video_index;
                let pos = *position.entry(vi).or_insert_with(|| {
                    video_indices.push(vi);
                    video_indices.len() - 1
                });
                positives.push(pos);
            }
            if video_indices.len() < 2 {
                continue; // cannot form negatives from a single video
            }
            let rel = BatchRelevance::new(positives, video_indices.len())?;

            let words: Vec<&Tensor> = batch.iter().map(|&qi| &corpus.queries[qi].words).collect();
            let frames: Vec<&Tensor> = video_indices
                .iter()
                .map(|&vi| &corpus.videos[vi].frames)
                .collect();

            let text_items = encode_all(&params, &cfg.model, &words, |p, c, w| {
                encode_text_item(p, c, w)
            })?;
            let video_items = encode_all(&params, &cfg.model, &frames, |p, c, f| {
                encode_video_item(p, c, f)
            })?;

            // Loss graph over embedding leaves.
            let tape = Tape::new();
            let text_vars: Vec<_> = text_items
                .iter()
                .map(|item| tape.leaf(item.outputs[0].1.clone(), true))
                .collect();
            let clip_vars: Vec<_> = video_items
                .iter()
                .map(|item| tape.leaf(item.outputs[0].1.clone(), true))
                .collect();
            let video_vars: Vec<_> = video_items
                .iter()
                .map(|item| tape.leaf(item.outputs[1].1.clone(), true))
                .collect();

            let loss = batch_loss_graph(
                &tape,
                &text_vars,
                &clip_vars,
                &video_vars,
                &rel,
                &cfg.weights,
                &cfg.loss,
                epoch,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch: batch_idx },
                other => other,
            })?;
            let total_value = loss.total.scalar_value()?;
            if !total_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }

            let grads = loss.total.backward()?;
            let text_cots: Vec<Vec<Tensor>> = text_vars
                .iter()
                .map(|&v| vec![grads.get(v)])
                .collect();
            let video_cots: Vec<Vec<Tensor>> = clip_vars
                .iter()
                .zip(&video_vars)
                .map(|(&c, &v)| vec![grads.get(c), grads.get(v)])
                .collect();
            let components = loss.components()?;
            drop(grads);

            let mut batch_grads = accumulate_item_gradients(&text_items, &text_cots)?;
            batch_grads.merge(&accumulate_item_gradients(&video_items, &video_cots)?)?;

            if cfg.grad_clip > 0.0 {
                let norm = batch_grads.global_norm();
                if norm > cfg.grad_clip {
                    batch_grads.scale(cfg.grad_clip / norm);
                }
            }
            adam.step(&mut params, &batch_grads, lr, cfg);

            epoch_total += total_value;
            epoch_components.trip_clip += components.trip_clip;
            epoch_components.trip_video += components.trip_video;
            epoch_components.nce_clip += components.nce_clip;
            epoch_components.nce_video += components.nce_video;
            epoch_components.diverse += components.diverse;
            batches += 1;
        }

        let n = batches.max(1) as f64;
        trace.push(EpochTrace {
            epoch,
            total: epoch_total / n,
            trip_clip: epoch_components.trip_clip / n,
            trip_video: epoch_components.trip_video / n,
            nce_clip: epoch_components.nce_clip / n,
            nce_video: epoch_components.nce_video / n,
            diverse: epoch_components.diverse / n,
            hardest_negatives: epoch >= cfg.loss.switch_epoch,
        });
    }

    let checkpoint = Checkpoint {
        params,
        model: cfg.model.clone(),
        epoch: cfg.epochs,
        config_fingerprint: cfg.fingerprint(),
        version_tag: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok((checkpoint, trace))
}

/// A checkpoint with freshly initialized weights; the untrained
/// baseline for efficacy comparisons.
pub fn untrained_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    Ok(Checkpoint {
        params: init_model_params(&cfg.model, cfg.seed)?,
        model: cfg.model.clone(),
        epoch: 0,
        config_fingerprint: cfg.fingerprint(),
        version_tag: env!("CARGO_PKG_VERSION").to_string(),
    })
}
