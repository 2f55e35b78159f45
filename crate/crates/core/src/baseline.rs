//! Scanning-based explicit clip construction and the storage/latency
//! benchmark comparing it against the implicit (fixed-length) store.
//!
//! The explicit store materializes every contiguous span of the
//! `m_c`-length downsampled contextual frame sequence, mean-pooled:
//! `m(m+1)/2` clips per video. Both stores are built offline and score
//! queries with the same fused similarity; only store shape differs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::resample_rows;
use crate::error::{Error, Result};
use crate::eval::{build_embedding_store, encode_queries, rank_descending, EmbeddingStore};
use crate::objectives::SimilarityWeights;
use crate::synthetic::Corpus;
use crate::tensor::Tensor;
use crate::train::Checkpoint;

pub const WARMUP_TRIALS: usize = 10;

/// All mean-pooled contiguous spans of `features`, ordered by span
/// length ascending then start ascending. Spans are half-open row
/// ranges `(start, end)`.
pub fn sliding_window_clips(features: &Tensor) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let (m, d) = features.dims2()?;
    // Column-wise prefix sums; prefix[r] holds the sum of rows 0..r.
    let mut prefix = vec![0.0; (m + 1) * d];
    for r in 0..m {
        let row = features.row_slice(r);
        for c in 0..d {
            prefix[(r + 1) * d + c] = prefix[r * d + c] + row[c];
        }
    }

    let n_clips = m * (m + 1) / 2;
    let mut clips = Tensor::zeros(n_clips, d);
    let mut spans = Vec::with_capacity(n_clips);
    let mut out_row = 0usize;
    for len in 1..=m {
        for start in 0..=(m - len) {
            let end = start + len;
            let dst = &mut clips.data_mut()[out_row * d..(out_row + 1) * d];
            for c in 0..d {
                dst[c] = (prefix[end * d + c] - prefix[start * d + c]) / len as f64;
            }
            spans.push((start, end));
            out_row += 1;
        }
    }
    Ok((clips, spans))
}

/// Max cosine similarity between `q` and any row of `clips`.
pub fn max_sim_scan(q: &[f64], clips: &Tensor) -> Result<f64> {
    let (rows, cols) = clips.dims2()?;
    if q.len() != cols {
        return Err(Error::DimMismatch {
            expected: cols,
            found: q.len(),
        });
    }
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut best = f64::NEG_INFINITY;
    for r in 0..rows {
        let row = clips.row_slice(r);
        let mut dot = 0.0;
        let mut n2 = 0.0;
        for (x, y) in q.iter().zip(row) {
            dot += x * y;
            n2 += y * y;
        }
        if n2 == 0.0 {
            continue;
        }
        let cos = dot / (qn * n2.sqrt());
        if cos > best {
            best = cos;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::ZeroNorm);
    }
    Ok(best)
}

/// One store scaled to one database size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub database_size: usize,
    pub mean_latency_ms: f64,
    /// Clip payload bytes (floats x 8); the quantity the two stores are
    /// compared on.
    pub store_bytes: usize,
    pub clip_bytes: usize,
    pub video_bytes: usize,
    pub metadata_bytes: usize,
    pub clips_per_video: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub store: String,
    pub trials: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "store,database_size,mean_latency_ms,store_bytes,clip_bytes,video_bytes,metadata_bytes\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.store,
                r.database_size,
                r.mean_latency_ms,
                r.store_bytes,
                r.clip_bytes,
                r.video_bytes,
                r.metadata_bytes
            ));
        }
        out
    }
}

/// Row-normalized copy (zero rows pass through unchanged).
fn normalize_rows_owned(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = t.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

struct ScanStore {
    /// Per video: row-normalized clip matrix.
    clips: Vec<Tensor>,
    /// Per video: normalized video embedding.
    videos: Vec<Vec<f64>>,
    clip_bytes: usize,
    video_bytes: usize,
    metadata_bytes: usize,
    clips_per_video: usize,
}

impl ScanStore {
    fn truncated(&self, n: usize) -> ScanStoreView<'_> {
        ScanStoreView {
            clips: &self.clips[..n],
            videos: &self.videos[..n],
        }
    }

    fn bytes_at(&self, n: usize) -> (usize, usize, usize) {
        let scale = |b: usize| b * n / self.clips.len();
        (
            scale(self.clip_bytes),
            scale(self.video_bytes),
            scale(self.metadata_bytes),
        )
    }
}

struct ScanStoreView<'a> {
    clips: &'a [Tensor],
    videos: &'a [Vec<f64>],
}

/// Timed region: normalize the query, score it against every video
/// (video cosine + max clip cosine, fused), then rank.
fn scan_and_rank(q: &[f64], store: &ScanStoreView<'_>, weights: &SimilarityWeights) -> Vec<usize> {
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q_hat: Vec<f64> = q.iter().map(|v| v / qn).collect();
    let mut scores = Vec::with_capacity(store.clips.len());
    for (clips, video) in store.clips.iter().zip(store.videos) {
        let s_v: f64 = q_hat.iter().zip(video).map(|(a, b)| a * b).sum();
        let (rows, cols) = (clips.shape()[0], clips.shape()[1]);
        let mut s_c = f64::NEG_INFINITY;
        for r in 0..rows {
            let row = &clips.data()[r * cols..(r + 1) * cols];
            let dot: f64 = q_hat.iter().zip(row).map(|(a, b)| a * b).sum();
            if dot > s_c {
                s_c = dot;
            }
        }
        scores.push(weights.alpha_v * s_v + weights.alpha_c * s_c);
    }
    rank_descending(&scores)
}

fn implicit_scan_store(store: &EmbeddingStore) -> ScanStore {
    let mut clip_bytes = 0;
    let mut video_bytes = 0;
    let clips: Vec<Tensor> = store
        .entries
        .iter()
        .map(|e| {
            clip_bytes += e.clips.numel() * 8;
            video_bytes += e.video.len() * 8;
            normalize_rows_owned(&e.clips)
        })
        .collect();
    let videos = store
        .entries
        .iter()
        .map(|e| {
            let n = e.video.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.video.iter().map(|v| if n > 0.0 { v / n } else { *v }).collect()
        })
        .collect();
    let clips_per_video = clips.first().map_or(0, |c| c.shape()[0]);
    ScanStore {
        clips,
        videos,
        clip_bytes,
        video_bytes,
        metadata_bytes: 0,
        clips_per_video,
    }
}

fn explicit_scan_store(store: &EmbeddingStore, m_c: usize) -> Result<ScanStore> {
    let mut clip_bytes = 0;
    let mut video_bytes = 0;
    let mut metadata_bytes = 0;
    let mut clips = Vec::with_capacity(store.entries.len());
    let mut videos = Vec::with_capacity(store.entries.len());
    for entry in &store.entries {
        let context = entry.context_frames.as_ref().ok_or_else(|| {
            Error::InvalidArgument("explicit store needs contextual frame embeddings".into())
        })?;
        let base = resample_rows(context, m_c)?;
        let (span_clips, spans) = sliding_window_clips(&base)?;
        clip_bytes += span_clips.numel() * 8;
        metadata_bytes += spans.len() * 2 * std::mem::size_of::<usize>();
        video_bytes += entry.video.len() * 8;
        clips.push(normalize_rows_owned(&span_clips));
        let n = entry.video.iter().map(|v| v * v).sum::<f64>().sqrt();
        videos.push(
            entry
                .video
                .iter()
                .map(|v| if n > 0.0 { v / n } else { *v })
                .collect(),
        );
    }
    let clips_per_video = clips.first().map_or(0, |c| c.shape()[0]);
    Ok(ScanStore {
        clips,
        videos,
        clip_bytes,
        video_bytes,
        metadata_bytes,
        clips_per_video,
    })
}

fn time_store(
    store: &ScanStore,
    queries: &[Vec<f64>],
    weights: &SimilarityWeights,
    sizes: &[usize],
    trials: usize,
    label: &str,
) -> Result<BenchReport> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let view = store.truncated(size);
        let mut total = std::time::Duration::ZERO;
        for trial in 0..(WARMUP_TRIALS + trials) {
            let q = &queries[trial % queries.len()];
            let start = Instant::now();
            let ranking = scan_and_rank(q, &view, weights);
            let elapsed = start.elapsed();
            std::hint::black_box(ranking);
            if trial >= WARMUP_TRIALS {
                total += elapsed;
            }
        }
        if total < std::time::Duration::from_micros(1) {
            return Err(Error::TimerResolution { trials });
        }
        let (clip_bytes, video_bytes, metadata_bytes) = store.bytes_at(size);
        rows.push(BenchRow {
            database_size: size,
            mean_latency_ms: total.as_secs_f64() * 1e3 / trials as f64,
            store_bytes: clip_bytes,
            clip_bytes,
            video_bytes,
            metadata_bytes,
            clips_per_video: store.clips_per_video,
        });
    }
    Ok(BenchReport {
        store: label.to_string(),
        trials,
        warmup: WARMUP_TRIALS,
        rows,
    })
}

/// Builds both stores offline (excluded from timing), then measures
/// mean single-query scoring + ranking latency at each database size.
/// Returns the (implicit, explicit) report pair.
pub fn benchmark(
    corpus: &Corpus,
    checkpoint: &Checkpoint,
    sizes: &[usize],
    trials: usize,
) -> Result<(BenchReport, BenchReport)> {
    if trials < 10 {
        return Err(Error::InvalidArgument(format!(
            "benchmark requires at least 10 trials, got {trials}"
        )));
    }
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no database sizes given".into()));
    }
    let max_size = *sizes.iter().max().expect("non-empty");
    if max_size == 0 || max_size > corpus.videos.len() {
        return Err(Error::InvalidArgument(format!(
            "database sizes must lie in 1..={}, got {max_size}",
            corpus.videos.len()
        )));
    }
    if corpus.queries.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one query".into()));
    }

    let weights = SimilarityWeights::default();
    let store = build_embedding_store(
        &checkpoint.params,
        &checkpoint.model,
        &corpus.videos[..max_size],
        true,
    )?;
    let queries = encode_queries(&checkpoint.params, &checkpoint.model, corpus)?;

    let implicit = implicit_scan_store(&store);
    let explicit = explicit_scan_store(&store, checkpoint.model.dims.m_c)?;

    let implicit_report = time_store(&implicit, &queries, &weights, sizes, trials, "implicit")?;
    let explicit_report = time_store(&explicit, &queries, &weights, sizes, trials, "explicit")?;
    Ok((implicit_report, explicit_report))
}
