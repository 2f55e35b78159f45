//! Rank-based retrieval evaluation: embedding store construction,
//! R@K / SumR and per-moment-ratio group reporting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_sentence, encode_video_full, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{clip_similarity, pair_similarity, video_similarity, SimilarityWeights};
use crate::params::{ParamSet, TapeParams};
use crate::synthetic::{group_queries_by_mv, Corpus, SyntheticVideo};
use crate::tensor::{Tape, Tensor};
use crate::train::Checkpoint;

const ENCODE_CHUNKS: usize = 16;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];

/// Offline per-video embeddings: the clip matrix (`m_c x d`), the
/// pooled video embedding, and optionally the contextual frame rows the
/// explicit-clip baseline scans. Immutable once built.
#[derive(Clone, Debug)]
pub struct StoreEntry {
    pub video_id: String,
    pub clips: Tensor,
    pub video: Vec<f64>,
    pub context_frames: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    pub entries: Vec<StoreEntry>,
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Encodes every video once, in parallel chunks with deterministic
/// ordering. `keep_context` retains the video-branch frame rows.
pub fn build_embedding_store(
    params: &ParamSet,
    model: &ModelConfig,
    videos: &[SyntheticVideo],
    keep_context: bool,
) -> Result<EmbeddingStore> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("cannot build a store from an empty corpus".into()));
    }
    let size = videos.len().div_ceil(ENCODE_CHUNKS);
    let chunks: Vec<Result<Vec<StoreEntry>>> = videos
        .par_chunks(size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|video| {
                    let tape = Tape::new();
                    let bound = TapeParams::new(&tape, params);
                    let (clips, pooled, frames) = encode_video_full(&bound, &video.frames, model)?;
                    Ok(StoreEntry {
                        video_id: video.id.clone(),
                        clips: clips.value(),
                        video: pooled.value().data().to_vec(),
                        context_frames: keep_context.then(|| frames.value()),
                    })
                })
                .collect()
        })
        .collect();
    let mut entries = Vec::with_capacity(videos.len());
    for chunk in chunks {
        entries.extend(chunk?);
    }
    Ok(EmbeddingStore { entries })
}

/// Encodes all queries to sentence embeddings, in corpus order.
pub fn encode_queries(params: &ParamSet, model: &ModelConfig, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    let size = corpus.queries.len().div_ceil(ENCODE_CHUNKS);
    let chunks: Vec<Result<Vec<Vec<f64>>>> = corpus
        .queries
        .par_chunks(size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|query| {
                    let tape = Tape::new();
                    let bound = TapeParams::new(&tape, params);
                    let q = encode_sentence(&bound, &query.words, model)?;
                    Ok(q.value().data().to_vec())
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(corpus.queries.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Fused similarity of one query against every store entry.
pub fn score_query(q: &[f64], store: &EmbeddingStore, weights: &SimilarityWeights) -> Result<Vec<f64>> {
    store
        .entries
        .iter()
        .map(|entry| {
            let s_v = video_similarity(q, &entry.video)?;
            let s_c = clip_similarity(q, &entry.clips)?;
            Ok(pair_similarity(s_v, s_c, weights))
        })
        .collect()
}

/// Indices sorted by descending score; ties broken by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// Percentage of queries whose positive video appears in the top `k`
/// of its ranking list. Every ground-truth query must have a complete
/// ranking.
pub fn recall_at_k(
    rankings: &BTreeMap<String, Vec<String>>,
    ground_truth: &BTreeMap<String, String>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("recall requires k >= 1".into()));
    }
    if ground_truth.is_empty() {
        return Err(Error::InvalidArgument("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (query, positive) in ground_truth {
        let ranking = rankings
            .get(query)
            .ok_or_else(|| Error::MissingRanking(query.clone()))?;
        let position = ranking
            .iter()
            .position(|v| v == positive)
            .ok_or_else(|| Error::MissingRanking(format!("{query} (video {positive} absent)")))?;
        if position < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / ground_truth.len() as f64)
}

/// R@K for the standard four cutoffs plus their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r100: f64,
    pub sum_r: f64,
}

impl Recalls {
    fn from_positive_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let frac = |k: usize| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n;
        let (r1, r5, r10, r100) = (frac(1), frac(5), frac(10), frac(100));
        Self {
            r1,
            r5,
            r10,
            r100,
            sum_r: r1 + r5 + r10 + r100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub query_count: usize,
    pub recalls: Recalls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recalls: Recalls,
    pub query_count: usize,
    pub database_size: usize,
    pub groups: Vec<GroupMetrics>,
    pub provenance: Provenance,
}

impl MetricReport {
    /// One row per (group, metric), `all` first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,metric,value\n");
        let mut emit = |group: &str, r: &Recalls| {
            out.push_str(&format!("{group},R@1,{}\n", r.r1));
            out.push_str(&format!("{group},R@5,{}\n", r.r5));
            out.push_str(&format!("{group},R@10,{}\n", r.r10));
            out.push_str(&format!("{group},R@100,{}\n", r.r100));
            out.push_str(&format!("{group},SumR,{}\n", r.sum_r));
        };
        emit("all", &self.recalls);
        for g in &self.groups {
            emit(&g.label, &g.recalls);
        }
        out
    }
}

/// Scores every query against the full store, ranks with deterministic
/// tie-breaking and reports R@K, SumR and per-group SumR.
pub fn evaluate(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    weights: &SimilarityWeights,
    boundaries: &[f64],
) -> Result<MetricReport> {
    weights.validate()?;
    if corpus.videos.is_empty() || corpus.queries.is_empty() {
        return Err(Error::InvalidArgument("evaluation requires a non-empty corpus".into()));
    }
    if corpus.config.d_in != checkpoint.model.dims.d_in {
        return Err(Error::DimMismatch {
            expected: checkpoint.model.dims.d_in,
            found: corpus.config.d_in,
        });
    }

    let store = build_embedding_store(&checkpoint.params, &checkpoint.model, &corpus.videos, false)?;
    let queries = encode_queries(&checkpoint.params, &checkpoint.model, corpus)?;

    // Full ranked id lists per query feed the recall oracle contract.
    let mut rankings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut ground_truth: BTreeMap<String, String> = BTreeMap::new();
    let mut positive_ranks = Vec::with_capacity(corpus.queries.len());
    for (qi, query) in corpus.queries.iter().enumerate() {
        let scores = score_query(&queries[qi], &store, weights)?;
        let order = rank_descending(&scores);
        let rank = order
            .iter()
            .position(|&v| v == query.video_index)
            .expect("positive video is in the database");
        positive_ranks.push(rank);
        rankings.insert(
            query.id.clone(),
            order.iter().map(|&v| store.entries[v].video_id.clone()).collect(),
        );
        ground_truth.insert(query.id.clone(), query.video_id.clone());
    }

    let mut recalls = Recalls::default();
    for (slot, k) in [0, 1, 2, 3].into_iter().zip(RECALL_KS) {
        let value = recall_at_k(&rankings, &ground_truth, k)?;
        match slot {
            0 => recalls.r1 = value,
            1 => recalls.r5 = value,
            2 => recalls.r10 = value,
            _ => recalls.r100 = value,
        }
    }
    recalls.sum_r = recalls.r1 + recalls.r5 + recalls.r10 + recalls.r100;

    let groups = group_queries_by_mv(corpus, boundaries)?
        .into_iter()
        .map(|g| {
            let ranks: Vec<usize> = g.query_indices.iter().map(|&qi| positive_ranks[qi]).collect();
            let recalls = if ranks.is_empty() {
                Recalls::default()
            } else {
                Recalls::from_positive_ranks(&ranks)
            };
            GroupMetrics {
                label: g.label(),
                lo: g.lo,
                hi: g.hi,
                query_count: g.query_indices.len(),
                recalls,
            }
        })
        .collect();

    let dataset_fingerprint =
        crate::io::config_fingerprint(&serde_json::to_value(&corpus.config)?);
    Ok(MetricReport {
        recalls,
        query_count: corpus.queries.len(),
        database_size: corpus.videos.len(),
        groups,
        provenance: Provenance {
            config_fingerprint: checkpoint.config_fingerprint.clone(),
            dataset_fingerprint,
            seed: corpus.config.seed,
        },
    })
}
