//! Synthetic untrimmed-video corpora with planted moments.
//!
//! Each video is a frame-feature sequence holding a few non-overlapping
//! moments; each moment carries a latent concept vector. Frames inside
//! a moment are the concept plus noise, background frames are pure
//! noise, and query word features are noisy affine views of the
//! concept. Moment boundaries are kept out of the model's reach and
//! surface only through ground truth used by evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::tensor::Tensor;

/// Knobs of the generator; generation is a pure function of this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub video_count: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub moments_min: usize,
    pub moments_max: usize,
    pub queries_per_moment: usize,
    pub d_in: usize,
    pub d_word: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            video_count: 200,
            frames_min: 48,
            frames_max: 96,
            moments_min: 2,
            moments_max: 4,
            queries_per_moment: 1,
            d_in: 32,
            d_word: 32,
            noise: 0.1,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.video_count == 0
            || self.frames_min == 0
            || self.moments_min == 0
            || self.queries_per_moment == 0
            || self.d_in == 0
            || self.d_word == 0
        {
            return Err(Error::InvalidArgument(
                "corpus counts and dimensions must be at least 1".into(),
            ));
        }
        if self.frames_min > self.frames_max || self.moments_min > self.moments_max {
            return Err(Error::InvalidArgument(
                "corpus ranges must satisfy min <= max".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise level must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A planted moment: half-open frame span plus its latent concept.
/// The concept is a generation-time artifact; it is not persisted.
#[derive(Clone, Debug)]
pub struct SyntheticMoment {
    pub start: usize,
    pub end: usize,
    pub concept: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub id: String,
    pub frames: Tensor,
    pub moments: Vec<SyntheticMoment>,
}

#[derive(Clone, Debug)]
pub struct SyntheticQuery {
    pub id: String,
    pub video_index: usize,
    pub video_id: String,
    pub moment_index: usize,
    pub words: Tensor,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub videos: Vec<SyntheticVideo>,
    pub queries: Vec<SyntheticQuery>,
}

impl Corpus {
    /// Ground truth of a query: (video id, start, end).
    pub fn ground_truth(&self, query: &SyntheticQuery) -> Result<(usize, usize, usize)> {
        let video = &self.videos[query.video_index];
        let moment = video.moments.get(query.moment_index).ok_or_else(|| {
            Error::InvalidArgument(format!("query `{}` has no ground truth", query.id))
        })?;
        Ok((query.video_index, moment.start, moment.end))
    }
}

fn video_id(index: usize) -> String {
    format!("v{index:05}")
}

fn query_id(index: usize) -> String {
    format!("q{index:06}")
}

/// Generates a corpus; bit-identical for identical configs.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let mut videos = Vec::with_capacity(config.video_count);
    let mut queries = Vec::new();

    for vi in 0..config.video_count {
        let id = video_id(vi);
        let frames_len = rng.gen_range(config.frames_min..=config.frames_max);
        let n_moments = rng.gen_range(config.moments_min..=config.moments_max);
        if 2 * n_moments > frames_len {
            return Err(Error::InfeasiblePacking {
                video: id,
                moments: n_moments,
                frames: frames_len,
            });
        }

        // Moment lengths of at least 2 frames, capped so they always fit.
        let max_len = (frames_len / (2 * n_moments)).max(2);
        let lengths: Vec<usize> = (0..n_moments)
            .map(|_| rng.gen_range(2..=max_len))
            .collect();
        let used: usize = lengths.iter().sum();

        // Distribute the slack into gaps before each moment.
        let mut remaining = frames_len - used;
        let mut moments = Vec::with_capacity(n_moments);
        let mut cursor = 0usize;
        for &len in &lengths {
            let gap = rng.gen_range(0..=remaining);
            remaining -= gap;
            let start = cursor + gap;
            let concept: Vec<f64> = (0..config.d_in).map(|_| unit.sample(&mut rng)).collect();
            moments.push(SyntheticMoment {
                start,
                end: start + len,
                concept,
            });
            cursor = start + len;
        }

        // Frames: concept inside a moment, nothing outside, plus noise.
        let mut frames = Tensor::zeros(frames_len, config.d_in);
        for f in 0..frames_len {
            let concept = moments
                .iter()
                .find(|m| f >= m.start && f < m.end)
                .map(|m| m.concept.as_slice());
            let row = &mut frames.data_mut()[f * config.d_in..(f + 1) * config.d_in];
            for (k, v) in row.iter_mut().enumerate() {
                let base = concept.map_or(0.0, |c| c[k]);
                *v = base + config.noise * unit.sample(&mut rng);
            }
        }

        // Queries: a handful of noisy affine views of the moment concept.
        for mi in 0..n_moments {
            let concept = moments[mi].concept.clone();
            for _ in 0..config.queries_per_moment {
                let n_words = rng.gen_range(3..=8);
                let mut words = Tensor::zeros(n_words, config.d_word);
                let proj_scale = 1.0 / (config.d_in as f64).sqrt();
                for w in 0..n_words {
                    let row = &mut words.data_mut()[w * config.d_word..(w + 1) * config.d_word];
                    for v in row.iter_mut() {
                        let mut acc = 0.0;
                        for &c in &concept {
                            acc += unit.sample(&mut rng) * c;
                        }
                        *v = acc * proj_scale
                            + 0.1 * unit.sample(&mut rng)
                            + config.noise * unit.sample(&mut rng);
                    }
                }
                queries.push(SyntheticQuery {
                    id: query_id(queries.len()),
                    video_index: vi,
                    video_id: id.clone(),
                    moment_index: mi,
                    words,
                });
            }
        }

        videos.push(SyntheticVideo { id, frames, moments });
    }

    Ok(Corpus {
        config: config.clone(),
        videos,
        queries,
    })
}

/// Moment length divided by video length, in (0, 1].
pub fn moment_to_video_ratio(query: &SyntheticQuery, corpus: &Corpus) -> Result<f64> {
    let (vi, start, end) = corpus.ground_truth(query)?;
    let len = corpus.videos[vi].frames.shape()[0];
    Ok((end - start) as f64 / len as f64)
}

/// One moment-to-video-ratio group: the half-open interval `(lo, hi]`.
#[derive(Clone, Debug)]
pub struct MvGroup {
    pub lo: f64,
    pub hi: f64,
    pub query_indices: Vec<usize>,
}

impl MvGroup {
    pub fn label(&self) -> String {
        format!("{:.2}-{:.2}", self.lo, self.hi)
    }
}

/// Partitions queries by ratio into `(0, b1], (b1, b2], ..., (bk, 1]`.
/// A ratio exactly on a boundary belongs to the lower group.
pub fn group_queries_by_mv(corpus: &Corpus, boundaries: &[f64]) -> Result<Vec<MvGroup>> {
    for (i, &b) in boundaries.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "group boundary {b} must lie strictly inside (0, 1)"
            )));
        }
        if i > 0 && boundaries[i - 1] >= b {
            return Err(Error::InvalidArgument(
                "group boundaries must be strictly increasing".into(),
            ));
        }
    }
    let mut edges = vec![0.0];
    edges.extend_from_slice(boundaries);
    edges.push(1.0);

    let mut groups: Vec<MvGroup> = edges
        .windows(2)
        .map(|w| MvGroup {
            lo: w[0],
            hi: w[1],
            query_indices: Vec::new(),
        })
        .collect();

    for (qi, query) in corpus.queries.iter().enumerate() {
        let ratio = moment_to_video_ratio(query, corpus)?;
        let slot = groups
            .iter_mut()
            .find(|g| ratio > g.lo && ratio <= g.hi)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("ratio {ratio} not covered by any group"))
            })?;
        slot.query_indices.push(qi);
    }
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

pub const DEFAULT_GROUP_BOUNDARIES: [f64; 2] = [0.25, 0.5];

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    format_version: u32,
    config: CorpusConfig,
    video_count: usize,
    query_count: usize,
    group_boundaries: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GtEntry {
    video: String,
    start: usize,
    end: usize,
    moment_index: usize,
}

/// Writes `manifest.json`, `gt.json` and one little-endian f64 matrix
/// (with a JSON shape sidecar) per video and query.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("videos"))?;
    fs::create_dir_all(dir.join("queries"))?;

    let manifest = CorpusManifest {
        format_version: 1,
        config: corpus.config.clone(),
        video_count: corpus.videos.len(),
        query_count: corpus.queries.len(),
        group_boundaries: DEFAULT_GROUP_BOUNDARIES.to_vec(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut gt = BTreeMap::new();
    for query in &corpus.queries {
        let (vi, start, end) = corpus.ground_truth(query)?;
        gt.insert(
            query.id.clone(),
            GtEntry {
                video: corpus.videos[vi].id.clone(),
                start,
                end,
                moment_index: query.moment_index,
            },
        );
    }
    fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&gt)?)?;

    for video in &corpus.videos {
        write_matrix(&dir.join("videos").join(&video.id), &video.frames)?;
    }
    for query in &corpus.queries {
        write_matrix(&dir.join("queries").join(&query.id), &query.words)?;
    }
    Ok(())
}

/// Reloads a persisted corpus. Latent concept vectors are not part of
/// the on-disk format, so reloaded moments carry spans only.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let gt: BTreeMap<String, GtEntry> =
        serde_json::from_str(&fs::read_to_string(dir.join("gt.json"))?)?;

    let mut videos = Vec::with_capacity(manifest.video_count);
    let mut index_of = BTreeMap::new();
    for vi in 0..manifest.video_count {
        let id = video_id(vi);
        let frames = read_matrix(&dir.join("videos").join(&id))?;
        index_of.insert(id.clone(), vi);
        videos.push(SyntheticVideo {
            id,
            frames,
            moments: Vec::new(),
        });
    }

    // Rebuild moment spans from ground truth, in moment-index order.
    let mut spans: BTreeMap<usize, BTreeMap<usize, (usize, usize)>> = BTreeMap::new();
    for entry in gt.values() {
        let vi = *index_of.get(&entry.video).ok_or_else(|| Error::Format {
            path: dir.join("gt.json").display().to_string(),
            reason: format!("unknown video id `{}`", entry.video),
        })?;
        spans
            .entry(vi)
            .or_default()
            .insert(entry.moment_index, (entry.start, entry.end));
    }
    for (vi, by_index) in spans {
        let video = &mut videos[vi];
        let max_index = *by_index.keys().max().expect("non-empty");
        video.moments = (0..=max_index)
            .map(|mi| {
                let (start, end) = by_index.get(&mi).copied().unwrap_or((0, 0));
                SyntheticMoment {
                    start,
                    end,
                    concept: Vec::new(),
                }
            })
            .collect();
    }

    let mut queries = Vec::with_capacity(manifest.query_count);
    for qi in 0..manifest.query_count {
        let id = query_id(qi);
        let entry = gt.get(&id).ok_or_else(|| Error::Format {
            path: dir.join("gt.json").display().to_string(),
            reason: format!("missing ground truth for `{id}`"),
        })?;
        let words = read_matrix(&dir.join("queries").join(&id))?;
        let video_index = index_of[&entry.video];
        queries.push(SyntheticQuery {
            id,
            video_index,
            video_id: entry.video.clone(),
            moment_index: entry.moment_index,
            words,
        });
    }

    Ok(Corpus {
        config: manifest.config,
        videos,
        queries,
    })
}
