//! Similarity measures and the three training objectives
//! (triplet ranking, infoNCE, query-diverse) plus their weighted sum
//! and the random-then-hardest negative sampling schedule.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Convex weights fusing video-level and clip-level similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub alpha_v: f64,
    pub alpha_c: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self {
            alpha_v: 0.3,
            alpha_c: 0.7,
        }
    }
}

impl SimilarityWeights {
    pub fn new(alpha_v: f64, alpha_c: f64) -> Result<Self> {
        let w = Self { alpha_v, alpha_c };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = (0.0..=1.0).contains(&self.alpha_v) && (0.0..=1.0).contains(&self.alpha_c);
        if !in_range || (self.alpha_v + self.alpha_c - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "similarity weights must lie in [0,1] and sum to 1, got {} and {}",
                self.alpha_v, self.alpha_c
            )));
        }
        Ok(())
    }
}

/// How raw similarities enter the infoNCE ratio. `Exp` passes them
/// through `exp` (temperature 1); `RawClamped` keeps the written form
/// with similarities clamped to at least `1e-6` so the ratio stays
/// defined for negative cosines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NceTransform {
    #[default]
    Exp,
    RawClamped,
}

const RAW_CLAMP_FLOOR: f64 = 1e-6;

/// Margins, loss weights and the negative-sampling switch epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub div_alpha: f64,
    pub div_delta: f64,
    pub switch_epoch: usize,
    pub nce_transform: NceTransform,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lambda1: 5e-2,
            lambda2: 4e-2,
            lambda3: 1e-3,
            div_alpha: 32.0,
            div_delta: 0.15,
            switch_epoch: 20,
            nce_transform: NceTransform::Exp,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
            || self.lambda3 < 0.0
            || !(self.div_alpha > 0.0)
            || !(self.div_delta > 0.0)
        {
            return Err(Error::InvalidArgument(
                "loss config requires margin >= 0, lambdas >= 0, alpha > 0, delta > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Which batch video each text is relevant to. Texts sharing a video
/// index are relevant to the same video.
#[derive(Clone, Debug)]
pub struct BatchRelevance {
    positive: Vec<usize>,
    n_videos: usize,
}

impl BatchRelevance {
    pub fn new(positive: Vec<usize>, n_videos: usize) -> Result<Self> {
        if positive.is_empty() || n_videos == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if positive.iter().any(|&v| v >= n_videos) {
            return Err(Error::InvalidArgument(
                "positive video index out of range".into(),
            ));
        }
        Ok(Self { positive, n_videos })
    }

    pub fn n_texts(&self) -> usize {
        self.positive.len()
    }

    pub fn n_videos(&self) -> usize {
        self.n_videos
    }

    pub fn positive(&self, text: usize) -> usize {
        self.positive[text]
    }

    pub fn same_video(&self, a: usize, b: usize) -> bool {
        self.positive[a] == self.positive[b]
    }

    pub fn distinct_videos(&self) -> usize {
        let mut seen = vec![false; self.n_videos];
        for &p in &self.positive {
            seen[p] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Value-level similarity (also the retrieval-time scoring path).
// ---------------------------------------------------------------------------

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Video-level similarity: cosine of the sentence and video embeddings.
pub fn video_similarity(q: &[f64], video: &[f64]) -> Result<f64> {
    cosine_similarity(q, video)
}

/// Clip-level similarity: max cosine between the sentence embedding and
/// any clip row.
pub fn clip_similarity(q: &[f64], clips: &Tensor) -> Result<f64> {
    let (rows, _) = clips.dims2()?;
    let mut best = f64::NEG_INFINITY;
    for r in 0..rows {
        let c = cosine_similarity(q, clips.row_slice(r))?;
        if c > best {
            best = c;
        }
    }
    Ok(best)
}

/// Fused similarity `alpha_v * s_v + alpha_c * s_c`.
pub fn pair_similarity(s_v: f64, s_c: f64, w: &SimilarityWeights) -> f64 {
    w.alpha_v * s_v + w.alpha_c * s_c
}

// ---------------------------------------------------------------------------
// Negative sampling.
// ---------------------------------------------------------------------------

/// Per positive pair: the index of a negative text and a negative
/// video drawn from the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairNegatives {
    pub text: usize,
    pub video: usize,
}

/// Selects one negative text and one negative video per pair. Before
/// `switch_epoch` negatives are drawn uniformly among non-relevant
/// batch items; from `switch_epoch` on, the highest-similarity
/// non-relevant item is chosen (ties to the lowest index).
pub fn sample_negatives(
    rel: &BatchRelevance,
    similarity: &Tensor,
    epoch: usize,
    switch_epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairNegatives>> {
    let (nt, nv) = similarity.dims2()?;
    if nt != rel.n_texts() || nv != rel.n_videos() {
        return Err(Error::ShapeMismatch {
            primitive: "sample-negatives",
            lhs: vec![rel.n_texts(), rel.n_videos()],
            rhs: vec![nt, nv],
        });
    }
    if rel.distinct_videos() < 2 {
        return Err(Error::InvalidArgument(
            "negative sampling requires at least 2 distinct videos in the batch".into(),
        ));
    }
    let hardest = epoch >= switch_epoch;
    let mut out = Vec::with_capacity(nt);
    for i in 0..rel.n_texts() {
        let pos = rel.positive(i);
        let video_candidates: Vec<usize> = (0..nv).filter(|&j| j != pos).collect();
        let text_candidates: Vec<usize> = (0..nt).filter(|&t| rel.positive(t) != pos).collect();
        if text_candidates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no negative text exists for batch text {i}"
            )));
        }
        let (video, text) = if hardest {
            // First maximum wins, so ties resolve to the lowest index.
            let mut video = video_candidates[0];
            for &j in &video_candidates[1..] {
                if similarity.get(i, j) > similarity.get(i, video) {
                    video = j;
                }
            }
            let mut text = text_candidates[0];
            for &t in &text_candidates[1..] {
                if similarity.get(t, pos) > similarity.get(text, pos) {
                    text = t;
                }
            }
            (video, text)
        } else {
            let video = *video_candidates.choose(rng).expect("non-empty candidates");
            let text = *text_candidates.choose(rng).expect("non-empty candidates");
            (video, text)
        };
        out.push(PairNegatives { text, video });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Value-level losses (table form).
// ---------------------------------------------------------------------------

/// Mean hinge loss over the batch given one negative text and one
/// negative video per pair.
pub fn triplet_loss(
    table: &Tensor,
    rel: &BatchRelevance,
    negatives: &[PairNegatives],
    margin: f64,
) -> Result<f64> {
    if negatives.len() != rel.n_texts() {
        return Err(Error::InvalidArgument(
            "one negative pair required per positive pair".into(),
        ));
    }
    let mut total = 0.0;
    for (i, neg) in negatives.iter().enumerate() {
        let pos = rel.positive(i);
        if neg.video == pos || rel.positive(neg.text) == pos {
            return Err(Error::InvalidArgument(format!(
                "negative identical to positive for batch text {i}"
            )));
        }
        let s_pos = table.get(i, pos);
        let s_tneg = table.get(neg.text, pos);
        let s_vneg = table.get(i, neg.video);
        total += (margin + s_tneg - s_pos).max(0.0) + (margin + s_vneg - s_pos).max(0.0);
    }
    Ok(total / rel.n_texts() as f64)
}

fn nce_g(s: f64, transform: NceTransform) -> f64 {
    match transform {
        NceTransform::Exp => s.exp(),
        NceTransform::RawClamped => s.max(RAW_CLAMP_FLOOR),
    }
}

/// Symmetric infoNCE over the batch; negatives are all non-relevant
/// batch items.
pub fn infonce_loss(table: &Tensor, rel: &BatchRelevance, transform: NceTransform) -> Result<f64> {
    let (nt, nv) = table.dims2()?;
    if nt != rel.n_texts() || nv != rel.n_videos() {
        return Err(Error::ShapeMismatch {
            primitive: "infonce",
            lhs: vec![rel.n_texts(), rel.n_videos()],
            rhs: vec![nt, nv],
        });
    }
    let mut total = 0.0;
    for i in 0..nt {
        let pos = rel.positive(i);
        let g_pos = nce_g(table.get(i, pos), transform);
        let neg_videos: f64 = (0..nv)
            .filter(|&j| j != pos)
            .map(|j| nce_g(table.get(i, j), transform))
            .sum();
        let neg_texts: f64 = (0..nt)
            .filter(|&t| rel.positive(t) != pos)
            .map(|t| nce_g(table.get(t, pos), transform))
            .sum();
        total -= (g_pos / (g_pos + neg_texts)).ln() + (g_pos / (g_pos + neg_videos)).ln();
    }
    Ok(total / nt as f64)
}

/// Softplus repulsion between text embeddings relevant to the same
/// video, averaged over ordered same-video pairs; zero when no two
/// texts share a video.
pub fn query_diverse_loss(
    texts: &Tensor,
    rel: &BatchRelevance,
    alpha: f64,
    delta: f64,
) -> Result<f64> {
    if !(alpha > 0.0) || !(delta > 0.0) {
        return Err(Error::InvalidArgument(
            "query diverse loss requires alpha > 0 and delta > 0".into(),
        ));
    }
    let (nt, _) = texts.dims2()?;
    if nt != rel.n_texts() {
        return Err(Error::InvalidArgument(
            "text count does not match relevance".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..nt {
        for j in 0..nt {
            if i == j || !rel.same_video(i, j) {
                continue;
            }
            let cos = cosine_similarity(texts.row_slice(i), texts.row_slice(j))?;
            total += softplus(alpha * (cos + delta));
            count += 1;
        }
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(total / count as f64)
    }
}

/// The five loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub trip_clip: f64,
    pub trip_video: f64,
    pub nce_clip: f64,
    pub nce_video: f64,
    pub diverse: f64,
}

/// Weighted sum of the components:
/// `trip_c + trip_v + l1*nce_c + l2*nce_v + l3*div`.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> f64 {
    c.trip_clip
        + c.trip_video
        + cfg.lambda1 * c.nce_clip
        + cfg.lambda2 * c.nce_video
        + cfg.lambda3 * c.diverse
}

// ---------------------------------------------------------------------------
// Differentiable batch graph (the training path).
// ---------------------------------------------------------------------------

/// Handles to the loss nodes of one batch, plus the fused similarity
/// snapshot the negatives were sampled from.
pub struct BatchLossVars<'t> {
    pub total: Var<'t>,
    pub trip_clip: Var<'t>,
    pub trip_video: Var<'t>,
    pub nce_clip: Var<'t>,
    pub nce_video: Var<'t>,
    pub diverse: Var<'t>,
    pub fused_similarity: Tensor,
    pub negatives: Vec<PairNegatives>,
    pub hardest: bool,
}

impl BatchLossVars<'_> {
    pub fn components(&self) -> Result<LossComponents> {
        Ok(LossComponents {
            trip_clip: self.trip_clip.scalar_value()?,
            trip_video: self.trip_video.scalar_value()?,
            nce_clip: self.nce_clip.scalar_value()?,
            nce_video: self.nce_video.scalar_value()?,
            diverse: self.diverse.scalar_value()?,
        })
    }
}

/// Balanced row-stack of `1 x d` (or `k x d`) vars.
fn stack_rows<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    match vars.len() {
        0 => Err(Error::InvalidArgument("cannot stack zero rows".into())),
        1 => Ok(vars[0]),
        n => {
            let left = stack_rows(&vars[..n / 2])?;
            let right = stack_rows(&vars[n / 2..])?;
            left.concat_rows(right)
        }
    }
}

/// Row-normalizes `x` to unit L2 rows; errors on a zero row.
fn normalize_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let value = x.value();
    let (rows, cols) = value.dims2()?;
    for r in 0..rows {
        if value.row_slice(r).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm);
        }
    }
    let sumsq = x.mul(x)?.mean_rows()?.scale(cols as f64)?;
    let inv_norm = sumsq.ln()?.scale(-0.5)?.exp()?;
    x.mul(inv_norm)
}

/// Element-wise overflow-safe softplus over a matrix node.
fn softplus_graph<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let zeros = tape.constant(Tensor::zeros(shape[0], shape[1]));
    let ones = tape.constant(Tensor::full(shape[0], shape[1], 1.0));
    let abs = x.maximum(x.scale(-1.0)?)?;
    let log1p = abs.scale(-1.0)?.exp()?.add(ones)?.ln()?;
    x.maximum(zeros)?.add(log1p)
}

/// Mean of an `n x 1` column node.
fn column_mean<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let ones = tape.constant(Tensor::full(1, n, 1.0 / n as f64));
    ones.matmul(x)
}

/// Builds the full differentiable loss of one batch.
///
/// `texts` are `1 x d` sentence embeddings; `clips`/`videos` hold one
/// `m_c x d` clip matrix and one `1 x d` video embedding per unique
/// batch video. Negatives are sampled from the fused similarity values
/// according to the epoch schedule.
pub fn batch_loss_graph<'t>(
    tape: &'t Tape,
    texts: &[Var<'t>],
    clips: &[Var<'t>],
    videos: &[Var<'t>],
    rel: &BatchRelevance,
    weights: &SimilarityWeights,
    cfg: &LossConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLossVars<'t>> {
    weights.validate()?;
    cfg.validate()?;
    let nt = rel.n_texts();
    let nv = rel.n_videos();
    if texts.len() != nt || clips.len() != nv || videos.len() != nv {
        return Err(Error::InvalidArgument(
            "embedding counts do not match batch relevance".into(),
        ));
    }

    let q_hat = normalize_rows(stack_rows(texts)?)?;
    let v_hat = normalize_rows(stack_rows(videos)?)?;

    // Video-level similarity matrix (nt x nv).
    let s_video = q_hat.matmul(v_hat.t()?)?;

    // Clip-level: per video, the row-max of cosine against its clips.
    let mut clip_cols = Vec::with_capacity(nv);
    for &clip in clips {
        let c_hat = normalize_rows(clip)?;
        clip_cols.push(q_hat.matmul(c_hat.t()?)?.max_rows()?);
    }
    let mut s_clip = clip_cols[0];
    for &col in &clip_cols[1..] {
        s_clip = s_clip.concat_cols(col)?;
    }

    let fused = s_video.scale(weights.alpha_v)?.add(s_clip.scale(weights.alpha_c)?)?;
    let fused_similarity = fused.value();
    if !fused_similarity.is_finite() {
        return Err(Error::NonFinite {
            context: "batch similarity matrix".into(),
        });
    }

    let negatives = sample_negatives(rel, &fused_similarity, epoch, cfg.switch_epoch, rng)?;
    let hardest = epoch >= cfg.switch_epoch;

    // Constant gather masks.
    let mut pos_mask = Tensor::zeros(nt, nv);
    let mut negv_mask = Tensor::zeros(nt, nv);
    let mut negt_gather = Tensor::zeros(nt, nt);
    for i in 0..nt {
        pos_mask.set(i, rel.positive(i), 1.0);
        negv_mask.set(i, negatives[i].video, 1.0);
        negt_gather.set(i, negatives[i].text, 1.0);
    }
    let mut nonrel = Tensor::full(nt, nv, 1.0);
    for i in 0..nt {
        nonrel.set(i, rel.positive(i), 0.0);
    }
    let pos_mask = tape.constant(pos_mask);
    let negv_mask = tape.constant(negv_mask);
    let negt_gather = tape.constant(negt_gather);
    let nonrel = tape.constant(nonrel);
    let ones_v = tape.constant(Tensor::full(nv, 1, 1.0));
    let ones_t_row = tape.constant(Tensor::full(1, nt, 1.0));

    let margin = tape.constant(Tensor::full(nt, 1, cfg.margin));

    let triplet = |table: Var<'t>| -> Result<Var<'t>> {
        let s_pos = table.mul(pos_mask)?.matmul(ones_v)?;
        let s_vneg = table.mul(negv_mask)?.matmul(ones_v)?;
        let s_tneg = negt_gather.matmul(table)?.mul(pos_mask)?.matmul(ones_v)?;
        let hinge_t = margin.add(s_tneg)?.sub(s_pos)?.relu()?;
        let hinge_v = margin.add(s_vneg)?.sub(s_pos)?.relu()?;
        column_mean(tape, hinge_t.add(hinge_v)?)
    };
    let trip_clip = triplet(s_clip)?;
    let trip_video = triplet(s_video)?;

    let infonce = |table: Var<'t>| -> Result<Var<'t>> {
        let g = match cfg.nce_transform {
            NceTransform::Exp => table.exp()?,
            NceTransform::RawClamped => {
                let floor = tape.constant(Tensor::full(nt, nv, RAW_CLAMP_FLOOR));
                table.maximum(floor)?
            }
        };
        let g_pos = g.mul(pos_mask)?.matmul(ones_v)?;
        // Negative videos for each text: all non-relevant columns.
        let neg_videos = g.mul(nonrel)?.matmul(ones_v)?;
        // Negative texts per video: column sums over non-relevant texts,
        // gathered at each text's positive column.
        let col_neg = ones_t_row.matmul(g.mul(nonrel)?)?;
        let neg_texts = pos_mask.mul(col_neg)?.matmul(ones_v)?;
        let term_t = g_pos.add(neg_texts)?.ln()?.sub(g_pos.ln()?)?;
        let term_v = g_pos.add(neg_videos)?.ln()?.sub(g_pos.ln()?)?;
        column_mean(tape, term_t.add(term_v)?)
    };
    let nce_clip = infonce(s_clip)?;
    let nce_video = infonce(s_video)?;

    // Query diverse loss over ordered same-video text pairs.
    let mut pair_mask = Tensor::zeros(nt, nt);
    let mut pair_count = 0usize;
    for i in 0..nt {
        for j in 0..nt {
            if i != j && rel.same_video(i, j) {
                pair_mask.set(i, j, 1.0);
                pair_count += 1;
            }
        }
    }
    let diverse = if pair_count == 0 {
        tape.scalar(0.0)
    } else {
        let cos = q_hat.matmul(q_hat.t()?)?;
        let delta = tape.constant(Tensor::full(nt, nt, cfg.div_delta));
        let sp = softplus_graph(tape, cos.add(delta)?.scale(cfg.div_alpha)?)?;
        let masked = sp.mul(tape.constant(pair_mask))?;
        let ones_t_col = tape.constant(Tensor::full(nt, 1, 1.0));
        ones_t_row
            .matmul(masked)?
            .matmul(ones_t_col)?
            .scale(1.0 / pair_count as f64)?
    };

    let total = trip_clip
        .add(trip_video)?
        .add(nce_clip.scale(cfg.lambda1)?)?
        .add(nce_video.scale(cfg.lambda2)?)?
        .add(diverse.scale(cfg.lambda3)?)?;

    Ok(BatchLossVars {
        total,
        trip_clip,
        trip_video,
        nce_clip,
        nce_video,
        diverse,
        fused_similarity,
        negatives,
        hardest,
    })
}
