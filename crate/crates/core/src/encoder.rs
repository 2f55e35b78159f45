//! Sentence encoder and the two-branch (clip-level, video-level) video
//! encoder.
//!
//! The text path is a FC+ReLU projection, learnable positional
//! embedding, one unwindowed transformer layer and attention pooling.
//! Both video branches project with FC+ReLU, add positional embeddings
//! and run two multi-scale windowed blocks; the clip branch keeps the
//! per-position rows, the video branch pools them into a single vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    gmmformer_block_forward, init_block_params, transformer_block_forward, BlockDims, BlockPath,
};
use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamSet, TapeParams};
use crate::tensor::{Tensor, Var};
use crate::window::{GaussianBank, WindowMode};

pub const GMM_LAYERS: usize = 2;

/// Input/embedding dimensions of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Raw frame feature width.
    pub d_in: usize,
    /// Raw word feature width.
    pub d_word: usize,
    /// Shared embedding width.
    pub d: usize,
    pub heads: usize,
    /// Clip-branch sequence length.
    pub m_c: usize,
    /// Maximum video-branch sequence length.
    pub m_f: usize,
    pub max_words: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_word: 32,
            d: 384,
            heads: 4,
            m_c: 32,
            m_f: 128,
            max_words: 30,
        }
    }
}

/// Everything needed to rebuild the architecture: dimensions, variance
/// bank and window mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub bank: GaussianBank,
    pub mode: WindowMode,
    pub variance_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            bank: GaussianBank::default(),
            mode: WindowMode::default(),
            variance_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<BlockDims> {
        let d = &self.dims;
        if d.d_in == 0 || d.d_word == 0 || d.m_c == 0 || d.m_f == 0 || d.max_words == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if !(self.variance_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "variance scale must be positive".into(),
            ));
        }
        BlockDims::new(d.d, d.heads)
    }

    fn block_paths(&self, branch: &str, layer: usize) -> Vec<BlockPath> {
        (0..self.bank.len())
            .map(|k| BlockPath::new(format!("{branch}.l{layer}.k{k}")))
            .collect()
    }
}

/// Initializes every trainable tensor of the model under a fixed seed.
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let block_dims = cfg.validate()?;
    let d = cfg.dims.d;
    let mut init = ParamInit::new(ChaCha8Rng::seed_from_u64(seed));
    let mut params = ParamSet::new();

    // Text path.
    params.insert("text.fc.w", init.affine(cfg.dims.d_word, d));
    params.insert("text.fc.b", init.zeros(1, d));
    params.insert("text.pos", init.normal(cfg.dims.max_words, d, 0.02));
    init_block_params(&mut params, &BlockPath::new("text.block"), block_dims, &mut init);
    params.insert("text.pool", init.normal(1, d, 0.02));

    // Clip branch.
    params.insert("clip.fc.w", init.affine(cfg.dims.d_in, d));
    params.insert("clip.fc.b", init.zeros(1, d));
    params.insert("clip.pos", init.normal(cfg.dims.m_c, d, 0.02));
    for layer in 0..GMM_LAYERS {
        for path in cfg.block_paths("clip", layer) {
            init_block_params(&mut params, &path, block_dims, &mut init);
        }
    }

    // Video branch.
    params.insert("vid.fc.w", init.affine(cfg.dims.d_in, d));
    params.insert("vid.fc.b", init.zeros(1, d));
    params.insert("vid.pos", init.normal(cfg.dims.m_f, d, 0.02));
    for layer in 0..GMM_LAYERS {
        for path in cfg.block_paths("vid", layer) {
            init_block_params(&mut params, &path, block_dims, &mut init);
        }
    }
    params.insert("vid.pool", init.normal(1, d, 0.02));

    Ok(params)
}

/// Softmax-weighted sum of the rows of `x` scored by the `1 x d`
/// pooling vector `w`; the result stays in the convex hull of the rows.
pub fn attention_pool<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let weights = w.matmul(x.t()?)?.softmax_rows()?;
    weights.matmul(x)
}

fn fc_relu<'t>(tp: &TapeParams<'t, '_>, x: Var<'t>, w: &str, b: &str) -> Result<Var<'t>> {
    x.matmul(tp.get(w)?)?.add(tp.get(b)?)?.relu()
}

/// Adds the first `rows` entries of a positional table to `x`.
fn add_positional<'t>(tp: &TapeParams<'t, '_>, x: Var<'t>, table: &str, rows: usize) -> Result<Var<'t>> {
    let pos = tp.get(table)?;
    let table_rows = pos.shape()[0];
    if table_rows < rows {
        return Err(Error::InvalidArgument(format!(
            "positional table `{table}` has {table_rows} rows, need {rows}"
        )));
    }
    if table_rows == rows {
        return x.add(pos);
    }
    let select = tp
        .tape()
        .constant(Tensor::row_selector(0, rows, table_rows));
    x.add(select.matmul(pos)?)
}

/// Mean-pools `frames` down to `target` rows over contiguous,
/// near-equal groups (boundary `g` sits at `floor(g * m / target)`).
/// Inputs of `target` rows or fewer pass through unchanged.
pub fn downsample_mean_pool(frames: &Tensor, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::InvalidArgument(
            "downsample target must be at least 1".into(),
        ));
    }
    let (m, d) = frames.dims2()?;
    if m <= target {
        return Ok(frames.clone());
    }
    let mut out = Tensor::zeros(target, d);
    for g in 0..target {
        let lo = g * m / target;
        let hi = (g + 1) * m / target;
        let size = (hi - lo) as f64;
        for row in lo..hi {
            let src = frames.row_slice(row);
            let dst = &mut out.data_mut()[g * d..(g + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v / size;
            }
        }
    }
    Ok(out)
}

/// Repeats rows by uniform index mapping (`row i <- floor(i*m/target)`)
/// to stretch a short sequence up to `target` rows.
fn replicate_rows(frames: &Tensor, target: usize) -> Result<Tensor> {
    let (m, d) = frames.dims2()?;
    let mut out = Tensor::zeros(target, d);
    for i in 0..target {
        let src = frames.row_slice(i * m / target);
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(src);
    }
    Ok(out)
}

/// Forces a sequence to exactly `target` rows: longer inputs are
/// mean-pooled, shorter ones replicated.
pub fn resample_rows(frames: &Tensor, target: usize) -> Result<Tensor> {
    let (m, _) = frames.dims2()?;
    if m > target {
        downsample_mean_pool(frames, target)
    } else if m < target {
        replicate_rows(frames, target)
    } else {
        Ok(frames.clone())
    }
}

/// Encodes word features into a single sentence embedding (`1 x d`).
/// Words beyond `max_words` are discarded.
pub fn encode_sentence<'t>(
    tp: &TapeParams<'t, '_>,
    words: &Tensor,
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    let block_dims = cfg.validate()?;
    let (n, dw) = words.dims2()?;
    if dw != cfg.dims.d_word {
        return Err(Error::DimMismatch {
            expected: cfg.dims.d_word,
            found: dw,
        });
    }
    let kept = n.min(cfg.dims.max_words);
    let truncated = Tensor::matrix(kept, dw, words.data()[..kept * dw].to_vec())?;

    let x = tp.tape().constant(truncated);
    let x = fc_relu(tp, x, "text.fc.w", "text.fc.b")?;
    let x = add_positional(tp, x, "text.pos", kept)?;
    let x = transformer_block_forward(tp, x, &BlockPath::new("text.block"), block_dims)?;
    attention_pool(x, tp.get("text.pool")?)
}

/// Encodes raw frame features into clip embeddings (`m_c x d`) and a
/// pooled video embedding (`1 x d`).
pub fn encode_video<'t>(
    tp: &TapeParams<'t, '_>,
    frames: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let (clips, video, _) = encode_video_full(tp, frames, cfg)?;
    Ok((clips, video))
}

/// As [`encode_video`], also returning the video-branch contextual
/// frame embeddings before pooling (used by the explicit-clip
/// baseline).
pub fn encode_video_full<'t>(
    tp: &TapeParams<'t, '_>,
    frames: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let block_dims = cfg.validate()?;
    let (_, din) = frames.dims2()?;
    if din != cfg.dims.d_in {
        return Err(Error::DimMismatch {
            expected: cfg.dims.d_in,
            found: din,
        });
    }

    // Clip branch: always exactly m_c rows.
    let clip_in = resample_rows(frames, cfg.dims.m_c)?;
    let mut c = tp.tape().constant(clip_in);
    c = fc_relu(tp, c, "clip.fc.w", "clip.fc.b")?;
    c = add_positional(tp, c, "clip.pos", cfg.dims.m_c)?;
    for layer in 0..GMM_LAYERS {
        c = gmmformer_block_forward(
            tp,
            c,
            &cfg.block_paths("clip", layer),
            block_dims,
            &cfg.bank,
            cfg.mode,
            cfg.variance_scale,
        )?;
    }

    // Video branch: length capped at m_f, never stretched.
    let vid_in = downsample_mean_pool(frames, cfg.dims.m_f)?;
    let rows = vid_in.shape()[0];
    let mut v = tp.tape().constant(vid_in);
    v = fc_relu(tp, v, "vid.fc.w", "vid.fc.b")?;
    v = add_positional(tp, v, "vid.pos", rows)?;
    for layer in 0..GMM_LAYERS {
        v = gmmformer_block_forward(
            tp,
            v,
            &cfg.block_paths("vid", layer),
            block_dims,
            &cfg.bank,
            cfg.mode,
            cfg.variance_scale,
        )?;
    }
    let pooled = attention_pool(v, tp.get("vid.pool")?)?;
    Ok((c, pooled, v))
}
