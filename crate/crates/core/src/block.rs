//! Windowed multi-head attention blocks and their multi-scale
//! average-pooled combination.

use crate::error::{Error, Result};
use crate::params::{ParamInit, ParamSet, TapeParams};
use crate::tensor::Var;
use crate::window::{gaussian_window_matrix_scaled, GaussianBank, GaussianWindow, WindowMode};

/// Width and head count of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
}

impl BlockDims {
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} must divide model dimension {d}"
            )));
        }
        Ok(Self { d, heads })
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// FFN hidden width, fixed at `4 * d`.
    pub fn ffn_width(&self) -> usize {
        4 * self.d
    }
}

/// Parameter paths of one block, rooted at a prefix such as
/// `"clip.l0.k2"`.
#[derive(Clone, Debug)]
pub struct BlockPath {
    prefix: String,
}

impl BlockPath {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
        }
    }

    pub fn wq(&self, head: usize) -> String {
        format!("{}.attn.q{head}.w", self.prefix)
    }

    pub fn wk(&self, head: usize) -> String {
        format!("{}.attn.k{head}.w", self.prefix)
    }

    pub fn wv(&self, head: usize) -> String {
        format!("{}.attn.v{head}.w", self.prefix)
    }

    pub fn wo(&self) -> String {
        format!("{}.attn.out.w", self.prefix)
    }

    pub fn ln1_gamma(&self) -> String {
        format!("{}.ln1.gamma", self.prefix)
    }

    pub fn ln1_beta(&self) -> String {
        format!("{}.ln1.beta", self.prefix)
    }

    pub fn ln2_gamma(&self) -> String {
        format!("{}.ln2.gamma", self.prefix)
    }

    pub fn ln2_beta(&self) -> String {
        format!("{}.ln2.beta", self.prefix)
    }

    pub fn ffn_w1(&self) -> String {
        format!("{}.ffn.w1", self.prefix)
    }

    pub fn ffn_b1(&self) -> String {
        format!("{}.ffn.b1", self.prefix)
    }

    pub fn ffn_w2(&self) -> String {
        format!("{}.ffn.w2", self.prefix)
    }

    pub fn ffn_b2(&self) -> String {
        format!("{}.ffn.b2", self.prefix)
    }
}

/// Inserts freshly initialized weights for one block.
pub fn init_block_params(params: &mut ParamSet, path: &BlockPath, dims: BlockDims, init: &mut ParamInit) {
    let (d, dh, ffn) = (dims.d, dims.d_head(), dims.ffn_width());
    for h in 0..dims.heads {
        params.insert(path.wq(h), init.affine(d, dh));
        params.insert(path.wk(h), init.affine(d, dh));
        params.insert(path.wv(h), init.affine(d, dh));
    }
    params.insert(path.wo(), init.affine(d, d));
    params.insert(path.ln1_gamma(), init.ones(1, d));
    params.insert(path.ln1_beta(), init.zeros(1, d));
    params.insert(path.ln2_gamma(), init.ones(1, d));
    params.insert(path.ln2_beta(), init.zeros(1, d));
    params.insert(path.ffn_w1(), init.affine(d, ffn));
    params.insert(path.ffn_b1(), init.zeros(1, ffn));
    params.insert(path.ffn_w2(), init.affine(ffn, d));
    params.insert(path.ffn_b2(), init.zeros(1, d));
}

/// Layer normalization with affine parameters.
fn layer_norm_affine<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    gamma: &str,
    beta: &str,
) -> Result<Var<'t>> {
    x.layer_norm_rows()?
        .mul(tp.get(gamma)?)?
        .add(tp.get(beta)?)
}

/// Multi-head scaled dot-product attention with an optional Gaussian
/// window multiplied into the logits of every head before softmax.
/// `window: None` is plain unwindowed attention.
pub fn gaussian_attention<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    path: &BlockPath,
    dims: BlockDims,
    window: Option<&GaussianWindow>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let m = shape[0];
    if let Some(w) = window {
        if w.size() != m {
            return Err(Error::ShapeMismatch {
                primitive: "gaussian-attention",
                lhs: shape,
                rhs: w.values().shape().to_vec(),
            });
        }
    }
    let tape = tp.tape();
    let win = window.map(|w| tape.constant(w.values().clone()));
    let scale = 1.0 / (dims.d_head() as f64).sqrt();

    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let q = x.matmul(tp.get(&path.wq(h))?)?;
        let k = x.matmul(tp.get(&path.wk(h))?)?;
        let v = x.matmul(tp.get(&path.wv(h))?)?;
        let mut logits = q.matmul(k.t()?)?.scale(scale)?;
        if let Some(w) = win {
            logits = w.mul(logits)?;
        }
        heads.push(logits.softmax_rows()?.matmul(v)?);
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = cat.concat_cols(h)?;
    }
    cat.matmul(tp.get(&path.wo())?)
}

/// Pre-norm residual block: attention then FFN, each over a normalized
/// input with a skip connection.
pub fn gaussian_block_forward<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    path: &BlockPath,
    dims: BlockDims,
    window: Option<&GaussianWindow>,
) -> Result<Var<'t>> {
    let normed = layer_norm_affine(tp, x, &path.ln1_gamma(), &path.ln1_beta())?;
    let inter = gaussian_attention(tp, normed, path, dims, window)?.add(x)?;

    let normed2 = layer_norm_affine(tp, inter, &path.ln2_gamma(), &path.ln2_beta())?;
    let hidden = normed2
        .matmul(tp.get(&path.ffn_w1())?)?
        .add(tp.get(&path.ffn_b1())?)?
        .relu()?;
    let ffn = hidden
        .matmul(tp.get(&path.ffn_w2())?)?
        .add(tp.get(&path.ffn_b2())?)?;
    ffn.add(inter)
}

/// An unwindowed transformer block; identical wiring with no window.
pub fn transformer_block_forward<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    path: &BlockPath,
    dims: BlockDims,
) -> Result<Var<'t>> {
    gaussian_block_forward(tp, x, path, dims, None)
}

/// Average of the per-variance member block outputs. Members do not
/// share parameters: one [`BlockPath`] per bank entry.
pub fn gmmformer_block_forward<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    paths: &[BlockPath],
    dims: BlockDims,
    bank: &GaussianBank,
    mode: WindowMode,
    variance_scale: f64,
) -> Result<Var<'t>> {
    gmmformer_forward_with_variances(tp, x, paths, dims, bank.variances(), mode, variance_scale)
}

/// As [`gmmformer_block_forward`] over a raw variance list; the bank
/// type enforces ordering, this does not.
pub fn gmmformer_forward_with_variances<'t>(
    tp: &TapeParams<'t, '_>,
    x: Var<'t>,
    paths: &[BlockPath],
    dims: BlockDims,
    variances: &[crate::window::Variance],
    mode: WindowMode,
    variance_scale: f64,
) -> Result<Var<'t>> {
    if paths.len() != variances.len() {
        return Err(Error::InvalidArgument(format!(
            "bank has {} variances but {} parameter sets were provided",
            variances.len(),
            paths.len()
        )));
    }
    let m = x.shape()[0];
    let mut sum: Option<Var<'t>> = None;
    for (path, &variance) in paths.iter().zip(variances) {
        let window = gaussian_window_matrix_scaled(m, variance, mode, variance_scale)?;
        let out = gaussian_block_forward(tp, x, path, dims, Some(&window))?;
        sum = Some(match sum {
            Some(acc) => acc.add(out)?,
            None => out,
        });
    }
    let sum = sum.expect("bank is non-empty");
    sum.scale(1.0 / variances.len() as f64)
}
