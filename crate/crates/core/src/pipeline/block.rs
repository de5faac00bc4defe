use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_rows, MacCounter, Rng, Tensor};

use super::SiteTag;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn draw_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let b = glorot_bound(rows, cols);
    Tensor::uniform(&[rows, cols], rng, -b, b)
}

/// Parameters of one block: input projection, cross-attention projections
/// and a two-layer MLP with hidden width `4·d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_in: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_mlp1: Tensor,
    pub w_mlp2: Tensor,
}

impl BlockWeights {
    /// Draws `w_in, w_q, w_k, w_v, w_mlp1, w_mlp2` in that order, each
    /// Glorot-uniform and filled row-major.
    pub fn draw(rng: &mut Rng, d_in: usize, d_model: usize, d_prompt: usize) -> Result<Self> {
        let hidden = 4 * d_model;
        Ok(Self {
            w_in: draw_matrix(rng, d_in, d_model)?,
            w_q: draw_matrix(rng, d_model, d_model)?,
            w_k: draw_matrix(rng, d_prompt, d_model)?,
            w_v: draw_matrix(rng, d_prompt, d_model)?,
            w_mlp1: draw_matrix(rng, d_model, hidden)?,
            w_mlp2: draw_matrix(rng, hidden, d_model)?,
        })
    }

    pub fn zeros(d_in: usize, d_model: usize, d_prompt: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[d_in, d_model]),
            w_q: Tensor::zeros(&[d_model, d_model]),
            w_k: Tensor::zeros(&[d_prompt, d_model]),
            w_v: Tensor::zeros(&[d_prompt, d_model]),
            w_mlp1: Tensor::zeros(&[d_model, 4 * d_model]),
            w_mlp2: Tensor::zeros(&[4 * d_model, d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        [
            &self.w_in,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_mlp1,
            &self.w_mlp2,
        ]
        .iter()
        .map(|t| t.len())
        .sum()
    }
}

/// `softmax((h·W_q)(p·W_k)ᵀ / √d) · (p·W_v)`.
pub fn cross_attention(
    h: &Tensor,
    prompt: &Tensor,
    w: &BlockWeights,
    counter: &mut MacCounter<SiteTag>,
    tag: SiteTag,
) -> Result<Tensor> {
    let q = matmul(h, &w.w_q, counter, tag)?;
    let k = matmul(prompt, &w.w_k, counter, tag)?;
    let v = matmul(prompt, &w.w_v, counter, tag)?;
    let scores =
        matmul(&q, &k.transpose()?, counter, tag)?.scale(1.0 / (w.d_model() as f64).sqrt())?;
    matmul(&softmax_rows(&scores)?, &v, counter, tag)
}

/// One block forward with the attention term supplied by `attend`, which
/// receives the post-activation input projection.
///
/// `out = h + relu(h·W1)·W2` with `h = relu(x·W_in) + attn`.
pub fn run_block_with(
    x: &Tensor,
    w: &BlockWeights,
    counter: &mut MacCounter<SiteTag>,
    tag: SiteTag,
    attend: impl FnOnce(&Tensor, &mut MacCounter<SiteTag>) -> Result<Tensor>,
) -> Result<(Tensor, Tensor)> {
    let h_pre = matmul(x, &w.w_in, counter, tag)?.relu();
    let attn = attend(&h_pre, counter)?;
    if attn.shape() != h_pre.shape() {
        return Err(Error::Shape {
            op: "run_block attention",
            lhs: h_pre.shape().to_vec(),
            rhs: attn.shape().to_vec(),
        });
    }
    let h = h_pre.add(&attn)?;
    let hidden = matmul(&h, &w.w_mlp1, counter, tag)?.relu();
    let out = h.add(&matmul(&hidden, &w.w_mlp2, counter, tag)?)?;
    Ok((out, attn))
}

/// Block forward; `attn_override` replaces the freshly computed
/// cross-attention when present. Returns `(out, attn)`.
pub fn run_block(
    x: &Tensor,
    prompt: &Tensor,
    w: &BlockWeights,
    counter: &mut MacCounter<SiteTag>,
    tag: SiteTag,
    attn_override: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    run_block_with(x, w, counter, tag, |h, c| match attn_override {
        Some(a) => Ok(a.clone()),
        None => cross_attention(h, prompt, w, c, tag),
    })
}
