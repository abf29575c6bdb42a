//! Scaled dot-product attention and the multi-head self-attention branch.
//!
//! The branch projects an `[s, model_dim]` sequence to per-head queries,
//! keys and values of combined width `num_heads * head_dim`, attends per
//! head, concatenates the heads and projects back to `model_dim`, so its
//! output stays concatenation-compatible with the backbone features. No
//! positional encoding is applied by default, which makes the branch
//! permutation-equivariant over sequence positions; a config flag can
//! switch on the classic sinusoidal encoding.

use crate::error::{Error, Result};
use crate::fmath;
use crate::param::Param;
use crate::rng::RngState;
use crate::tensor::{ops, Tape, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Hyperparameters of the attention branch. Defaults: depth 1, 2 heads of
/// dimension 64, dropout 0, model dimension 888.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
    pub model_dim: usize,
    /// Add sinusoidal positional encoding to the branch input. Off by
    /// default; switching it on breaks permutation equivariance.
    pub positional_encoding: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            depth: 1,
            num_heads: 2,
            head_dim: 64,
            dropout: 0.0,
            model_dim: 888,
            positional_encoding: false,
        }
    }
}

impl AttentionConfig {
    /// Combined projection width `num_heads * head_dim`. This need not
    /// equal `model_dim`; the output projection restores `model_dim`.
    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.num_heads == 0 || self.head_dim == 0 || self.model_dim == 0 {
            return Err(Error::config(format!(
                "attention depth/heads/head_dim/model_dim must be positive, got {}/{}/{}/{}",
                self.depth, self.num_heads, self.head_dim, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "attention dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Learned projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerWeights {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
}

impl AttentionLayerWeights {
    fn init(cfg: &AttentionConfig, rng: &mut RngState) -> Self {
        let (m, inner) = (cfg.model_dim, cfg.inner_dim());
        AttentionLayerWeights {
            wq: Param::glorot(&[m, inner], m, inner, rng),
            bq: Param::zeros(&[inner]),
            wk: Param::glorot(&[m, inner], m, inner, rng),
            bk: Param::zeros(&[inner]),
            wv: Param::glorot(&[m, inner], m, inner, rng),
            bv: Param::zeros(&[inner]),
            wo: Param::glorot(&[inner, m], inner, m, rng),
            bo: Param::zeros(&[m]),
        }
    }

    fn check_shapes(&self, cfg: &AttentionConfig) -> Result<()> {
        let (m, inner) = (cfg.model_dim, cfg.inner_dim());
        let want: [(&str, &Param, &[usize]); 8] = [
            ("wq", &self.wq, &[m, inner]),
            ("bq", &self.bq, &[inner]),
            ("wk", &self.wk, &[m, inner]),
            ("bk", &self.bk, &[inner]),
            ("wv", &self.wv, &[m, inner]),
            ("bv", &self.bv, &[inner]),
            ("wo", &self.wo, &[inner, m]),
            ("bo", &self.bo, &[m]),
        ];
        for (name, p, shape) in want {
            if p.shape != shape {
                return Err(Error::config(format!(
                    "attention weight {name} has shape {:?}, config requires {shape:?}",
                    p.shape
                )));
            }
        }
        Ok(())
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.bq"), &self.bq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.bk"), &self.bk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.bv"), &self.bv));
        out.push((format!("{prefix}.wo"), &self.wo));
        out.push((format!("{prefix}.bo"), &self.bo));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.bq"), &mut self.bq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.bk"), &mut self.bk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.bv"), &mut self.bv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
        out.push((format!("{prefix}.bo"), &mut self.bo));
    }
}

/// All learned weights of the attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub layers: Vec<AttentionLayerWeights>,
}

impl AttentionWeights {
    pub fn init(cfg: &AttentionConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        Ok(AttentionWeights {
            layers: (0..cfg.depth)
                .map(|_| AttentionLayerWeights::init(cfg, rng))
                .collect(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                [&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo]
                    .iter()
                    .map(|p| p.numel())
                    .sum::<usize>()
            })
            .sum()
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), out);
        }
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param)>,
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{i}"), out);
        }
    }

    /// Register every weight on a tape. Shapes are checked against the
    /// config first.
    pub fn bind(
        &self,
        tape: &Tape,
        cfg: &AttentionConfig,
        trainable: bool,
    ) -> Result<BoundAttention> {
        cfg.validate()?;
        if self.layers.len() != cfg.depth {
            return Err(Error::config(format!(
                "attention weights carry {} layers, config requires depth {}",
                self.layers.len(),
                cfg.depth
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.check_shapes(cfg)?;
            layers.push(BoundAttentionLayer {
                wq: layer.wq.bind(tape, trainable)?,
                bq: layer.bq.bind(tape, trainable)?,
                wk: layer.wk.bind(tape, trainable)?,
                bk: layer.bk.bind(tape, trainable)?,
                wv: layer.wv.bind(tape, trainable)?,
                bv: layer.bv.bind(tape, trainable)?,
                wo: layer.wo.bind(tape, trainable)?,
                bo: layer.bo.bind(tape, trainable)?,
            });
        }
        Ok(BoundAttention { layers })
    }
}

/// Tape-bound attention weights for one forward/backward episode.
pub struct BoundAttention {
    pub layers: Vec<BoundAttentionLayer>,
}

pub struct BoundAttentionLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Scaled dot-product attention.
///
/// `weights = softmax(q k^T / sqrt(d))` row-wise, `output = weights v`.
/// Returns `(output, weights)`; every weight row sums to 1.
pub fn scaled_dot_product(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let ([sq, d], [sk, dk], [sv, _dv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::dim(format!(
            "scaled_dot_product expects 2-d q/k/v, got {:?}/{:?}/{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    };
    if d != dk {
        return Err(Error::dim(format!(
            "scaled_dot_product q/k widths disagree: {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if sq != sk || sk != sv {
        return Err(Error::dim(format!(
            "scaled_dot_product sequence lengths disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let logits = ops::matmul_nt(tape, q, k)?;
    let scaled = ops::affine(tape, &logits, 1.0 / fmath::sqrt(*d as f64), 0.0)?;
    let weights = ops::softmax_last(tape, &scaled)?;
    let output = ops::matmul(tape, &weights, v)?;
    Ok((output, weights))
}

/// Multi-head self-attention over an `[s, model_dim]` sequence: per-head
/// scaled dot-product attention on learned projections, head concatenation,
/// output projection back to `model_dim`, then dropout (training mode only).
pub fn multi_head_self_attention(
    tape: &Tape,
    x: &Tensor,
    bound: &BoundAttention,
    cfg: &AttentionConfig,
    training: bool,
    rng: &mut RngState,
) -> Result<Tensor> {
    cfg.validate()?;
    let [_, width] = x.shape() else {
        return Err(Error::dim(format!(
            "multi_head_self_attention input must be 2-d, got {:?}",
            x.shape()
        )));
    };
    if *width != cfg.model_dim {
        return Err(Error::config(format!(
            "input width {} disagrees with configured model_dim {}",
            width, cfg.model_dim
        )));
    }
    if bound.layers.len() != cfg.depth {
        return Err(Error::config(format!(
            "bound attention carries {} layers, config requires depth {}",
            bound.layers.len(),
            cfg.depth
        )));
    }
    let mut h = if cfg.positional_encoding {
        let pe = sinusoidal_encoding(tape, x.shape()[0], cfg.model_dim)?;
        ops::add(tape, x, &pe)?
    } else {
        x.clone()
    };
    for layer in &bound.layers {
        h = attention_layer(tape, &h, layer, cfg, training, rng)?;
    }
    Ok(h)
}

fn attention_layer(
    tape: &Tape,
    x: &Tensor,
    layer: &BoundAttentionLayer,
    cfg: &AttentionConfig,
    training: bool,
    rng: &mut RngState,
) -> Result<Tensor> {
    let q = ops::add_row(tape, &ops::matmul(tape, x, &layer.wq)?, &layer.bq)?;
    let k = ops::add_row(tape, &ops::matmul(tape, x, &layer.wk)?, &layer.bk)?;
    let v = ops::add_row(tape, &ops::matmul(tape, x, &layer.wv)?, &layer.bv)?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let offset = head * cfg.head_dim;
        let qh = ops::slice_last(tape, &q, offset, cfg.head_dim)?;
        let kh = ops::slice_last(tape, &k, offset, cfg.head_dim)?;
        let vh = ops::slice_last(tape, &v, offset, cfg.head_dim)?;
        let (out, _) = scaled_dot_product(tape, &qh, &kh, &vh)?;
        heads.push(out);
    }
    let head_refs: Vec<&Tensor> = heads.iter().collect();
    let cat = ops::concat_last(tape, &head_refs)?;
    let projected = ops::add_row(tape, &ops::matmul(tape, &cat, &layer.wo)?, &layer.bo)?;
    ops::dropout(tape, &projected, cfg.dropout, training, rng)
}

/// Exact number of learnable scalars in the attention branch:
/// `depth * (3 * (model_dim * inner + inner) + inner * model_dim + model_dim)`
/// with `inner = num_heads * head_dim`.
pub fn attention_parameter_count(cfg: &AttentionConfig) -> Result<usize> {
    cfg.validate()?;
    let (m, inner) = (cfg.model_dim, cfg.inner_dim());
    Ok(cfg.depth * (3 * (m * inner + inner) + (inner * m + m)))
}

/// Classic sinusoidal positional encoding as a constant `[s, dim]` tensor.
fn sinusoidal_encoding(tape: &Tape, s: usize, dim: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(s * dim);
    for pos in 0..s {
        for i in 0..dim {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / fmath::powf(10_000.0, pair / dim as f64);
            values.push(if i % 2 == 0 {
                fmath::sin(angle)
            } else {
                fmath::cos(angle)
            });
        }
    }
    tape.constant(&[s, dim], values)
}
