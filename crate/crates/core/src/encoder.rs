//! Transformer encoder branch: self-attention plus a position-wise
//! feed-forward network, wired post-norm (`LN(x + sublayer(x))`) with
//! residual connections, ReLU in the feed-forward sublayer and layer-norm
//! epsilon 1e-5.

use crate::attention::{
    attention_parameter_count, multi_head_self_attention, AttentionConfig, AttentionLayerWeights,
    AttentionWeights, BoundAttention,
};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::RngState;
use crate::tensor::{ops, Tape, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Layer-norm epsilon used by every encoder layer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hyperparameters of the encoder branch. Defaults: depth 1, 2 heads of
/// dimension 64, feed-forward width 512, dropout 0, model dimension 888.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub model_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 1,
            num_heads: 2,
            head_dim: 64,
            ff_dim: 512,
            dropout: 0.0,
            model_dim: 888,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ff_dim == 0 {
            return Err(Error::config("encoder ff_dim must be positive"));
        }
        self.attention_config().validate()
    }

    /// Config of the single attention sublayer inside each encoder layer.
    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            depth: 1,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            dropout: self.dropout,
            model_dim: self.model_dim,
            positional_encoding: false,
        }
    }
}

/// Learned weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights {
    pub attention: AttentionLayerWeights,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

/// All learned weights of the encoder branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub layers: Vec<EncoderLayerWeights>,
}

impl EncoderWeights {
    pub fn init(cfg: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let (m, f) = (cfg.model_dim, cfg.ff_dim);
        let attn_cfg = cfg.attention_config();
        let layers = (0..cfg.depth)
            .map(|_| {
                let mut attn = AttentionWeights::init(&attn_cfg, rng).expect("validated config");
                let attention = attn.layers.remove(0);
                EncoderLayerWeights {
                    attention,
                    w1: Param::glorot(&[m, f], m, f, rng),
                    b1: Param::zeros(&[f]),
                    w2: Param::glorot(&[f, m], f, m, rng),
                    b2: Param::zeros(&[m]),
                    ln1_gain: Param::ones(&[m]),
                    ln1_bias: Param::zeros(&[m]),
                    ln2_gain: Param::ones(&[m]),
                    ln2_bias: Param::zeros(&[m]),
                }
            })
            .collect();
        Ok(EncoderWeights { layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let a = &l.attention;
                [
                    &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo, &l.w1, &l.b1, &l.w2,
                    &l.b2, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias,
                ]
                .iter()
                .map(|p| p.numel())
                .sum::<usize>()
            })
            .sum()
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layer{i}");
            out.push((format!("{p}.attn.wq"), &l.attention.wq));
            out.push((format!("{p}.attn.bq"), &l.attention.bq));
            out.push((format!("{p}.attn.wk"), &l.attention.wk));
            out.push((format!("{p}.attn.bk"), &l.attention.bk));
            out.push((format!("{p}.attn.wv"), &l.attention.wv));
            out.push((format!("{p}.attn.bv"), &l.attention.bv));
            out.push((format!("{p}.attn.wo"), &l.attention.wo));
            out.push((format!("{p}.attn.bo"), &l.attention.bo));
            out.push((format!("{p}.ff.w1"), &l.w1));
            out.push((format!("{p}.ff.b1"), &l.b1));
            out.push((format!("{p}.ff.w2"), &l.w2));
            out.push((format!("{p}.ff.b2"), &l.b2));
            out.push((format!("{p}.ln1.gain"), &l.ln1_gain));
            out.push((format!("{p}.ln1.bias"), &l.ln1_bias));
            out.push((format!("{p}.ln2.gain"), &l.ln2_gain));
            out.push((format!("{p}.ln2.bias"), &l.ln2_bias));
        }
    }

    pub(crate) fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param)>,
    ) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}.layer{i}");
            out.push((format!("{p}.attn.wq"), &mut l.attention.wq));
            out.push((format!("{p}.attn.bq"), &mut l.attention.bq));
            out.push((format!("{p}.attn.wk"), &mut l.attention.wk));
            out.push((format!("{p}.attn.bk"), &mut l.attention.bk));
            out.push((format!("{p}.attn.wv"), &mut l.attention.wv));
            out.push((format!("{p}.attn.bv"), &mut l.attention.bv));
            out.push((format!("{p}.attn.wo"), &mut l.attention.wo));
            out.push((format!("{p}.attn.bo"), &mut l.attention.bo));
            out.push((format!("{p}.ff.w1"), &mut l.w1));
            out.push((format!("{p}.ff.b1"), &mut l.b1));
            out.push((format!("{p}.ff.w2"), &mut l.w2));
            out.push((format!("{p}.ff.b2"), &mut l.b2));
            out.push((format!("{p}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("{p}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("{p}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("{p}.ln2.bias"), &mut l.ln2_bias));
        }
    }

    pub fn bind(&self, tape: &Tape, cfg: &EncoderConfig, trainable: bool) -> Result<BoundEncoder> {
        cfg.validate()?;
        if self.layers.len() != cfg.depth {
            return Err(Error::config(format!(
                "encoder weights carry {} layers, config requires depth {}",
                self.layers.len(),
                cfg.depth
            )));
        }
        let (m, f) = (cfg.model_dim, cfg.ff_dim);
        let attn_cfg = cfg.attention_config();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let shape_checks: [(&str, &Param, &[usize]); 8] = [
                ("w1", &l.w1, &[m, f]),
                ("b1", &l.b1, &[f]),
                ("w2", &l.w2, &[f, m]),
                ("b2", &l.b2, &[m]),
                ("ln1.gain", &l.ln1_gain, &[m]),
                ("ln1.bias", &l.ln1_bias, &[m]),
                ("ln2.gain", &l.ln2_gain, &[m]),
                ("ln2.bias", &l.ln2_bias, &[m]),
            ];
            for (name, p, shape) in shape_checks {
                if p.shape != shape {
                    return Err(Error::config(format!(
                        "encoder weight {name} has shape {:?}, config requires {shape:?}",
                        p.shape
                    )));
                }
            }
            let attn = AttentionWeights {
                layers: vec![l.attention.clone()],
            }
            .bind(tape, &attn_cfg, trainable)?;
            layers.push(BoundEncoderLayer {
                attention: attn,
                ff: BoundFeedForward {
                    w1: l.w1.bind(tape, trainable)?,
                    b1: l.b1.bind(tape, trainable)?,
                    w2: l.w2.bind(tape, trainable)?,
                    b2: l.b2.bind(tape, trainable)?,
                },
                ln1_gain: l.ln1_gain.bind(tape, trainable)?,
                ln1_bias: l.ln1_bias.bind(tape, trainable)?,
                ln2_gain: l.ln2_gain.bind(tape, trainable)?,
                ln2_bias: l.ln2_bias.bind(tape, trainable)?,
            });
        }
        Ok(BoundEncoder { layers })
    }
}

/// Tape-bound encoder weights.
pub struct BoundEncoder {
    pub layers: Vec<BoundEncoderLayer>,
}

pub struct BoundEncoderLayer {
    pub attention: BoundAttention,
    pub ff: BoundFeedForward,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

pub struct BoundFeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Position-wise feed-forward network: `relu(x W1 + b1) W2 + b2`, applied
/// independently per sequence position.
pub fn feed_forward(tape: &Tape, x: &Tensor, ff: &BoundFeedForward) -> Result<Tensor> {
    let hidden = ops::relu(
        tape,
        &ops::add_row(tape, &ops::matmul(tape, x, &ff.w1)?, &ff.b1)?,
    )?;
    ops::add_row(tape, &ops::matmul(tape, &hidden, &ff.w2)?, &ff.b2)
}

/// Full encoder branch. Per layer: `h = LN(x + MHSA(x))`,
/// `out = LN(h + FF(h))`; layers are stacked `depth` times.
pub fn encoder_forward(
    tape: &Tape,
    x: &Tensor,
    bound: &BoundEncoder,
    cfg: &EncoderConfig,
    training: bool,
    rng: &mut RngState,
) -> Result<Tensor> {
    cfg.validate()?;
    if bound.layers.len() != cfg.depth {
        return Err(Error::config(format!(
            "bound encoder carries {} layers, config requires depth {}",
            bound.layers.len(),
            cfg.depth
        )));
    }
    let attn_cfg = cfg.attention_config();
    let mut h = x.clone();
    for layer in &bound.layers {
        let attended =
            multi_head_self_attention(tape, &h, &layer.attention, &attn_cfg, training, rng)?;
        let res1 = ops::add(tape, &h, &attended)?;
        let normed1 = ops::layer_norm(tape, &res1, &layer.ln1_gain, &layer.ln1_bias, LAYER_NORM_EPS)?;
        let ffed = feed_forward(tape, &normed1, &layer.ff)?;
        let res2 = ops::add(tape, &normed1, &ffed)?;
        h = ops::layer_norm(tape, &res2, &layer.ln2_gain, &layer.ln2_bias, LAYER_NORM_EPS)?;
    }
    Ok(h)
}

/// Exact learnable scalar count of the encoder branch: the attention
/// sublayers plus, per layer, the feed-forward matrices/biases and two
/// layer-norm gain/bias pairs.
pub fn encoder_parameter_count(cfg: &EncoderConfig) -> Result<usize> {
    cfg.validate()?;
    let attn = attention_parameter_count(&AttentionConfig {
        depth: cfg.depth,
        ..cfg.attention_config()
    })?;
    let (m, f) = (cfg.model_dim, cfg.ff_dim);
    Ok(attn + cfg.depth * (m * f + f + f * m + m + 2 * (2 * m)))
}
