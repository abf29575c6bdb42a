//! The complete fusion classifier: a pluggable backbone producing
//! per-frame feature rows, a parallel multi-head attention branch and a
//! transformer-encoder branch over the feature sequence, three-way
//! concatenation per position, dropout, and a dense head of 8 neurons with
//! weights shared across positions. No softmax is applied inside the
//! model; the loss and [`predict`] work from raw logits.

use crate::attention::{
    attention_parameter_count, multi_head_self_attention, AttentionConfig, AttentionWeights,
    BoundAttention,
};
use crate::encoder::{encoder_forward, encoder_parameter_count, BoundEncoder, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::fmath;
use crate::param::Param;
use crate::rng::RngState;
use crate::tensor::{ops, Tape, Tensor};
use crate::{FEATURE_DIM, NUM_CLASSES};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Spatial side of backbone input images.
pub const IMAGE_SIDE: usize = 112;
/// Channels of backbone input images.
pub const IMAGE_CHANNELS: usize = 3;

/// Channel widths of the three conv stages of the trainable backbone stub.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStubConfig {
    pub channels: [usize; 3],
}

impl Default for ConvStubConfig {
    fn default() -> Self {
        ConvStubConfig { channels: [8, 16, 32] }
    }
}

/// Which feature extractor feeds the fusion model.
///
/// `Precomputed` passes externally extracted feature rows through
/// unchanged; `ConvStub` is a small trainable stand-in (three conv +
/// average-pool stages and a dense layer to the feature width), not a
/// reproduction of any pretrained network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSpec {
    Precomputed,
    ConvStub(ConvStubConfig),
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if let BackboneSpec::ConvStub(cfg) = self {
            if cfg.channels.iter().any(|&c| c == 0) {
                return Err(Error::config("conv stub channel widths must be positive"));
            }
        }
        Ok(())
    }
}

/// Classifier-head settings: dropout on the fused vector (default 0.5) and
/// the fixed 8-class output.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHeadConfig {
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for FusionHeadConfig {
    fn default() -> Self {
        FusionHeadConfig {
            dropout_rate: 0.5,
            num_classes: NUM_CLASSES,
        }
    }
}

impl FusionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(format!(
                "the classifier head is fixed at {NUM_CLASSES} classes, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "head dropout must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub attention: AttentionConfig,
    pub encoder: EncoderConfig,
    pub head: FusionHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::Precomputed,
            attention: AttentionConfig::default(),
            encoder: EncoderConfig::default(),
            head: FusionHeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.attention.model_dim
    }

    /// Width of the fused per-position vector: backbone + attention branch
    /// + encoder branch.
    pub fn fused_dim(&self) -> usize {
        3 * self.model_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        if self.attention.model_dim != self.encoder.model_dim {
            return Err(Error::config(format!(
                "attention model_dim {} disagrees with encoder model_dim {}",
                self.attention.model_dim, self.encoder.model_dim
            )));
        }
        if matches!(self.backbone, BackboneSpec::ConvStub(_)) && self.model_dim() != FEATURE_DIM {
            return Err(Error::config(format!(
                "the conv stub always emits {FEATURE_DIM} features, model_dim is {}",
                self.model_dim()
            )));
        }
        Ok(())
    }
}

/// Weights of the trainable conv backbone stub.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStubWeights {
    pub conv1_k: Param,
    pub conv1_b: Param,
    pub conv2_k: Param,
    pub conv2_b: Param,
    pub conv3_k: Param,
    pub conv3_b: Param,
    pub dense_w: Param,
    pub dense_b: Param,
}

impl ConvStubWeights {
    fn init(cfg: &ConvStubConfig, rng: &mut RngState) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let cin = IMAGE_CHANNELS;
        ConvStubWeights {
            conv1_k: Param::glorot(&[3, 3, cin, c1], 9 * cin, 9 * c1, rng),
            conv1_b: Param::zeros(&[c1]),
            conv2_k: Param::glorot(&[3, 3, c1, c2], 9 * c1, 9 * c2, rng),
            conv2_b: Param::zeros(&[c2]),
            conv3_k: Param::glorot(&[3, 3, c2, c3], 9 * c2, 9 * c3, rng),
            conv3_b: Param::zeros(&[c3]),
            dense_w: Param::glorot(&[c3, FEATURE_DIM], c3, FEATURE_DIM, rng),
            dense_b: Param::zeros(&[FEATURE_DIM]),
        }
    }

    fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Param)>) {
        out.push(("backbone.conv1.k".into(), &self.conv1_k));
        out.push(("backbone.conv1.b".into(), &self.conv1_b));
        out.push(("backbone.conv2.k".into(), &self.conv2_k));
        out.push(("backbone.conv2.b".into(), &self.conv2_b));
        out.push(("backbone.conv3.k".into(), &self.conv3_k));
        out.push(("backbone.conv3.b".into(), &self.conv3_b));
        out.push(("backbone.dense.w".into(), &self.dense_w));
        out.push(("backbone.dense.b".into(), &self.dense_b));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Param)>) {
        out.push(("backbone.conv1.k".into(), &mut self.conv1_k));
        out.push(("backbone.conv1.b".into(), &mut self.conv1_b));
        out.push(("backbone.conv2.k".into(), &mut self.conv2_k));
        out.push(("backbone.conv2.b".into(), &mut self.conv2_b));
        out.push(("backbone.conv3.k".into(), &mut self.conv3_k));
        out.push(("backbone.conv3.b".into(), &mut self.conv3_b));
        out.push(("backbone.dense.w".into(), &mut self.dense_w));
        out.push(("backbone.dense.b".into(), &mut self.dense_b));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneWeights {
    Precomputed,
    ConvStub(ConvStubWeights),
}

/// Every learnable parameter of the fusion classifier, together with the
/// architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub backbone: BackboneWeights,
    pub attention: AttentionWeights,
    pub encoder: EncoderWeights,
    pub classifier_w: Param,
    pub classifier_b: Param,
}

impl FusionModel {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let backbone = match &config.backbone {
            BackboneSpec::Precomputed => BackboneWeights::Precomputed,
            BackboneSpec::ConvStub(c) => BackboneWeights::ConvStub(ConvStubWeights::init(c, rng)),
        };
        let attention = AttentionWeights::init(&config.attention, rng)?;
        let encoder = EncoderWeights::init(&config.encoder, rng)?;
        let fused = config.fused_dim();
        let classes = config.head.num_classes;
        let classifier_w = Param::glorot(&[fused, classes], fused, classes, rng);
        let classifier_b = Param::zeros(&[classes]);
        Ok(FusionModel {
            config,
            backbone,
            attention,
            encoder,
            classifier_w,
            classifier_b,
        })
    }

    /// Named parameter blocks in a fixed canonical order.
    pub fn visit(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        if let BackboneWeights::ConvStub(w) = &self.backbone {
            w.visit(&mut out);
        }
        self.attention.visit("attention", &mut out);
        self.encoder.visit("encoder", &mut out);
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        if let BackboneWeights::ConvStub(w) = &mut self.backbone {
            w.visit_mut(&mut out);
        }
        self.attention.visit_mut("attention", &mut out);
        self.encoder.visit_mut("encoder", &mut out);
        out.push(("classifier.w".into(), &mut self.classifier_w));
        out.push(("classifier.b".into(), &mut self.classifier_b));
        out
    }

    /// Total number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.visit().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Register every parameter on a tape.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundModel> {
        self.config.validate()?;
        let backbone = match &self.backbone {
            BackboneWeights::Precomputed => BoundBackbone::Precomputed,
            BackboneWeights::ConvStub(w) => BoundBackbone::ConvStub(BoundConvStub {
                conv1_k: w.conv1_k.bind(tape, trainable)?,
                conv1_b: w.conv1_b.bind(tape, trainable)?,
                conv2_k: w.conv2_k.bind(tape, trainable)?,
                conv2_b: w.conv2_b.bind(tape, trainable)?,
                conv3_k: w.conv3_k.bind(tape, trainable)?,
                conv3_b: w.conv3_b.bind(tape, trainable)?,
                dense_w: w.dense_w.bind(tape, trainable)?,
                dense_b: w.dense_b.bind(tape, trainable)?,
            }),
        };
        let fused = self.config.fused_dim();
        let classes = self.config.head.num_classes;
        if self.classifier_w.shape != [fused, classes] || self.classifier_b.shape != [classes] {
            return Err(Error::config(format!(
                "classifier shapes {:?}/{:?} disagree with config [{fused}, {classes}]",
                self.classifier_w.shape, self.classifier_b.shape
            )));
        }
        Ok(BoundModel {
            backbone,
            attention: self.attention.bind(tape, &self.config.attention, trainable)?,
            encoder: self.encoder.bind(tape, &self.config.encoder, trainable)?,
            classifier_w: self.classifier_w.bind(tape, trainable)?,
            classifier_b: self.classifier_b.bind(tape, trainable)?,
        })
    }

    /// Evaluation-mode logits for one feature sequence, on a fresh tape.
    pub fn eval_logits(&self, features: &[f64], positions: usize) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.constant(&[positions, self.config.model_dim()], features.to_vec())?;
        let bound = self.bind(&tape, false)?;
        let mut rng = RngState::new(0);
        let logits = fuse_forward(&tape, &x, &bound, &self.config, false, &mut rng)?;
        Ok(logits.values().to_vec())
    }
}

/// Tape-bound model parameters.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub attention: BoundAttention,
    pub encoder: BoundEncoder,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl BoundModel {
    /// Bound tensors in the same canonical order and with the same names
    /// as [`FusionModel::visit`], so gradients collected here align with
    /// the parameter blocks handed to the optimizer.
    pub fn visit(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let BoundBackbone::ConvStub(s) = &self.backbone {
            out.push(("backbone.conv1.k".into(), &s.conv1_k));
            out.push(("backbone.conv1.b".into(), &s.conv1_b));
            out.push(("backbone.conv2.k".into(), &s.conv2_k));
            out.push(("backbone.conv2.b".into(), &s.conv2_b));
            out.push(("backbone.conv3.k".into(), &s.conv3_k));
            out.push(("backbone.conv3.b".into(), &s.conv3_b));
            out.push(("backbone.dense.w".into(), &s.dense_w));
            out.push(("backbone.dense.b".into(), &s.dense_b));
        }
        for (i, l) in self.attention.layers.iter().enumerate() {
            let p = format!("attention.layer{i}");
            out.push((format!("{p}.wq"), &l.wq));
            out.push((format!("{p}.bq"), &l.bq));
            out.push((format!("{p}.wk"), &l.wk));
            out.push((format!("{p}.bk"), &l.bk));
            out.push((format!("{p}.wv"), &l.wv));
            out.push((format!("{p}.bv"), &l.bv));
            out.push((format!("{p}.wo"), &l.wo));
            out.push((format!("{p}.bo"), &l.bo));
        }
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            let a = &l.attention.layers[0];
            out.push((format!("{p}.attn.wq"), &a.wq));
            out.push((format!("{p}.attn.bq"), &a.bq));
            out.push((format!("{p}.attn.wk"), &a.wk));
            out.push((format!("{p}.attn.bk"), &a.bk));
            out.push((format!("{p}.attn.wv"), &a.wv));
            out.push((format!("{p}.attn.bv"), &a.bv));
            out.push((format!("{p}.attn.wo"), &a.wo));
            out.push((format!("{p}.attn.bo"), &a.bo));
            out.push((format!("{p}.ff.w1"), &l.ff.w1));
            out.push((format!("{p}.ff.b1"), &l.ff.b1));
            out.push((format!("{p}.ff.w2"), &l.ff.w2));
            out.push((format!("{p}.ff.b2"), &l.ff.b2));
            out.push((format!("{p}.ln1.gain"), &l.ln1_gain));
            out.push((format!("{p}.ln1.bias"), &l.ln1_bias));
            out.push((format!("{p}.ln2.gain"), &l.ln2_gain));
            out.push((format!("{p}.ln2.bias"), &l.ln2_bias));
        }
        out.push(("classifier.w".into(), &self.classifier_w));
        out.push(("classifier.b".into(), &self.classifier_b));
        out
    }

    /// Accumulated gradients per block, in canonical visit order.
    pub fn collect_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.visit().iter().map(|(_, t)| t.grad()).collect()
    }
}

pub enum BoundBackbone {
    Precomputed,
    ConvStub(BoundConvStub),
}

pub struct BoundConvStub {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
    pub conv3_k: Tensor,
    pub conv3_b: Tensor,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

/// Input accepted by [`backbone_extract`].
pub enum BackboneInput<'a> {
    /// Precomputed per-frame feature rows `[n, width]`.
    Features(&'a Tensor),
    /// Normalized `[IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS]` images, one
    /// tensor per frame, pixel values in `[0, 1]`.
    Images(&'a [Tensor]),
}

/// Map frames to per-frame feature rows.
///
/// The precomputed variant is the exact identity on feature rows; the conv
/// stub runs its three conv + pool stages and dense projection per frame.
pub fn backbone_extract(
    tape: &Tape,
    input: &BackboneInput<'_>,
    bound: &BoundBackbone,
) -> Result<Tensor> {
    match (input, bound) {
        (BackboneInput::Features(f), BoundBackbone::Precomputed) => {
            if f.shape().len() != 2 {
                return Err(Error::input(format!(
                    "precomputed features must be 2-d rows, got {:?}",
                    f.shape()
                )));
            }
            Ok((*f).clone())
        }
        (BackboneInput::Images(frames), BoundBackbone::ConvStub(stub)) => {
            if frames.is_empty() {
                return Err(Error::input("conv stub received an empty image batch"));
            }
            let mut rows = Vec::with_capacity(frames.len());
            for img in frames.iter() {
                if img.shape() != [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS] {
                    return Err(Error::input(format!(
                        "conv stub expects [{IMAGE_SIDE}, {IMAGE_SIDE}, {IMAGE_CHANNELS}] images, got {:?}",
                        img.shape()
                    )));
                }
                if img.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::input(
                        "conv stub expects pixel values normalized to [0, 1]",
                    ));
                }
                rows.push(conv_stub_features(tape, img, stub)?);
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let pooled = ops::concat_rows(tape, &refs)?;
            ops::add_row(tape, &ops::matmul(tape, &pooled, &stub.dense_w)?, &stub.dense_b)
        }
        (BackboneInput::Features(_), BoundBackbone::ConvStub(_)) => Err(Error::config(
            "backbone is the conv stub but the input carries precomputed features",
        )),
        (BackboneInput::Images(_), BoundBackbone::Precomputed) => Err(Error::config(
            "backbone is precomputed pass-through but the input carries images",
        )),
    }
}

/// One frame through the conv stages: spatial side 112 -> 28 -> 7 -> 1.
fn conv_stub_features(tape: &Tape, img: &Tensor, stub: &BoundConvStub) -> Result<Tensor> {
    let h1 = ops::relu(tape, &ops::conv2d_same(tape, img, &stub.conv1_k, &stub.conv1_b)?)?;
    let p1 = ops::avg_pool2d(tape, &h1, 4)?;
    let h2 = ops::relu(tape, &ops::conv2d_same(tape, &p1, &stub.conv2_k, &stub.conv2_b)?)?;
    let p2 = ops::avg_pool2d(tape, &h2, 4)?;
    let h3 = ops::relu(tape, &ops::conv2d_same(tape, &p2, &stub.conv3_k, &stub.conv3_b)?)?;
    let p3 = ops::avg_pool2d(tape, &h3, 7)?;
    let channels = p3.shape()[2];
    ops::reshape(tape, &p3, &[1, channels])
}

/// Full fusion forward pass: branch the feature sequence through attention
/// and encoder, concatenate per position with the features themselves,
/// apply head dropout, and project to per-position class logits.
pub fn fuse_forward(
    tape: &Tape,
    features: &Tensor,
    bound: &BoundModel,
    config: &ModelConfig,
    training: bool,
    rng: &mut RngState,
) -> Result<Tensor> {
    let [_, width] = features.shape() else {
        return Err(Error::input(format!(
            "fuse_forward features must be [positions, model_dim], got {:?}",
            features.shape()
        )));
    };
    if *width != config.model_dim() {
        return Err(Error::input(format!(
            "fuse_forward feature width {} disagrees with model_dim {}",
            width,
            config.model_dim()
        )));
    }
    let attn_out =
        multi_head_self_attention(tape, features, &bound.attention, &config.attention, training, rng)?;
    let enc_out = encoder_forward(tape, features, &bound.encoder, &config.encoder, training, rng)?;
    let fused = ops::concat_last(tape, &[features, &attn_out, &enc_out])?;
    let dropped = ops::dropout(tape, &fused, config.head.dropout_rate, training, rng)?;
    ops::add_row(
        tape,
        &ops::matmul(tape, &dropped, &bound.classifier_w)?,
        &bound.classifier_b,
    )
}

/// Per-position class predictions in evaluation mode.
///
/// Probabilities are the row-wise softmax of the logits; the label is the
/// argmax with ties broken toward the lowest class index.
pub fn predict(features: &[f64], positions: usize, model: &FusionModel) -> Result<PredictOutput> {
    let logits = model.eval_logits(features, positions)?;
    let classes = model.config.head.num_classes;
    let mut probabilities = logits;
    let mut labels = Vec::with_capacity(positions);
    for r in 0..positions {
        let row = &mut probabilities[r * classes..(r + 1) * classes];
        fmath::softmax_row(row);
        let mut best = 0usize;
        for (i, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = i;
            }
        }
        labels.push(best);
    }
    Ok(PredictOutput {
        labels,
        probabilities,
    })
}

/// Result of [`predict`]: one label and one probability row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    pub labels: Vec<usize>,
    /// Row-major `[positions, num_classes]` softmax probabilities.
    pub probabilities: Vec<f64>,
}

/// Total learnable scalar count of a constructed model.
pub fn model_parameter_count(model: &FusionModel) -> usize {
    model.parameter_count()
}

/// Analytic parameter count for an architecture: backbone + attention +
/// encoder + classifier `(3 * model_dim * classes + classes)`.
pub fn analytic_parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let backbone = match &config.backbone {
        BackboneSpec::Precomputed => 0,
        BackboneSpec::ConvStub(c) => {
            let [c1, c2, c3] = c.channels;
            let cin = IMAGE_CHANNELS;
            (9 * cin * c1 + c1)
                + (9 * c1 * c2 + c2)
                + (9 * c2 * c3 + c3)
                + (c3 * FEATURE_DIM + FEATURE_DIM)
        }
    };
    let classifier = config.fused_dim() * config.head.num_classes + config.head.num_classes;
    Ok(backbone
        + attention_parameter_count(&config.attention)?
        + encoder_parameter_count(&config.encoder)?
        + classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_vec;
    use alloc::vec;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec::Precomputed,
            attention: AttentionConfig {
                depth: 1,
                num_heads: 2,
                head_dim: 2,
                dropout: 0.0,
                model_dim: 6,
                positional_encoding: false,
            },
            encoder: EncoderConfig {
                depth: 1,
                num_heads: 2,
                head_dim: 2,
                ff_dim: 5,
                dropout: 0.0,
                model_dim: 6,
            },
            head: FusionHeadConfig {
                dropout_rate: 0.0,
                num_classes: NUM_CLASSES,
            },
        }
    }

    #[test]
    fn precomputed_backbone_is_identity() {
        let tape = Tape::new();
        let mut rng = RngState::new(1);
        let f = tape.constant(&[4, 888], rand_vec(&mut rng, 4 * 888, 1.0)).unwrap();
        let out = backbone_extract(&tape, &BackboneInput::Features(&f), &BoundBackbone::Precomputed)
            .unwrap();
        assert_eq!(out.values(), f.values());
    }

    fn bind_stub(tape: &Tape, weights: &ConvStubWeights, trainable: bool) -> BoundConvStub {
        BoundConvStub {
            conv1_k: weights.conv1_k.bind(tape, trainable).unwrap(),
            conv1_b: weights.conv1_b.bind(tape, trainable).unwrap(),
            conv2_k: weights.conv2_k.bind(tape, trainable).unwrap(),
            conv2_b: weights.conv2_b.bind(tape, trainable).unwrap(),
            conv3_k: weights.conv3_k.bind(tape, trainable).unwrap(),
            conv3_b: weights.conv3_b.bind(tape, trainable).unwrap(),
            dense_w: weights.dense_w.bind(tape, trainable).unwrap(),
            dense_b: weights.dense_b.bind(tape, trainable).unwrap(),
        }
    }

    #[test]
    fn conv_stub_zero_images_zero_biases_give_zero_features() {
        let mut rng = RngState::new(3);
        let weights = ConvStubWeights::init(&ConvStubConfig::default(), &mut rng);
        let tape = Tape::new();
        let stub = bind_stub(&tape, &weights, false);
        let img = tape
            .constant(&[IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], vec![0.0; IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS])
            .unwrap();
        let frames = [img];
        let out = backbone_extract(
            &tape,
            &BackboneInput::Images(&frames),
            &BoundBackbone::ConvStub(stub),
        )
        .unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_stub_output_shape_on_batch() {
        let mut rng = RngState::new(4);
        let weights = ConvStubWeights::init(&ConvStubConfig::default(), &mut rng);
        let tape = Tape::new();
        let stub = bind_stub(&tape, &weights, false);
        let frames: Vec<Tensor> = (0..5)
            .map(|_| {
                let px: Vec<f64> = (0..IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS)
                    .map(|_| rng.next_f64())
                    .collect();
                tape.constant(&[IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], px).unwrap()
            })
            .collect();
        let out = backbone_extract(
            &tape,
            &BackboneInput::Images(&frames),
            &BoundBackbone::ConvStub(stub),
        )
        .unwrap();
        assert_eq!(out.shape(), &[5, 888]);
    }

    #[test]
    fn backbone_variant_mismatch_is_config_error() {
        let tape = Tape::new();
        let f = tape.constant(&[1, 888], vec![0.0; 888]).unwrap();
        let mut rng = RngState::new(5);
        let weights = ConvStubWeights::init(&ConvStubConfig::default(), &mut rng);
        let stub = BoundBackbone::ConvStub(bind_stub(&tape, &weights, false));
        assert!(matches!(
            backbone_extract(&tape, &BackboneInput::Features(&f), &stub),
            Err(Error::Config(_))
        ));
        let frames = [f.clone()];
        assert!(matches!(
            backbone_extract(&tape, &BackboneInput::Images(&frames), &BoundBackbone::Precomputed),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fuse_forward_default_shape_contract() {
        let mut rng = RngState::new(6);
        let model = FusionModel::init(ModelConfig::default(), &mut rng).unwrap();
        let logits = model
            .eval_logits(&rand_vec(&mut rng, 64 * 888, 1.0), 64)
            .unwrap();
        assert_eq!(logits.len(), 64 * 8);
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut rng = RngState::new(7);
        let mut model = FusionModel::init(small_config(), &mut rng).unwrap();
        model.classifier_w = Param::zeros(&model.classifier_w.shape.clone());
        model.classifier_b = Param::zeros(&model.classifier_b.shape.clone());
        let logits = model
            .eval_logits(&rand_vec(&mut rng, 3 * 6, 1.0), 3)
            .unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_compositional_oracle() {
        // Independent pipeline: branch calls, manual concatenation, manual
        // affine head, all outside fuse_forward.
        let mut rng = RngState::new(8);
        let model = FusionModel::init(small_config(), &mut rng).unwrap();
        let m = model.config.model_dim();
        let s = 4;
        let xv = rand_vec(&mut rng, s * m, 1.0);

        let got = model.eval_logits(&xv, s).unwrap();

        let tape = Tape::new();
        let x = tape.constant(&[s, m], xv).unwrap();
        let bound = model.bind(&tape, false).unwrap();
        let mut drng = RngState::new(0);
        let attn =
            multi_head_self_attention(&tape, &x, &bound.attention, &model.config.attention, false, &mut drng)
                .unwrap();
        let enc =
            encoder_forward(&tape, &x, &bound.encoder, &model.config.encoder, false, &mut drng).unwrap();
        let fused_dim = model.config.fused_dim();
        let classes = model.config.head.num_classes;
        let mut want = vec![0.0; s * classes];
        for i in 0..s {
            let mut fused = Vec::with_capacity(fused_dim);
            fused.extend_from_slice(&x.values()[i * m..(i + 1) * m]);
            fused.extend_from_slice(&attn.values()[i * m..(i + 1) * m]);
            fused.extend_from_slice(&enc.values()[i * m..(i + 1) * m]);
            for j in 0..classes {
                let mut acc = model.classifier_b.values[j];
                for (t, f) in fused.iter().enumerate() {
                    acc += f * model.classifier_w.values[t * classes + j];
                }
                want[i * classes + j] = acc;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_uniform_logits_tie_break_to_class_zero() {
        let mut rng = RngState::new(9);
        let mut model = FusionModel::init(small_config(), &mut rng).unwrap();
        model.classifier_w = Param::zeros(&model.classifier_w.shape.clone());
        model.classifier_b = Param::zeros(&model.classifier_b.shape.clone());
        let out = predict(&rand_vec(&mut rng, 2 * 6, 1.0), 2, &model).unwrap();
        assert_eq!(out.labels, vec![0, 0]);
        for p in &out.probabilities {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_single_dominant_logit() {
        let mut rng = RngState::new(10);
        let mut model = FusionModel::init(small_config(), &mut rng).unwrap();
        model.classifier_w = Param::zeros(&model.classifier_w.shape.clone());
        let mut bias = vec![0.0; 8];
        bias[5] = 50.0;
        model.classifier_b = Param {
            shape: vec![8],
            values: bias,
        };
        let out = predict(&rand_vec(&mut rng, 3 * 6, 1.0), 3, &model).unwrap();
        assert_eq!(out.labels, vec![5, 5, 5]);
    }

    #[test]
    fn predict_probability_rows_sum_to_one() {
        let mut rng = RngState::new(11);
        let model = FusionModel::init(small_config(), &mut rng).unwrap();
        let out = predict(&rand_vec(&mut rng, 5 * 6, 1.0), 5, &model).unwrap();
        for r in 0..5 {
            let s: f64 = out.probabilities[r * 8..(r + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parameter_counts_match_analytic_formula() {
        // Classifier alone: 2664 * 8 + 8.
        let default_cfg = ModelConfig::default();
        assert_eq!(default_cfg.fused_dim() * 8 + 8, 21_320);

        // Precomputed backbone contributes nothing.
        let mut rng = RngState::new(12);
        let model = FusionModel::init(default_cfg.clone(), &mut rng).unwrap();
        let count = model.parameter_count();
        assert_eq!(count, analytic_parameter_count(&default_cfg).unwrap());
        assert_eq!(count, 455_928 + 1_370_192 + 21_320);
        assert_eq!(count, 1_847_440);
        assert_eq!(model_parameter_count(&model), count);
    }

    #[test]
    fn conv_backbone_adds_its_parameters() {
        let cfg = ModelConfig {
            backbone: BackboneSpec::ConvStub(ConvStubConfig::default()),
            ..ModelConfig::default()
        };
        let mut rng = RngState::new(13);
        let model = FusionModel::init(cfg.clone(), &mut rng).unwrap();
        let stub = 9 * 3 * 8 + 8 + 9 * 8 * 16 + 16 + 9 * 16 * 32 + 32 + 32 * 888 + 888;
        assert_eq!(
            model.parameter_count(),
            1_847_440 + stub
        );
        assert_eq!(
            analytic_parameter_count(&cfg).unwrap(),
            model.parameter_count()
        );
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic_and_rng_independent() {
        let mut rng = RngState::new(14);
        // Head dropout 0.5 is live in training but must not affect eval.
        let cfg = ModelConfig {
            head: FusionHeadConfig {
                dropout_rate: 0.5,
                num_classes: NUM_CLASSES,
            },
            ..small_config()
        };
        let model = FusionModel::init(cfg, &mut rng).unwrap();
        let xv = rand_vec(&mut rng, 3 * 6, 1.0);
        let a = model.eval_logits(&xv, 3).unwrap();
        let b = model.eval_logits(&xv, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_dropout_changes_logits() {
        let mut rng = RngState::new(15);
        let cfg = ModelConfig {
            head: FusionHeadConfig {
                dropout_rate: 0.5,
                num_classes: NUM_CLASSES,
            },
            ..small_config()
        };
        let model = FusionModel::init(cfg, &mut rng).unwrap();
        let xv = rand_vec(&mut rng, 3 * 6, 1.0);
        let eval = model.eval_logits(&xv, 3).unwrap();
        let tape = Tape::new();
        let x = tape.constant(&[3, 6], xv).unwrap();
        let bound = model.bind(&tape, false).unwrap();
        let mut drng = RngState::new(77);
        let train = fuse_forward(&tape, &x, &bound, &model.config, true, &mut drng).unwrap();
        assert_ne!(eval, train.values());
    }

    #[test]
    fn zeroed_branches_make_head_per_position() {
        let mut rng = RngState::new(16);
        let mut model = FusionModel::init(small_config(), &mut rng).unwrap();
        // Kill both branch output paths: attention output projection and
        // the encoder feed-forward second matrix (its LN path remains
        // per-position anyway).
        model.attention.layers[0].wo = Param::zeros(&model.attention.layers[0].wo.shape.clone());
        model.attention.layers[0].bo = Param::zeros(&model.attention.layers[0].bo.shape.clone());
        {
            let enc = &mut model.encoder.layers[0];
            enc.attention.wo = Param::zeros(&enc.attention.wo.shape.clone());
            enc.attention.bo = Param::zeros(&enc.attention.bo.shape.clone());
            enc.w2 = Param::zeros(&enc.w2.shape.clone());
            enc.b2 = Param::zeros(&enc.b2.shape.clone());
        }
        let m = 6;
        let mut xv = rand_vec(&mut rng, 4 * m, 1.0);
        let base = model.eval_logits(&xv, 4).unwrap();
        // Perturb position 2; positions 0, 1, 3 must keep their logits.
        for t in 0..m {
            xv[2 * m + t] += 0.5;
        }
        let changed = model.eval_logits(&xv, 4).unwrap();
        for pos in [0usize, 1, 3] {
            assert_eq!(
                &base[pos * 8..(pos + 1) * 8],
                &changed[pos * 8..(pos + 1) * 8]
            );
        }
        assert_ne!(&base[2 * 8..3 * 8], &changed[2 * 8..3 * 8]);
    }

    #[test]
    fn branches_propagate_across_positions() {
        let mut rng = RngState::new(17);
        let model = FusionModel::init(small_config(), &mut rng).unwrap();
        let m = 6;
        let mut xv = rand_vec(&mut rng, 4 * m, 1.0);
        let base = model.eval_logits(&xv, 4).unwrap();
        for t in 0..m {
            xv[2 * m + t] += 0.5;
        }
        let changed = model.eval_logits(&xv, 4).unwrap();
        assert_ne!(&base[0..8], &changed[0..8]);
    }

    #[test]
    fn gradient_reaches_every_parameter_group() {
        let mut rng = RngState::new(18);
        let model = FusionModel::init(small_config(), &mut rng).unwrap();
        let s = 3;
        let m = model.config.model_dim();
        let tape = Tape::new();
        let x = tape.constant(&[s, m], rand_vec(&mut rng, s * m, 1.0)).unwrap();
        let bound = model.bind(&tape, true).unwrap();
        let mut drng = RngState::new(0);
        let logits = fuse_forward(&tape, &x, &bound, &model.config, true, &mut drng).unwrap();
        let w = tape
            .constant(&[s, 8], rand_vec(&mut rng, s * 8, 1.0))
            .unwrap();
        let loss = ops::sum_all(&tape, &ops::hadamard(&tape, &logits, &w).unwrap()).unwrap();
        tape.backward(&loss).unwrap();

        let attn_layer = &bound.attention.layers[0];
        let enc_layer = &bound.encoder.layers[0];
        let groups: Vec<(&str, &Tensor)> = vec![
            ("attention.wq", &attn_layer.wq),
            ("attention.wo", &attn_layer.wo),
            ("encoder.attn.wq", &enc_layer.attention.layers[0].wq),
            ("encoder.ff.w1", &enc_layer.ff.w1),
            ("encoder.ff.w2", &enc_layer.ff.w2),
            ("encoder.ln1.gain", &enc_layer.ln1_gain),
            ("encoder.ln2.gain", &enc_layer.ln2_gain),
            ("classifier.w", &bound.classifier_w),
            ("classifier.b", &bound.classifier_b),
        ];
        for (name, t) in groups {
            let g = t.grad().unwrap_or_default();
            assert!(
                g.iter().any(|v| *v != 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn bound_visit_order_matches_model_visit_order() {
        let mut rng = RngState::new(20);
        for cfg in [
            small_config(),
            ModelConfig {
                backbone: BackboneSpec::ConvStub(ConvStubConfig::default()),
                attention: AttentionConfig {
                    depth: 2,
                    ..AttentionConfig::default()
                },
                encoder: EncoderConfig {
                    depth: 2,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
        ] {
            let model = FusionModel::init(cfg, &mut rng).unwrap();
            let tape = Tape::new();
            let bound = model.bind(&tape, true).unwrap();
            let model_names: Vec<String> = model.visit().iter().map(|(n, _)| n.clone()).collect();
            let bound_names: Vec<String> = bound.visit().iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(model_names, bound_names);
            for ((_, p), (_, t)) in model.visit().iter().zip(bound.visit().iter()) {
                assert_eq!(p.shape.as_slice(), t.shape());
            }
        }
    }

    #[test]
    fn conv_stub_model_dim_must_be_feature_dim() {
        let cfg = ModelConfig {
            backbone: BackboneSpec::ConvStub(ConvStubConfig::default()),
            ..small_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
