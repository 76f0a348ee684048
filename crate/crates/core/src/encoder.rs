//! Convolutional quality encoder and its three heads.
//!
//! Seven 3×3 convolutions (strides 1,2,2,2,1,2,1, padding 1) each followed by
//! batch norm and ReLU except the last, global average pooling, two FC layers
//! and a shared FC producing the `d`-dimensional quality feature. On top sit
//! a non-negative linear source regressor, a two-way rank classifier over
//! feature differences and a two-layer target regressor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnBatchStats, BnMode, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

pub const CONV_STRIDES: [usize; 7] = [1, 2, 2, 2, 1, 2, 1];
pub const BASE_CHANNELS: [usize; 7] = [48, 48, 64, 64, 64, 64, 128];
pub const BASE_FC: [usize; 2] = [256, 256];
pub const BASE_FEATURE_DIM: usize = 128;
pub const BASE_TARGET_HIDDEN: usize = 256;
pub const BN_MOMENTUM: f64 = 0.1;

pub const SRC_REG_W: &str = "src_reg.weight";
pub const SRC_REG_B: &str = "src_reg.bias";
pub const RANK_W: &str = "rank_cls.weight";
pub const RANK_B: &str = "rank_cls.bias";
pub const TGT_W1: &str = "tgt_reg.fc1.weight";
pub const TGT_B1: &str = "tgt_reg.fc1.bias";
pub const TGT_W2: &str = "tgt_reg.fc2.weight";
pub const TGT_B2: &str = "tgt_reg.fc2.bias";
pub const CENTER0: &str = "center.0";
pub const CENTER1: &str = "center.1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Pixels per side of the (square) network input.
    pub input_size: usize,
    pub channel_widths: [usize; 7],
    pub fc_widths: [usize; 2],
    pub feature_dim: usize,
    pub target_hidden: usize,
    pub scale_factor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::scaled(224, 1.0)
    }
}

impl EncoderConfig {
    /// Full architecture with every width multiplied by `scale_factor`.
    pub fn scaled(input_size: usize, scale_factor: f64) -> Self {
        let s = |w: usize| ((w as f64 * scale_factor).round() as usize).max(1);
        Self {
            input_size,
            channel_widths: BASE_CHANNELS.map(s),
            fc_widths: BASE_FC.map(s),
            feature_dim: s(BASE_FEATURE_DIM),
            target_hidden: s(BASE_TARGET_HIDDEN),
            scale_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return Err(Error::Config(format!(
                "scale_factor must be positive, got {}",
                self.scale_factor
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature dimension {} < 2; increase scale_factor",
                self.feature_dim
            )));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side length after every convolution.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut side = self.input_size;
        CONV_STRIDES
            .iter()
            .map(|&s| {
                side = (side + 2 - 3) / s + 1;
                side
            })
            .collect()
    }
}

fn conv_w(i: usize) -> String {
    format!("enc.conv{i}.weight")
}
fn conv_b(i: usize) -> String {
    format!("enc.conv{i}.bias")
}
fn bn_gamma(i: usize) -> String {
    format!("enc.bn{i}.gamma")
}
fn bn_beta(i: usize) -> String {
    format!("enc.bn{i}.beta")
}
fn bn_mean(i: usize) -> String {
    format!("enc.bn{i}.running_mean")
}
fn bn_var(i: usize) -> String {
    format!("enc.bn{i}.running_var")
}
fn fc_w(i: usize) -> String {
    format!("enc.fc{i}.weight")
}
fn fc_b(i: usize) -> String {
    format!("enc.fc{i}.bias")
}

/// Which parameter groups receive gradients while a graph is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Encoder, source regressor, rank classifier and centers.
    Ranking,
    /// Only the target regression head.
    TargetHead,
    All,
    None,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        if name.ends_with("running_mean") || name.ends_with("running_var") {
            return false;
        }
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::TargetHead => name.starts_with("tgt_reg."),
            Trainable::Ranking => !name.starts_with("tgt_reg."),
        }
    }
}

/// Learnable parameters and buffers, keyed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: EncoderConfig,
    params: BTreeMap<String, Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

impl ModelState {
    /// Fresh parameters: centered uniform weights with bound `1/sqrt(fan_in)`,
    /// unit/zero batch-norm affine, small random centers.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut in_ch = 3;
        for (i, &out) in config.channel_widths.iter().enumerate() {
            let fan_in = (in_ch * 9) as f64;
            params.insert(conv_w(i), uniform(&mut rng, vec![out, in_ch, 3, 3], fan_in.sqrt().recip()));
            if i == 6 {
                params.insert(conv_b(i), uniform(&mut rng, vec![out], fan_in.sqrt().recip()));
            } else {
                params.insert(bn_gamma(i), Tensor::full(vec![out], 1.0));
                params.insert(bn_beta(i), Tensor::zeros(vec![out]));
                params.insert(bn_mean(i), Tensor::zeros(vec![out]));
                params.insert(bn_var(i), Tensor::full(vec![out], 1.0));
            }
            in_ch = out;
        }
        let dims = [
            in_ch,
            config.fc_widths[0],
            config.fc_widths[1],
            config.feature_dim,
        ];
        for i in 0..3 {
            let bound = (dims[i] as f64).sqrt().recip();
            params.insert(fc_w(i), uniform(&mut rng, vec![dims[i], dims[i + 1]], bound));
            params.insert(fc_b(i), uniform(&mut rng, vec![dims[i + 1]], bound));
        }
        let d = config.feature_dim;
        let bound = (d as f64).sqrt().recip();
        let mut w = uniform(&mut rng, vec![d, 1], bound);
        w.data_mut().iter_mut().for_each(|v| *v = v.abs());
        params.insert(SRC_REG_W.into(), w);
        params.insert(SRC_REG_B.into(), Tensor::zeros(vec![1]));
        params.insert(RANK_W.into(), uniform(&mut rng, vec![d, 2], bound));
        params.insert(RANK_B.into(), uniform(&mut rng, vec![2], bound));
        let h = config.target_hidden;
        params.insert(TGT_W1.into(), uniform(&mut rng, vec![d, h], bound));
        params.insert(TGT_B1.into(), uniform(&mut rng, vec![h], bound));
        let hb = (h as f64).sqrt().recip();
        params.insert(TGT_W2.into(), uniform(&mut rng, vec![h, 1], hb));
        params.insert(TGT_B2.into(), uniform(&mut rng, vec![1], hb));
        params.insert(CENTER0.into(), uniform(&mut rng, vec![d], 0.01));
        params.insert(CENTER1.into(), uniform(&mut rng, vec![d], 0.01));
        Ok(Self { config, params })
    }

    /// Rebuild from stored tensors, checking names and shapes against a
    /// fresh model of the same configuration.
    pub fn from_parts(config: EncoderConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in &reference.params {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named {name}")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.param_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Names of the encoder parameters and buffers (everything under `enc.`).
    pub fn encoder_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .map(String::as_str)
            .filter(|k| k.starts_with("enc."))
    }

    /// Copy the target-regression head from another state.
    pub fn copy_target_head_from(&mut self, other: &ModelState) -> Result<()> {
        for name in [TGT_W1, TGT_B1, TGT_W2, TGT_B2] {
            self.set_param(name, other.param(name)?.clone())?;
        }
        Ok(())
    }

    /// Blend batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BnBatchStats)]) -> Result<()> {
        for (layer, stats) in updates {
            let m = self.param_mut(&bn_mean(*layer))?;
            for (r, b) in m.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let v = self.param_mut(&bn_var(*layer))?;
            for (r, b) in v.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// Clamp the source-regression weights and bias to be non-negative.
    pub fn project_source_regressor(&mut self) {
        for name in [SRC_REG_W, SRC_REG_B] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }
}

/// Maps parameter names to graph leaves for one forward pass.
#[derive(Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl Bindings {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            vars: BTreeMap::new(),
            trainable,
        }
    }

    /// Pre-bind `name` to an existing node (used by gradient checks).
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn var(&mut self, g: &mut Graph, state: &ModelState, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = state.param(name)?;
        let v = if self.trainable.includes(name) {
            g.parameter(t)
        } else {
            g.leaf(&t.clone().with_requires_grad(false))
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound trainable parameter, in name order.
    pub fn collect(&self, grads: &Gradients, state: &ModelState) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .filter(|(name, _)| self.trainable.includes(name))
            .map(|(name, v)| {
                let g = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| {
                    vec![0.0; state.param(name).map(Tensor::numel).unwrap_or(0)]
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Result of encoding a batch.
#[derive(Debug)]
pub struct Encoded {
    /// `[N, d]` quality features.
    pub features: Var,
    /// Training-mode batch statistics per batch-norm layer.
    pub bn_updates: Vec<(usize, BnBatchStats)>,
}

/// Pack images into an `[N, 3, S, S]` input tensor, resizing as needed.
pub fn pack_images(images: &[&Image], size: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to encode".into()));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        img.validate_rgb()?;
        let resized = img.resize(size, size)?;
        data.extend_from_slice(resized.data());
    }
    Tensor::new(vec![images.len(), 3, size, size], data)
}

/// Run the encoder on an `[N, 3, S, S]` node.
pub fn encode_batch(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    input: Var,
    mode: Mode,
) -> Result<Encoded> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidInput(format!(
            "encoder expects [N, 3, H, W] input, got {shape:?}"
        )));
    }
    let mut x = input;
    let mut bn_updates = Vec::new();
    for (i, &stride) in CONV_STRIDES.iter().enumerate() {
        let w = b.var(g, state, &conv_w(i))?;
        if i == 6 {
            let bias = b.var(g, state, &conv_b(i))?;
            x = g.conv2d(x, w, Some(bias), stride, 1)?;
        } else {
            x = g.conv2d(x, w, None, stride, 1)?;
            let gamma = b.var(g, state, &bn_gamma(i))?;
            let beta = b.var(g, state, &bn_beta(i))?;
            let (y, stats) = match mode {
                Mode::Train => g.batch_norm(x, gamma, beta, BnMode::Train)?,
                Mode::Eval => {
                    let mean = state.param(&bn_mean(i))?.data();
                    let var = state.param(&bn_var(i))?.data();
                    g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?
                }
            };
            if let Some(s) = stats {
                bn_updates.push((i, s));
            }
            x = g.relu(y);
        }
    }
    x = g.global_avg_pool(x)?;
    for i in 0..3 {
        x = linear(g, b, state, x, &fc_w(i), &fc_b(i))?;
        if i < 2 {
            x = g.relu(x);
        }
    }
    Ok(Encoded {
        features: x,
        bn_updates,
    })
}

/// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    x: Var,
    weight: &str,
    bias: &str,
) -> Result<Var> {
    let w = b.var(g, state, weight)?;
    let bv = b.var(g, state, bias)?;
    let y = g.matmul(x, w)?;
    let rows = g.shape(y)[0];
    let bb = g.broadcast_rows(bv, rows)?;
    g.add(y, bb)
}

/// Source quality score `w_regᵀ F + b` per row of `features`.
pub fn regress_source(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    features: Var,
) -> Result<Var> {
    for name in [SRC_REG_W, SRC_REG_B] {
        if state.param(name)?.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Constraint(format!("{name} has a negative entry")));
        }
    }
    let y = linear(g, b, state, features, SRC_REG_W, SRC_REG_B)?;
    let n = g.shape(y)[0];
    g.reshape(y, vec![n])
}

/// Ranking feature of a pair: elementwise difference of the two features.
pub fn rank_feature(g: &mut Graph, first: Var, second: Var) -> Result<Var> {
    if g.shape(first) != g.shape(second) {
        return Err(Error::ShapeMismatch {
            op: "rank_feature",
            left: g.shape(first).to_vec(),
            right: g.shape(second).to_vec(),
        });
    }
    g.sub(first, second)
}

/// Two-way logits of the rank classifier, `[N, 2]`.
pub fn rank_logits(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    rank_features: Var,
) -> Result<Var> {
    let z = linear(g, b, state, rank_features, RANK_W, RANK_B)?;
    if !g.value(z).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rank classifier logits".into()));
    }
    Ok(z)
}

/// Probability (class 1) that the first image of each pair has better quality.
pub fn classify_rank(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    rank_features: Var,
) -> Result<Var> {
    let z = rank_logits(g, b, state, rank_features)?;
    probability_from_logits(g, z)
}

pub fn probability_from_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = g.softmax(logits)?;
    let n = g.shape(p)[0];
    let p1 = g.slice(p, 1, 1, 2)?;
    g.reshape(p1, vec![n])
}

/// Target-domain quality from frozen features: `FC → ReLU → FC`.
pub fn regress_target(
    g: &mut Graph,
    b: &mut Bindings,
    state: &ModelState,
    features: Var,
) -> Result<Var> {
    let h = linear(g, b, state, features, TGT_W1, TGT_B1)?;
    let h = g.relu(h);
    let y = linear(g, b, state, h, TGT_W2, TGT_B2)?;
    if !g.value(y).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("target regression output".into()));
    }
    let n = g.shape(y)[0];
    g.reshape(y, vec![n])
}

/// Eval-mode features for a list of images, `[N, d]`. Each image goes
/// through its own graph, so results do not depend on batching.
pub fn encode_images(state: &ModelState, images: &[&Image]) -> Result<Tensor> {
    let d = state.feature_dim();
    let mut data = Vec::with_capacity(images.len() * d);
    let size = state.config().input_size;
    for img in images {
        let mut g = Graph::new();
        let mut b = Bindings::new(Trainable::None);
        let x = g.leaf(&pack_images(&[img], size)?);
        let enc = encode_batch(&mut g, &mut b, state, x, Mode::Eval)?;
        data.extend_from_slice(g.value(enc.features));
    }
    Tensor::new(vec![images.len(), d], data)
}

/// Features of one image.
pub fn encode(image: &Image, state: &ModelState, mode: Mode) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut b = Bindings::new(Trainable::None);
    let x = g.leaf(&pack_images(&[image], state.config().input_size)?);
    let enc = encode_batch(&mut g, &mut b, state, x, mode)?;
    Ok(g.value(enc.features).to_vec())
}

/// Plain-float rank probability for one feature difference.
pub fn rank_probability(state: &ModelState, rank_feature: &[f64]) -> Result<f64> {
    let w = state.param(RANK_W)?;
    let bias = state.param(RANK_B)?.data();
    let d = state.feature_dim();
    if rank_feature.len() != d {
        return Err(Error::ShapeMismatch {
            op: "rank_probability",
            left: vec![d],
            right: vec![rank_feature.len()],
        });
    }
    let mut z = [bias[0], bias[1]];
    for (k, f) in rank_feature.iter().enumerate() {
        z[0] += f * w.at2(k, 0);
        z[1] += f * w.at2(k, 1);
    }
    if !(z[0].is_finite() && z[1].is_finite()) {
        return Err(Error::NonFinite("rank classifier logits".into()));
    }
    // softmax class 1 = 1 / (1 + exp(z0 - z1))
    Ok(1.0 / (1.0 + (z[0] - z[1]).exp()))
}

/// Target-regression predictions from cached features `[N, d]`.
pub fn predict_target(state: &ModelState, features: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut b = Bindings::new(Trainable::None);
    let x = g.leaf(features);
    let y = regress_target(&mut g, &mut b, state, x)?;
    Ok(g.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn tiny() -> ModelState {
        ModelState::init(EncoderConfig::scaled(16, 0.125), 3).unwrap()
    }

    #[test]
    fn scaled_config_widths() {
        let c = EncoderConfig::scaled(32, 0.25);
        assert_eq!(c.channel_widths, [12, 12, 16, 16, 16, 16, 32]);
        assert_eq!(c.fc_widths, [64, 64]);
        assert_eq!(c.feature_dim, 32);
        assert_eq!(c.spatial_sizes(), vec![32, 16, 8, 4, 4, 2, 2]);
        assert_eq!(EncoderConfig::default().spatial_sizes()[6], 14);
        assert!(EncoderConfig::scaled(32, 0.01).validate().is_err());
    }

    #[test]
    fn all_zero_image_gives_finite_features() {
        let s = tiny();
        let f = encode(&Image::filled(3, 16, 16, 0.0), &s, Mode::Eval).unwrap();
        assert_eq!(f.len(), s.feature_dim());
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_images_identical_features() {
        let s = tiny();
        let img = Image::new(3, 16, 16, (0..768).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        let a = encode(&img, &s, Mode::Eval).unwrap();
        let b = encode(&img.clone(), &s, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_scale_feature_length() {
        let c = EncoderConfig::default();
        assert_eq!(c.feature_dim, 128);
        assert_eq!(c.channel_widths, BASE_CHANNELS);
        let s = ModelState::init(c, 0).unwrap();
        assert_eq!(s.param(TGT_W1).unwrap().shape(), &[128, 256]);
        assert_eq!(s.param(TGT_W2).unwrap().shape(), &[256, 1]);
        assert_eq!(s.param(RANK_W).unwrap().shape(), &[128, 2]);
        assert_eq!(s.param(SRC_REG_W).unwrap().shape(), &[128, 1]);
    }

    #[test]
    #[ignore = "full-resolution forward pass; slow"]
    fn full_scale_forward_at_224() {
        let s = ModelState::init(EncoderConfig::default(), 0).unwrap();
        let f = encode(&Image::filled(3, 224, 224, 0.5), &s, Mode::Eval).unwrap();
        assert_eq!(f.len(), 128);
    }

    #[test]
    fn encoder_rejects_bad_inputs() {
        let s = tiny();
        assert!(encode(&Image::filled(1, 16, 16, 0.0), &s, Mode::Eval).is_err());
        let mut img = Image::filled(3, 16, 16, 0.0);
        img.data_mut()[5] = f64::NAN;
        assert!(encode(&img, &s, Mode::Eval).is_err());
    }

    #[test]
    fn shape_invariant_across_input_sizes() {
        let s = tiny();
        for size in [8, 16, 23, 40] {
            let f = encode(&Image::filled(3, size, size, 0.3), &s, Mode::Eval).unwrap();
            assert_eq!(f.len(), s.feature_dim());
        }
    }

    fn source_score(s: &ModelState, f: &[f64]) -> f64 {
        let mut g = Graph::new();
        let mut b = Bindings::new(Trainable::None);
        let x = g.constant(vec![1, f.len()], f.to_vec()).unwrap();
        let y = regress_source(&mut g, &mut b, s, x).unwrap();
        g.value(y)[0]
    }

    #[test]
    fn source_regressor_cases() {
        let mut s = tiny();
        let d = s.feature_dim();
        assert_eq!(source_score(&s, &vec![0.0; d]), 0.0);
        let w_sum: f64 = s.param(SRC_REG_W).unwrap().data().iter().sum();
        assert!((source_score(&s, &vec![1.0; d]) - w_sum).abs() < 1e-12);
        // monotone in each coordinate
        let base: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let y0 = source_score(&s, &base);
        for k in 0..d {
            let mut up = base.clone();
            up[k] += 0.5;
            assert!(source_score(&s, &up) >= y0);
        }
        s.param_mut(SRC_REG_W).unwrap().data_mut()[0] = -0.1;
        let mut g = Graph::new();
        let mut b = Bindings::new(Trainable::None);
        let x = g.constant(vec![1, d], vec![0.0; d]).unwrap();
        assert!(matches!(
            regress_source(&mut g, &mut b, &s, x),
            Err(Error::Constraint(_))
        ));
        s.project_source_regressor();
        assert!(s.param(SRC_REG_W).unwrap().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn rank_feature_cases() {
        let mut g = Graph::new();
        let a = g.constant(vec![2], vec![3.0, 1.0]).unwrap();
        let b = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let ab = rank_feature(&mut g, a, b).unwrap();
        let ba = rank_feature(&mut g, b, a).unwrap();
        let aa = rank_feature(&mut g, a, a).unwrap();
        assert_eq!(g.value(ab), &[2.0, -1.0]);
        assert_eq!(g.value(ba), &[-2.0, 1.0]);
        assert_eq!(g.value(aa), &[0.0, 0.0]);
        let c = g.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(rank_feature(&mut g, a, c).is_err());
    }

    #[test]
    fn classifier_softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(vec![2, 2], vec![0.3, 0.3, 10.0, -10.0]).unwrap();
        let p = probability_from_logits(&mut g, z).unwrap();
        assert_eq!(g.value(p)[0], 0.5);
        let closed = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!((g.value(p)[1] - closed).abs() < 1e-20);
        assert!((g.value(p)[1] - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn antisymmetric_classifier_fixture() {
        let mut s = tiny();
        let d = s.feature_dim();
        let mut w = Tensor::zeros(vec![d, 2]);
        for k in 0..d {
            let v = (k as f64 * 0.7).cos();
            w.data_mut()[k * 2] = -v;
            w.data_mut()[k * 2 + 1] = v;
        }
        s.set_param(RANK_W, w).unwrap();
        s.set_param(RANK_B, Tensor::zeros(vec![2])).unwrap();
        let f: Vec<f64> = (0..d).map(|k| (k as f64).sin()).collect();
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let p = rank_probability(&s, &f).unwrap();
        let q = rank_probability(&s, &neg).unwrap();
        assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_head_zero_and_deterministic() {
        let mut s = tiny();
        let d = s.feature_dim();
        let feats = Tensor::new(vec![2, d], (0..2 * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = predict_target(&s, &feats).unwrap();
        assert_eq!(a, predict_target(&s, &feats).unwrap());
        for name in [TGT_W1, TGT_B1, TGT_W2, TGT_B2] {
            let shape = s.param(name).unwrap().shape().to_vec();
            s.set_param(name, Tensor::zeros(shape)).unwrap();
        }
        let zero = Tensor::zeros(vec![1, d]);
        assert_eq!(predict_target(&s, &zero).unwrap(), vec![0.0]);
    }

    #[test]
    fn encoder_gradient_check_small() {
        let s = ModelState::init(EncoderConfig::scaled(8, 0.05), 1).unwrap();
        let img = Image::new(3, 8, 8, (0..192).map(|i| ((i * 7) % 13) as f64 / 12.0).collect()).unwrap();
        let img2 = Image::new(3, 8, 8, (0..192).map(|i| ((i * 5) % 11) as f64 / 10.0).collect()).unwrap();
        let input = pack_images(&[&img, &img2], 8).unwrap();
        let name = "enc.fc0.weight";
        let r = finite_diff_check(
            |g, v| {
                let mut b = Bindings::new(Trainable::None);
                b.bind(name, v);
                let x = g.leaf(&input);
                let enc = encode_batch(g, &mut b, &s, x, Mode::Train)?;
                let sq = g.square(enc.features);
                Ok(g.sum(sq))
            },
            s.param(name).unwrap(),
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn bn_running_average_update() {
        let mut s = tiny();
        let c = s.config().channel_widths[0];
        let stats = BnBatchStats {
            mean: vec![1.0; c],
            var: vec![3.0; c],
        };
        s.apply_bn_updates(&[(0, stats)]).unwrap();
        assert!((s.param("enc.bn0.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert!((s.param("enc.bn0.running_var").unwrap().data()[0] - 1.2).abs() < 1e-15);
    }
}
