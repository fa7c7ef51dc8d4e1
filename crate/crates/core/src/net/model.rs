//! The sparsifying autoencoder: encoder blocks produce the dense pyramid,
//! per-level gates sparsify it, and a U-Net style decoder reconstructs the
//! image from the gated levels (deepest level as bottleneck, shallower
//! levels through the skip connections).

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::{Error, Result};
use crate::pyramid::{
    compression_cost, sigmoid, BinaryMask, DensePyramid, FeatureGrid, LevelPlan, ScoreMap, SparsePyramid,
};

/// Norm used for the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    /// Sum of absolute differences.
    #[default]
    L1,
    /// Sum of squared differences.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub plan: LevelPlan,
    pub in_channels: usize,
    /// Decoder width per level, shallow first.
    pub decoder_channels: Vec<usize>,
    pub lambda: f64,
    pub recon_norm: ReconNorm,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    /// The desk-scale network: levels `[32, 64, 128]`, single-channel input.
    pub fn toy() -> Self {
        NetConfig {
            plan: LevelPlan::default(),
            in_channels: 1,
            decoder_channels: vec![8, 8, 16],
            lambda: 1e-3,
            recon_norm: ReconNorm::L1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// A few hundred parameters; used for gradient checking.
    pub fn tiny() -> Self {
        NetConfig {
            plan: LevelPlan::from_dims(&[2, 4, 6]).expect("valid"),
            decoder_channels: vec![2, 2, 4],
            lambda: 0.05,
            ..NetConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.in_channels == 0 {
            return Err(Error::InvalidInput("input must have at least one channel".into()));
        }
        if self.decoder_channels.len() != self.plan.len() || self.decoder_channels.contains(&0) {
            return Err(Error::InvalidInput("one positive decoder width per level is required".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(Error::InvalidInput("bad normalization constants".into()));
        }
        Ok(())
    }

    /// Images must be divisible by `2^n`.
    pub fn divisor(&self) -> usize {
        1 << self.plan.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub conv: Conv3x3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub up: Conv3x3,
    pub merge: Conv3x3,
}

/// Every trainable tensor. Gradients share this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub encoder: Vec<EncoderBlock>,
    /// Score weights, one vector of length `d_i` per level.
    pub omega: Vec<Vec<f64>>,
    /// `decoder[i]` consumes level `i + 1`.
    pub decoder: Vec<DecoderBlock>,
}

impl Weights {
    pub fn zeros_like(&self) -> Weights {
        let mut w = self.clone();
        for (_, t) in w.tensors_mut() {
            t.fill(0.0);
        }
        w
    }

    /// Named views in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{}.gamma", i + 1), &b.gamma));
            out.push((format!("encoder.{}.beta", i + 1), &b.beta));
            out.push((format!("encoder.{}.conv.weight", i + 1), &b.conv.weight));
            out.push((format!("encoder.{}.conv.bias", i + 1), &b.conv.bias));
        }
        for (i, o) in self.omega.iter().enumerate() {
            out.push((format!("omega.{}", i + 1), o));
        }
        for (i, b) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{}.up.weight", i + 1), &b.up.weight));
            out.push((format!("decoder.{}.up.bias", i + 1), &b.up.bias));
            out.push((format!("decoder.{}.merge.weight", i + 1), &b.merge.weight));
            out.push((format!("decoder.{}.merge.bias", i + 1), &b.merge.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{}.gamma", i + 1), &mut b.gamma));
            out.push((format!("encoder.{}.beta", i + 1), &mut b.beta));
            out.push((format!("encoder.{}.conv.weight", i + 1), &mut b.conv.weight));
            out.push((format!("encoder.{}.conv.bias", i + 1), &mut b.conv.bias));
        }
        for (i, o) in self.omega.iter_mut().enumerate() {
            out.push((format!("omega.{}", i + 1), o));
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{}.up.weight", i + 1), &mut b.up.weight));
            out.push((format!("decoder.{}.up.bias", i + 1), &mut b.up.bias));
            out.push((format!("decoder.{}.merge.weight", i + 1), &mut b.merge.weight));
            out.push((format!("decoder.{}.merge.bias", i + 1), &mut b.merge.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Network parameters plus the frozen normalization statistics used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub config: NetConfig,
    pub weights: Weights,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

impl NetParams {
    /// All convolutions and score weights zero, unit normalization scale.
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.plan.dims();
        let n = dims.len();
        let mut encoder = Vec::with_capacity(n);
        let mut in_ch = config.in_channels;
        for &d in &dims {
            encoder.push(EncoderBlock { gamma: vec![1.0; in_ch], beta: vec![0.0; in_ch], conv: Conv3x3::zeros(in_ch, d) });
            in_ch = d;
        }
        let dec = &config.decoder_channels;
        let decoder = (0..n)
            .map(|i| {
                let up_in = if i == n - 1 { dims[n - 1] } else { dec[i + 1] };
                let (merge_in, merge_out) = if i == 0 { (dec[0], config.in_channels) } else { (dec[i] + dims[i - 1], dec[i]) };
                DecoderBlock { up: Conv3x3::zeros(up_in, dec[i]), merge: Conv3x3::zeros(merge_in, merge_out) }
            })
            .collect();
        let running_mean = encoder.iter().map(|b| vec![0.0; b.gamma.len()]).collect();
        let running_var = encoder.iter().map(|b| vec![1.0; b.gamma.len()]).collect();
        Ok(NetParams {
            weights: Weights { encoder, omega: dims.iter().map(|&d| vec![0.0; d]).collect(), decoder },
            running_mean,
            running_var,
            config,
        })
    }

    /// He-normal convolutions, small score weights (initial scores near 0.5).
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let mut p = NetParams::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |conv: &mut Conv3x3, gain: f64, rng: &mut ChaCha8Rng| {
            let std = (gain / (conv.in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in conv.weight.iter_mut() {
                *w = normal.sample(rng);
            }
        };
        for b in &mut p.weights.encoder {
            fill(&mut b.conv, 2.0, &mut rng);
        }
        for (i, b) in p.weights.decoder.iter_mut().enumerate() {
            fill(&mut b.up, 2.0, &mut rng);
            fill(&mut b.merge, if i == 0 { 1.0 } else { 2.0 }, &mut rng);
        }
        for o in &mut p.weights.omega {
            let normal = Normal::new(0.0, 0.1 / (o.len() as f64).sqrt()).expect("positive std");
            for w in o.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Shape checks that a deserialized parameter set must pass.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = NetParams::zeroed(self.config.clone())?;
        let ours = self.weights.tensors();
        let theirs = reference.weights.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::DimensionMismatch("parameter layout differs from config".into()));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch(format!("{name}: {} values, expected {}", a.len(), b.len())));
            }
        }
        for (a, b) in self.running_mean.iter().zip(&reference.running_mean).chain(self.running_var.iter().zip(&reference.running_var)) {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch("normalization statistics shape".into()));
            }
        }
        if self.running_mean.len() != reference.running_mean.len() || self.running_var.len() != reference.running_var.len() {
            return Err(Error::DimensionMismatch("normalization statistics count".into()));
        }
        if !self.weights.is_finite() {
            return Err(Error::InvalidInput("non-finite weights".into()));
        }
        Ok(())
    }
}

/// Gradients mirroring [`Weights`], plus the derivative with respect to lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Weights,
    pub lambda: f64,
}

/// A set of same-sized images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub images: Vec<Tensor>,
}

impl TrainBatch {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        if images.iter().any(|im| !im.same_shape(first)) {
            return Err(Error::InvalidInput("batch images must share dimensions".into()));
        }
        if images.iter().any(|im| im.data.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
        }
        Ok(TrainBatch { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-batch loss breakdown (means over images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub reconstruction: f64,
    pub compression: f64,
    /// Mean number of kept cells per level.
    pub keypoints_per_level: Vec<f64>,
}

/// Loss of a single reconstruction: `reconstruction + lambda * sum p d`.
pub fn loss(
    image: &Tensor,
    recon: &Tensor,
    scores: &[&ScoreMap],
    dims: &[usize],
    lambda: f64,
    norm: ReconNorm,
) -> Result<LossReport> {
    if !image.same_shape(recon) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{}x{} vs reconstruction {}x{}x{}",
            image.c, image.h, image.w, recon.c, recon.h, recon.w
        )));
    }
    let reconstruction = reconstruction_error(image, recon, norm);
    let compression = compression_cost(scores, dims)?;
    Ok(LossReport {
        total: reconstruction + lambda * compression,
        reconstruction,
        compression,
        keypoints_per_level: scores.iter().map(|s| s.values.iter().sum()).collect(),
    })
}

fn reconstruction_error(image: &Tensor, recon: &Tensor, norm: ReconNorm) -> f64 {
    let diffs = image.data.iter().zip(&recon.data).map(|(a, b)| b - a);
    match norm {
        ReconNorm::L1 => diffs.map(f64::abs).sum(),
        ReconNorm::L2 => diffs.map(|d| d * d).sum(),
    }
}

/// How the straight-through estimator treats the mask in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskGradient {
    /// `dm/dp := 1`: the reconstruction term reaches the scores.
    StraightThrough,
    /// The mask is a constant: exact gradient of the masked network.
    Frozen,
}

/// Where the per-cell gates come from in a forward pass.
pub enum Gating<'a> {
    /// Bernoulli draw from the scores.
    Sample(&'a mut ChaCha8Rng),
    /// Given masks (`[image][level]`). With an anchor `p0`, the gate is
    /// `m + p - p0`: numerically equal to `m` at the anchor point while
    /// carrying unit slope in `p`, so finite differences see the
    /// straight-through surrogate.
    Fixed { masks: &'a [Vec<BinaryMask>], anchor: Option<&'a [Vec<Vec<f64>>]> },
    /// Every cell kept.
    Open,
    /// Keep cells with `p >= tau`.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    /// Statistics of the current batch (training).
    Batch,
    /// Frozen running statistics (inference).
    Running,
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    pool_shape: (usize, usize, usize),
    argmax: Vec<Vec<usize>>,
    bn: Option<BatchNormCache>,
    bn_out: Vec<Tensor>,
    relu_out: Vec<Tensor>,
}

/// One image's state at one level.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub features: Tensor,
    pub scores: Vec<f64>,
    pub mask: BinaryMask,
    pub gate: Vec<f64>,
    pub gated: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderTrace {
    up_in: Tensor,
    up_pre: Tensor,
    merge_in: Tensor,
    merge_pre: Tensor,
}

/// Everything a forward pass over a batch produces.
#[derive(Debug, Clone)]
pub struct BatchForward {
    encoder: Vec<EncoderTrace>,
    /// `[image][level]`
    pub levels: Vec<Vec<LevelState>>,
    decoder: Vec<Vec<DecoderTrace>>,
    pub outputs: Vec<Tensor>,
}

impl BatchForward {
    /// Hash of every piecewise-linear branch taken (ReLU signs, pooling
    /// winners). Two evaluations with equal signatures lie on the same
    /// smooth piece of the network.
    pub fn branch_signature(&self, images: &[Tensor], norm: ReconNorm) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in &self.encoder {
            e.argmax.hash(&mut h);
            for t in &e.bn_out {
                t.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>().hash(&mut h);
            }
        }
        for per_image in &self.decoder {
            for d in per_image {
                d.up_pre.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>().hash(&mut h);
                d.merge_pre.data.iter().map(|&v| v > 0.0).collect::<Vec<_>>().hash(&mut h);
            }
        }
        for (out, im) in self.outputs.iter().zip(images).filter(|_| norm == ReconNorm::L1) {
            out.data.iter().zip(&im.data).map(|(a, b)| a > b).collect::<Vec<_>>().hash(&mut h);
        }
        h.finish()
    }

    /// Batch mean and variance per encoder level (empty with running statistics).
    pub fn batch_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.encoder.iter().filter_map(|e| e.bn.as_ref().map(|c| (c.mean.clone(), c.var.clone()))).collect()
    }

    /// Per-level score maps of image `b`.
    pub fn score_maps(&self, b: usize) -> Vec<ScoreMap> {
        self.levels[b]
            .iter()
            .map(|l| ScoreMap { rows: l.features.h, cols: l.features.w, values: l.scores.clone() })
            .collect()
    }

    /// Batch-mean loss report.
    pub fn report(&self, images: &[Tensor], config: &NetConfig) -> LossReport {
        let dims = config.plan.dims();
        let nb = images.len() as f64;
        let mut recon = 0.0;
        let mut comp = 0.0;
        let mut kept = vec![0.0; dims.len()];
        for (b, im) in images.iter().enumerate() {
            recon += reconstruction_error(im, &self.outputs[b], config.recon_norm);
            for (li, l) in self.levels[b].iter().enumerate() {
                comp += l.scores.iter().sum::<f64>() * dims[li] as f64;
                kept[li] += l.mask.count_ones() as f64;
            }
        }
        let (reconstruction, compression) = (recon / nb, comp / nb);
        LossReport {
            total: reconstruction + config.lambda * compression,
            reconstruction,
            compression,
            keypoints_per_level: kept.into_iter().map(|k| k / nb).collect(),
        }
    }
}

fn check_finite(t: &Tensor, layer: impl FnOnce() -> String) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

fn check_image_dims(config: &NetConfig, im: &Tensor) -> Result<()> {
    let k = config.divisor();
    if im.c != config.in_channels || im.h == 0 || im.w == 0 || !im.h.is_multiple_of(k) || !im.w.is_multiple_of(k) {
        return Err(Error::InvalidInput(format!(
            "image {}x{}x{} must have {} channel(s) and sides divisible by {k}",
            im.h, im.w, im.c, config.in_channels
        )));
    }
    Ok(())
}

/// Runs encoder, gating and decoder over a batch.
pub fn forward_batch(params: &NetParams, images: &[Tensor], mut gating: Gating<'_>, stats: NormStats) -> Result<BatchForward> {
    let cfg = &params.config;
    if images.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for im in images {
        check_image_dims(cfg, im)?;
    }
    let n = cfg.plan.len();
    let nb = images.len();
    let w = &params.weights;

    let mut encoder = Vec::with_capacity(n);
    let mut levels: Vec<Vec<LevelState>> = vec![Vec::with_capacity(n); nb];
    let mut prev: Vec<Tensor> = images.to_vec();
    for li in 0..n {
        let block = &w.encoder[li];
        let mut pooled = Vec::with_capacity(nb);
        let mut argmax = Vec::with_capacity(nb);
        for x in &prev {
            let (p, a) = maxpool_forward(x);
            pooled.push(p);
            argmax.push(a);
        }
        let pool_shape = (prev[0].c, prev[0].h, prev[0].w);
        let (bn_out, bn) = match stats {
            NormStats::Batch => {
                let (o, c) = batchnorm_train_forward(&pooled, &block.gamma, &block.beta, cfg.bn_eps);
                (o, Some(c))
            }
            NormStats::Running => (
                pooled
                    .iter()
                    .map(|p| batchnorm_eval_forward(p, &block.gamma, &block.beta, &params.running_mean[li], &params.running_var[li], cfg.bn_eps))
                    .collect(),
                None,
            ),
        };
        let mut relu_out = Vec::with_capacity(nb);
        let mut feats = Vec::with_capacity(nb);
        for t in &bn_out {
            check_finite(t, || format!("encoder.{}.norm", li + 1))?;
            let r = relu_forward(t);
            let f = conv_forward(&block.conv, &r);
            check_finite(&f, || format!("encoder.{}.conv", li + 1))?;
            relu_out.push(r);
            feats.push(f);
        }
        let spec = cfg.plan.levels()[li];
        for (b, f) in feats.iter().enumerate() {
            let cells = f.h * f.w;
            let omega = &w.omega[li];
            let scores: Vec<f64> = (0..cells)
                .map(|j| sigmoid((0..f.c).map(|c| omega[c] * f.data[c * cells + j]).sum()))
                .collect();
            let (mask, gate) = match &mut gating {
                Gating::Sample(rng) => {
                    let bits: Vec<u8> = scores.iter().map(|&p| (rng.random::<f64>() < p) as u8).collect();
                    let gate = bits.iter().map(|&m| m as f64).collect();
                    (BinaryMask { level: spec, rows: f.h, cols: f.w, bits }, gate)
                }
                Gating::Fixed { masks, anchor } => {
                    let m = masks
                        .get(b)
                        .and_then(|v| v.get(li))
                        .ok_or_else(|| Error::DimensionMismatch("missing mask for image/level".into()))?;
                    if m.bits.len() != cells {
                        return Err(Error::DimensionMismatch(format!("mask for level {} has wrong size", li + 1)));
                    }
                    let mut gate: Vec<f64> = m.bits.iter().map(|&x| x as f64).collect();
                    if let Some(anchor) = anchor {
                        for ((g, &p), &p0) in gate.iter_mut().zip(&scores).zip(&anchor[b][li]) {
                            *g += p - p0;
                        }
                    }
                    (m.clone(), gate)
                }
                Gating::Open => (BinaryMask::filled(spec, f.h, f.w, true), vec![1.0; cells]),
                Gating::Threshold(tau) => {
                    let bits: Vec<u8> = scores.iter().map(|&p| (p >= *tau) as u8).collect();
                    let gate = bits.iter().map(|&m| m as f64).collect();
                    (BinaryMask { level: spec, rows: f.h, cols: f.w, bits }, gate)
                }
            };
            let mut gated = f.clone();
            for c in 0..f.c {
                for (v, g) in gated.plane_mut(c).iter_mut().zip(&gate) {
                    *v *= g;
                }
            }
            levels[b].push(LevelState { features: f.clone(), scores, mask, gate, gated });
        }
        encoder.push(EncoderTrace { pool_shape, argmax, bn, bn_out, relu_out });
        prev = feats;
    }

    let mut decoder = Vec::with_capacity(nb);
    let mut outputs = Vec::with_capacity(nb);
    for lv in &levels {
        let gated: Vec<&Tensor> = lv.iter().map(|l| &l.gated).collect();
        let (out, trace) = decoder_forward(&w.decoder, &gated)?;
        decoder.push(trace);
        outputs.push(out);
    }
    Ok(BatchForward { encoder, levels, decoder, outputs })
}

fn decoder_forward(blocks: &[DecoderBlock], gated: &[&Tensor]) -> Result<(Tensor, Vec<DecoderTrace>)> {
    let n = blocks.len();
    let mut traces: Vec<DecoderTrace> = Vec::with_capacity(n);
    let mut y = gated[n - 1].clone();
    for li in (0..n).rev() {
        let block = &blocks[li];
        let up_in = upsample_forward(&y);
        let up_pre = conv_forward(&block.up, &up_in);
        check_finite(&up_pre, || format!("decoder.{}.up", li + 1))?;
        let u = relu_forward(&up_pre);
        let merge_in = if li > 0 {
            if gated[li - 1].h != u.h || gated[li - 1].w != u.w {
                return Err(Error::DimensionMismatch(format!("level {} skip connection shape", li)));
            }
            Tensor::concat(&u, gated[li - 1])
        } else {
            u
        };
        let merge_pre = conv_forward(&block.merge, &merge_in);
        check_finite(&merge_pre, || format!("decoder.{}.merge", li + 1))?;
        y = if li > 0 { relu_forward(&merge_pre) } else { merge_pre.clone() };
        traces.push(DecoderTrace { up_in, up_pre, merge_in, merge_pre });
    }
    traces.reverse();
    Ok((y, traces))
}

/// Backward pass of [`forward_batch`] for the batch-mean loss.
pub fn backward_batch(
    params: &NetParams,
    images: &[Tensor],
    fwd: &BatchForward,
    mask_gradient: MaskGradient,
) -> Result<Gradients> {
    let cfg = &params.config;
    let w = &params.weights;
    let n = cfg.plan.len();
    let nb = images.len() as f64;
    let dims = cfg.plan.dims();
    let mut grads = w.zeros_like();

    // d loss / d features, per image per level
    let mut dfeat: Vec<Vec<Tensor>> = Vec::with_capacity(images.len());
    for (b, im) in images.iter().enumerate() {
        let out = &fwd.outputs[b];
        let dout = Tensor {
            c: out.c,
            h: out.h,
            w: out.w,
            data: out
                .data
                .iter()
                .zip(&im.data)
                .map(|(o, i)| match cfg.recon_norm {
                    ReconNorm::L1 => {
                        let d = o - i;
                        if d > 0.0 {
                            1.0 / nb
                        } else if d < 0.0 {
                            -1.0 / nb
                        } else {
                            0.0
                        }
                    }
                    ReconNorm::L2 => 2.0 * (o - i) / nb,
                })
                .collect(),
        };
        let dgated = decoder_backward(&w.decoder, &fwd.decoder[b], dout, &mut grads.decoder);

        let mut per_level = Vec::with_capacity(n);
        for (li, (lvl, dg)) in fwd.levels[b].iter().zip(dgated).enumerate() {
            let f = &lvl.features;
            let cells = f.h * f.w;
            let mut df = dg.clone();
            let mut dgate = vec![0.0; cells];
            for c in 0..f.c {
                let fp = f.plane(c);
                let gp = dg.plane(c);
                let dfp = df.plane_mut(c);
                for j in 0..cells {
                    dfp[j] = gp[j] * lvl.gate[j];
                    dgate[j] += gp[j] * fp[j];
                }
            }
            let omega = &w.omega[li];
            let gomega = &mut grads.omega[li];
            for (j, &p) in lvl.scores.iter().enumerate().take(cells) {
                let mut dp = cfg.lambda * dims[li] as f64 / nb;
                if mask_gradient == MaskGradient::StraightThrough {
                    dp += dgate[j];
                }
                let ds = dp * p * (1.0 - p);
                if ds == 0.0 {
                    continue;
                }
                for c in 0..f.c {
                    gomega[c] += ds * f.data[c * cells + j];
                    df.data[c * cells + j] += ds * omega[c];
                }
            }
            per_level.push(df);
        }
        dfeat.push(per_level);
    }

    for li in (0..n).rev() {
        let block = &w.encoder[li];
        let trace = &fwd.encoder[li];
        let mut dbn = Vec::with_capacity(images.len());
        for (b, feats) in dfeat.iter().enumerate() {
            let drelu = conv_backward(&block.conv, &trace.relu_out[b], &feats[li], &mut grads.encoder[li].conv);
            dbn.push(relu_backward(&trace.bn_out[b], &drelu));
        }
        let gblock = &mut grads.encoder[li];
        let dpooled = match &trace.bn {
            Some(cache) => batchnorm_train_backward(cache, &block.gamma, &dbn, &mut gblock.gamma, &mut gblock.beta),
            None => return Err(Error::InvalidInput("backward requires batch statistics".into())),
        };
        if li > 0 {
            for b in 0..images.len() {
                let dx = maxpool_backward(trace.pool_shape, &trace.argmax[b], &dpooled[b]);
                for (a, v) in dfeat[b][li - 1].data.iter_mut().zip(&dx.data) {
                    *a += v;
                }
            }
        }
    }

    let lambda = fwd.report(images, cfg).compression;
    let g = Gradients { weights: grads, lambda };
    if !g.weights.is_finite() {
        return Err(Error::NonFinite { layer: "gradients".into() });
    }
    Ok(g)
}

/// Returns the gradient with respect to each gated level.
fn decoder_backward(blocks: &[DecoderBlock], traces: &[DecoderTrace], dout: Tensor, grads: &mut [DecoderBlock]) -> Vec<Tensor> {
    let n = blocks.len();
    let mut dgated: Vec<Option<Tensor>> = vec![None; n];
    let mut dy = dout;
    for li in 0..n {
        let t = &traces[li];
        let dmerge_pre = if li > 0 { relu_backward(&t.merge_pre, &dy) } else { dy };
        let dmerge_in = conv_backward(&blocks[li].merge, &t.merge_in, &dmerge_pre, &mut grads[li].merge);
        let du = if li > 0 {
            let k = blocks[li].up.out_ch;
            let (du, dskip) = dmerge_in.split(k);
            dgated[li - 1] = Some(dskip);
            du
        } else {
            dmerge_in
        };
        let dup_pre = relu_backward(&t.up_pre, &du);
        let dup_in = conv_backward(&blocks[li].up, &t.up_in, &dup_pre, &mut grads[li].up);
        dy = upsample_backward(&dup_in);
    }
    dgated[n - 1] = Some(dy);
    dgated.into_iter().map(|t| t.expect("every level receives a gradient")).collect()
}

fn to_feature_grid(plan: &LevelPlan, li: usize, state: &LevelState) -> Result<FeatureGrid> {
    let f = &state.features;
    let cells = f.h * f.w;
    let mut values = vec![0.0; cells * f.c];
    for c in 0..f.c {
        for j in 0..cells {
            values[j * f.c + c] = f.data[c * cells + j];
        }
    }
    let scores = ScoreMap::new(f.h, f.w, state.scores.clone())?;
    FeatureGrid::new(plan.levels()[li], f.h, f.w, values, scores)
}

/// Dense pyramid of one image with inference-time normalization.
pub fn encode(image: &Tensor, params: &NetParams) -> Result<DensePyramid> {
    let fwd = forward_batch(params, std::slice::from_ref(image), Gating::Open, NormStats::Running)?;
    pyramid_from_forward(params, &fwd, 0, image)
}

pub(crate) fn pyramid_from_forward(params: &NetParams, fwd: &BatchForward, b: usize, image: &Tensor) -> Result<DensePyramid> {
    let grids = fwd.levels[b]
        .iter()
        .enumerate()
        .map(|(li, s)| to_feature_grid(&params.config.plan, li, s))
        .collect::<Result<Vec<_>>>()?;
    DensePyramid::new(image.h, image.w, grids)
}

/// Reconstructs an image from a sparse pyramid (absent cells are zero).
pub fn decode(sparse: &SparsePyramid, params: &NetParams) -> Result<Tensor> {
    let plan = &params.config.plan;
    if sparse.levels.len() != plan.len() {
        return Err(Error::DimensionMismatch(format!("{} sparse levels for a {}-level network", sparse.levels.len(), plan.len())));
    }
    let mut dense = Vec::with_capacity(plan.len());
    for (level, spec) in sparse.levels.iter().zip(plan.levels()) {
        if level.spec != *spec {
            return Err(Error::DimensionMismatch(format!("level {} spec differs from network", spec.index)));
        }
        let (rows, cols, d) = (level.rows, level.cols, spec.dim);
        if let Some(prev) = dense.last() {
            let prev: &Tensor = prev;
            if prev.h != rows * 2 || prev.w != cols * 2 {
                return Err(Error::DimensionMismatch("sparse level shapes are not a 2x pyramid".into()));
            }
        }
        let hwc = level.densify();
        let mut t = Tensor::zeros(d, rows, cols);
        for j in 0..rows * cols {
            for c in 0..d {
                t.data[c * rows * cols + j] = hwc[j * d + c];
            }
        }
        dense.push(t);
    }
    let refs: Vec<&Tensor> = dense.iter().collect();
    Ok(decoder_forward(&params.weights.decoder, &refs)?.0)
}
