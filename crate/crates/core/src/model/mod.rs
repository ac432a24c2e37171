//! Frame encoder, temporal context and classifier with a hand-written
//! backward pass.
//!
//! Every frame `[2, H, W]` goes through the same encoder: a stem stage and
//! `widths.len() - 1` blocks, each a depthwise 1xk/kx1 pair, a pointwise
//! projection, ReLU and 2x2 max pooling (blocks also add their input,
//! zero-padded along channels, before the ReLU). Global average pooling
//! yields `F = widths.last()` features per frame. The `[T, Bn, F]` sequence
//! then passes the optional SSM block and the optional shift, a per-position
//! ReLU projection, a mean over all positions and the linear head.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamSpec};
pub use train::{
    ablate, batch_grad, evaluate, train, AblationRow, AdamW, BatchStats, ConfusionMatrix, EpochLog, EvalReport,
    TrainConfig, TrainLog,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::btsm::{btsm_backward, btsm_forward, Btsm, FeatureTensor};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::lnes::LnesVolume;
use crate::ssm::{ssm_block_backward, ssm_block_forward, BlockCache, SsmParams, DEFAULT_STATE};
use crate::synth::derive_seed;
use crate::tensor::ops::{
    cross_entropy, dw_asym_backward, dw_asym_forward, global_avg_pool, global_avg_pool_backward, linear_backward,
    linear_forward, maxpool2x2, maxpool2x2_backward, pointwise_backward, pointwise_forward, relu, relu_backward,
    softmax_cross_entropy_grad, softmax_in_place,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Output channels of the stem followed by one entry per block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// SSM state size.
    pub state: usize,
    pub bins: usize,
    pub frames_per_bin: usize,
    /// Bin length of the input grid in microseconds; not used by the
    /// network itself but kept so checkpoints describe their input.
    pub bin_len_us: u64,
    pub use_ssm: bool,
    pub use_btsm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            num_classes: 5,
            widths: vec![8, 16, 32],
            kernel: 3,
            state: DEFAULT_STATE,
            bins: 2,
            frames_per_bin: 6,
            bin_len_us: 200_000,
            use_ssm: true,
            use_btsm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn features(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn encoder_blocks(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn positions(&self) -> usize {
        self.bins * self.frames_per_bin
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("channel widths must be non-empty and positive"));
        }
        if !self.features().is_multiple_of(4) {
            return Err(Error::config(format!(
                "feature width {} must be divisible by 4",
                self.features()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel size must be odd"));
        }
        if self.state == 0 || self.bins == 0 || self.frames_per_bin == 0 || self.bin_len_us == 0 {
            return Err(Error::config("state size, bins and frames per bin must be positive"));
        }
        let stages = self.widths.len() as u32;
        if self.height >> stages == 0 || self.width >> stages == 0 {
            return Err(Error::config(format!(
                "{}x{} input is too small for {stages} pooling stages",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    /// `[C, 1, k]`
    pub dw_h: Tensor,
    /// `[C, k, 1]`
    pub dw_v: Tensor,
    /// `[Cout, C]`
    pub pw_w: Tensor,
    pub pw_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[Out, In]`
    pub w: Tensor,
    pub b: Tensor,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub stages: Vec<ConvStage>,
    pub ssm: Option<SsmParams>,
    pub fuse: Dense,
    pub head: Dense,
}

fn stage_name(i: usize) -> String {
    if i == 0 {
        "stem".into()
    } else {
        format!("block{i}")
    }
}

impl Weights {
    fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.kernel;
        let mut cin = 2;
        let mut stages = Vec::with_capacity(cfg.widths.len());
        for &cout in &cfg.widths {
            let dw_bound = (3.0 / k as f64).sqrt();
            stages.push(ConvStage {
                dw_h: Tensor::uniform(&[cin, 1, k], dw_bound, &mut rng),
                dw_v: Tensor::uniform(&[cin, k, 1], dw_bound, &mut rng),
                pw_w: Tensor::uniform(&[cout, cin], (6.0 / cin as f64).sqrt(), &mut rng),
                pw_b: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let f = cfg.features();
        let fuse = Dense {
            w: Tensor::uniform(&[f, f], (6.0 / f as f64).sqrt(), &mut rng),
            b: Tensor::zeros(&[f]),
        };
        let head = Dense {
            w: Tensor::uniform(&[cfg.num_classes, f], 1.0 / (f as f64).sqrt(), &mut rng),
            b: Tensor::zeros(&[cfg.num_classes]),
        };
        // Separate stream so toggling the SSM leaves every other tensor as is.
        let ssm = cfg.use_ssm.then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x55, 0x4d));
            SsmParams::init(f, cfg.state, &mut r)
        });
        Weights {
            stages,
            ssm,
            fuse,
            head,
        }
    }

    /// Parameter tensors in checkpoint order with dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let n = stage_name(i);
            out.push((format!("{n}.dw_h"), &s.dw_h));
            out.push((format!("{n}.dw_v"), &s.dw_v));
            out.push((format!("{n}.pw_w"), &s.pw_w));
            out.push((format!("{n}.pw_b"), &s.pw_b));
        }
        if let Some(p) = &self.ssm {
            for (n, t) in p.tensors() {
                out.push((format!("ssm.{n}"), t));
            }
        }
        out.push(("fuse.w".into(), &self.fuse.w));
        out.push(("fuse.b".into(), &self.fuse.b));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend([&mut s.dw_h, &mut s.dw_v, &mut s.pw_w, &mut s.pw_b]);
        }
        if let Some(p) = &mut self.ssm {
            out.extend(p.tensors_mut().into_iter().map(|(_, t)| t));
        }
        out.extend([&mut self.fuse.w, &mut self.fuse.b, &mut self.head.w, &mut self.head.b]);
        out
    }

    pub fn zeros_like(&self) -> Weights {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Weights) {
        let src: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.scale(k);
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub layer: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GestureModel {
    config: ModelConfig,
    pub weights: Weights,
}

struct StageCache {
    input: Tensor,
    mid: Tensor,
    dw_out: Tensor,
    pre: Tensor,
    argmax: Vec<usize>,
}

struct FrameCache {
    stages: Vec<StageCache>,
    pooled_shape: Vec<usize>,
}

/// Forward state for one sample.
struct SampleCache {
    frames: Vec<FrameCache>,
    /// Per-frame feature standard deviations and the normalized features, `[N, F]`.
    frame_sd: Vec<f64>,
    unit: Vec<f64>,
    ssm: Option<BlockCache>,
    /// Input of the fusion projection, `[N, F]`.
    mixed: Tensor,
    fuse_pre: Tensor,
    pooled: Tensor,
    probs: Vec<f64>,
}

/// Loss, prediction and parameter gradients of one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub clamped: bool,
    pub probs: Vec<f64>,
    pub grads: Weights,
}

pub fn build_model(cfg: ModelConfig) -> Result<GestureModel> {
    GestureModel::new(cfg)
}

impl GestureModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(GestureModel { config, weights })
    }

    /// Rebuilds a model around existing weights, checking shapes.
    pub fn with_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        let fresh = GestureModel::new(config)?;
        let want: Vec<(String, Vec<usize>)> =
            fresh.weights.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<(String, Vec<usize>)> =
            weights.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if want != got {
            return Err(Error::shape("weights do not match the model configuration"));
        }
        Ok(GestureModel {
            config: fresh.config,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Element counts per layer in pipeline order.
    pub fn inventory(&self) -> Vec<InventoryEntry> {
        let mut out = Vec::new();
        let count = |ts: &[&Tensor]| ts.iter().map(|t| t.len()).sum::<usize>();
        for (i, s) in self.weights.stages.iter().enumerate() {
            out.push(InventoryEntry {
                layer: stage_name(i),
                params: count(&[&s.dw_h, &s.dw_v, &s.pw_w, &s.pw_b]),
            });
        }
        if let Some(p) = &self.weights.ssm {
            out.push(InventoryEntry {
                layer: "ssm".into(),
                params: p.param_count(),
            });
        }
        if self.config.use_btsm {
            out.push(InventoryEntry {
                layer: "btsm".into(),
                params: Btsm.param_count(),
            });
        }
        let w = &self.weights;
        out.push(InventoryEntry {
            layer: "fuse".into(),
            params: count(&[&w.fuse.w, &w.fuse.b]),
        });
        out.push(InventoryEntry {
            layer: "head".into(),
            params: count(&[&w.head.w, &w.head.b]),
        });
        out
    }

    /// Frames of one volume as `[2, H, W]` tensors, after shape checks.
    pub fn volume_frames(&self, v: &LnesVolume) -> Result<Vec<Tensor>> {
        let c = &self.config;
        let want = [c.bins, c.frames_per_bin, 2, c.height, c.width];
        if v.shape() != want {
            return Err(Error::shape(format!("volume {:?} does not match model input {want:?}", v.shape())));
        }
        (0..v.frame_count())
            .map(|i| {
                let data = v.frame(i).iter().map(|&x| x as f64).collect();
                Tensor::from_vec(&[2, c.height, c.width], data)
            })
            .collect()
    }

    /// Class probabilities for a `[Bt, T, Bn, 2, H, W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = batch.shape();
        if s.len() != 6 || s[1..] != [c.bins, c.frames_per_bin, 2, c.height, c.width] {
            return Err(Error::shape(format!(
                "batch {s:?} does not match [Bt, {}, {}, 2, {}, {}]",
                c.bins, c.frames_per_bin, c.height, c.width
            )));
        }
        let frame_len = 2 * c.height * c.width;
        let per_sample = c.positions() * frame_len;
        let mut out = Vec::with_capacity(s[0] * c.num_classes);
        for chunk in batch.data().chunks_exact(per_sample) {
            let frames = chunk
                .chunks_exact(frame_len)
                .map(|f| Tensor::from_vec(&[2, c.height, c.width], f.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            out.extend(self.forward_frames(frames)?);
        }
        Tensor::from_vec(&[s[0], c.num_classes], out)
    }

    pub fn predict(&self, volume: &LnesVolume) -> Result<Vec<f64>> {
        self.forward_frames(self.volume_frames(volume)?)
    }

    pub fn forward_frames(&self, frames: Vec<Tensor>) -> Result<Vec<f64>> {
        Ok(self.forward_cached(frames)?.probs)
    }

    pub fn sample_grad(&self, sample: &Sample) -> Result<SampleGrad> {
        self.loss_and_grad(self.volume_frames(&sample.volume)?, sample.label)
    }

    /// Cross-entropy of one sample and its gradient w.r.t. every weight.
    pub fn loss_and_grad(&self, frames: Vec<Tensor>, label: usize) -> Result<SampleGrad> {
        let cache = self.forward_cached(frames)?;
        let ce = cross_entropy(&cache.probs, label)?;
        let dlogits = softmax_cross_entropy_grad(&cache.probs, label);
        let grads = self.backward(&cache, dlogits)?;
        Ok(SampleGrad {
            loss: ce.loss,
            clamped: ce.clamped,
            probs: cache.probs,
            grads,
        })
    }

    fn encode_frame(&self, frame: Tensor) -> Result<(Tensor, FrameCache)> {
        let mut x = frame;
        let mut stages = Vec::with_capacity(self.weights.stages.len());
        for (i, st) in self.weights.stages.iter().enumerate() {
            let (dw_out, mid) = dw_asym_forward(&x, &st.dw_h, &st.dw_v)?;
            let mut pre = pointwise_forward(&dw_out, &st.pw_w, &st.pw_b)?;
            if i > 0 {
                let n = x.len();
                for (p, v) in pre.data_mut()[..n].iter_mut().zip(x.data()) {
                    *p += v;
                }
            }
            let (pooled, argmax) = maxpool2x2(&relu(&pre))?;
            stages.push(StageCache {
                input: x,
                mid,
                dw_out,
                pre,
                argmax,
            });
            x = pooled;
        }
        let feat = global_avg_pool(&x)?;
        Ok((
            feat,
            FrameCache {
                stages,
                pooled_shape: x.shape().to_vec(),
            },
        ))
    }

    fn encode_frame_backward(&self, cache: &FrameCache, dfeat: Tensor, grads: &mut Weights) -> Result<()> {
        let mut g = global_avg_pool_backward(&cache.pooled_shape, &dfeat)?;
        for (i, (sc, st)) in cache.stages.iter().zip(&self.weights.stages).enumerate().rev() {
            let g_relu = maxpool2x2_backward(sc.pre.shape(), &sc.argmax, &g);
            let g_pre = relu_backward(&sc.pre, &g_relu);
            let (d_dw, d_pw, d_pb) = pointwise_backward(&sc.dw_out, &st.pw_w, &g_pre)?;
            let (mut d_in, d_h, d_v) = dw_asym_backward(&sc.input, &sc.mid, &st.dw_h, &st.dw_v, &d_dw)?;
            if i > 0 {
                let n = d_in.len();
                for (d, v) in d_in.data_mut().iter_mut().zip(&g_pre.data()[..n]) {
                    *d += v;
                }
            }
            let gs = &mut grads.stages[i];
            gs.dw_h.add_assign(&d_h);
            gs.dw_v.add_assign(&d_v);
            gs.pw_w.add_assign(&d_pw);
            gs.pw_b.add_assign(&d_pb);
            g = d_in;
        }
        Ok(())
    }

    fn forward_cached(&self, frames: Vec<Tensor>) -> Result<SampleCache> {
        let c = &self.config;
        let n = c.positions();
        if frames.len() != n {
            return Err(Error::shape(format!("{} frames, model expects {n}", frames.len())));
        }
        let f = c.features();
        let mut feats = Vec::with_capacity(n * f);
        let mut frame_caches = Vec::with_capacity(n);
        for frame in frames {
            if frame.shape() != [2, c.height, c.width] {
                return Err(Error::shape(format!("frame {:?} != [2, {}, {}]", frame.shape(), c.height, c.width)));
            }
            let (feat, fc) = self.encode_frame(frame)?;
            feats.extend_from_slice(feat.data());
            frame_caches.push(fc);
        }
        let frame_sd = layer_normalize(&mut feats, f);
        let unit = feats.clone();
        let mut x = Tensor::from_vec(&[1, c.bins, c.frames_per_bin, f], feats)?;
        let mut ssm_cache = None;
        if let Some(p) = &self.weights.ssm {
            let (y, cache) = ssm_block_forward(&x, p)?;
            x = y;
            ssm_cache = Some(cache);
        }
        if c.use_btsm {
            x = btsm_forward(&FeatureTensor::new(x)?)?.into_tensor();
        }
        let mixed = x.reshape(&[n, f])?;
        let fuse_pre = linear_forward(&mixed, &self.weights.fuse.w, &self.weights.fuse.b)?;
        // Residual around the projection; a plain ReLU layer can die for
        // every position and leave the head a constant input.
        let mut fused = relu(&fuse_pre);
        for (o, v) in fused.data_mut().iter_mut().zip(mixed.data()) {
            *o += v;
        }
        let mut pooled = vec![0.0; f];
        for row in fused.data().chunks_exact(f) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        for p in &mut pooled {
            *p /= n as f64;
        }
        let pooled = Tensor::from_vec(&[1, f], pooled)?;
        let logits = linear_forward(&pooled, &self.weights.head.w, &self.weights.head.b)?;
        let mut probs = logits.into_data();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        softmax_in_place(&mut probs);
        Ok(SampleCache {
            frames: frame_caches,
            frame_sd,
            unit,
            ssm: ssm_cache,
            mixed,
            fuse_pre,
            pooled,
            probs,
        })
    }

    fn backward(&self, cache: &SampleCache, dlogits: Vec<f64>) -> Result<Weights> {
        let c = &self.config;
        let (n, f) = (c.positions(), c.features());
        let w = &self.weights;
        let mut grads = w.zeros_like();
        let dlogits = Tensor::from_vec(&[1, c.num_classes], dlogits)?;
        let (dpooled, dhw, dhb) = linear_backward(&cache.pooled, &w.head.w, &dlogits)?;
        grads.head.w = dhw;
        grads.head.b = dhb;
        let mut dfused = Tensor::zeros(&[n, f]);
        for row in dfused.data_mut().chunks_exact_mut(f) {
            for (d, g) in row.iter_mut().zip(dpooled.data()) {
                *d = g / n as f64;
            }
        }
        let dpre = relu_backward(&cache.fuse_pre, &dfused);
        let (mut dmixed, dfw, dfb) = linear_backward(&cache.mixed, &w.fuse.w, &dpre)?;
        for (d, g) in dmixed.data_mut().iter_mut().zip(dfused.data()) {
            *d += g;
        }
        grads.fuse.w = dfw;
        grads.fuse.b = dfb;
        let mut dx = dmixed.reshape(&[1, c.bins, c.frames_per_bin, f])?;
        if c.use_btsm {
            dx = btsm_backward(&FeatureTensor::new(dx)?)?.into_tensor();
        }
        if let (Some(p), Some(bc)) = (&w.ssm, &cache.ssm) {
            let (d, gp) = ssm_block_backward(bc, p, &dx)?;
            dx = d;
            grads.ssm = Some(gp);
        }
        for (i, fc) in cache.frames.iter().enumerate() {
            let span = i * f..(i + 1) * f;
            let dfeat = layer_normalize_backward(&cache.unit[span.clone()], cache.frame_sd[i], &dx.data()[span]);
            let dfeat = Tensor::from_vec(&[f], dfeat)?;
            self.encode_frame_backward(fc, dfeat, &mut grads)?;
        }
        Ok(grads)
    }
}

const FEATURE_EPS: f64 = 1e-5;

/// Centres each length-`f` row and scales it to unit variance in place.
/// Returns the per-row standard deviations.
fn layer_normalize(rows: &mut [f64], f: usize) -> Vec<f64> {
    rows.chunks_exact_mut(f)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let sd = (var + FEATURE_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) / sd;
            }
            sd
        })
        .collect()
}

fn layer_normalize_backward(unit: &[f64], sd: f64, grad: &[f64]) -> Vec<f64> {
    let n = unit.len() as f64;
    let g_mean = grad.iter().sum::<f64>() / n;
    let proj = unit.iter().zip(grad).map(|(u, g)| u * g).sum::<f64>() / n;
    unit.iter().zip(grad).map(|(u, g)| (g - g_mean - u * proj) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Geometry;
    use crate::tensor::grad_check::grad_check;
    use rand::Rng;

    fn tiny(use_ssm: bool, use_btsm: bool, seed: u64) -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            num_classes: 3,
            widths: vec![2, 4],
            kernel: 3,
            state: 2,
            bins: 2,
            frames_per_bin: 2,
            bin_len_us: 200_000,
            use_ssm,
            use_btsm,
            seed,
        }
    }

    fn random_frames(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..cfg.positions())
            .map(|_| Tensor::uniform(&[2, cfg.height, cfg.width], 1.0, rng))
            .collect()
    }

    #[test]
    fn default_param_count() {
        let m = build_model(ModelConfig::default()).unwrap();
        // Independent sum over declared layer shapes.
        let conv = |cin: usize, cout: usize, k: usize| 2 * cin * k + cout * cin + cout;
        let (f, s, c) = (32, 8, 5);
        let ssm = f + f * s + s * f + s * f + f + 1 + f;
        let expected = conv(2, 8, 3) + conv(8, 16, 3) + conv(16, 32, 3) + ssm + (f * f + f) + (f * c + c);
        assert_eq!(m.param_count(), expected);
        assert_eq!(m.param_count(), 2954);
        let inv = m.inventory();
        assert_eq!(inv.iter().map(|e| e.params).sum::<usize>(), 2954);
        assert_eq!(inv.iter().find(|e| e.layer == "btsm").unwrap().params, 0);
        assert_eq!(inv.iter().find(|e| e.layer == "head").unwrap().params, f * c + c);
    }

    #[test]
    fn variant_inventories_are_additive() {
        let base = ModelConfig {
            use_ssm: false,
            use_btsm: false,
            ..ModelConfig::default()
        };
        let b = build_model(base.clone()).unwrap();
        assert!(b.inventory().iter().all(|e| e.layer != "btsm" && e.layer != "ssm"));
        let shift = build_model(ModelConfig { use_btsm: true, ..base.clone() }).unwrap();
        assert_eq!(shift.param_count(), b.param_count());
        let full = build_model(ModelConfig::default()).unwrap();
        let ssm = full.weights.ssm.as_ref().unwrap().param_count();
        assert_eq!(full.param_count(), b.param_count() + ssm);
        // Shared tensors are initialized identically across variants.
        assert_eq!(full.weights.stages, b.weights.stages);
        assert_eq!(full.weights.head, b.weights.head);
    }

    #[test]
    fn invalid_configs() {
        let ok = ModelConfig::default();
        for bad in [
            ModelConfig { widths: vec![8, 16, 30], ..ok.clone() },
            ModelConfig { num_classes: 1, ..ok.clone() },
            ModelConfig { kernel: 4, ..ok.clone() },
            ModelConfig { height: 4, ..ok.clone() },
            ModelConfig { widths: vec![], ..ok.clone() },
        ] {
            assert!(build_model(bad).is_err());
        }
    }

    #[test]
    fn outputs_are_probability_rows() {
        let cfg = tiny(true, true, 1);
        let m = build_model(cfg.clone()).unwrap();
        let per = cfg.positions() * 2 * 64;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = vec![0.0; per];
        let sample: Vec<f64> = (0..per).map(|_| rng.gen()).collect();
        data.extend_from_slice(&sample);
        data.extend_from_slice(&sample);
        let p = m.forward(&Tensor::from_vec(&[3, 2, 2, 2, 8, 8], data).unwrap()).unwrap();
        for row in p.data().chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(p.data()[3..6], p.data()[6..9]);
        assert!(m.forward(&Tensor::zeros(&[1, 2, 2, 2, 8, 4])).is_err());
    }

    #[test]
    fn volume_input_matches_batch_input() {
        let cfg = tiny(true, false, 3);
        let m = build_model(cfg.clone()).unwrap();
        let data: Vec<f32> = (0..cfg.positions() * 128).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        let v = LnesVolume::new(2, 2, Geometry::new(8, 8), data.clone()).unwrap();
        let a = m.predict(&v).unwrap();
        let batch = Tensor::from_vec(&[1, 2, 2, 2, 8, 8], data.iter().map(|&x| x as f64).collect()).unwrap();
        assert_eq!(m.forward(&batch).unwrap().data(), &a[..]);
        let wrong = LnesVolume::new(1, 2, Geometry::new(8, 8), data[..256].to_vec()).unwrap();
        assert!(m.predict(&wrong).is_err());
    }

    #[test]
    fn full_model_gradients() {
        for seed in 0..10 {
            for (ssm, shift) in [(true, true), (false, false)] {
                let cfg = tiny(ssm, shift, seed);
                let mut m = build_model(cfg.clone()).unwrap();
                // Non-zero biases so every path is exercised.
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                for s in &mut m.weights.stages {
                    s.pw_b = Tensor::uniform(s.pw_b.shape(), 0.2, &mut rng);
                }
                m.weights.fuse.b = Tensor::uniform(&[4], 0.2, &mut rng);
                // At init the step size is 1e-3 and the state gradients sit
                // below finite-difference resolution; check at larger steps.
                if let Some(p) = &mut m.weights.ssm {
                    p.b_delta = Tensor::uniform(&[1], 1.0, &mut rng);
                }
                let frames = random_frames(&cfg, &mut rng);
                let label = (seed % 3) as usize;
                let g = m.loss_and_grad(frames.clone(), label).unwrap();
                let analytic = g.grads.flatten();
                let x0 = m.weights.flatten();
                let mut probe = m.clone();
                let f = |v: &[f64]| {
                    probe.weights.assign_flat(v).unwrap();
                    probe.loss_and_grad(frames.clone(), label).unwrap().loss
                };
                let rep = grad_check(f, &x0, &analytic, 1e-5);
                assert!(rep.passes(1e-3), "seed {seed} ssm {ssm}: {rep:?}");
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut m = build_model(tiny(true, true, 4)).unwrap();
        let v = m.weights.flatten();
        assert_eq!(v.len(), m.param_count());
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        m.weights.assign_flat(&doubled).unwrap();
        assert_eq!(m.weights.flatten(), doubled);
        assert!(m.weights.assign_flat(&v[1..]).is_err());
    }
}
