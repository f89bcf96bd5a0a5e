//! Frozen multi-scale vision encoder.
//!
//! Each stage cuts its input into non-overlapping `k_h × k_w` patches, maps
//! every flattened patch through a fixed linear layer (plus bias) and applies
//! ReLU. Stage outputs are the multi-scale taps `f_v^l(x)`, stored
//! channel-first as `[C_l, H_l, W_l]`. The head maps the flattened last stage
//! to an L2-normalized image embedding.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::seed::rng_for;

use super::text::NORM_EPS;
use super::EncoderError;

/// Output extents of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    /// `(C₀, H, W)`
    pub input: [usize; 3],
    pub stages: Vec<StageShape>,
    pub embed_dim: usize,
}

impl VisionConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.stages.is_empty() {
            return Err(EncoderError::Config("at least one vision stage is required".into()));
        }
        if self.input.contains(&0) || self.embed_dim == 0 {
            return Err(EncoderError::Config("input extents and embed_dim must be positive".into()));
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for (l, s) in self.stages.iter().enumerate() {
            if s.height == 0 || s.width == 0 || s.channels == 0 {
                return Err(EncoderError::Config(format!("stage {l} has a zero extent")));
            }
            if s.height > h || s.width > w || h % s.height != 0 || w % s.width != 0 {
                return Err(EncoderError::Config(format!(
                    "stage {l} ({}x{}) must evenly downsample its {h}x{w} input",
                    s.height, s.width
                )));
            }
            h = s.height;
            w = s.width;
        }
        Ok(())
    }

    /// `ΣC_l`
    pub fn total_channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels).sum()
    }

    pub fn last_stage_len(&self) -> usize {
        let s = self.stages.last().expect("validated");
        s.channels * s.height * s.width
    }

    pub fn pixels(&self) -> usize {
        self.input.iter().product()
    }
}

/// Exponential moving average of per-channel stage means.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStyle {
    pub momentum: f64,
    pub value: Tensor,
    pub updates: usize,
}

impl RunningStyle {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self::with_initial(Tensor::zeros(&[channels]), momentum)
    }

    pub fn with_initial(value: Tensor, momentum: f64) -> Self {
        Self { momentum, value, updates: 0 }
    }

    /// `value ← ρ·value + (1−ρ)·batch_mean`
    pub fn update(&mut self, batch_mean: &Tensor) {
        let rho = self.momentum;
        for (v, m) in self.value.data_mut().iter_mut().zip(batch_mean.data()) {
            *v = rho * *v + (1.0 - rho) * m;
        }
        self.updates += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleMode {
    Batch,
    Running,
}

struct VisionWeights {
    cfg: VisionConfig,
    /// Per stage: `C_l × (C_{l−1}·k_h·k_w)` weights and `C_l` biases.
    stage_weights: Vec<(Vec<f64>, Vec<f64>)>,
    /// `(F_last + 1) × d`; the final row is the bias.
    head: Vec<f64>,
}

/// Multi-scale taps and the normalized image embedding for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub maps: Vec<Tensor>,
    pub image_embed: Tensor,
}

/// Seeded frozen encoder. Weights are shared between clones; the running
/// style statistic is per clone.
#[derive(Clone)]
pub struct FrozenVisionEncoder {
    weights: Arc<VisionWeights>,
    pub running_style: RunningStyle,
}

impl std::fmt::Debug for FrozenVisionEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenVisionEncoder").field("cfg", &self.weights.cfg).finish()
    }
}

fn stage_forward(input: &[f64], in_shape: [usize; 3], stage: &StageShape, w: &[f64], b: &[f64]) -> Vec<f64> {
    let [c_in, h_in, w_in] = in_shape;
    let (kh, kw) = (h_in / stage.height, w_in / stage.width);
    let patch_len = c_in * kh * kw;
    let mut patch = vec![0.0; patch_len];
    let mut out = vec![0.0; stage.channels * stage.height * stage.width];
    for i in 0..stage.height {
        for j in 0..stage.width {
            let mut p = 0;
            for c in 0..c_in {
                for di in 0..kh {
                    let row = (c * h_in + i * kh + di) * w_in + j * kw;
                    patch[p..p + kw].copy_from_slice(&input[row..row + kw]);
                    p += kw;
                }
            }
            for co in 0..stage.channels {
                let wr = &w[co * patch_len..(co + 1) * patch_len];
                let z: f64 = b[co] + wr.iter().zip(&patch).map(|(a, x)| a * x).sum::<f64>();
                out[(co * stage.height + i) * stage.width + j] = z.max(0.0);
            }
        }
    }
    out
}

impl FrozenVisionEncoder {
    pub fn new(cfg: VisionConfig, momentum: f64, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let mut stage_weights = Vec::with_capacity(cfg.stages.len());
        let mut c_in = cfg.input[0];
        let (mut h, mut w) = (cfg.input[1], cfg.input[2]);
        for (l, s) in cfg.stages.iter().enumerate() {
            let fan_in = c_in * (h / s.height) * (w / s.width);
            let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid normal");
            let bias = Normal::new(0.0, 0.1).expect("valid normal");
            let mut rng = rng_for(seed, &format!("vision.stage{l}"));
            let weights = (0..s.channels * fan_in).map(|_| he.sample(&mut rng)).collect();
            let biases = (0..s.channels).map(|_| bias.sample(&mut rng)).collect();
            stage_weights.push((weights, biases));
            c_in = s.channels;
            h = s.height;
            w = s.width;
        }
        let f = cfg.last_stage_len();
        let std = Normal::new(0.0, (1.0 / f as f64).sqrt()).expect("valid normal");
        let mut rng = rng_for(seed, "vision.head");
        let head = (0..(f + 1) * cfg.embed_dim).map(|_| std.sample(&mut rng)).collect();
        let running_style = RunningStyle::new(cfg.total_channels(), momentum);
        Ok(Self { weights: Arc::new(VisionWeights { cfg, stage_weights, head }), running_style })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.weights.cfg
    }

    /// Replaces the head; used once while building an aligned backbone.
    pub(crate) fn set_head(&mut self, head: Vec<f64>) {
        let w = Arc::get_mut(&mut self.weights).expect("head is set before the encoder is shared");
        assert_eq!(head.len(), w.head.len());
        w.head = head;
    }

    /// Flattened last-stage activations, the input of the head.
    pub(crate) fn last_stage(&self, x: &Tensor) -> Result<Vec<f64>, EncoderError> {
        Ok(self.stages(x)?.pop().expect("validated").into_data())
    }

    fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError> {
        let cfg = &self.weights.cfg;
        if x.shape() != cfg.input {
            return Err(EncoderError::Input(format!("image must be {:?}, got {:?}", cfg.input, x.shape())));
        }
        let mut maps = Vec::with_capacity(cfg.stages.len());
        let mut shape = cfg.input;
        let mut cur = x.data().to_vec();
        for (s, (w, b)) in cfg.stages.iter().zip(&self.weights.stage_weights) {
            cur = stage_forward(&cur, shape, s, w, b);
            shape = [s.channels, s.height, s.width];
            maps.push(Tensor::from_parts(shape.to_vec(), cur.clone()));
        }
        Ok(maps)
    }

    fn head(&self, last: &[f64]) -> Tensor {
        let d = self.weights.cfg.embed_dim;
        let f = last.len();
        let h = &self.weights.head;
        let mut out = h[f * d..(f + 1) * d].to_vec();
        for (k, &x) in last.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(&h[k * d..(k + 1) * d]) {
                *o += x * w;
            }
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter_mut().for_each(|v| *v /= n.max(NORM_EPS));
        Tensor::from_parts(vec![d], out)
    }

    /// Features for one image without touching the running style.
    pub fn features(&self, x: &Tensor) -> Result<MultiScaleFeatures, EncoderError> {
        let maps = self.stages(x)?;
        let image_embed = self.head(maps.last().expect("validated").data());
        Ok(MultiScaleFeatures { maps, image_embed })
    }

    /// Multi-scale forward pass. In training mode the image's per-channel
    /// means are folded into the running style.
    pub fn vision_forward_multiscale(&mut self, x: &Tensor, training: bool) -> Result<MultiScaleFeatures, EncoderError> {
        let feats = self.features(x)?;
        if training {
            let pooled = gap_multiscale(&feats.maps)?;
            self.running_style.update(&pooled);
        }
        Ok(feats)
    }

    /// Updates the running style once with the batch mean of `pooled`.
    pub fn observe_batch(&mut self, pooled: &[Tensor]) -> Result<Tensor, EncoderError> {
        let mu = batch_style_stats(pooled, StyleMode::Batch, &self.running_style)?;
        self.running_style.update(&mu);
        Ok(mu)
    }
}

/// Spatial mean of every tap, concatenated in stage order: `F̂(x) ∈ ℝ^{ΣC_l}`.
pub fn gap_multiscale(maps: &[Tensor]) -> Result<Tensor, EncoderError> {
    if maps.is_empty() {
        return Err(EncoderError::Input("need at least one feature map".into()));
    }
    let mut out = Vec::new();
    for m in maps {
        if m.rank() != 3 {
            return Err(EncoderError::Input(format!("feature map must be [C, H, W], got {:?}", m.shape())));
        }
        let spatial = m.shape()[1] * m.shape()[2];
        for c in 0..m.shape()[0] {
            let s: f64 = m.data()[c * spatial..(c + 1) * spatial].iter().sum();
            out.push(s / spatial as f64);
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Style statistic `μ`: the batch mean of pooled features, or the running EMA.
pub fn batch_style_stats(pooled: &[Tensor], mode: StyleMode, running: &RunningStyle) -> Result<Tensor, EncoderError> {
    match mode {
        StyleMode::Running => Ok(running.value.clone()),
        StyleMode::Batch => {
            let first = pooled.first().ok_or_else(|| EncoderError::Input("style statistics need a non-empty batch".into()))?;
            let mut acc = vec![0.0; first.len()];
            for p in pooled {
                if p.len() != acc.len() {
                    return Err(EncoderError::Input("pooled feature widths differ within the batch".into()));
                }
                for (a, v) in acc.iter_mut().zip(p.data()) {
                    *a += v;
                }
            }
            let n = pooled.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(Tensor::from_vec(acc))
        }
    }
}
