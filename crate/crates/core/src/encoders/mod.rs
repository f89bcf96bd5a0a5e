//! Frozen stand-ins for a pretrained vision-language backbone.
//!
//! Nothing in this module is ever trained by the federated loop: weights are
//! generated from named seeds and never enter a [`ParameterStore`].
//!
//! A [`FrozenBackbone`] bundles the text encoder, the vision encoder and the
//! [`ConceptRenderer`] that the synthetic data generator uses to turn class
//! concepts into images. When alignment is enabled the vision head is fitted
//! once, in closed form, so that rendered concepts land near the text
//! encoder's reading of the same concept. That fit plays the role of
//! contrastive pretraining: zero-shot transfer to unseen class names works,
//! but imperfectly, and style shifts push images off the aligned manifold.
//!
//! [`ParameterStore`]: crate::numerics::ParameterStore

mod text;
mod vision;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::numerics::{NumericsError, Tensor};
use crate::seed::rng_for;

pub use text::{tokenize, trigram_bag, FrozenTextEncoder, HASH_BINS, TEXT_HIDDEN_MULT};
pub use vision::{
    batch_style_stats, gap_multiscale, FrozenVisionEncoder, MultiScaleFeatures, RunningStyle, StageShape, StyleMode,
    VisionConfig,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("encoder input: {0}")]
    Input(String),
    #[error("encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Fixed linear map from concept space `ℝ^d` to image space `ℝ^{C₀×H×W}`.
#[derive(Clone)]
pub struct ConceptRenderer {
    shape: [usize; 3],
    d: usize,
    map: Arc<Vec<f64>>,
}

impl ConceptRenderer {
    pub fn new(shape: [usize; 3], d: usize, seed: u64) -> Self {
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut rng = rng_for(seed, "world.renderer");
        let pixels: usize = shape.iter().product();
        let map = (0..pixels * d).map(|_| unit.sample(&mut rng)).collect();
        Self { shape, d, map: Arc::new(map) }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Renders a concept vector; a unit concept gives unit per-pixel variance.
    pub fn render(&self, concept: &[f64]) -> Tensor {
        assert_eq!(concept.len(), self.d, "concept width");
        let pixels: usize = self.shape.iter().product();
        let out = (0..pixels)
            .map(|p| self.map[p * self.d..(p + 1) * self.d].iter().zip(concept).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::from_parts(self.shape.to_vec(), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub vision: VisionConfig,
    pub style_momentum: f64,
    /// Number of rendered concepts for the head fit; `0` keeps the random head.
    pub align_samples: usize,
    /// Pixel noise added to rendered concepts during the fit.
    pub align_noise: f64,
    pub seed: u64,
}

/// The frozen encoders plus the concept renderer they were aligned on.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    pub text: FrozenTextEncoder,
    pub vision: FrozenVisionEncoder,
    pub renderer: ConceptRenderer,
}

impl std::fmt::Debug for ConceptRenderer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConceptRenderer").field("shape", &self.shape).field("d", &self.d).finish()
    }
}

impl FrozenBackbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self, EncoderError> {
        if cfg.vision.embed_dim != cfg.embed_dim {
            return Err(EncoderError::Config("vision embed_dim must equal the text width".into()));
        }
        if !(0.0..1.0).contains(&cfg.style_momentum) {
            return Err(EncoderError::Config(format!("style momentum must lie in [0, 1), got {}", cfg.style_momentum)));
        }
        let text = FrozenTextEncoder::new(cfg.embed_dim, cfg.prompt_len, cfg.seed);
        let mut vision = FrozenVisionEncoder::new(cfg.vision.clone(), cfg.style_momentum, cfg.seed)?;
        let renderer = ConceptRenderer::new(cfg.vision.input, cfg.embed_dim, cfg.seed);
        if cfg.align_samples > 0 {
            let head = fit_aligned_head(&text, &vision, &renderer, cfg)?;
            vision.set_head(head);
        }
        Ok(Self { text, vision, renderer })
    }
}

/// Ridge regression from last-stage activations of rendered concepts to the
/// text encoder's zero-context encoding of the same concept.
fn fit_aligned_head(
    text: &FrozenTextEncoder,
    vision: &FrozenVisionEncoder,
    renderer: &ConceptRenderer,
    cfg: &BackboneConfig,
) -> Result<Vec<f64>, EncoderError> {
    let d = cfg.embed_dim;
    let f = cfg.vision.last_stage_len();
    let n = cfg.align_samples;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, cfg.align_noise.max(0.0)).expect("valid normal");
    let mut rng = rng_for(cfg.seed, "world.alignment");

    let mut z = DMatrix::<f64>::zeros(n, f + 1);
    let mut y = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let mut s: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        s.iter_mut().for_each(|v| *v /= norm);
        let mut img = renderer.render(&s);
        if cfg.align_noise > 0.0 {
            img.data_mut().iter_mut().for_each(|p| *p += noise.sample(&mut rng));
        }
        let last = vision.last_stage(&img)?;
        for (k, v) in last.iter().enumerate() {
            z[(i, k)] = *v;
        }
        z[(i, f)] = 1.0;
        let target = text.bare_class_embeddings(&Tensor::from_parts(vec![1, d], s.clone()))?;
        for (k, v) in target.data().iter().enumerate() {
            y[(i, k)] = *v;
        }
    }
    let zt = z.transpose();
    let mut gram = &zt * &z;
    let ridge = 1e-3 * gram.trace() / (f + 1) as f64;
    for k in 0..f + 1 {
        gram[(k, k)] += ridge;
    }
    let rhs = &zt * &y;
    let chol = gram.cholesky().ok_or_else(|| EncoderError::Config("alignment system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    // row-major (F+1) × d
    let mut head = Vec::with_capacity((f + 1) * d);
    for k in 0..f + 1 {
        for j in 0..d {
            head.push(w[(k, j)]);
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(align_samples: usize) -> BackboneConfig {
        BackboneConfig {
            embed_dim: 16,
            prompt_len: 4,
            vision: VisionConfig {
                input: [2, 8, 8],
                stages: vec![
                    StageShape { height: 4, width: 4, channels: 4 },
                    StageShape { height: 2, width: 2, channels: 8 },
                    StageShape { height: 1, width: 1, channels: 32 },
                ],
                embed_dim: 16,
            },
            style_momentum: 0.9,
            align_samples,
            align_noise: 0.1,
            seed: 9,
        }
    }

    fn mean_alignment(bb: &FrozenBackbone, names: &[String]) -> (f64, f64) {
        let t = bb.text.embed_class_names(names).unwrap();
        let cls = bb.text.bare_class_embeddings(&t).unwrap();
        let mut same = 0.0;
        let mut other = 0.0;
        for i in 0..names.len() {
            let e = bb.vision.features(&bb.renderer.render(t.row(i))).unwrap().image_embed;
            for j in 0..names.len() {
                let c = cls.row(j);
                let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos: f64 = e.data().iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / cn;
                if i == j {
                    same += cos;
                } else {
                    other += cos / (names.len() - 1) as f64;
                }
            }
        }
        (same / names.len() as f64, other / names.len() as f64)
    }

    #[test]
    fn alignment_brings_rendered_concepts_to_their_class_token() {
        let names: Vec<String> = ["apple", "zebra", "violin", "harbor", "tulip"].iter().map(|s| s.to_string()).collect();
        let aligned = FrozenBackbone::new(&cfg(600)).unwrap();
        let (same, other) = mean_alignment(&aligned, &names);
        assert!(same > other + 0.2, "aligned: same {same}, other {other}");
        let random = FrozenBackbone::new(&cfg(0)).unwrap();
        let (rs, _) = mean_alignment(&random, &names);
        assert!(same > rs, "alignment should beat a random head ({same} vs {rs})");
    }

    #[test]
    fn backbone_is_seed_deterministic() {
        let a = FrozenBackbone::new(&cfg(100)).unwrap();
        let b = FrozenBackbone::new(&cfg(100)).unwrap();
        let img = a.renderer.render(&[0.25; 16]);
        assert_eq!(a.vision.features(&img).unwrap(), b.vision.features(&img).unwrap());
        assert_eq!(a.text.sequence_mixer(), b.text.sequence_mixer());
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut c = cfg(0);
        c.vision.embed_dim = 8;
        assert!(FrozenBackbone::new(&c).is_err());
    }
}
