//! The full trainable pipeline: class names to per-image class logits.
//!
//! All trainable tensors live in one [`ParameterStore`]. Generator tensors
//! are named `theta.*`, injection tensors `phi.*`. With static prompts the
//! generator is replaced by a single `theta.static_prompts` matrix; with
//! injection disabled `phi.*` stays in the store but is frozen and never
//! read.
//!
//! The frozen text encoder's first layer is linear, so an assembled prompt
//! `[c′_1 … c′_m; t_j]` encodes to
//! `normalize(relu(flat(c′)·B_prompt + t_j·B_class)·M2)`. The batched forward
//! pass uses that split: the context part is computed once per image, the
//! class part once per class.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenTextEncoder, StageShape, VisionConfig};
use crate::injection::{inject, project_visual_tokens, se_forward, InjectionConfig, InjectionParams};
use crate::losses::{ce_loss, cosine_logits, crp_loss, total_loss, CrpVariant, LossConfig};
use crate::numerics::{Bound, NumericsError, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::prompt_gen::{generate_context_prompts, PromptGenConfig, PromptGenParams};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    /// `(C₀, H, W)`
    pub image_shape: [usize; 3],
    /// One entry per tapped vision stage.
    pub stages: Vec<StageShape>,
    pub q_se: usize,
    pub reduction: usize,
    /// Init scale of the generator's queries and attention projections, and
    /// of static prompts.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn vision(&self) -> VisionConfig {
        VisionConfig { input: self.image_shape, stages: self.stages.clone(), embed_dim: self.d }
    }

    pub fn content_channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels).sum()
    }

    pub fn prompt_gen(&self) -> PromptGenConfig {
        PromptGenConfig { d: self.d, m: self.m, heads: self.heads, init_std: self.init_std }
    }

    pub fn injection(&self) -> InjectionConfig {
        InjectionConfig { d: self.d, m: self.m, content_channels: self.content_channels(), q_se: self.q_se, reduction: self.reduction }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    #[serde(default)]
    pub disable_injection: bool,
    #[serde(default)]
    pub static_prompts: bool,
    #[serde(default)]
    pub crp_variant: CrpVariant,
}

#[derive(Clone, Debug)]
pub enum ContextSource {
    Generator(PromptGenParams),
    Static(ParamId),
}

/// Frozen per-class inputs for one class list.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassContext {
    /// `T`, `[n × d]`
    pub embeds: Tensor,
    /// `T·B_class`, `[n × h]`
    pub contribution: Tensor,
}

impl ClassContext {
    pub fn new<S: AsRef<str>>(text: &FrozenTextEncoder, names: &[S]) -> Result<Self, crate::encoders::EncoderError> {
        let embeds = text.embed_class_names(names)?;
        let contribution = text.class_contribution(&embeds)?;
        Ok(Self { embeds, contribution })
    }

    pub fn len(&self) -> usize {
        self.embeds.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen per-image inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// Unit image embeddings, `[b × d]`.
    pub embeds: Tensor,
    /// `F̂(x)` per image, `[b × ΣC]`.
    pub pooled: Tensor,
    /// Style statistic `μ` shared by the batch, `[ΣC]`.
    pub style: Tensor,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.embeds.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[b × D]` rows of `[mean(T); F̂(x_i); μ]`.
    pub fn fused(&self, classes: &ClassContext) -> Tensor {
        let (n, d) = (classes.embeds.rows(), classes.embeds.last_dim());
        let mut pooled_t = vec![0.0; d];
        for i in 0..n {
            for (o, v) in pooled_t.iter_mut().zip(classes.embeds.row(i)) {
                *o += v;
            }
        }
        pooled_t.iter_mut().for_each(|o| *o /= n as f64);
        let width = d + self.pooled.last_dim() + self.style.len();
        let mut out = Vec::with_capacity(self.len() * width);
        for i in 0..self.len() {
            out.extend_from_slice(&pooled_t);
            out.extend_from_slice(self.pooled.row(i));
            out.extend_from_slice(self.style.data());
        }
        Tensor::from_parts(vec![self.len(), width], out)
    }
}

pub struct Forward<'t> {
    /// `[b × n]`
    pub logits: Var<'t>,
    /// `c′`, `[b·m × d]`
    pub c_prime: Var<'t>,
}

pub struct Losses<'t> {
    pub ce: Var<'t>,
    pub crp: Var<'t>,
    pub total: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct FedCsapModel {
    pub cfg: ModelConfig,
    pub ablations: Ablations,
    pub loss: LossConfig,
    pub store: ParameterStore,
    pub context: ContextSource,
    pub phi: InjectionParams,
    prompt_block: Tensor,
    output_projection: Tensor,
}

impl FedCsapModel {
    pub fn new(
        cfg: ModelConfig,
        ablations: Ablations,
        loss: LossConfig,
        text: &FrozenTextEncoder,
        seed: u64,
    ) -> Result<Self, NumericsError> {
        if text.dim() != cfg.d || text.prompt_len() != cfg.m {
            return Err(NumericsError::InvalidArgument(format!(
                "text encoder is d={}, m={} but the model wants d={}, m={}",
                text.dim(),
                text.prompt_len(),
                cfg.d,
                cfg.m
            )));
        }
        let mut store = ParameterStore::new();
        let context = if ablations.static_prompts {
            let dist = Normal::new(0.0, cfg.init_std).map_err(|e| NumericsError::InvalidArgument(e.to_string()))?;
            let mut rng = rng_for(seed, "model.static_prompts");
            let init = (0..cfg.m * cfg.d).map(|_| dist.sample(&mut rng)).collect();
            ContextSource::Static(store.insert("theta.static_prompts", Tensor::new(&[cfg.m, cfg.d], init)?)?)
        } else {
            ContextSource::Generator(PromptGenParams::register(&mut store, "theta.", cfg.prompt_gen(), &mut rng_for(seed, "model.theta"))?)
        };
        let phi = InjectionParams::register(&mut store, "phi.", cfg.injection(), &mut rng_for(seed, "model.phi"))?;
        if ablations.disable_injection {
            for id in phi.ids() {
                store.get_mut(id).trainable = false;
            }
        }
        Ok(Self { cfg, ablations, loss, store, context, phi, prompt_block: text.prompt_block(), output_projection: text.output_projection().clone() })
    }

    /// Names of the `θ` parameters.
    pub fn theta_names(&self) -> Vec<&str> {
        self.store.iter().map(|p| p.name.as_str()).filter(|n| n.starts_with("theta.")).collect()
    }

    pub fn phi_names(&self) -> Vec<&str> {
        self.store.iter().map(|p| p.name.as_str()).filter(|n| n.starts_with("phi.")).collect()
    }

    /// Scalars exchanged with the server each way: every trainable parameter.
    pub fn communicated_scalars(&self) -> usize {
        self.store.num_trainable_scalars()
    }

    /// `P`, `[m × d]`.
    pub fn context_prompts<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, classes: &ClassContext) -> Result<Var<'t>, NumericsError> {
        match &self.context {
            ContextSource::Static(id) => Ok(bound.var(*id)),
            ContextSource::Generator(theta) => generate_context_prompts(theta, bound, &tape.constant(classes.embeds.clone())?),
        }
    }

    /// `V`, `[b·m × d]`, or `None` with injection disabled.
    pub fn visual_tokens<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        classes: &ClassContext,
        images: &ImageBatch,
    ) -> Result<Option<Var<'t>>, NumericsError> {
        if self.ablations.disable_injection {
            return Ok(None);
        }
        let mx = tape.constant(images.fused(classes))?;
        Ok(Some(project_visual_tokens(&self.phi, bound, &se_forward(&self.phi, bound, &mx)?)?))
    }

    /// Logits of every image against every class, each image with its own prompts.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        classes: &ClassContext,
        images: &ImageBatch,
    ) -> Result<Forward<'t>, NumericsError> {
        let (b, n, m, d) = (images.len(), classes.len(), self.cfg.m, self.cfg.d);
        let p = self.context_prompts(tape, bound, classes)?;
        let c_prime = match self.visual_tokens(tape, bound, classes, images)? {
            Some(v) => inject(&p, &v)?,
            None => p.tile(b)?,
        };
        let per_image = c_prime.reshape(&[b, m * d])?.matmul(&tape.constant(self.prompt_block.clone())?)?;
        let class_part = tape.constant(classes.contribution.clone())?.tile(b)?;
        let hidden = per_image.repeat_rows(n)?.add(&class_part)?.relu()?;
        let z = hidden.matmul(&tape.constant(self.output_projection.clone())?)?.l2_normalize(1e-12)?;
        let logits = cosine_logits(&tape.constant(images.embeds.clone())?, &z, n, self.loss.tau)?;
        Ok(Forward { logits, c_prime })
    }

    pub fn losses<'t>(&self, tape: &'t Tape, fwd: &Forward<'t>, labels: &[usize]) -> Result<Losses<'t>, NumericsError> {
        let ce = ce_loss(&fwd.logits, labels)?;
        let crp = crp_loss(tape, &fwd.c_prime, self.cfg.m, self.ablations.crp_variant)?;
        let total = total_loss(&ce, &crp, &self.loss)?;
        Ok(Losses { ce, crp, total })
    }

    /// Predicted class index per image, without recording gradients.
    pub fn predict(&self, classes: &ClassContext, images: &ImageBatch) -> Result<Vec<usize>, NumericsError> {
        let tape = Tape::new();
        let mut frozen = self.store.clone();
        frozen.set_trainable_all(false);
        let bound = frozen.bind(&tape)?;
        let logits = self.forward(&tape, &bound, classes, images)?.logits.value();
        let n = classes.len();
        Ok((0..images.len())
            .map(|i| {
                let row = &logits.data()[i * n..(i + 1) * n];
                (0..n).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}
