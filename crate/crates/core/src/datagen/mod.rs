//! Synthetic few-shot, multi-domain image tasks and their federated split.
//!
//! Each class `k` is named `class_{k}`. Its prototype image is the rendered
//! text embedding of that name plus a seeded jitter, resampled until every
//! pair of prototypes is at least `class_margin` apart in L2. An example of
//! class `k` in domain `g` is
//!
//! ```text
//! contrast_g · (prototype_k + N(0, noise_sigma²)) + brightness_g + channel_bias_g[c]
//! ```
//!
//! Training examples and held-out evaluation examples come from separate
//! seeded streams, so evaluation images never appear in training.

mod blob;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ConceptRenderer, FrozenTextEncoder};
use crate::numerics::Tensor;
use crate::seed::rng_for;

pub use blob::{DATASET_MAGIC, read_dataset, write_dataset};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("data config: {0}")]
    Config(String),
    #[error("dataset blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] crate::encoders::EncoderError),
}

/// Appearance shift applied to every image of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub brightness_shift: f64,
    pub contrast_scale: f64,
    /// One entry per input channel.
    pub channel_bias: Vec<f64>,
}

impl StyleParams {
    pub fn neutral(channels: usize) -> Self {
        Self { brightness_shift: 0.0, contrast_scale: 1.0, channel_bias: vec![0.0; channels] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub domains: Vec<StyleParams>,
    /// `(C₀, H, W)`
    pub image_shape: [usize; 3],
    pub class_margin: f64,
    pub noise_sigma: f64,
    /// Scale of the random per-class offset added to each rendered concept.
    pub concept_jitter: f64,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.shots_per_class < 1 {
            return bad("shots_per_class must be >= 1".into());
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        if !(self.class_margin > 0.0) {
            return bad(format!("class_margin must be > 0, got {}", self.class_margin));
        }
        if !(self.noise_sigma >= 0.0) || !(self.concept_jitter >= 0.0) {
            return bad("noise_sigma and concept_jitter must be >= 0".into());
        }
        for (g, d) in self.domains.iter().enumerate() {
            if !(d.contrast_scale > 0.0) {
                return bad(format!("domains[{g}].contrast_scale must be > 0"));
            }
            if d.channel_bias.len() != self.image_shape[0] {
                return bad(format!("domains[{g}].channel_bias needs {} entries", self.image_shape[0]));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor,
    /// Global class id.
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub num_domains: usize,
    pub train: Vec<Example>,
    /// Held-out examples, `shots_per_class` per class and domain.
    pub eval: Vec<Example>,
}

pub fn class_name(k: usize) -> String {
    format!("class_{k}")
}

const MARGIN_RETRIES: usize = 200;

fn l2(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the full synthetic dataset, ordered by class, then domain, then shot.
pub fn generate_dataset(
    cfg: &SyntheticTaskConfig,
    text: &FrozenTextEncoder,
    renderer: &ConceptRenderer,
) -> Result<Dataset, DatagenError> {
    cfg.validate()?;
    if renderer.image_shape() != cfg.image_shape {
        return Err(DatagenError::Config(format!(
            "image_shape {:?} does not match the backbone input {:?}",
            cfg.image_shape,
            renderer.image_shape()
        )));
    }
    let names: Vec<String> = (0..cfg.num_classes).map(class_name).collect();
    let concepts = text.embed_class_names(&names)?;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rng = rng_for(cfg.seed, "data.prototypes");
    let pixels: usize = cfg.image_shape.iter().product();

    let mut prototypes: Vec<Tensor> = Vec::with_capacity(cfg.num_classes);
    for k in 0..cfg.num_classes {
        let base = renderer.render(concepts.row(k));
        let mut accepted = None;
        for _ in 0..MARGIN_RETRIES {
            let mut p = base.clone();
            if cfg.concept_jitter > 0.0 {
                p.data_mut().iter_mut().for_each(|v| *v += cfg.concept_jitter * unit.sample(&mut rng));
            }
            if prototypes.iter().all(|q| l2(q, &p) >= cfg.class_margin) {
                accepted = Some(p);
                break;
            }
            if cfg.concept_jitter == 0.0 {
                break;
            }
        }
        match accepted {
            Some(p) => prototypes.push(p),
            None => {
                return Err(DatagenError::Config(format!(
                    "could not place class {k} at distance >= {} from earlier prototypes; lower class_margin",
                    cfg.class_margin
                )))
            }
        }
    }

    let sample = |stream: &str| {
        let mut rng = rng_for(cfg.seed, stream);
        let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("valid normal");
        let mut out = Vec::with_capacity(cfg.num_classes * cfg.domains.len() * cfg.shots_per_class);
        let plane = cfg.image_shape[1] * cfg.image_shape[2];
        for (k, proto) in prototypes.iter().enumerate() {
            for (g, style) in cfg.domains.iter().enumerate() {
                for _ in 0..cfg.shots_per_class {
                    let mut data = Vec::with_capacity(pixels);
                    for (p, &v) in proto.data().iter().enumerate() {
                        let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        let c = p / plane;
                        data.push(style.contrast_scale * (v + eps) + style.brightness_shift + style.channel_bias[c]);
                    }
                    out.push(Example { image: Tensor::from_parts(cfg.image_shape.to_vec(), data), label: k, domain: g });
                }
            }
        }
        out
    };
    Ok(Dataset {
        image_shape: cfg.image_shape,
        class_names: names,
        num_domains: cfg.domains.len(),
        train: sample("data.train"),
        eval: sample("data.eval"),
    })
}

/// Sorted split: the first `⌈n/2⌉` ids are base classes, the rest new.
pub fn base_new_split(class_ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>), DatagenError> {
    if class_ids.len() < 2 {
        return Err(DatagenError::Config("base/new split needs at least two classes".into()));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != class_ids.len() {
        return Err(DatagenError::Config("class ids must be distinct".into()));
    }
    let n_base = ids.len().div_ceil(2);
    let new = ids.split_off(n_base);
    Ok((ids, new))
}

/// One client's private few-shot data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Sorted global class ids; disjoint from every other shard.
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub domain_id: usize,
    pub examples: Vec<Example>,
    /// Held-out examples of this shard's classes in its domain.
    pub eval_examples: Vec<Example>,
}

impl ClientShard {
    /// Position of a global label within `class_ids`.
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.class_ids.binary_search(&global).ok()
    }
}

/// Deals consecutive blocks of `per_client` sorted base classes to clients;
/// client `i` lives in domain `i mod num_domains`.
pub fn partition_clients(dataset: &Dataset, base_classes: &[usize], per_client: usize) -> Result<Vec<ClientShard>, DatagenError> {
    if per_client == 0 {
        return Err(DatagenError::Config("classes_per_client must be >= 1".into()));
    }
    if base_classes.is_empty() || !base_classes.len().is_multiple_of(per_client) {
        return Err(DatagenError::Config(format!(
            "{} base classes cannot be split into blocks of {per_client}; adjust num_classes or classes_per_client so they divide evenly",
            base_classes.len()
        )));
    }
    let mut sorted = base_classes.to_vec();
    sorted.sort_unstable();
    let shards = sorted
        .chunks(per_client)
        .enumerate()
        .map(|(i, block)| {
            let domain_id = i % dataset.num_domains;
            let pick = |xs: &[Example]| {
                xs.iter().filter(|e| e.domain == domain_id && block.binary_search(&e.label).is_ok()).cloned().collect()
            };
            ClientShard {
                client_id: i,
                class_ids: block.to_vec(),
                class_names: block.iter().map(|&k| dataset.class_names[k].clone()).collect(),
                domain_id,
                examples: pick(&dataset.train),
                eval_examples: pick(&dataset.eval),
            }
        })
        .collect();
    Ok(shards)
}

#[cfg(test)]
mod tests;
