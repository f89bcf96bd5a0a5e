//! Frozen stand-in for a pretrained text encoder.
//!
//! Class names are tokenized (lowercase, split on anything that is not
//! alphanumeric), each token is padded as `#token#` and its character
//! trigrams are hashed with FNV-1a into a bag of [`HASH_BINS`] counts. The
//! bag is projected to `ℝ^d` by a seeded Gaussian matrix and L2-normalized.
//!
//! Prompt sequences of `m + 1` tokens are flattened and passed through a
//! seeded two-layer ReLU network, then L2-normalized:
//!
//! ```text
//! E(t) = normalize(relu(flat(t) · M1) · M2)      M1: (m+1)d × h,  M2: h × d
//! ```
//!
//! with `h = TEXT_HIDDEN_MULT · d`. The first layer is linear in the tokens,
//! so its pre-activation splits into a context part and a class part. Rows
//! reading the `m` context tokens are scaled by `1/√(m·d)`: generated
//! context tokens are O(1) per component while class embeddings are unit
//! vectors, and without the gain the context would drown the class signal.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, Normal};

use crate::numerics::{matmul_raw, NumericsError, Tape, Tensor, Var};
use crate::seed::{fnv1a64, rng_for};

use super::EncoderError;

pub const HASH_BINS: usize = 4096;
pub const TEXT_HIDDEN_MULT: usize = 4;

pub(crate) const NORM_EPS: f64 = 1e-12;

struct TextWeights {
    d: usize,
    prompt_len: usize,
    /// `HASH_BINS × d`
    vocab_projection: Vec<f64>,
    /// `(m+1)·d × h`
    sequence_mixer: Tensor,
    /// `h × d`
    output_projection: Tensor,
}

/// Seeded, never-trained text encoder. Cloning shares the weights.
#[derive(Clone)]
pub struct FrozenTextEncoder {
    weights: Arc<TextWeights>,
    audit: Option<Arc<Mutex<BTreeSet<String>>>>,
}

impl std::fmt::Debug for FrozenTextEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenTextEncoder").field("d", &self.weights.d).field("m", &self.weights.prompt_len).finish()
    }
}

pub fn tokenize(name: &str) -> Vec<String> {
    name.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Sparse trigram bag: `(bin, count)` pairs sorted by bin.
pub fn trigram_bag(name: &str) -> Vec<(usize, f64)> {
    let mut counts = std::collections::BTreeMap::new();
    for token in tokenize(name) {
        let padded: Vec<char> = format!("#{token}#").chars().collect();
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            let bin = (fnv1a64(gram.as_bytes()) % HASH_BINS as u64) as usize;
            *counts.entry(bin).or_insert(0.0) += 1.0;
        }
    }
    counts.into_iter().collect()
}

impl FrozenTextEncoder {
    pub fn new(d: usize, prompt_len: usize, seed: u64) -> Self {
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let mut rng = rng_for(seed, "text.vocab_projection");
        let vocab_projection = (0..HASH_BINS * d).map(|_| unit.sample(&mut rng)).collect();
        let h = TEXT_HIDDEN_MULT * d;
        let mixer_std = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut rng = rng_for(seed, "text.sequence_mixer");
        let rows = (prompt_len + 1) * d;
        let prompt_gain = 1.0 / ((prompt_len * d) as f64).sqrt();
        let mixer: Vec<f64> = (0..rows * h)
            .map(|i| mixer_std.sample(&mut rng) * if i < prompt_len * d * h { prompt_gain } else { 1.0 })
            .collect();
        let sequence_mixer = Tensor::from_parts(vec![rows, h], mixer);
        let out_std = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("valid normal");
        let mut rng = rng_for(seed, "text.output_projection");
        let output_projection = Tensor::from_parts(vec![h, d], (0..h * d).map(|_| out_std.sample(&mut rng)).collect());
        Self {
            weights: Arc::new(TextWeights { d, prompt_len, vocab_projection, sequence_mixer, output_projection }),
            audit: None,
        }
    }

    /// Records every class name this encoder (and its clones) embeds.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Arc::new(Mutex::new(BTreeSet::new())));
        self
    }

    pub fn audited_names(&self) -> BTreeSet<String> {
        self.audit.as_ref().map(|a| a.lock().expect("audit lock").clone()).unwrap_or_default()
    }

    pub fn dim(&self) -> usize {
        self.weights.d
    }

    pub fn prompt_len(&self) -> usize {
        self.weights.prompt_len
    }

    pub fn sequence_mixer(&self) -> &Tensor {
        &self.weights.sequence_mixer
    }

    /// Hidden width `h`.
    pub fn hidden(&self) -> usize {
        TEXT_HIDDEN_MULT * self.weights.d
    }

    pub fn output_projection(&self) -> &Tensor {
        &self.weights.output_projection
    }

    /// Rows `0..m·d` of `M1`: the part that reads prompt tokens.
    pub fn prompt_block(&self) -> Tensor {
        let (d, h) = (self.weights.d, self.hidden());
        let rows = self.weights.prompt_len * d;
        Tensor::from_parts(vec![rows, h], self.weights.sequence_mixer.data()[..rows * h].to_vec())
    }

    /// The last `d` rows of `M1`: the part that reads the class token.
    pub fn class_block(&self) -> Tensor {
        let (d, h) = (self.weights.d, self.hidden());
        let start = self.weights.prompt_len * d * h;
        Tensor::from_parts(vec![d, h], self.weights.sequence_mixer.data()[start..].to_vec())
    }

    fn embed_one(&self, name: &str) -> Result<Vec<f64>, EncoderError> {
        if name.trim().is_empty() {
            return Err(EncoderError::Input("class name must be non-empty".into()));
        }
        let bag = trigram_bag(name);
        if bag.is_empty() {
            return Err(EncoderError::Input(format!("class name {name:?} has no alphanumeric tokens")));
        }
        let d = self.weights.d;
        let mut out = vec![0.0; d];
        for (bin, count) in bag {
            let row = &self.weights.vocab_projection[bin * d..(bin + 1) * d];
            for (o, w) in out.iter_mut().zip(row) {
                *o += count * w;
            }
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter_mut().for_each(|v| *v /= n.max(NORM_EPS));
        Ok(out)
    }

    /// One L2-normalized row per name. Each row depends only on the seed and
    /// its own name.
    pub fn embed_class_names<S: AsRef<str>>(&self, names: &[S]) -> Result<Tensor, EncoderError> {
        if names.is_empty() {
            return Err(EncoderError::Input("need at least one class name".into()));
        }
        if let Some(audit) = &self.audit {
            let mut log = audit.lock().expect("audit lock");
            log.extend(names.iter().map(|n| n.as_ref().to_owned()));
        }
        let mut data = Vec::with_capacity(names.len() * self.weights.d);
        for n in names {
            data.extend(self.embed_one(n.as_ref())?);
        }
        Ok(Tensor::from_parts(vec![names.len(), self.weights.d], data))
    }

    /// Encodes an assembled prompt `[(m+1) × d]` to a unit vector in `ℝ^d`.
    /// Gradients flow to the tokens; the mixer enters the tape as a constant.
    pub fn encode_prompt_sequence<'t>(&self, tape: &'t Tape, tokens: &Var<'t>) -> Result<Var<'t>, EncoderError> {
        let (m, d) = (self.weights.prompt_len, self.weights.d);
        if tokens.shape() != [m + 1, d] {
            return Err(EncoderError::Input(format!(
                "prompt sequence must be [{}, {d}], got {:?}",
                m + 1,
                tokens.shape()
            )));
        }
        let mixer = tape.constant(self.weights.sequence_mixer.clone())?;
        let out = tape.constant(self.weights.output_projection.clone())?;
        let flat = tokens.reshape(&[1, (m + 1) * d])?;
        Ok(flat.matmul(&mixer)?.relu()?.matmul(&out)?.reshape(&[d])?.l2_normalize(NORM_EPS)?)
    }

    /// `T · class_block`, the class token's share of the hidden pre-activation.
    pub fn class_contribution(&self, class_embeds: &Tensor) -> Result<Tensor, NumericsError> {
        let (d, h) = (self.weights.d, self.hidden());
        if class_embeds.rank() != 2 || class_embeds.shape()[1] != d {
            return Err(NumericsError::Shape { op: "class_contribution", lhs: class_embeds.shape().to_vec(), rhs: vec![d, h] });
        }
        let n = class_embeds.shape()[0];
        Ok(Tensor::from_parts(vec![n, h], matmul_raw(class_embeds.data(), self.class_block().data(), n, d, h)))
    }

    /// Encoding of each class token with all-zero context: `[n × d]` unit rows.
    pub fn bare_class_embeddings(&self, class_embeds: &Tensor) -> Result<Tensor, NumericsError> {
        let (d, h) = (self.weights.d, self.hidden());
        let n = class_embeds.rows();
        let hidden: Vec<f64> = self.class_contribution(class_embeds)?.data().iter().map(|v| v.max(0.0)).collect();
        let mut out = matmul_raw(&hidden, self.weights.output_projection.data(), n, h, d);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Tensor::from_parts(vec![n, d], out))
    }
}
