//! Local, base and new accuracy.
//!
//! At evaluation the style statistic is a client's running average, not a
//! batch mean. Base and new examples are drawn from every domain that has at
//! least one client, and scored with the running style of the lowest-id
//! client in that domain.

use crate::encoders::FrozenVisionEncoder;
use crate::datagen::Example;
use crate::fedruntime::{Client, EvalScores, FeatureSet};
use crate::model::{ClassContext, FedCsapModel};
use crate::numerics::Tensor;

use super::{Experiment, HarnessError};

struct Split {
    classes: ClassContext,
    /// `(client whose style is used, examples of that client's domain)`
    per_domain: Vec<(usize, FeatureSet)>,
}

pub struct Evaluator {
    /// Indexed by client id.
    local: Vec<FeatureSet>,
    base: Split,
    new: Split,
}

/// Fraction of `set` classified correctly against `classes`.
pub fn accuracy(model: &FedCsapModel, classes: &ClassContext, set: &FeatureSet, style: &Tensor) -> Result<(usize, usize), HarnessError> {
    let all: Vec<usize> = (0..set.len()).collect();
    let pred = model.predict(classes, &set.batch(&all, style.clone()))?;
    Ok((pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count(), set.len()))
}

fn extract(vision: &FrozenVisionEncoder, examples: &[Example], scored: &[usize], what: &str) -> Result<FeatureSet, HarnessError> {
    if examples.is_empty() {
        return Err(HarnessError::Runtime(format!("empty evaluation split: {what}")));
    }
    Ok(FeatureSet::extract(vision, examples, |g| scored.binary_search(&g).ok())?)
}

impl Evaluator {
    pub fn new(exp: &Experiment) -> Result<Self, HarnessError> {
        let vision = &exp.backbone.vision;
        let eval = &exp.dataset.eval;
        let local = exp
            .clients
            .iter()
            .map(|c| {
                let ex: Vec<Example> = eval.iter().filter(|e| e.domain == c.domain_id && c.class_ids.binary_search(&e.label).is_ok()).cloned().collect();
                extract(vision, &ex, &c.class_ids, &format!("client {}", c.id))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut owners: Vec<(usize, usize)> = Vec::new();
        for c in &exp.clients {
            if !owners.iter().any(|&(g, _)| g == c.domain_id) {
                owners.push((c.domain_id, c.id));
            }
        }
        owners.sort_unstable();
        let split = |ids: &[usize], what: &str| -> Result<Split, HarnessError> {
            let names: Vec<&str> = ids.iter().map(|&k| exp.dataset.class_names[k].as_str()).collect();
            let classes = ClassContext::new(&exp.backbone.text, &names)?;
            let per_domain = owners
                .iter()
                .map(|&(g, owner)| {
                    let ex: Vec<Example> = eval.iter().filter(|e| e.domain == g && ids.binary_search(&e.label).is_ok()).cloned().collect();
                    Ok((owner, extract(vision, &ex, ids, &format!("{what} classes, domain {g}"))?))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok(Split { classes, per_domain })
        };
        Ok(Self { local, base: split(&exp.base_classes, "base")?, new: split(&exp.new_classes, "new")? })
    }

    fn split_accuracy(model: &FedCsapModel, split: &Split, clients: &[Client]) -> Result<f64, HarnessError> {
        let (mut hit, mut total) = (0, 0);
        for (owner, set) in &split.per_domain {
            let (h, t) = accuracy(model, &split.classes, set, &clients[*owner].style.value)?;
            hit += h;
            total += t;
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn scores(&self, model: &FedCsapModel, clients: &[Client]) -> Result<EvalScores, HarnessError> {
        if clients.len() != self.local.len() {
            return Err(HarnessError::Runtime(format!("evaluator built for {} clients, got {}", self.local.len(), clients.len())));
        }
        let mut local = 0.0;
        for (c, set) in clients.iter().zip(&self.local) {
            let (h, t) = accuracy(model, &c.classes, set, &c.style.value)?;
            local += h as f64 / t as f64;
        }
        Ok(EvalScores {
            local: local / clients.len() as f64,
            base: Self::split_accuracy(model, &self.base, clients)?,
            new: Self::split_accuracy(model, &self.new, clients)?,
        })
    }
}
