//! Cosine-softmax classifier, cross-entropy and the context redundancy
//! penalty (CRP).

use serde::{Deserialize, Serialize};

use crate::numerics::{softmax_raw, NumericsError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_crp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.01, lambda_crp: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lambda_crp >= 0.0 && self.lambda_crp.is_finite()) {
            return Err(format!("lambda_crp must be >= 0, got {}", self.lambda_crp));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrpVariant {
    /// `Σ_{j≠l} |ĉ_j·ĉ_l|` on row-normalized tokens.
    #[default]
    Normalized,
    /// `Σ_{j,l} |(C′C′ᵀ − I)_{jl}|` on raw tokens.
    Unnormalized,
}

impl std::str::FromStr for CrpVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "unnormalized" => Ok(Self::Unnormalized),
            other => Err(format!("unknown CRP variant {other:?} (expected normalized or unnormalized)")),
        }
    }
}

/// `softmax(cos(x, z_j) / τ)` for one image against `n` prompt embeddings.
/// Both sides are expected to be unit vectors already.
pub fn class_probs(image_embed: &Tensor, prompt_embeds: &Tensor, tau: f64) -> Result<Tensor, NumericsError> {
    if !(tau > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let d = image_embed.len();
    if prompt_embeds.rank() != 2 || prompt_embeds.shape()[1] != d {
        return Err(NumericsError::Shape { op: "class_probs", lhs: image_embed.shape().to_vec(), rhs: prompt_embeds.shape().to_vec() });
    }
    let scores: Vec<f64> = (0..prompt_embeds.shape()[0])
        .map(|j| prompt_embeds.row(j).iter().zip(image_embed.data()).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    Ok(Tensor::from_vec(softmax_raw(&scores)))
}

/// Per-image logits `[b × n]`: image `i` is scored against prompt rows
/// `i·n .. (i+1)·n` of `prompt_embeds [b·n × d]`.
pub fn cosine_logits<'t>(image_embeds: &Var<'t>, prompt_embeds: &Var<'t>, n: usize, tau: f64) -> Result<Var<'t>, NumericsError> {
    if !(tau > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let (xs, zs) = (image_embeds.shape(), prompt_embeds.shape());
    if xs.len() != 2 || zs.len() != 2 || xs[1] != zs[1] || n == 0 || xs[0] * n != zs[0] {
        return Err(NumericsError::Shape { op: "cosine_logits", lhs: xs, rhs: zs });
    }
    image_embeds.repeat_rows(n)?.mul(prompt_embeds)?.sum(&[1])?.reshape(&[xs[0], n])?.scale(1.0 / tau)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` along
/// axis 1, through log-sum-exp.
pub fn ce_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>, NumericsError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(NumericsError::InvalidArgument(format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(NumericsError::InvalidArgument(format!("label {bad} out of range for {} classes", s[1])));
    }
    let picks: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * s[1] + y).collect();
    logits.log_softmax(1)?.gather(&picks)?.mean_all()?.neg()
}

/// Block-diagonal mask selecting pairs of tokens from the same image.
fn pair_mask(images: usize, m: usize, with_diagonal: bool) -> Tensor {
    let n = images * m;
    let mut data = vec![0.0; n * n];
    for b in 0..images {
        for j in 0..m {
            for l in 0..m {
                if with_diagonal || j != l {
                    data[(b * m + j) * n + b * m + l] = 1.0;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n], data)
}

/// CRP averaged over images. `c_prime` is `[b·m × d]`, image-major.
/// With `m < 2` the penalty is zero.
pub fn crp_loss<'t>(tape: &'t Tape, c_prime: &Var<'t>, m: usize, variant: CrpVariant) -> Result<Var<'t>, NumericsError> {
    let s = c_prime.shape();
    if s.len() != 2 || m == 0 || !s[0].is_multiple_of(m) {
        return Err(NumericsError::InvalidArgument(format!("c' must be [b·{m}, d], got {s:?}")));
    }
    let images = s[0] / m;
    if m < 2 {
        return c_prime.scale(0.0)?.sum_all();
    }
    let g = match variant {
        CrpVariant::Normalized => {
            let c = c_prime.l2_normalize(1e-12)?;
            c.matmul(&c.transpose()?)?.mul(&tape.constant(pair_mask(images, m, false))?)?
        }
        CrpVariant::Unnormalized => {
            let c = c_prime.matmul(&c_prime.transpose()?)?.sub(&tape.constant(Tensor::identity(s[0]))?)?;
            c.mul(&tape.constant(pair_mask(images, m, true))?)?
        }
    };
    g.abs()?.sum_all()?.scale(1.0 / images as f64)
}

/// `ce + λ·crp`.
pub fn total_loss<'t>(ce: &Var<'t>, crp: &Var<'t>, cfg: &LossConfig) -> Result<Var<'t>, NumericsError> {
    if cfg.lambda_crp == 0.0 {
        return Ok(*ce);
    }
    ce.add(&crp.scale(cfg.lambda_crp)?)
}

/// Mean off-diagonal `|Ĉ·Ĉᵀ|` entry over images, without a tape.
pub fn mean_offdiag_similarity(c_prime: &Tensor, m: usize) -> f64 {
    let d = c_prime.last_dim();
    let rows: Vec<Vec<f64>> = (0..c_prime.rows())
        .map(|i| {
            let r = c_prime.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let images = rows.len() / m;
    let mut acc = 0.0;
    for b in 0..images {
        for j in 0..m {
            for l in 0..m {
                if j != l {
                    acc += (0..d).map(|k| rows[b * m + j][k] * rows[b * m + l][k]).sum::<f64>().abs();
                }
            }
        }
    }
    acc / (images * m * (m - 1)).max(1) as f64
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::numerics::{finite_diff_check, ParameterStore};
    use crate::seed::rng_for;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "test.losses");
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(shape, (0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    fn crp_value(c: &Tensor, m: usize, variant: CrpVariant) -> f64 {
        let tape = Tape::new();
        let v = tape.constant(c.clone()).unwrap();
        crp_loss(&tape, &v, m, variant).unwrap().item()
    }

    #[test]
    fn probs_closed_forms() {
        let x = Tensor::from_vec(vec![0.6, 0.8]);
        let same = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = class_probs(&x, &same, 0.01).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let hot = class_probs(&x, &z, 1.0).unwrap();
        let cold = class_probs(&x, &z, 0.01).unwrap();
        assert!((hot.sum() - 1.0).abs() < 1e-12 && (cold.sum() - 1.0).abs() < 1e-12);
        assert!(hot.data()[1] > hot.data()[0] && cold.data()[1] > cold.data()[0]);
        assert!(cold.data()[1] > hot.data()[1]);
        assert!(class_probs(&x, &z, 0.0).is_err());
    }

    #[test]
    fn ce_closed_forms() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let l = ce_loss(&uniform, &[0, 1, 3]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let sharp = tape.constant(Tensor::from_rows(&[vec![0.0, 800.0]]).unwrap()).unwrap();
        assert_eq!(ce_loss(&sharp, &[1]).unwrap().item(), 0.0);
        assert!(ce_loss(&uniform, &[4, 0, 0]).is_err());
        assert!(ce_loss(&uniform, &[0]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut store = ParameterStore::new();
        store.insert("logits", random(&[5, 4], 1)).unwrap();
        let labels = [0, 3, 2, 2, 1];
        let r = finite_diff_check(&mut store, 1e-5, |_, b| ce_loss(&b.vars()[0], &labels)).unwrap();
        assert!(r.max_rel_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn crp_closed_forms() {
        let orth = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, -3.0, 0.0], vec![0.0, 0.0, 0.5]]).unwrap();
        assert_eq!(crp_value(&orth, 3, CrpVariant::Normalized), 0.0);
        let dup = Tensor::from_rows(&[vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap();
        assert!((crp_value(&dup, 2, CrpVariant::Normalized) - 2.0).abs() < 1e-15);
        // two images of two tokens each; cross-image pairs must not count
        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!((crp_value(&two, 2, CrpVariant::Normalized) - 1.0).abs() < 1e-15);
        let unit = Tensor::identity(3);
        assert_eq!(crp_value(&unit, 3, CrpVariant::Unnormalized), 0.0);
        let scaled = unit.map(|v| 2.0 * v);
        assert!((crp_value(&scaled, 3, CrpVariant::Unnormalized) - 9.0).abs() < 1e-15);
        assert_eq!(crp_value(&random(&[3, 4], 2), 1, CrpVariant::Normalized), 0.0);
    }

    #[test]
    fn total_loss_is_linear() {
        let tape = Tape::new();
        let ce = tape.leaf(Tensor::scalar(0.5)).unwrap();
        let crp = tape.leaf(Tensor::scalar(0.25)).unwrap();
        assert_eq!(total_loss(&ce, &crp, &LossConfig { tau: 1.0, lambda_crp: 1.0 }).unwrap().item(), 0.75);
        assert_eq!(total_loss(&ce, &crp, &LossConfig { tau: 1.0, lambda_crp: 0.0 }).unwrap().item(), 0.5);

        // grad(total) = grad(ce) + λ·grad(crp) for a shared parameter
        let x = random(&[2, 3], 3);
        let lambda = 0.3;
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone()).unwrap();
            let logits = v.scale(2.0).unwrap();
            let ce = ce_loss(&logits, &[1, 2]).unwrap();
            let crp = crp_loss(&tape, &v, 2, CrpVariant::Normalized).unwrap();
            let loss = match which {
                0 => ce,
                1 => crp,
                _ => total_loss(&ce, &crp, &LossConfig { tau: 1.0, lambda_crp: lambda }).unwrap(),
            };
            tape.backward(&loss).unwrap().get(&v)
        };
        let (gc, gr, gt) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..x.len() {
            assert!((gt.data()[k] - (gc.data()[k] + lambda * gr.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn crp_gradients_match_finite_differences() {
        for variant in [CrpVariant::Normalized, CrpVariant::Unnormalized] {
            let mut store = ParameterStore::new();
            store.insert("c", random(&[6, 5], 4)).unwrap();
            let r = finite_diff_check(&mut store, 1e-6, |tape, b| crp_loss(tape, &b.vars()[0], 3, variant)).unwrap();
            assert!(r.max_rel_error() < 1e-5, "{variant:?}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn crp_is_scale_invariant_and_bounded(seed in 0u64..100_000, m in 2usize..6, scales in prop::collection::vec(0.01f64..100.0, 6)) {
            let c = random(&[m, 7], seed);
            let base = crp_value(&c, m, CrpVariant::Normalized);
            prop_assert!((0.0..=(m * (m - 1)) as f64 + 1e-12).contains(&base));
            let mut scaled = c.clone();
            for j in 0..m {
                for v in &mut scaled.data_mut()[j * 7..(j + 1) * 7] {
                    *v *= scales[j];
                }
            }
            prop_assert!((crp_value(&scaled, m, CrpVariant::Normalized) - base).abs() < 1e-12);
        }

        #[test]
        fn log_space_ce_matches_naive(seed in 0u64..100_000, n in 2usize..8) {
            let logits = random(&[3, n], seed);
            let labels = [0, n - 1, n / 2];
            let tape = Tape::new();
            let fast = ce_loss(&tape.constant(logits.clone()).unwrap(), &labels).unwrap().item();
            let naive: f64 = (0..3).map(|i| -softmax_raw(logits.row(i))[labels[i]].ln()).sum::<f64>() / 3.0;
            prop_assert!((fast - naive).abs() < 1e-10);
        }

        #[test]
        fn probabilities_sum_to_one(seed in 0u64..100_000, n in 1usize..10, tau in 0.005f64..2.0) {
            let x = random(&[4], seed);
            let x = x.map(|v| v / x.norm());
            let z = random(&[n, 4], seed ^ 1);
            let p = class_probs(&x, &z, tau).unwrap();
            prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        }
    }
}
