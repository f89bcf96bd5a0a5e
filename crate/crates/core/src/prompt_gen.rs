//! Cross-attention prompt generator `f_θ`.
//!
//! `m` learnable queries attend over the class-name embeddings `T` with
//! `heads` parallel heads. The concatenated head outputs go through an output
//! projection, a layer norm and a two-layer ReLU MLP:
//!
//! ```text
//! K = T·W_K    V = T·W_V
//! A_h = softmax(Q_h·K_hᵀ / √d_head) · V_h
//! P = MLP(LN([A_1 … A_H] · W_O))
//! ```
//!
//! There are no residual connections, so with a single class every head
//! returns that class's value row whatever the queries are.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, NumericsError, ParamId, ParameterStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGenConfig {
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    /// Standard deviation of the queries and attention projections at init.
    pub init_std: f64,
}

impl PromptGenConfig {
    pub fn d_ff(&self) -> usize {
        2 * self.d
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!("init_std must be > 0, got {}", self.init_std)));
        }
        if self.d == 0 || self.m == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(NumericsError::InvalidArgument(format!(
                "prompt generator needs d > 0 divisible by heads > 0 and m > 0 (d={}, heads={}, m={})",
                self.d, self.heads, self.m
            )));
        }
        Ok(())
    }
}

/// Handles to the generator's parameters (`θ`) inside a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct PromptGenParams {
    pub cfg: PromptGenConfig,
    pub queries: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("positive extents")
}

impl PromptGenParams {
    /// Registers every generator tensor under `prefix` (e.g. `"theta."`).
    ///
    /// Queries and attention projections start at `N(0, init_std²)`; MLP weights
    /// at `N(0, 1/fan_in)`; biases and `beta` at zero, `gamma` at one.
    pub fn register(store: &mut ParameterStore, prefix: &str, cfg: PromptGenConfig, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        cfg.validate()?;
        let (d, m, f, s) = (cfg.d, cfg.m, cfg.d_ff(), cfg.init_std);
        let mut add = |name: &str, t: Tensor| store.insert(format!("{prefix}{name}"), t);
        Ok(Self {
            cfg,
            queries: add("queries", normal(rng, &[m, d], s))?,
            w_k: add("w_k", normal(rng, &[d, d], s))?,
            w_v: add("w_v", normal(rng, &[d, d], s))?,
            w_o: add("w_o", normal(rng, &[d, d], s))?,
            ln_gamma: add("ln_gamma", Tensor::full(&[d], 1.0))?,
            ln_beta: add("ln_beta", Tensor::zeros(&[d]))?,
            mlp_w1: add("mlp_w1", normal(rng, &[d, f], (1.0 / d as f64).sqrt()))?,
            mlp_b1: add("mlp_b1", Tensor::zeros(&[f]))?,
            mlp_w2: add("mlp_w2", normal(rng, &[f, d], (1.0 / f as f64).sqrt()))?,
            mlp_b2: add("mlp_b2", Tensor::zeros(&[d]))?,
        })
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.queries,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln_gamma,
            self.ln_beta,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

fn check_classes(t: &Var<'_>, d: usize) -> Result<(), NumericsError> {
    let s = t.shape();
    if s.len() != 2 || s[1] != d || s[0] == 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "class embeddings must be [n, {d}] with n >= 1, got {s:?}"
        )));
    }
    Ok(())
}

/// Adds a `[w]` bias to every row of a `[r × w]` matrix.
pub(crate) fn add_row_bias<'t>(x: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    let rows = x.shape()[0];
    let w = bias.shape()[0];
    x.add(&bias.reshape(&[1, w])?.tile(rows)?)
}

/// Multi-head cross-attention before the output projection: `[m × d]`, heads
/// side by side.
pub fn cross_attention<'t>(theta: &PromptGenParams, bound: &Bound<'t>, t: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    let cfg = theta.cfg;
    check_classes(t, cfg.d)?;
    let q = bound.var(theta.queries);
    let k = t.matmul(&bound.var(theta.w_k))?;
    let v = t.matmul(&bound.var(theta.w_v))?;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let heads = (0..cfg.heads)
        .map(|h| {
            let (qh, kh, vh) = (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?);
            qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?.matmul(&vh)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        Var::concat(&heads, 1)
    }
}

/// `P = f_θ(T)`, the `[m × d]` context tokens.
pub fn generate_context_prompts<'t>(
    theta: &PromptGenParams,
    bound: &Bound<'t>,
    t: &Var<'t>,
) -> Result<Var<'t>, NumericsError> {
    let attn = cross_attention(theta, bound, t)?;
    let normed = attn
        .matmul(&bound.var(theta.w_o))?
        .layer_norm(&bound.var(theta.ln_gamma), &bound.var(theta.ln_beta), LN_EPS)?;
    let hidden = add_row_bias(&normed.matmul(&bound.var(theta.mlp_w1))?, &bound.var(theta.mlp_b1))?.relu()?;
    add_row_bias(&hidden.matmul(&bound.var(theta.mlp_w2))?, &bound.var(theta.mlp_b2))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{finite_diff_check, Tape};
    use crate::seed::rng_for;

    fn setup(d: usize, seed: u64) -> (ParameterStore, PromptGenParams) {
        let mut store = ParameterStore::new();
        let cfg = PromptGenConfig { d, m: 4, heads: 4, init_std: 0.02 };
        let theta = PromptGenParams::register(&mut store, "theta.", cfg, &mut rng_for(seed, "test.theta")).unwrap();
        (store, theta)
    }

    fn classes(n: usize, d: usize, seed: u64) -> Tensor {
        normal(&mut rng_for(seed, "test.classes"), &[n, d], 1.0)
    }

    fn run(store: &ParameterStore, theta: &PromptGenParams, t: &Tensor) -> Tensor {
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let tv = tape.constant(t.clone()).unwrap();
        generate_context_prompts(theta, &bound, &tv).unwrap().value()
    }

    #[test]
    fn output_is_m_by_d_for_any_n() {
        let (store, theta) = setup(16, 1);
        for n in [1, 3, 9] {
            assert_eq!(run(&store, &theta, &classes(n, 16, n as u64)).shape(), [4, 16]);
        }
    }

    #[test]
    fn bad_class_matrix_rejected() {
        let (store, theta) = setup(16, 1);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let tv = tape.constant(Tensor::zeros(&[2, 8])).unwrap();
        assert!(generate_context_prompts(&theta, &bound, &tv).is_err());
        assert!(PromptGenConfig { d: 10, m: 4, heads: 4, init_std: 0.02 }.validate().is_err());
    }

    #[test]
    fn bitwise_deterministic() {
        let (store, theta) = setup(16, 2);
        let t = classes(5, 16, 2);
        assert_eq!(run(&store, &theta, &t), run(&store, &theta, &t));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, theta) = setup(16, 3);
        let t = classes(3, 16, 3);
        let target = classes(4, 16, 4);
        let report = finite_diff_check(&mut store, 1e-5, |tape, bound| {
            let tv = tape.constant(t.clone())?;
            let p = generate_context_prompts(&theta, bound, &tv)?;
            p.mul(&tape.constant(target.clone())?)?.sum_all()?.sigmoid()
        })
        .unwrap();
        assert_eq!(report.blocks.len(), 10);
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn single_key_attention_returns_the_value_row(seed in 0u64..100_000) {
            let (store, theta) = setup(16, seed);
            let (store2, _) = setup(16, seed.wrapping_add(1));
            let t = classes(1, 16, seed);
            let attn = |s: &ParameterStore, q_from: &ParameterStore| {
                let mut s = s.clone();
                s.get_mut(theta.queries).value = q_from.get(theta.queries).value.clone();
                let tape = Tape::new();
                let bound = s.bind(&tape).unwrap();
                let tv = tape.constant(t.clone()).unwrap();
                cross_attention(&theta, &bound, &tv).unwrap().value()
            };
            let a = attn(&store, &store);
            let b = attn(&store, &store2);
            prop_assert_eq!(&a, &b);
            let v = crate::numerics::matmul_raw(t.data(), store.get(theta.w_v).value.data(), 1, 16, 16);
            for r in 0..4 {
                prop_assert_eq!(a.row(r), &v[..]);
            }
        }

        #[test]
        fn permuting_classes_leaves_prompts_unchanged(seed in 0u64..100_000, n in 2usize..7) {
            let (store, theta) = setup(16, seed);
            let t = classes(n, 16, seed);
            let rows: Vec<Vec<f64>> = (0..n).rev().map(|i| t.row((i + seed as usize) % n).to_vec()).collect();
            let permuted = Tensor::from_rows(&rows).unwrap();
            let a = run(&store, &theta, &t);
            let b = run(&store, &theta, &permuted);
            prop_assert!(a.max_abs_diff(&b) <= 1e-12, "diff {}", a.max_abs_diff(&b));
        }
    }
}
