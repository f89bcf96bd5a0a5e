//! Injection block `B_φ`.
//!
//! Each image contributes a fused vector `M_x = [mean(T); F̂(x); μ]` of width
//! `D = d + 2·ΣC`. A stack of channel-gating layers
//!
//! ```text
//! O_q = O_{q−1} ⊙ σ(relu(O_{q−1}·W1_q)·W2_q) + O_{q−1},   O_0 = M_x
//! ```
//!
//! refines it, and `M` linear heads turn the result into visual tokens that
//! are added to the context tokens: `c′ = P + V`.
//!
//! Everything here is batched over rows: `[b × D]` in, `[b·M × d]` out,
//! image-major.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Bound, NumericsError, ParamId, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub d: usize,
    /// Prompt length; one visual token per context token.
    pub m: usize,
    /// `ΣC_l` over the tapped vision stages.
    pub content_channels: usize,
    pub q_se: usize,
    pub reduction: usize,
}

impl InjectionConfig {
    pub fn fused_width(&self) -> usize {
        self.d + 2 * self.content_channels
    }

    pub fn bottleneck(&self) -> usize {
        (self.fused_width() / self.reduction).max(1)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.d == 0 || self.m == 0 || self.content_channels == 0 || self.q_se == 0 || self.reduction == 0 {
            return Err(NumericsError::InvalidArgument(format!("injection extents must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Handles to `φ` inside a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct InjectionParams {
    pub cfg: InjectionConfig,
    /// `(W1 [D × D/r], W2 [D/r × D])` per layer.
    pub se_layers: Vec<(ParamId, ParamId)>,
    /// `(W [D × d], b [d])` per visual token.
    pub token_heads: Vec<(ParamId, ParamId)>,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("positive extents")
}

impl InjectionParams {
    /// Gate weights start at `N(0, 1/fan_in)`, token heads at `N(0, 0.02²)`
    /// with zero biases.
    pub fn register(store: &mut ParameterStore, prefix: &str, cfg: InjectionConfig, rng: &mut impl Rng) -> Result<Self, NumericsError> {
        cfg.validate()?;
        let (dd, h) = (cfg.fused_width(), cfg.bottleneck());
        let mut se_layers = Vec::with_capacity(cfg.q_se);
        for q in 0..cfg.q_se {
            let w1 = store.insert(format!("{prefix}se{q}.w1"), normal(rng, &[dd, h], (1.0 / dd as f64).sqrt()))?;
            let w2 = store.insert(format!("{prefix}se{q}.w2"), normal(rng, &[h, dd], (1.0 / h as f64).sqrt()))?;
            se_layers.push((w1, w2));
        }
        let mut token_heads = Vec::with_capacity(cfg.m);
        for j in 0..cfg.m {
            let w = store.insert(format!("{prefix}token{j}.w"), normal(rng, &[dd, cfg.d], 0.02))?;
            let b = store.insert(format!("{prefix}token{j}.b"), Tensor::zeros(&[cfg.d]))?;
            token_heads.push((w, b));
        }
        Ok(Self { cfg, se_layers, token_heads })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.se_layers.iter().chain(&self.token_heads).flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// `M_x = [mean over rows of T; F̂(x); μ]`.
pub fn build_fused_input(t: &Tensor, f_hat: &Tensor, mu: &Tensor) -> Result<Tensor, NumericsError> {
    if t.rank() != 2 || f_hat.rank() != 1 || mu.shape() != f_hat.shape() {
        return Err(NumericsError::Shape { op: "build_fused_input", lhs: f_hat.shape().to_vec(), rhs: mu.shape().to_vec() });
    }
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out.extend_from_slice(f_hat.data());
    out.extend_from_slice(mu.data());
    Ok(Tensor::from_vec(out))
}

fn check_width(x: &Var<'_>, width: usize, op: &'static str) -> Result<(), NumericsError> {
    let s = x.shape();
    if s.len() != 2 || s[1] != width {
        return Err(NumericsError::Shape { op, lhs: s, rhs: vec![width] });
    }
    Ok(())
}

/// Runs the gating stack on `[b × D]` rows.
pub fn se_forward<'t>(phi: &InjectionParams, bound: &Bound<'t>, mx: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    check_width(mx, phi.cfg.fused_width(), "se_forward")?;
    let mut o = *mx;
    for &(w1, w2) in &phi.se_layers {
        let gate = o.matmul(&bound.var(w1))?.relu()?.matmul(&bound.var(w2))?.sigmoid()?;
        o = o.mul(&gate)?.add(&o)?;
    }
    Ok(o)
}

/// `v_j = O·W_j + b_j` for every head, as `[b·M × d]` (image-major).
pub fn project_visual_tokens<'t>(phi: &InjectionParams, bound: &Bound<'t>, o: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    check_width(o, phi.cfg.fused_width(), "project_visual_tokens")?;
    let (m, d) = (phi.cfg.m, phi.cfg.d);
    let b = o.shape()[0];
    let ws: Vec<Var<'t>> = phi.token_heads.iter().map(|&(w, _)| bound.var(w)).collect();
    let bs: Vec<Var<'t>> = phi.token_heads.iter().map(|&(_, b)| bound.var(b)).collect();
    let w = if m == 1 { ws[0] } else { Var::concat(&ws, 1)? };
    let bias = if m == 1 { bs[0] } else { Var::concat(&bs, 0)? };
    let flat = o.matmul(&w)?.add(&bias.reshape(&[1, m * d])?.tile(b)?)?;
    flat.reshape(&[b * m, d])
}

/// `c′ = P + V` for each image: `P [m × d]` is shared, `V [b·m × d]`.
pub fn inject<'t>(p: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>, NumericsError> {
    let (ps, vs) = (p.shape(), v.shape());
    if ps.len() != 2 || vs.len() != 2 || ps[1] != vs[1] || vs[0] % ps[0] != 0 {
        return Err(NumericsError::Shape { op: "inject", lhs: ps, rhs: vs });
    }
    p.tile(vs[0] / ps[0])?.add(v)
}

/// One `[(m+1) × d]` token sequence per class: the shared `c′` rows followed
/// by that class's embedding.
pub fn assemble_prompts<'t>(c_prime: &Var<'t>, class_embeds: &Var<'t>) -> Result<Vec<Var<'t>>, NumericsError> {
    let (cs, ts) = (c_prime.shape(), class_embeds.shape());
    if cs.len() != 2 || ts.len() != 2 || cs[1] != ts[1] {
        return Err(NumericsError::Shape { op: "assemble_prompts", lhs: cs, rhs: ts });
    }
    (0..ts[0]).map(|j| Var::concat(&[*c_prime, class_embeds.slice(0, j, 1)?], 0)).collect()
}

/// Single-image convenience: `P [m × d]`, fused input `M_x [D]`, class
/// embeddings `[n × d]` to the `n` assembled prompts.
pub fn inject_and_assemble<'t>(
    phi: &InjectionParams,
    bound: &Bound<'t>,
    p: &Var<'t>,
    mx: &Var<'t>,
    class_embeds: &Var<'t>,
) -> Result<Vec<Var<'t>>, NumericsError> {
    let row = mx.reshape(&[1, phi.cfg.fused_width()])?;
    let v = project_visual_tokens(phi, bound, &se_forward(phi, bound, &row)?)?;
    assemble_prompts(&inject(p, &v)?, class_embeds)
}
