//! Variational information bottleneck over the fused representation:
//! a diagonal Gaussian `N(μ, diag σ²)` with the reparameterised sample
//! used for training and `μ` alone at inference.

use std::cell::Cell;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{Bound, ParamId};
use crate::rng::Rng;
use crate::tensor::{safe_log, softplus, Graph, Tensor, TensorError, Var};

/// Floor added to the softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-6;

thread_local! {
    static NOISE_DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of noise vectors drawn on this thread so far.
pub fn noise_draws() -> u64 {
    NOISE_DRAWS.with(Cell::get)
}

/// A standard normal noise vector of length `dim`.
pub fn draw_noise(rng: &mut Rng, dim: usize) -> Vec<f64> {
    NOISE_DRAWS.with(|c| c.set(c.get() + 1));
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Value-level latent sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

/// `z = μ + ε ⊙ σ` with fresh noise.
pub fn sample_z(mu: &[f64], sigma: &[f64], rng: &mut Rng) -> Result<LatentGaussian> {
    if mu.len() != sigma.len() {
        return Err(TensorError::Shape {
            op: "sample_z",
            left: vec![mu.len()],
            right: vec![sigma.len()],
        }
        .into());
    }
    let eps = draw_noise(rng, mu.len());
    let z = mu.iter().zip(sigma).zip(&eps).map(|((m, s), e)| m + e * s).collect();
    Ok(LatentGaussian {
        mu: mu.to_vec(),
        sigma: sigma.to_vec(),
        eps,
        z,
    })
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * safe_log(*s))
        .sum::<f64>()
}

/// `σ = softplus(x) + floor` on plain values.
pub fn sigma_from_preactivation(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| softplus(v) + SIGMA_FLOOR).collect()
}

/// Mean and scale nodes of the posterior for representation `m`.
pub fn encode_latent(g: &mut Graph, b: &Bound, m: Var) -> Result<(Var, Var)> {
    let mu = g.matmul(b.var(ParamId::MuWeight), m)?;
    let mu = g.add(mu, b.var(ParamId::MuBias))?;
    let pre = g.matmul(b.var(ParamId::SigmaWeight), m)?;
    let pre = g.add(pre, b.var(ParamId::SigmaBias))?;
    let sp = g.softplus(pre)?;
    let sigma = g.affine(sp, 1.0, SIGMA_FLOOR)?;
    Ok((mu, sigma))
}

/// Inference representation: the posterior mean, never a sample.
pub fn inference_repr(g: &mut Graph, b: &Bound, m: Var) -> Result<Var> {
    let mu = g.matmul(b.var(ParamId::MuWeight), m)?;
    Ok(g.add(mu, b.var(ParamId::MuBias))?)
}

/// Reparameterised sample with externally drawn, frozen noise.
pub fn reparameterize(g: &mut Graph, mu: Var, sigma: Var, eps: &[f64]) -> Result<Var> {
    let e = g.constant(Tensor::vector(eps.to_vec()));
    let scaled = g.hadamard(e, sigma)?;
    Ok(g.add(mu, scaled)?)
}

/// Per-instance KL node.
pub fn kl_term(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var> {
    let d = g.value(mu).len() as f64;
    let mu2 = g.hadamard(mu, mu)?;
    let s2 = g.hadamard(sigma, sigma)?;
    let ls = g.safe_log(sigma)?;
    let a = g.sum(mu2)?;
    let b = g.sum(s2)?;
    let c = g.sum(ls)?;
    let c2 = g.scale(c, 2.0)?;
    let ab = g.add(a, b)?;
    let total = g.sub(ab, c2)?;
    Ok(g.affine(total, 0.5, -0.5 * d)?)
}

/// Batch mean of [`kl_term`].
pub fn kl_loss(g: &mut Graph, latents: &[(Var, Var)]) -> Result<Var> {
    let terms = latents
        .iter()
        .map(|&(mu, s)| kl_term(g, mu, s))
        .collect::<Result<Vec<_>>>()?;
    crate::model::mean_of(g, &terms)
}
