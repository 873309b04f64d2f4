//! Relation-aware and class-aware discriminators: the intra-instance
//! invariance loss over (original, soft, hard) triplets and the
//! inter-instance loss pushing hard-perturbed predictions away from the
//! clean ones.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{encode_question, mean_of, Bound, ParamId};
use crate::rng::Rng;
use crate::tensor::{dot, safe_log, sigmoid, Graph, Tensor, TensorError, Var, LOG_EPS, NORM_EPS};

/// The `n_prime` most probable non-ground-truth answers, most probable first.
pub fn negative_candidates(pred: &[f64], gt: &[usize], n_prime: usize) -> Result<Vec<usize>> {
    if n_prime == 0 {
        return Err(Error::Vocabulary("negative candidate count must be >= 1".into()));
    }
    let mut pool: Vec<usize> = (0..pred.len()).filter(|a| !gt.contains(a)).collect();
    if pool.len() < n_prime {
        return Err(Error::Vocabulary(format!(
            "{} non-ground-truth answers, {n_prime} negatives requested",
            pool.len()
        )));
    }
    pool.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]).then(a.cmp(&b)));
    pool.truncate(n_prime);
    Ok(pool)
}

/// `f_a(𝒫(A))`: the answer map applied to the mean embedding of `answers`.
pub fn answer_map(g: &mut Graph, b: &Bound, answer_tokens: &[u32]) -> Result<Var> {
    let pooled = encode_question(g, b, answer_tokens)?;
    let mapped = g.matmul(b.var(ParamId::AnswerWeight), pooled)?;
    Ok(g.add(mapped, b.var(ParamId::AnswerBias))?)
}

/// Graph handles of one instance's triplet.
#[derive(Debug, Clone, Copy)]
pub struct Triplet {
    pub h: Var,
    pub h_soft: Var,
    pub h_hard: Var,
    /// Answer id of the sampled negative.
    pub negative: usize,
}

/// Builds `h = z ⊙ f_a(𝒫(A^gt))`, `h̃ = z̃ ⊙ f_a(𝒫(A^gt))` and
/// `ĥ = ẑ ⊙ f_a(a_c)` with `a_c` drawn uniformly from `negatives`.
/// Answer ids are mapped to tokens by adding `answer_token_offset`.
#[allow(clippy::too_many_arguments)]
pub fn build_triplet(
    g: &mut Graph,
    b: &Bound,
    answer_token_offset: usize,
    z: Var,
    z_soft: Var,
    z_hard: Var,
    gt: &[usize],
    negatives: &[usize],
    rng: &mut Rng,
) -> Result<Triplet> {
    if negatives.is_empty() {
        return Err(TensorError::Contract("build_triplet: empty negative list".into()).into());
    }
    if gt.is_empty() {
        return Err(TensorError::Contract("build_triplet: empty ground-truth set".into()).into());
    }
    let negative = negatives[rng.random_range(0..negatives.len())];
    let tok = |a: usize| (a + answer_token_offset) as u32;
    let gt_tokens: Vec<u32> = gt.iter().map(|&a| tok(a)).collect();
    let pos = answer_map(g, b, &gt_tokens)?;
    let neg = answer_map(g, b, &[tok(negative)])?;
    Ok(Triplet {
        h: g.hadamard(z, pos)?,
        h_soft: g.hadamard(z_soft, pos)?,
        h_hard: g.hadamard(z_hard, neg)?,
        negative,
    })
}

/// Name of the first triplet vector whose norm is below the cosine floor.
pub fn degenerate_element(g: &Graph, t: &Triplet) -> Option<(&'static str, f64)> {
    [("h", t.h), ("h_soft", t.h_soft), ("h_hard", t.h_hard)]
        .into_iter()
        .map(|(name, v)| (name, g.value(v).norm()))
        .find(|&(_, n)| n < NORM_EPS)
}

/// `ln(2 − σ(cos(h,h̃) − cos(h̃,ĥ)))`, the two-way softmax written as a sigmoid.
pub fn relation_term(g: &mut Graph, t: &Triplet) -> Result<Var> {
    if let Some((name, norm)) = degenerate_element(g, t) {
        let op = match name {
            "h" => "relation_loss: h",
            "h_soft" => "relation_loss: h_soft",
            _ => "relation_loss: h_hard",
        };
        return Err(TensorError::Degenerate { op, norm }.into());
    }
    let pos = g.cosine(t.h, t.h_soft)?;
    let neg = g.cosine(t.h_soft, t.h_hard)?;
    let diff = g.sub(pos, neg)?;
    let ratio = g.sigmoid(diff)?;
    let inner = g.affine(ratio, -1.0, 2.0)?;
    Ok(g.safe_log(inner)?)
}

/// Value-level [`relation_term`] from the two cosines.
pub fn relation_value(cos_pos: f64, cos_neg: f64) -> f64 {
    (2.0 - sigmoid(cos_pos - cos_neg)).ln()
}

/// Batch mean of [`relation_term`]; a degenerate triplet fails with its index.
pub fn relation_loss(g: &mut Graph, triplets: &[Triplet]) -> Result<Var> {
    if triplets.is_empty() {
        return Err(TensorError::EmptyInput { op: "relation_loss" }.into());
    }
    let mut terms = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        match relation_term(g, t) {
            Ok(v) => terms.push(v),
            Err(Error::Tensor(source)) => return Err(Error::Instance { instance: i, source }),
            Err(e) => return Err(e),
        }
    }
    mean_of(g, &terms)
}

/// `Σ_k p_orig,k · log p̂_k`; `p_orig` enters as a constant.
pub fn class_term(g: &mut Graph, p_orig: &[f64], p_hard: Var) -> Result<Var> {
    let n = g.value(p_hard).len();
    if p_orig.len() != n {
        return Err(TensorError::Shape {
            op: "class_loss",
            left: vec![p_orig.len()],
            right: vec![n],
        }
        .into());
    }
    // ln ε + Σ p (log p̂ − ln ε): each shifted log is non-negative, so the
    // lower bound survives rounding.
    let floor = LOG_EPS.ln();
    let orig = g.constant(Tensor::vector(p_orig.to_vec()));
    let logp = g.safe_log(p_hard)?;
    let shifted = g.affine(logp, 1.0, -floor)?;
    let w = g.hadamard(orig, shifted)?;
    let s = g.sum(w)?;
    Ok(g.affine(s, 1.0, floor)?)
}

/// Value-level [`class_term`].
pub fn class_value(p_orig: &[f64], p_hard: &[f64]) -> f64 {
    let floor = LOG_EPS.ln();
    floor + p_orig.iter().zip(p_hard).map(|(p, q)| p * (safe_log(*q) - floor)).sum::<f64>()
}

/// Batch mean of [`class_term`].
pub fn class_loss(g: &mut Graph, p_orig: &[&[f64]], p_hard: &[Var]) -> Result<Var> {
    if p_orig.len() != p_hard.len() || p_orig.is_empty() {
        return Err(TensorError::Shape {
            op: "class_loss",
            left: vec![p_orig.len()],
            right: vec![p_hard.len()],
        }
        .into());
    }
    let terms = p_orig
        .iter()
        .zip(p_hard)
        .map(|(p, &q)| class_term(g, p, q))
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Probability mass the hard branch keeps on the clean prediction.
pub fn overlap(p_orig: &[f64], p_hard: &[f64]) -> f64 {
    dot(p_orig, p_hard)
}
