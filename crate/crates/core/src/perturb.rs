//! Visual perturbation controller: gradient-based region contribution scores,
//! the salient set, in-batch similarity, donor sampling, and the hard
//! (salient regions swapped for a peer's regions) and soft (trivial regions
//! zeroed) perturbed feature matrices.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{cosine, dot, Graph, Tensor, TensorError, Var, NORM_EPS};

/// Per-region contribution scores of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionScore {
    pub instance: usize,
    pub scores: Vec<f64>,
}

/// Column sums of `∂(Σ_k p_k)/∂V`, where `forward` maps a leaf holding `v`
/// to the probability vector. Nothing outside the temporary graph is touched.
pub fn contribution_scores<F>(v: &Tensor, instance: usize, forward: F) -> Result<ContributionScore>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(v.clone());
    let probs = forward(&mut g, leaf)?;
    let total = g.sum(probs)?;
    let grad = g.backward(total)?.get(leaf);
    let scores = column_sums(&grad);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Instance {
            instance,
            source: TensorError::NonFinite { op: "contribution_scores" },
        });
    }
    Ok(ContributionScore { instance, scores })
}

/// Sum over rows of each column of a `d × N` matrix.
pub fn column_sums(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, o) in out.iter_mut().enumerate() {
            *o += m.data()[r * cols + c];
        }
    }
    out
}

/// Indices of the `tau` largest scores, highest first; ties go to the lower index.
pub fn salient_set(s: &ContributionScore, tau: usize) -> Result<Vec<usize>> {
    let n = s.scores.len();
    if tau == 0 || tau > n {
        return Err(Error::Config(format!("salient count {tau} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    order.truncate(tau);
    Ok(order)
}

/// `𝒫(V) ⊙ q`: mean-pooled region features times the question vector.
pub fn joint_vector(v: &Tensor, q: &[f64]) -> Result<Vec<f64>> {
    if v.rank() != 2 || v.rows() != q.len() {
        return Err(TensorError::Shape {
            op: "joint_vector",
            left: v.shape().to_vec(),
            right: vec![q.len()],
        }
        .into());
    }
    let n = v.cols() as f64;
    let pooled = column_sums(&transpose(v));
    Ok(pooled.iter().zip(q).map(|(p, q)| p / n * q).collect())
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose shape")
}

/// Pairwise cosine matrix of the joint vectors; the diagonal is exactly 1.
pub fn instance_similarity(joints: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    for (i, j) in joints.iter().enumerate() {
        let norm = dot(j, j).sqrt();
        if norm < NORM_EPS {
            return Err(Error::Instance {
                instance: i,
                source: TensorError::Degenerate { op: "instance_similarity", norm },
            });
        }
    }
    let b = joints.len();
    let mut r = vec![vec![1.0; b]; b];
    for i in 0..b {
        for j in i + 1..b {
            let c = cosine(&joints[i], &joints[j])?;
            r[i][j] = c;
            r[j][i] = c;
        }
    }
    Ok(r)
}

/// Donor instance and the region columns taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Substitute {
    pub donor: usize,
    pub columns: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

/// The up to three peers most similar to `i`, most similar first.
pub fn donor_pool(r: &[Vec<f64>], i: usize) -> Vec<usize> {
    let mut peers: Vec<usize> = (0..r.len()).filter(|&j| j != i).collect();
    peers.sort_by(|&a, &b| r[i][b].total_cmp(&r[i][a]).then(a.cmp(&b)));
    peers.truncate(3);
    peers
}

/// Draws a donor uniformly from [`donor_pool`] and `k` of its columns
/// without replacement (with replacement only when `k` exceeds its region count).
pub fn sample_substitute(batch: &[&Tensor], i: usize, r: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Substitute> {
    if batch.len() < 2 {
        return Err(Error::InsufficientBatch(format!(
            "donor sampling needs at least 2 instances, batch has {}",
            batch.len()
        )));
    }
    if k == 0 {
        return Err(TensorError::Contract("sample_substitute: K must be >= 1".into()).into());
    }
    let pool = donor_pool(r, i);
    let donor = pool[rng.random_range(0..pool.len())];
    let n = batch[donor].cols();
    let columns: Vec<usize> = if k <= n {
        index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    let values = columns.iter().map(|&c| batch[donor].column(c)).collect();
    Ok(Substitute { donor, columns, values })
}

/// Replaces the first `k` entries of `salient` (the highest-scoring ones)
/// with `substitutes`. Returns the new matrix and the replaced indices.
pub fn hard_perturb(v: &Tensor, salient: &[usize], substitutes: &[Vec<f64>], k: usize) -> Result<(Tensor, Vec<usize>)> {
    if k > salient.len() {
        return Err(TensorError::Contract(format!("hard_perturb: K = {k} exceeds |O*| = {}", salient.len())).into());
    }
    if substitutes.len() != k {
        return Err(TensorError::Contract(format!(
            "hard_perturb: {} substitute columns for K = {k}",
            substitutes.len()
        ))
        .into());
    }
    let mut out = v.clone();
    for (&c, col) in salient[..k].iter().zip(substitutes) {
        if col.len() != v.rows() {
            return Err(TensorError::Shape {
                op: "hard_perturb",
                left: v.shape().to_vec(),
                right: vec![col.len()],
            }
            .into());
        }
        out.set_column(c, col);
    }
    Ok((out, salient[..k].to_vec()))
}

/// Zeroes the `p − k` lowest-scoring columns outside `salient` (ties to the
/// lower index). Returns the new matrix and the zeroed indices.
pub fn soft_perturb(v: &Tensor, salient: &[usize], scores: &[f64], p: usize, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let n = v.cols();
    if p < k {
        return Err(TensorError::Contract(format!("soft_perturb: p = {p} below K = {k}")).into());
    }
    if scores.len() != n {
        return Err(TensorError::Shape {
            op: "soft_perturb",
            left: v.shape().to_vec(),
            right: vec![scores.len()],
        }
        .into());
    }
    let mut rest: Vec<usize> = (0..n).filter(|c| !salient.contains(c)).collect();
    if p - k > rest.len() {
        return Err(TensorError::Contract(format!(
            "soft_perturb: p - K = {} exceeds {} non-salient regions",
            p - k,
            rest.len()
        ))
        .into());
    }
    rest.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    rest.truncate(p - k);
    let mut out = v.clone();
    let zero = vec![0.0; v.rows()];
    for &c in &rest {
        out.set_column(c, &zero);
    }
    Ok((out, rest))
}

/// Substitution count for `epoch`: `min(k_max, 1 + ⌊(epoch − t0)/2⌋)`.
pub fn k_schedule(epoch: usize, t0: usize, k_max: usize) -> Result<usize> {
    if epoch < t0 {
        return Err(Error::Phase(format!("perturbation requested at epoch {epoch}, before T0 = {t0}")));
    }
    Ok(k_max.min(1 + (epoch - t0) / 2))
}

/// Hard and soft views of one instance with their bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPair {
    pub hard: Tensor,
    pub soft: Tensor,
    pub salient: Vec<usize>,
    pub donor: usize,
    pub replaced: Vec<usize>,
    pub zeroed: Vec<usize>,
    pub k: usize,
    pub p: usize,
}

/// Knobs shared by every instance of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbSettings {
    pub tau: usize,
    pub p: usize,
    pub k: usize,
}

/// Builds the pair for instance `i` of `batch` from its scores and the
/// batch similarity matrix.
pub fn perturb_instance(
    batch: &[&Tensor],
    i: usize,
    score: &ContributionScore,
    r: &[Vec<f64>],
    settings: PerturbSettings,
    rng: &mut Rng,
) -> Result<PerturbedPair> {
    let salient = salient_set(score, settings.tau)?;
    let sub = sample_substitute(batch, i, r, settings.k, rng)?;
    let (hard, replaced) = hard_perturb(batch[i], &salient, &sub.values, settings.k)?;
    let (soft, zeroed) = soft_perturb(batch[i], &salient, &score.scores, settings.p, settings.k)?;
    Ok(PerturbedPair {
        hard,
        soft,
        salient,
        donor: sub.donor,
        replaced,
        zeroed,
        k: settings.k,
        p: settings.p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{finite_diff_check, sigmoid, FdProbe};
    use rand_distr::StandardNormal;

    fn random(r: &mut Rng, d: usize, n: usize) -> Tensor {
        Tensor::new(vec![d, n], (0..d * n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    fn score(scores: Vec<f64>) -> ContributionScore {
        ContributionScore { instance: 0, scores }
    }

    #[test]
    fn salient_set_cases() {
        assert_eq!(salient_set(&score(vec![3.0, 1.0, 2.0]), 2).unwrap(), vec![0, 2]);
        assert_eq!(salient_set(&score(vec![1.0; 4]), 2).unwrap(), vec![0, 1]);
        let mut all = salient_set(&score(vec![0.5, -1.0, 2.0]), 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(salient_set(&score(vec![1.0]), 2), Err(Error::Config(_))));
        assert!(salient_set(&score(vec![1.0]), 0).is_err());
    }

    #[test]
    fn linear_toy_scores_match_closed_form() {
        // p = σ(wᵀ V α) with fixed α: ∂p/∂V[:,n] = p(1−p) α_n w
        let w = vec![0.5, -1.0, 2.0];
        let alpha = vec![0.2, 0.3, 0.5];
        let mut r = rng::from_seed(1);
        let v = random(&mut r, 3, 3);
        let s = contribution_scores(&v, 0, |g, leaf| {
            let a = g.constant(Tensor::vector(alpha.clone()));
            let pooled = g.matmul(leaf, a)?;
            let wv = g.constant(Tensor::vector(w.clone()));
            let logit = g.matmul(wv, pooled)?;
            Ok(g.sigmoid(logit)?)
        })
        .unwrap();
        let pooled: Vec<f64> = (0..3).map(|d| (0..3).map(|n| v.get2(d, n) * alpha[n]).sum()).collect();
        let p = sigmoid(dot(&w, &pooled));
        let wsum: f64 = w.iter().sum();
        for n in 0..3 {
            assert!((s.scores[n] - p * (1.0 - p) * alpha[n] * wsum).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_region_scores_zero() {
        let mut r = rng::from_seed(2);
        let v = random(&mut r, 3, 4);
        let s = contribution_scores(&v, 0, |g, leaf| {
            let picked = g.select_columns(leaf, &[0, 1, 3])?;
            let pooled = g.mean_columns(picked)?;
            Ok(g.softmax(pooled)?)
        })
        .unwrap();
        assert_eq!(s.scores[2], 0.0);
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut r = rng::from_seed(3);
        let v = random(&mut r, 3, 4);
        let w = random(&mut r, 5, 3);
        let fwd = |g: &mut Graph, leaf: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            let h = g.matmul(wv, leaf)?;
            let pooled = g.mean_columns(h)?;
            Ok(g.sigmoid(pooled)?)
        };
        let s = contribution_scores(&v, 0, fwd).unwrap();
        // gradient of the column-summed objective: replicate per coordinate
        let mut g = Graph::new();
        let leaf = g.param(v.clone());
        let p = fwd(&mut g, leaf).unwrap();
        let total = g.sum(p).unwrap();
        let grad = g.backward(total).unwrap().get(leaf);
        let report = finite_diff_check(
            |params| {
                let mut g = Graph::new();
                let leaf = g.param(params[0].clone());
                let p = fwd(&mut g, leaf).map_err(|e| TensorError::Contract(e.to_string()))?;
                Ok(FdProbe::from(g.value(p).sum()))
            },
            &[v.clone()],
            &[grad.clone()],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4);
        assert_eq!(s.scores, column_sums(&grad));
    }

    #[test]
    fn similarity_properties() {
        let mut r = rng::from_seed(4);
        let joints: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.sample(StandardNormal)).collect()).collect();
        let m = instance_similarity(&joints).unwrap();
        for i in 0..4 {
            assert_eq!(m[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(m[i][j], m[j][i]);
                assert!((-1.0..=1.0).contains(&m[i][j]));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let direct = dot(&joints[i], &joints[j]) / (dot(&joints[i], &joints[i]) * dot(&joints[j], &joints[j])).sqrt();
                assert!((m[i][j] - direct).abs() < 1e-12);
            }
        }
        let dup = vec![joints[0].clone(), joints[1].clone(), joints[0].clone()];
        assert!((instance_similarity(&dup).unwrap()[0][2] - 1.0).abs() < 1e-12);
        let bad = vec![joints[0].clone(), vec![0.0; 5]];
        assert!(matches!(instance_similarity(&bad), Err(Error::Instance { instance: 1, .. })));
    }

    #[test]
    fn joint_vector_is_pooled_times_question() {
        let v = Tensor::matrix(&[vec![1.0, 3.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(joint_vector(&v, &[2.0, 5.0]).unwrap(), vec![4.0, 0.0]);
        assert!(joint_vector(&v, &[1.0]).is_err());
    }

    #[test]
    fn substitute_cases() {
        let mut r = rng::from_seed(5);
        let a = random(&mut r, 2, 3);
        let b = random(&mut r, 2, 3);
        let sim = vec![vec![1.0, 0.2], vec![0.2, 1.0]];
        for _ in 0..20 {
            let s = sample_substitute(&[&a, &b], 0, &sim, 2, &mut r).unwrap();
            assert_eq!(s.donor, 1);
        }
        let mut cols = sample_substitute(&[&a, &b], 0, &sim, 3, &mut r).unwrap().columns;
        cols.sort();
        assert_eq!(cols, vec![0, 1, 2]);
        assert!(matches!(sample_substitute(&[&a], 0, &[vec![1.0]], 1, &mut r), Err(Error::InsufficientBatch(_))));
    }

    #[test]
    fn donor_frequencies_are_uniform_over_top_three() {
        let mut r = rng::from_seed(6);
        let feats: Vec<Tensor> = (0..6).map(|_| random(&mut r, 2, 3)).collect();
        let refs: Vec<&Tensor> = feats.iter().collect();
        let row = vec![1.0, 0.1, 0.9, 0.5, 0.7, -0.3];
        let mut sim = vec![vec![0.0; 6]; 6];
        sim[0] = row;
        let mut counts = [0usize; 6];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_substitute(&refs, 0, &sim, 1, &mut r).unwrap().donor] += 1;
        }
        assert_eq!(counts[0] + counts[1] + counts[5], 0);
        let expect = n as f64 / 3.0;
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for j in [2, 3, 4] {
            assert!((counts[j] as f64 - expect).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn hard_perturb_cases() {
        let mut r = rng::from_seed(7);
        let v = random(&mut r, 3, 2);
        assert_eq!(hard_perturb(&v, &[0], &[], 0).unwrap().0, v);
        let sub = vec![vec![9.0, 9.0, 9.0]];
        let (h, rep) = hard_perturb(&v, &[0], &sub, 1).unwrap();
        assert_eq!(rep, vec![0]);
        assert_eq!(h.column(0), sub[0]);
        assert_eq!(h.column(1), v.column(1));
        assert!(hard_perturb(&v, &[0], &[sub[0].clone(), sub[0].clone()], 2).is_err());
    }

    #[test]
    fn soft_perturb_cases() {
        let mut r = rng::from_seed(8);
        let v = random(&mut r, 2, 3);
        assert_eq!(soft_perturb(&v, &[0], &[3.0, 1.0, 2.0], 2, 2).unwrap().0, v);
        let (s, z) = soft_perturb(&v, &[0], &[3.0, 1.0, 2.0], 3, 1).unwrap();
        assert_eq!(z, vec![1, 2]);
        assert_eq!(s.column(0), v.column(0));
        assert_eq!(s.column(1), vec![0.0, 0.0]);
        assert!(soft_perturb(&v, &[0], &[3.0, 1.0, 2.0], 4, 1).is_err());
        assert!(soft_perturb(&v, &[0], &[3.0, 1.0, 2.0], 1, 2).is_err());
        let (_, z) = soft_perturb(&v, &[2], &[0.5, 0.1, 2.0], 2, 1).unwrap();
        assert_eq!(z, vec![1]);
    }

    #[test]
    fn k_schedule_cases() {
        assert_eq!(k_schedule(12, 12, 3).unwrap(), 1);
        assert_eq!(k_schedule(16, 12, 3).unwrap(), 3);
        assert_eq!(k_schedule(10_000, 12, 3).unwrap(), 3);
        assert!(matches!(k_schedule(11, 12, 3), Err(Error::Phase(_))));
    }
}
