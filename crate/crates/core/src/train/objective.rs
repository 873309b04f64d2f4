//! One batch's training objective as a graph, shared by the trainer, the
//! gradient checker and the group-discipline checks.

use super::{region_scores, Loss, LossComponents, TrainConfig};
use crate::discriminators::{build_triplet, class_term, degenerate_element, negative_candidates, relation_term};
use crate::error::Result;
use crate::model::{classify, mean_of, represent, vqa_term, Bound, Model, ParamId};
use crate::perturb::{instance_similarity, joint_vector, k_schedule, perturb_instance, PerturbSettings, PerturbedPair};
use crate::rng::{self, purpose};
use crate::synth::TrainingInstance;
use crate::tensor::{Graph, Tensor, Var};
use crate::vib::{draw_noise, encode_latent, inference_repr, kl_term, reparameterize};

/// Inputs that stay fixed while the parameters move.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInput<'a> {
    pub views: &'a [TrainingInstance<'a>],
    /// Perturbed pairs, one per view; required by either discriminator.
    pub pairs: Option<&'a [PerturbedPair]>,
    /// Clean-branch probabilities to use instead of the graph's own values.
    pub p_orig: Option<&'a [Vec<f64>]>,
    pub use_class: bool,
    pub use_relation: bool,
    /// Indexes the noise and negative-sampling streams.
    pub step: u64,
}

/// Loss handles of one built objective. Components are unweighted means.
#[derive(Debug, Clone)]
pub struct Objective {
    pub vqa: Var,
    pub vib: Option<Var>,
    pub class: Option<Var>,
    pub relation: Option<Var>,
    /// `ℒ_vqa` plus every present component times its weight.
    pub total: Var,
    pub components: LossComponents,
    /// Clean-branch probabilities per view.
    pub p_orig: Vec<Vec<f64>>,
    /// Triplets dropped for a degenerate element.
    pub skipped: usize,
}

impl Objective {
    pub fn component(&self, loss: Loss) -> Option<Var> {
        match loss {
            Loss::Vqa => Some(self.vqa),
            Loss::Vib => self.vib,
            Loss::Class => self.class,
            Loss::Relation => self.relation,
        }
    }

    /// Losses that contribute to the total.
    pub fn active(&self) -> Vec<Loss> {
        Loss::ALL.into_iter().filter(|&l| self.component(l).is_some()).collect()
    }
}

struct Latent {
    z: Var,
    mu: Var,
    sigma: Option<Var>,
}

/// Sampled latent, or the mean when the bottleneck penalty is off.
fn latent(g: &mut Graph, b: &Bound, cfg: &TrainConfig, d_z: usize, m: Var, key: [u64; 3]) -> Result<Latent> {
    if cfg.lambda_vib > 0.0 {
        let (mu, sigma) = encode_latent(g, b, m)?;
        let mut r = rng::derive(cfg.seed, &[purpose::NOISE, key[0], key[1], key[2]]);
        let eps = draw_noise(&mut r, d_z);
        let z = reparameterize(g, mu, sigma, &eps)?;
        Ok(Latent { z, mu, sigma: Some(sigma) })
    } else {
        let mu = inference_repr(g, b, m)?;
        Ok(Latent { z: mu, mu, sigma: None })
    }
}

/// Hard and soft perturbations of a batch scored with the current model.
pub fn perturb_batch(
    model: &Model,
    cfg: &TrainConfig,
    views: &[TrainingInstance<'_>],
    epoch: usize,
    step: u64,
) -> Result<Vec<PerturbedPair>> {
    let scores = region_scores(model, views, cfg.score_target, cfg.score_reduction)?;
    let joints = views
        .iter()
        .zip(&scores)
        .map(|(v, s)| joint_vector(v.features, &s.question))
        .collect::<Result<Vec<_>>>()?;
    let sim = instance_similarity(&joints)?;
    let n = views.first().map_or(0, |v| v.features.cols());
    let settings = PerturbSettings {
        tau: cfg.tau,
        p: cfg.attended(n),
        k: k_schedule(epoch, cfg.t0, cfg.k_max)?.min(cfg.tau),
    };
    let feats: Vec<&Tensor> = views.iter().map(|v| v.features).collect();
    let mut r = rng::derive(cfg.seed, &[purpose::PERTURB, step]);
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_instance(&feats, i, &s.score, &sim, settings, &mut r))
        .collect()
}

/// Builds the weighted objective for `input` on parameters bound in `b`.
pub fn build_objective(
    g: &mut Graph,
    b: &Bound,
    model: &Model,
    cfg: &TrainConfig,
    input: ObjectiveInput<'_>,
) -> Result<Objective> {
    let d_z = model.dims.d_z;
    let use_c = input.use_class && cfg.lambda_c > 0.0 && input.pairs.is_some();
    let use_b = input.use_relation && cfg.lambda_b > 0.0 && input.pairs.is_some();
    let mut vqa_terms = Vec::with_capacity(input.views.len());
    let mut kl_terms = Vec::new();
    let mut class_terms = Vec::new();
    let mut relation_terms = Vec::new();
    let mut all_p_orig = Vec::with_capacity(input.views.len());
    let mut skipped = 0;
    let mut negative_rng = rng::derive(cfg.seed, &[purpose::PERTURB, input.step, 1]);

    for (i, v) in input.views.iter().enumerate() {
        let raw = g.constant(v.features.clone());
        let m = represent(g, b, raw, v.tokens)?;
        let lat = latent(g, b, cfg, d_z, m, [input.step, i as u64, 0])?;
        let probs = classify(g, b, lat.z)?;
        vqa_terms.push(vqa_term(g, probs, v.scores)?);
        if let Some(sigma) = lat.sigma {
            kl_terms.push(kl_term(g, lat.mu, sigma)?);
        }
        let p_orig = match input.p_orig {
            Some(p) => p[i].clone(),
            None => g.value(probs).data().to_vec(),
        };
        if let (Some(pairs), true) = (input.pairs, use_c || use_b) {
            let pair = &pairs[i];
            let hard_raw = g.constant(pair.hard.clone());
            let hard_m = represent(g, b, hard_raw, v.tokens)?;
            let hard = latent(g, b, cfg, d_z, hard_m, [input.step, i as u64, 1])?;
            if use_c {
                let p_hard = classify(g, b, hard.z)?;
                class_terms.push(class_term(g, &p_orig, p_hard)?);
            }
            if use_b {
                let soft_raw = g.constant(pair.soft.clone());
                let soft_m = represent(g, b, soft_raw, v.tokens)?;
                let soft = latent(g, b, cfg, d_z, soft_m, [input.step, i as u64, 2])?;
                let gt = v.ground_truth();
                let negatives = negative_candidates(&p_orig, &gt, cfg.n_prime)?;
                let t = build_triplet(
                    g,
                    b,
                    model.dims.answer_token_offset,
                    lat.z,
                    soft.z,
                    hard.z,
                    &gt,
                    &negatives,
                    &mut negative_rng,
                )?;
                if let Some((name, norm)) = degenerate_element(g, &t) {
                    log::warn!("step {}: instance {i}: {name} has norm {norm:e}; relation term skipped", input.step);
                    skipped += 1;
                } else {
                    relation_terms.push(relation_term(g, &t)?);
                }
            }
        }
        all_p_orig.push(p_orig);
    }

    let vqa = mean_of(g, &vqa_terms)?;
    let mut components = LossComponents {
        vqa: g.value(vqa).item(),
        ..LossComponents::default()
    };
    let mut total = vqa;
    let mut parts = [None, None, None];
    let weighted = [
        (cfg.lambda_vib, &kl_terms),
        (cfg.lambda_c, &class_terms),
        (cfg.lambda_b, &relation_terms),
    ];
    for (slot, (lambda, terms)) in parts.iter_mut().zip(weighted) {
        if terms.is_empty() || lambda == 0.0 {
            continue;
        }
        let mean = mean_of(g, terms)?;
        let scaled = g.scale(mean, lambda)?;
        total = g.add(total, scaled)?;
        *slot = Some(mean);
    }
    let [vib, class, relation] = parts;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    components.vib = value(vib);
    components.class = value(class);
    components.relation = value(relation);
    Ok(Objective {
        vqa,
        vib,
        class,
        relation,
        total,
        components,
        p_orig: all_p_orig,
        skipped,
    })
}

/// Gradient of `loss` with respect to every parameter, in [`ParamId::ALL`] order.
pub fn parameter_gradients(g: &Graph, b: &Bound, loss: Var) -> Result<Vec<Tensor>> {
    let grads = g.backward(loss)?;
    Ok(ParamId::ALL.iter().map(|&p| grads.get(b.var(p))).collect())
}
