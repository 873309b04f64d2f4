//! Loss weighting, the loss-to-parameter-group map and Adam with group masking.

use crate::error::{Error, Result};
use crate::model::{Group, Model, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    Vqa,
    Vib,
    Relation,
    Class,
}

impl Loss {
    pub const ALL: [Loss; 4] = [Loss::Vqa, Loss::Vib, Loss::Relation, Loss::Class];
}

/// Component values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub vqa: f64,
    pub vib: f64,
    pub relation: f64,
    pub class: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub vib: f64,
    pub relation: f64,
    pub class: f64,
}

/// `ℒ_vqa + λ_vib ℒ_vib + λ_b ℒ_b + λ_c ℒ_c`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.vqa + w.vib * c.vib + w.relation * c.relation + w.class * c.class
}

/// Parameter partition and the groups each loss may update.
#[derive(Debug, Clone)]
pub struct ParamGroups {
    members: Vec<(Group, Vec<ParamId>)>,
}

pub fn param_groups(model: &Model) -> Result<ParamGroups> {
    let mut members: Vec<(Group, Vec<ParamId>)> = Group::ALL.iter().map(|&g| (g, Vec::new())).collect();
    for (p, t) in ParamId::ALL.iter().zip(model.params()) {
        if t.shape() != model.dims.shape(*p).as_slice() {
            return Err(Error::Config(format!("parameter {} is not constructed", p.name())));
        }
        let slot = members
            .iter_mut()
            .find(|(g, _)| *g == p.group())
            .ok_or_else(|| Error::Config(format!("parameter {} has no group", p.name())))?;
        slot.1.push(*p);
    }
    Ok(ParamGroups { members })
}

impl ParamGroups {
    pub fn groups_for(loss: Loss) -> &'static [Group] {
        match loss {
            Loss::Vqa | Loss::Class => &[Group::Base, Group::Vib, Group::Classifier],
            Loss::Vib => &[Group::Base, Group::Vib],
            Loss::Relation => &[Group::Base, Group::Vib, Group::AnswerMap],
        }
    }

    pub fn members(&self, group: Group) -> &[ParamId] {
        self.members
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, m)| m.as_slice())
            .unwrap_or(&[])
    }

    /// Union of the groups of `losses`, in [`Group::ALL`] order.
    pub fn active(losses: &[Loss]) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| losses.iter().any(|&l| Self::groups_for(l).contains(g)))
            .collect()
    }
}

/// Adam with per-parameter step counts, so a group that joins late gets
/// a fresh bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; model.params().len()],
        }
    }

    /// Updates every parameter whose group is in `active`; the rest stay bit-identical.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], active: &[Group], lr: f64) -> Result<()> {
        if grads.len() != ParamId::ALL.len() {
            return Err(Error::Update(format!(
                "{} gradients for {} parameters",
                grads.len(),
                ParamId::ALL.len()
            )));
        }
        for (p, g) in ParamId::ALL.iter().zip(grads) {
            if g.shape() != model.param(*p).shape() {
                return Err(Error::Update(format!(
                    "{}: gradient shape {:?}, parameter shape {:?}",
                    p.name(),
                    g.shape(),
                    model.param(*p).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Update(format!("{}: non-finite gradient", p.name())));
            }
        }
        for (p, g) in ParamId::ALL.iter().zip(grads) {
            if !active.contains(&p.group()) {
                continue;
            }
            let i = p.index();
            self.t[i] += 1;
            let c1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let c2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mk), vk) in model.param_mut(*p).data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gr;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gr * gr;
                *w -= lr * (*mk / c1) / ((*vk / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_count(&self, p: ParamId) -> u64 {
        self.t[p.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::rng;

    fn model() -> Model {
        let dims = ModelDims {
            d_v: 3,
            d_q: 3,
            d_h: 4,
            d_a: 2,
            d_m: 4,
            d_z: 2,
            vocab: 8,
            answers: 3,
            answer_token_offset: 5,
        };
        Model::init(dims, &mut rng::from_seed(1)).unwrap()
    }

    fn grads(m: &Model, value: f64) -> Vec<Tensor> {
        m.params().iter().map(|p| Tensor::new(p.shape().to_vec(), vec![value; p.len()]).unwrap()).collect()
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents { vqa: 1.0, vib: 2.0, relation: 0.1, class: -0.5 };
        let zero = LossWeights { vib: 0.0, relation: 0.0, class: 0.0 };
        assert_eq!(total_loss(&c, &zero), 1.0);
        let w = LossWeights { vib: 1e-3, relation: 2.0, class: 4.0 };
        assert!((total_loss(&c, &w) + 0.798).abs() < 1e-12);
        let doubled = LossComponents { relation: 0.2, ..c };
        assert!((total_loss(&doubled, &w) - total_loss(&c, &w) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn groups_partition_every_parameter() {
        let g = param_groups(&model()).unwrap();
        let mut all: Vec<ParamId> = Group::ALL.iter().flat_map(|&gr| g.members(gr).to_vec()).collect();
        all.sort();
        assert_eq!(all, ParamId::ALL.to_vec());
        let reach: Vec<Loss> = Loss::ALL
            .into_iter()
            .filter(|&l| ParamGroups::groups_for(l).contains(&Group::AnswerMap))
            .collect();
        assert_eq!(reach, vec![Loss::Relation]);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut m = model();
        let before = m.clone();
        let mut adam = Adam::new(&m, 0.9, 0.98, 1e-8);
        assert_eq!((adam.beta1, adam.beta2), (0.9, 0.98));
        let g = grads(&m, 1.0);
        adam.step(&mut m, &g, &[Group::Classifier], 0.1).unwrap();
        let w0 = before.param(ParamId::ClassifierBias).data()[0];
        let w1 = m.param(ParamId::ClassifierBias).data()[0];
        assert!((w1 - (w0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(m.param(ParamId::VisualWeight), before.param(ParamId::VisualWeight));
        assert_eq!(adam.step_count(ParamId::ClassifierBias), 1);
        assert_eq!(adam.step_count(ParamId::VisualWeight), 0);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut m = model();
        let before = m.clone();
        let mut adam = Adam::new(&m, 0.9, 0.98, 1e-8);
        let g = grads(&m, 0.0);
        adam.step(&mut m, &g, &Group::ALL, 0.1).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut m = model();
        let mut adam = Adam::new(&m, 0.9, 0.98, 1e-8);
        let mut g = grads(&m, 1.0);
        g[0] = Tensor::zeros(&[1]);
        assert!(matches!(adam.step(&mut m, &g, &Group::ALL, 0.1), Err(Error::Update(_))));
        assert!(adam.step(&mut m, &g[1..], &Group::ALL, 0.1).is_err());
    }
}
