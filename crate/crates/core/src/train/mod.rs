//! Collaborative training: pretraining with the VQA and bottleneck losses,
//! then perturbation-aware finetuning that adds the class-aware and
//! relation-aware discriminators, followed by evaluation and reporting.

mod config;
mod eval;
mod objective;
mod optim;
mod report;

pub use config::{LrSchedule, PhaseOrder, ScoreReduction, ScoreTarget, TrainConfig};
pub use eval::{
    accuracy, baseline_predict, evaluate, inference_probs, predict, score_answer, AccuracyReport, BaselineKind,
    EvalMode, Prediction,
};
pub use objective::{build_objective, parameter_gradients, perturb_batch, Objective, ObjectiveInput};
pub use optim::{param_groups, total_loss, Adam, Loss, LossComponents, LossWeights, ParamGroups};
pub use report::{export_report, read_metrics, write_curves, write_embeddings, write_metrics, write_summary};

use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{classifier_logits, encode_question, represent, Model, ModelDims};
use crate::perturb::{k_schedule, ContributionScore};
use crate::rng::{self, purpose};
use crate::synth::{Dataset, Split, TrainingInstance};
use crate::tensor::{Graph, Tensor, Var};
use crate::vib::inference_repr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    FinetuneC,
    FinetuneB,
    FinetuneFull,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneC => "finetune-c",
            Phase::FinetuneB => "finetune-b",
            Phase::FinetuneFull => "finetune-full",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Phase::Pretrain, Phase::FinetuneC, Phase::FinetuneB, Phase::FinetuneFull]
            .into_iter()
            .find(|p| p.tag() == tag)
    }

    pub fn uses_class(self) -> bool {
        matches!(self, Phase::FinetuneC | Phase::FinetuneFull)
    }

    pub fn uses_relation(self) -> bool {
        matches!(self, Phase::FinetuneB | Phase::FinetuneFull)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl TrainConfig {
    /// Phase of a 1-based epoch.
    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch <= self.t0 {
            Phase::Pretrain
        } else if epoch <= self.t1 {
            match self.order {
                PhaseOrder::Algorithm1 => Phase::FinetuneC,
                PhaseOrder::Prose => Phase::FinetuneB,
            }
        } else {
            Phase::FinetuneFull
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            vib: self.lambda_vib,
            relation: self.lambda_b,
            class: self.lambda_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossComponents,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_per_type: Vec<f64>,
    pub lr: f64,
    /// Substitution count; 0 outside perturbation phases.
    pub k: usize,
}

/// Model dimensions implied by a dataset and config.
pub fn model_dims(cfg: &TrainConfig, ds: &Dataset) -> ModelDims {
    ModelDims {
        d_v: ds.config.feature_dim,
        d_q: ds.config.question_dim,
        d_h: cfg.d_h,
        d_a: cfg.d_a,
        d_m: cfg.d_m,
        d_z: cfg.d_z,
        vocab: ds.config.token_vocab(),
        answers: ds.config.num_answers(),
        answer_token_offset: ds.config.answer_token_offset(),
    }
}

/// Dataset/config compatibility checks run before the first epoch.
pub fn check_compatible(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    cfg.validate()?;
    ds.config.validate()?;
    let n = ds.config.regions_per_image;
    let perturbs = cfg.t2 > cfg.t0 && (cfg.lambda_c > 0.0 || cfg.lambda_b > 0.0);
    if perturbs {
        if ds.config.feature_dim != ds.config.question_dim {
            return Err(Error::Config(format!(
                "batch similarity multiplies pooled regions ({}) with the question vector ({}); dimensions must agree",
                ds.config.feature_dim, ds.config.question_dim
            )));
        }
        if cfg.tau > n {
            return Err(Error::Config(format!("tau = {} exceeds {n} regions", cfg.tau)));
        }
        let p = cfg.attended(n);
        if p > n - cfg.tau + 1 {
            return Err(Error::Config(format!(
                "p = {p} leaves fewer than p - 1 non-salient regions with tau = {}",
                cfg.tau
            )));
        }
        if cfg.lambda_b > 0.0 && ds.config.num_answers() <= cfg.n_prime {
            return Err(Error::Config(format!(
                "n_prime = {} needs more than that many answers, dataset has {}",
                cfg.n_prime,
                ds.config.num_answers()
            )));
        }
    }
    if ds.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split ({}) smaller than batch size {}",
            ds.train.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

/// Per-region scores and the question vector of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub score: ContributionScore,
    pub question: Vec<f64>,
}

/// Contribution scores for a batch from one frozen-parameter pass on the
/// inference path. Instances are independent, so one backward over the
/// summed objective yields each instance's gradient.
pub fn region_scores(
    model: &Model,
    views: &[TrainingInstance<'_>],
    target: ScoreTarget,
    reduction: ScoreReduction,
) -> Result<Vec<RegionScores>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let mut leaves = Vec::with_capacity(views.len());
    let mut questions = Vec::with_capacity(views.len());
    let mut objective: Option<Var> = None;
    for v in views {
        let leaf = g.param(v.features.clone());
        let q = encode_question(&mut g, &b, v.tokens)?;
        questions.push(g.value(q).data().to_vec());
        let m = represent(&mut g, &b, leaf, v.tokens)?;
        let mu = inference_repr(&mut g, &b, m)?;
        let logits = classifier_logits(&mut g, &b, mu)?;
        let probs = match target {
            ScoreTarget::Softmax => g.softmax(logits)?,
            ScoreTarget::Sigmoid => g.sigmoid(logits)?,
            ScoreTarget::Predicted => {
                let p = g.softmax(logits)?;
                let mut mask = vec![0.0; g.value(p).len()];
                mask[crate::model::argmax(g.value(p).data())] = 1.0;
                let m = g.constant(Tensor::vector(mask));
                g.hadamard(p, m)?
            }
        };
        let s = g.sum(probs)?;
        objective = Some(match objective {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
        leaves.push(leaf);
    }
    let Some(objective) = objective else {
        return Ok(Vec::new());
    };
    let grads = g.backward(objective)?;
    let mut out = Vec::with_capacity(views.len());
    for (i, ((leaf, v), question)) in leaves.into_iter().zip(views).zip(questions).enumerate() {
        let grad = grads.get(leaf);
        let (rows, cols) = (grad.rows(), grad.cols());
        let mut scores = vec![0.0; cols];
        for r in 0..rows {
            for (c, s) in scores.iter_mut().enumerate() {
                let gv = grad.data()[r * cols + c];
                *s += match reduction {
                    ScoreReduction::Signed => gv,
                    ScoreReduction::Abs => gv.abs(),
                    ScoreReduction::GradInput => gv * v.features.data()[r * cols + c],
                };
            }
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Instance {
                instance: i,
                source: crate::tensor::TensorError::NonFinite { op: "contribution_scores" },
            });
        }
        out.push(RegionScores {
            score: ContributionScore { instance: i, scores },
            question,
        });
    }
    Ok(out)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    ds: &'a Dataset,
    model: Model,
    adam: Adam,
    step: u64,
}

impl Trainer<'_> {
    fn train_step(&mut self, batch: &[usize], epoch: usize, phase: Phase, lr: f64) -> Result<LossComponents> {
        let cfg = self.cfg;
        let views: Vec<TrainingInstance<'_>> = batch.iter().map(|&i| self.ds.train[i].training_view()).collect();
        let use_class = phase.uses_class() && cfg.lambda_c > 0.0;
        let use_relation = phase.uses_relation() && cfg.lambda_b > 0.0;
        let pairs = if use_class || use_relation {
            Some(perturb_batch(&self.model, cfg, &views, epoch, self.step)?)
        } else {
            None
        };

        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let input = ObjectiveInput {
            views: &views,
            pairs: pairs.as_deref(),
            p_orig: None,
            use_class,
            use_relation,
            step: self.step,
        };
        let obj = build_objective(&mut g, &b, &self.model, cfg, input)?;
        let grads = parameter_gradients(&g, &b, obj.total)?;
        let groups = ParamGroups::active(&obj.active());
        self.adam.step(&mut self.model, &grads, &groups, lr)?;
        self.step += 1;
        Ok(obj.components)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Runs all phases. `on_epoch` sees each epoch's metrics as they finish.
pub fn train_with(cfg: &TrainConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    check_compatible(cfg, ds)?;
    let dims = model_dims(cfg, ds);
    let model = Model::init(dims, &mut rng::derive(cfg.seed, &[purpose::INIT]))?;
    let adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut t = Trainer {
        cfg,
        ds,
        model,
        adam,
        step: 0,
    };
    let mut history = Vec::with_capacity(cfg.t2);
    for epoch in 1..=cfg.t2 {
        let phase = cfg.phase(epoch);
        let lr = cfg.lr.at(epoch);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let s = t.train_step(batch, epoch, phase, lr)?;
            sums.vqa += s.vqa;
            sums.vib += s.vib;
            sums.class += s.class;
            sums.relation += s.relation;
            total += total_loss(&s, &cfg.weights());
            steps += 1;
        }
        let n = steps as f64;
        let train = evaluate(&t.model, ds, Split::Train, EvalMode::VqaAccuracy)?;
        let test = evaluate(&t.model, ds, Split::Test, EvalMode::VqaAccuracy)?;
        let k = if phase == Phase::Pretrain {
            0
        } else {
            k_schedule(epoch, cfg.t0, cfg.k_max)?.min(cfg.tau)
        };
        let m = EpochMetrics {
            epoch,
            phase,
            losses: LossComponents {
                vqa: sums.vqa / n,
                vib: sums.vib / n,
                relation: sums.relation / n,
                class: sums.class / n,
            },
            total: total / n,
            train_acc: train.overall,
            test_acc: test.overall,
            test_per_type: test.per_type,
            lr,
            k,
        };
        log::info!(
            "epoch {epoch:>2} {:<13} vqa {:.4} vib {:.3} b {:.4} c {:.4} train {:.4} test {:.4}",
            phase.tag(),
            m.losses.vqa,
            m.losses.vib,
            m.losses.relation,
            m.losses.class,
            m.train_acc,
            m.test_acc
        );
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { model: t.model, history })
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}
