//! Finite-difference gradient suite over the tensor ops, the bottleneck and
//! every training loss on a seeded two-instance batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims};
use crate::rng::{self, Rng};
use crate::synth::{generate, Dataset, SynthConfig, TrainingInstance};
use crate::tensor::{finite_diff_check, FdProbe, GradCheckReport, Graph, Tensor, Var};
use crate::train::{build_objective, model_dims, parameter_gradients, perturb_batch, Loss, ObjectiveInput, TrainConfig};
use crate::vib::{kl_term, reparameterize, SIGMA_FLOOR};

/// Largest relative error the suite accepts.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Tensor,
    Vib,
    Losses,
}

impl FromStr for SuiteModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "tensor" => Ok(Self::Tensor),
            "vib" => Ok(Self::Vib),
            "losses" => Ok(Self::Losses),
            _ => Err(format!("unknown module {s:?}; expected all, tensor, vib or losses")),
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Tensor => "tensor",
            Self::Vib => "vib",
            Self::Losses => "losses",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.checked > 0
    }
}

type OpFn = fn(&mut Graph, &[Var]) -> crate::tensor::Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Keeps inputs positive and away from the log clamp.
    positive: bool,
    f: OpFn,
}

const OPS: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], positive: false, f: |g, v| g.matmul(v[0], v[1]) },
    OpCase { name: "add", shapes: &[&[3, 2], &[3, 2]], positive: false, f: |g, v| g.add(v[0], v[1]) },
    OpCase { name: "sub", shapes: &[&[3, 2], &[3, 2]], positive: false, f: |g, v| g.sub(v[0], v[1]) },
    OpCase { name: "hadamard", shapes: &[&[3, 2], &[3, 2]], positive: false, f: |g, v| g.hadamard(v[0], v[1]) },
    OpCase { name: "add_column", shapes: &[&[3, 4], &[3]], positive: false, f: |g, v| g.add_column(v[0], v[1]) },
    OpCase { name: "relu", shapes: &[&[3, 4]], positive: false, f: |g, v| g.relu(v[0]) },
    OpCase { name: "sigmoid", shapes: &[&[5]], positive: false, f: |g, v| g.sigmoid(v[0]) },
    OpCase { name: "exp", shapes: &[&[5]], positive: false, f: |g, v| g.exp(v[0]) },
    OpCase { name: "safe_log", shapes: &[&[5]], positive: true, f: |g, v| g.safe_log(v[0]) },
    OpCase { name: "softplus", shapes: &[&[5]], positive: false, f: |g, v| g.softplus(v[0]) },
    OpCase { name: "scale", shapes: &[&[5]], positive: false, f: |g, v| g.scale(v[0], -1.7) },
    OpCase { name: "affine", shapes: &[&[5]], positive: false, f: |g, v| g.affine(v[0], 0.5, 2.0) },
    OpCase { name: "softmax", shapes: &[&[6]], positive: false, f: |g, v| g.softmax(v[0]) },
    OpCase { name: "cosine", shapes: &[&[4], &[4]], positive: false, f: |g, v| g.cosine(v[0], v[1]) },
    OpCase { name: "mean_columns", shapes: &[&[3, 4]], positive: false, f: |g, v| g.mean_columns(v[0]) },
    OpCase { name: "select_columns", shapes: &[&[3, 4]], positive: false, f: |g, v| g.select_columns(v[0], &[2, 0, 2]) },
    OpCase { name: "sum", shapes: &[&[3, 4]], positive: false, f: |g, v| g.sum(v[0]) },
];

fn random(r: &mut Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product::<usize>().max(1);
    let data = (0..n)
        .map(|_| {
            let x: f64 = r.sample(StandardNormal);
            if positive { x.abs() + 0.5 } else { x }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `Σ w ⊙ f(inputs)` with fixed random weights, so every output coordinate matters.
fn weighted_output(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.hadamard(out, w)?;
    Ok(g.sum(prod)?)
}

/// Checks every tensor op on one seeded draw of inputs.
pub fn check_tensor_ops(seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(OPS.len());
    for (k, case) in OPS.iter().enumerate() {
        let mut r = rng::derive(seed, &[k as u64]);
        let inputs: Vec<Tensor> = case.shapes.iter().map(|s| random(&mut r, s, case.positive)).collect();
        let eval = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let y = (case.f)(&mut g, &vars)?;
            let weights = random(&mut rng::derive(seed, &[k as u64, 1]), g.value(y).shape(), false);
            let loss = weighted_output(&mut g, y, &weights)?;
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), vars.iter().map(|&v| grads.get(v)).collect(), g.relu_preactivations()))
        };
        let (_, analytic, _) = eval(&inputs)?;
        let report = finite_diff_check(
            |p| {
                eval(p).map_err(to_tensor_error).map(|(value, _, relu_preacts)| FdProbe { value, relu_preacts })
            },
            &inputs,
            &analytic,
            eps,
        )?;
        out.push(SuiteEntry {
            name: format!("tensor.{}", case.name),
            report,
        });
    }
    Ok(out)
}

fn to_tensor_error(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

/// Reparameterized sample plus KL against a standard normal, through the
/// softplus scale, with the noise held fixed.
pub fn check_vib(seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    let mut r = rng::derive(seed, &[100]);
    let d = 5;
    let params = vec![random(&mut r, &[d], false), random(&mut r, &[d], false)];
    let noise: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let weights = random(&mut r, &[d], false);
    let mut out = Vec::new();
    for (name, with_kl, with_sample) in [("vib.kl", true, false), ("vib.sample", false, true), ("vib.both", true, true)] {
        let eval = |p: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut g = Graph::new();
            let mu = g.param(p[0].clone());
            let pre = g.param(p[1].clone());
            let soft = g.softplus(pre)?;
            let sigma = g.affine(soft, 1.0, SIGMA_FLOOR)?;
            let mut terms = Vec::new();
            if with_kl {
                terms.push(kl_term(&mut g, mu, sigma)?);
            }
            if with_sample {
                let z = reparameterize(&mut g, mu, sigma, &noise)?;
                terms.push(weighted_output(&mut g, z, &weights)?);
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), vec![grads.get(mu), grads.get(pre)]))
        };
        let (_, analytic) = eval(&params)?;
        let report = finite_diff_check(
            |p| eval(p).map(|(v, _)| FdProbe::from(v)).map_err(to_tensor_error),
            &params,
            &analytic,
            eps,
        )?;
        out.push(SuiteEntry { name: name.into(), report });
    }
    Ok(out)
}

/// Small dataset and config used by the loss checks.
pub fn loss_fixture(seed: u64) -> Result<(Dataset, TrainConfig)> {
    let ds = generate(&SynthConfig {
        num_region_classes: 12,
        num_question_types: 2,
        answers_per_type: 4,
        regions_per_image: 4,
        feature_dim: 5,
        question_dim: 5,
        question_len: 3,
        filler_tokens: 3,
        train_size: 8,
        test_size: 4,
        seed,
        ..SynthConfig::default()
    })?;
    let cfg = TrainConfig {
        t0: 1,
        t1: 2,
        t2: 3,
        batch_size: 2,
        n_prime: 3,
        tau: 2,
        k_max: 2,
        d_h: 5,
        d_a: 3,
        d_m: 5,
        d_z: 4,
        seed,
        ..TrainConfig::default()
    };
    Ok((ds, cfg))
}

/// The loss names checked by [`check_losses`], in order.
pub const LOSS_NAMES: [&str; 5] = ["loss.vqa", "loss.vib", "loss.b", "loss.c", "loss.total"];

/// Every training loss on a two-instance batch, with respect to all model
/// parameters. The bottleneck noise, the negative answer, the perturbed
/// pairs and the clean-branch probabilities are held fixed.
pub fn check_losses(seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    let (ds, cfg) = loss_fixture(seed)?;
    let dims: ModelDims = model_dims(&cfg, &ds);
    let model = Model::init(dims, &mut rng::derive(seed, &[200]))?;
    let views: Vec<TrainingInstance<'_>> = ds.train[..2].iter().map(|r| r.training_view()).collect();
    let pairs = perturb_batch(&model, &cfg, &views, cfg.t1 + 1, 0)?;

    let p_orig = {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let input = ObjectiveInput {
            views: &views,
            pairs: Some(&pairs),
            p_orig: None,
            use_class: true,
            use_relation: true,
            step: 0,
        };
        build_objective(&mut g, &b, &model, &cfg, input)?.p_orig
    };

    let targets: [Option<Loss>; 5] = [Some(Loss::Vqa), Some(Loss::Vib), Some(Loss::Relation), Some(Loss::Class), None];
    let mut out = Vec::new();
    for (name, target) in LOSS_NAMES.iter().zip(targets) {
        let eval = |params: &[Tensor], want_grads: bool| -> Result<(FdProbe, Vec<Tensor>)> {
            let m = Model::from_params(dims, params.to_vec())?;
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let input = ObjectiveInput {
                views: &views,
                pairs: Some(&pairs),
                p_orig: Some(&p_orig),
                use_class: true,
                use_relation: true,
                step: 0,
            };
            let obj = build_objective(&mut g, &b, &m, &cfg, input)?;
            let var = match target {
                Some(l) => obj
                    .component(l)
                    .ok_or_else(|| Error::Config(format!("{name} is absent from the objective")))?,
                None => obj.total,
            };
            let grads = if want_grads { parameter_gradients(&g, &b, var)? } else { Vec::new() };
            let probe = FdProbe {
                value: g.value(var).item(),
                relu_preacts: g.relu_preactivations(),
            };
            Ok((probe, grads))
        };
        let (_, analytic) = eval(model.params(), true)?;
        let report = finite_diff_check(
            |p| eval(p, false).map(|(probe, _)| probe).map_err(to_tensor_error),
            model.params(),
            &analytic,
            eps,
        )?;
        out.push(SuiteEntry {
            name: (*name).into(),
            report,
        });
    }
    Ok(out)
}

/// Runs the selected part of the suite.
pub fn run_suite(module: SuiteModule, seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    if matches!(module, SuiteModule::All | SuiteModule::Tensor) {
        out.extend(check_tensor_ops(seed, eps)?);
    }
    if matches!(module, SuiteModule::All | SuiteModule::Vib) {
        out.extend(check_vib(seed, eps)?);
    }
    if matches!(module, SuiteModule::All | SuiteModule::Losses) {
        out.extend(check_losses(seed, eps)?);
    }
    Ok(out)
}
