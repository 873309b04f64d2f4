//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! terminal. `VPL_ACCEPTANCE=1,4,9` restricts the run to a subset.

use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;
use vpl_core::discriminators::{class_term, relation_term, Triplet};
use vpl_core::gradsuite::{run_suite, SuiteModule, TOLERANCE};
use vpl_core::model::{Group, Model, ParamId};
use vpl_core::perturb::{instance_similarity, perturb_instance, salient_set, ContributionScore, PerturbSettings};
use vpl_core::rng;
use vpl_core::synth::{generate, read_dataset, write_dataset, Dataset, Split, SynthConfig, TrainingInstance};
use vpl_core::tensor::{softmax, Graph, Tensor};
use vpl_core::train::{
    build_objective, evaluate, export_report, model_dims, parameter_gradients, perturb_batch, predict, train, Adam,
    EvalMode, Loss, ObjectiveInput, ParamGroups, TrainConfig,
};
use vpl_core::vib::{kl_divergence, kl_term, noise_draws};

/// Seed-0 gap (shifted-test accuracy points, full method minus baseline)
/// measured once with the desk config; see `docs/calibration.md`.
const CALIBRATED_GAP_POINTS: f64 = 6.45;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.txt");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::parse(DESK_CONFIG).expect("desk config parses");
    cfg.seed = seed;
    cfg
}

fn desk_data(seed: u64) -> Dataset {
    generate(&SynthConfig { seed, ..SynthConfig::default() }).expect("default dataset generates")
}

fn baseline_of(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lambda_c: 0.0,
        lambda_b: 0.0,
        lambda_vib: 0.0,
        ..cfg.clone()
    }
}

/// Final (in-distribution, shifted-test) accuracy of one run.
fn final_accuracy(cfg: &TrainConfig, ds: &Dataset) -> (f64, f64) {
    let out = train(cfg, ds).expect("training succeeds");
    let last = out.history.last().expect("at least one epoch");
    (last.train_acc, last.test_acc)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(SuiteModule::All, 0, 1e-5).expect("suite runs");
    let elapsed = start.elapsed();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let losses: Vec<String> = entries
        .iter()
        .filter(|e| e.name.starts_with("loss."))
        .map(|e| format!("{} {:.1e}", &e.name[5..], e.report.max_rel_error))
        .collect();
    let pass = entries.iter().all(|e| e.passed()) && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "max rel error {worst:.2e} (< {TOLERANCE:e}) over {} checks [{}], {:.1}s",
            entries.len(),
            losses.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// Independent Monte Carlo estimate of `E_q[log q(z) − log p(z)]` with its standard error.
fn kl_monte_carlo(mu: &[f64], sigma: &[f64], samples: usize, r: &mut rng::Rng) -> (f64, f64) {
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut x = 0.0;
        for (m, s) in mu.iter().zip(sigma) {
            let e: f64 = r.sample(StandardNormal);
            let z = m + s * e;
            x += -s.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        sum += x;
        sq += x * x;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn kl_oracle() -> Outcome {
    let mut r = rng::from_seed(2);
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..3).map(|_| r.random_range(0.3..2.0)).collect();
        let mut g = Graph::new();
        let m = g.constant(Tensor::vector(mu.clone()));
        let s = g.constant(Tensor::vector(sigma.clone()));
        let kl = kl_term(&mut g, m, s).expect("kl builds");
        let closed = g.value(kl).item();
        assert!((closed - kl_divergence(&mu, &sigma)).abs() < 1e-12);
        let (mc, se) = kl_monte_carlo(&mu, &sigma, 1_000_000, &mut r);
        worst_z = worst_z.max((closed - mc).abs() / se);
    }
    let zero = kl_divergence(&[0.0; 4], &[1.0; 4]).abs();
    outcome(
        worst_z <= 3.0 && zero <= 1e-12,
        format!("worst |closed - MC| = {worst_z:.2} standard errors over 20 pairs; KL(0,1) = {zero:e}"),
    )
}

fn random_vec(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

fn loss_bounds() -> Outcome {
    let mut r = rng::from_seed(3);
    let (mut b_ok, mut c_ok) = (true, true);
    let mut worst_scale: f64 = 0.0;
    let (lo_c, ln2) = (1e-8f64.ln(), std::f64::consts::LN_2);
    for _ in 0..10_000 {
        let vecs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, 6, 1.0)).collect();
        let alphas: Vec<f64> = (0..3).map(|_| r.random_range(0.01..100.0)).collect();
        let term = |scales: &[f64]| -> f64 {
            let mut g = Graph::new();
            let v: Vec<_> = vecs
                .iter()
                .zip(scales)
                .map(|(x, a)| g.constant(Tensor::vector(x.iter().map(|y| y * a).collect())))
                .collect();
            let t = Triplet { h: v[0], h_soft: v[1], h_hard: v[2], negative: 0 };
            let out = relation_term(&mut g, &t).expect("non-degenerate triplet");
            g.value(out).item()
        };
        let base = term(&[1.0; 3]);
        b_ok &= base > 0.0 && base < ln2;
        worst_scale = worst_scale.max((term(&alphas) - base).abs());

        let n = r.random_range(2..12);
        let spread = r.random_range(0.1..30.0);
        let p = softmax(&random_vec(&mut r, n, spread));
        let q = softmax(&random_vec(&mut r, n, spread));
        let mut g = Graph::new();
        let qv = g.constant(Tensor::vector(q));
        let c = class_term(&mut g, &p, qv).expect("class term builds");
        let c = g.value(c).item();
        c_ok &= (lo_c..=0.0).contains(&c);
    }
    outcome(
        b_ok && c_ok && worst_scale <= 1e-10,
        format!("L_b terms in (0, ln 2): {b_ok}; L_c in [ln 1e-8, 0]: {c_ok}; worst rescaling drift {worst_scale:.1e}"),
    )
}

fn mask_semantics() -> Outcome {
    let mut r = rng::from_seed(4);
    let mut failures = 0;
    for trial in 0..1000 {
        let (d, n, b) = (r.random_range(2..6), r.random_range(3..10), r.random_range(2..6));
        let tau = r.random_range(1..n);
        let k = r.random_range(1..=tau);
        let p = r.random_range(k.max(1)..=(n - tau + k).min(n));
        let batch: Vec<Tensor> = (0..b)
            .map(|_| Tensor::new(vec![d, n], random_vec(&mut r, d * n, 1.0)).expect("shape"))
            .collect();
        let refs: Vec<&Tensor> = batch.iter().collect();
        let joints: Vec<Vec<f64>> = (0..b).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let sim = instance_similarity(&joints).expect("similarity");
        let i = trial % b;
        let score = ContributionScore { instance: i, scores: random_vec(&mut r, n, 1.0) };
        let settings = PerturbSettings { tau, p, k };
        let pair = perturb_instance(&refs, i, &score, &sim, settings, &mut r).expect("pair builds");
        let o = salient_set(&score, tau).expect("salient set");
        let v = &batch[i];
        let changed: Vec<usize> = (0..n).filter(|&c| pair.hard.column(c) != v.column(c)).collect();
        let zeroed: Vec<usize> = (0..n)
            .filter(|&c| pair.soft.column(c).iter().all(|&x| x == 0.0) && v.column(c).iter().any(|&x| x != 0.0))
            .collect();
        let ok = changed.len() == k
            && changed.iter().all(|c| o.contains(c))
            && o.iter().all(|&c| pair.soft.column(c) == v.column(c))
            && zeroed.len() == p - k
            && zeroed.iter().all(|c| !o.contains(c))
            && (0..n).filter(|c| !zeroed.contains(c)).all(|c| pair.soft.column(c) == v.column(c))
            && changed.iter().all(|c| !zeroed.contains(c))
            && {
                let mut rep = pair.replaced.clone();
                rep.sort_unstable();
                rep == changed
            }
            && {
                let mut z = pair.zeroed.clone();
                z.sort_unstable();
                z == zeroed
            };
        if !ok {
            if failures == 0 {
                println!("    first violation: trial {trial} tau {tau} k {k} p {p} salient {o:?} changed {changed:?} zeroed {zeroed:?} pair {:?}/{:?}", pair.replaced, pair.zeroed);
            }
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of 1000 constructions violate the mask contract"))
}

fn group_discipline() -> Outcome {
    let ds = generate(&SynthConfig { train_size: 64, test_size: 16, ..SynthConfig::default() }).expect("dataset");
    let cfg = TrainConfig { d_h: 16, d_a: 8, d_m: 16, d_z: 8, ..TrainConfig::default() };
    let model = Model::init(model_dims(&cfg, &ds), &mut rng::from_seed(5)).expect("model");
    let views: Vec<TrainingInstance<'_>> = ds.train[..32].iter().map(|r| r.training_view()).collect();
    let pairs = perturb_batch(&model, &cfg, &views, cfg.t1 + 1, 0).expect("pairs");
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let input = ObjectiveInput {
        views: &views,
        pairs: Some(&pairs),
        p_orig: None,
        use_class: true,
        use_relation: true,
        step: 0,
    };
    let obj = build_objective(&mut g, &b, &model, &cfg, input).expect("objective");
    let classifier = [ParamId::ClassifierWeight, ParamId::ClassifierBias];
    let mut zero_ok = true;
    let mut untouched_ok = true;
    for loss in Loss::ALL {
        let grads = parameter_gradients(&g, &b, obj.component(loss).expect("component present")).expect("grads");
        if matches!(loss, Loss::Vib | Loss::Relation) {
            zero_ok &= classifier.iter().all(|p| grads[p.index()].data().iter().all(|&x| x == 0.0));
        }
        let allowed = ParamGroups::groups_for(loss);
        let mut stepped = model.clone();
        Adam::new(&model, 0.9, 0.98, 1e-8)
            .step(&mut stepped, &grads, allowed, 1e-3)
            .expect("step");
        for p in ParamId::ALL {
            if !allowed.contains(&p.group()) {
                untouched_ok &= stepped.param(p).data() == model.param(p).data();
            }
        }
        untouched_ok &= Group::ALL
            .iter()
            .filter(|g| !allowed.contains(g))
            .all(|&g| stepped.group_checksum(g) == model.group_checksum(g));
    }
    outcome(
        zero_ok && untouched_ok,
        format!("dL_vib/dTheta_c = dL_b/dTheta_c = 0: {zero_ok}; out-of-group parameters bit-identical: {untouched_ok}"),
    )
}

fn directional() -> Outcome {
    let threshold = (CALIBRATED_GAP_POINTS - 2.0).min(5.0);
    let mut gains = Vec::new();
    let mut drops = Vec::new();
    let (mut full_time, mut base_time) = (Duration::ZERO, Duration::ZERO);
    for seed in [1, 2, 3] {
        let ds = desk_data(seed);
        let cfg = desk_config(seed);
        let t = Instant::now();
        let (full_in, full_test) = final_accuracy(&cfg, &ds);
        full_time += t.elapsed();
        let t = Instant::now();
        let (base_in, base_test) = final_accuracy(&baseline_of(&cfg), &ds);
        base_time += t.elapsed();
        println!(
            "    seed {seed}: baseline in-dist {base_in:.4} test {base_test:.4}; full in-dist {full_in:.4} test {full_test:.4}"
        );
        gains.push(100.0 * (full_test - base_test));
        drops.push(100.0 * (base_in - full_in));
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let every_seed = gains.iter().all(|&g| g > 0.0);
    let worst_drop = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let in_time = full_time < Duration::from_secs(600) && base_time < Duration::from_secs(600);
    outcome(
        every_seed && mean_gain >= threshold && worst_drop <= 2.0 && in_time,
        format!(
            "gains {:?} points, mean {mean_gain:.2} (threshold {threshold:.2}); worst in-dist drop {worst_drop:.2} (<= 2); arms {:.0}s / {:.0}s",
            gains.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>(),
            full_time.as_secs_f64(),
            base_time.as_secs_f64()
        ),
    )
}

fn ablation() -> Outcome {
    let ds = desk_data(0);
    let cfg = desk_config(0);
    let base = baseline_of(&cfg);
    let (_, acc_base) = final_accuracy(&base, &ds);
    let (_, acc_vib) = final_accuracy(&TrainConfig { lambda_vib: cfg.lambda_vib, ..base.clone() }, &ds);
    let (_, acc_c) = final_accuracy(&TrainConfig { lambda_c: cfg.lambda_c, ..base.clone() }, &ds);
    outcome(
        acc_base <= acc_vib && acc_base < acc_c,
        format!("shifted test: baseline {acc_base:.4}, +L_vib {acc_vib:.4}, +L_c {acc_c:.4}"),
    )
}

/// Small end-to-end configuration exercising every phase.
fn pipeline_configs() -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig { train_size: 256, test_size: 64, seed: 8, ..SynthConfig::default() };
    let train = TrainConfig { t0: 2, t1: 3, t2: 5, d_h: 16, d_a: 8, d_m: 16, d_z: 8, seed: 8, ..TrainConfig::default() };
    (synth, train)
}

fn run_pipeline(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>, Model, Dataset) {
    let (synth, cfg) = pipeline_configs();
    let data_dir = dir.join("data");
    write_dataset(&generate(&synth).expect("dataset"), &data_dir).expect("write dataset");
    let ds = read_dataset(&data_dir).expect("read dataset");
    let out = train(&cfg, &ds).expect("train");
    evaluate(&out.model, &ds, Split::Test, EvalMode::VqaAccuracy).expect("evaluate");
    let run = dir.join("run");
    export_report(&out.history, &out.model, &ds, &cfg, &run).expect("export");
    let read = |name: &str| std::fs::read(run.join(name)).expect("artifact exists");
    (read("metrics.csv"), read("embeddings.csv"), out.model, ds)
}

fn determinism(keep: &mut Option<(Model, Dataset)>) -> Outcome {
    let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let (m1, e1, model, ds) = run_pipeline(a.path());
    let (m2, e2, _, _) = run_pipeline(b.path());
    *keep = Some((model, ds));
    outcome(
        m1 == m2 && e1 == e2,
        format!(
            "metrics.csv identical: {} ({} bytes); embeddings.csv identical: {} ({} bytes)",
            m1 == m2,
            m1.len(),
            e1 == e2,
            e1.len()
        ),
    )
}

fn inference_contract(keep: &mut Option<(Model, Dataset)>) -> Outcome {
    let (model, ds) = keep.take().unwrap_or_else(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let (_, _, m, d) = run_pipeline(dir.path());
        (m, d)
    });
    let before = noise_draws();
    let reports: Vec<_> = (0..2)
        .flat_map(|_| [Split::Train, Split::Test])
        .map(|s| evaluate(&model, &ds, s, EvalMode::VqaAccuracy).expect("evaluate"))
        .collect();
    let p1 = predict(&model, &ds.test).expect("predict");
    let p2 = predict(&model, &ds.test).expect("predict");
    let draws = noise_draws() - before;
    let repeat = reports[0] == reports[2] && reports[1] == reports[3] && p1 == p2;
    outcome(
        draws == 0 && repeat,
        format!("noise draws during evaluation: {draws}; repeated evaluation bit-identical: {repeat}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("VPL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut keep = None;
    let criteria: Vec<(usize, &str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "KL oracle", Box::new(kl_oracle)),
        (3, "loss bounds", Box::new(loss_bounds)),
        (4, "mask semantics", Box::new(mask_semantics)),
        (5, "group discipline", Box::new(group_discipline)),
        (6, "directional bias mitigation", Box::new(directional)),
        (7, "ablation ordering", Box::new(ablation)),
        (8, "determinism", Box::new(|| determinism(&mut keep))),
    ];
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome, secs: f64| {
        println!("criterion {n} {name}: {} ({secs:.1}s) {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    };
    for (n, name, mut f) in criteria {
        if wanted(n) {
            let t = Instant::now();
            let o = f();
            report(n, name, o, t.elapsed().as_secs_f64());
        }
    }
    if wanted(9) {
        let t = Instant::now();
        let o = inference_contract(&mut keep);
        report(9, "inference contract", o, t.elapsed().as_secs_f64());
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
