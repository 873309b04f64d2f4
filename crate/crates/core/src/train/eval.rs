//! Inference-path prediction and the VQA accuracy metric.

use crate::error::Result;
use crate::model::{argmax, classifier_logits, represent, Model};
use crate::synth::{Dataset, InstanceRecord, Split};
use crate::tensor::{Graph, Tensor};
use crate::vib::inference_repr;

/// Instances evaluated per graph.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// `min(1, votes(â)/3)`.
    VqaAccuracy,
    /// The training soft score `y_â`.
    TrainTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: usize,
    /// Posterior mean used as the inference representation.
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Mean score per question type; `NaN`-free, 0 for absent types.
    pub per_type: Vec<f64>,
    pub count: usize,
}

/// Predictions from the posterior mean; never samples the bottleneck.
pub fn predict(model: &Model, records: &[InstanceRecord]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        for r in chunk {
            let raw = g.constant(r.features.clone());
            let m = represent(&mut g, &b, raw, &r.tokens)?;
            let mu = inference_repr(&mut g, &b, m)?;
            let logits = classifier_logits(&mut g, &b, mu)?;
            out.push(Prediction {
                answer: argmax(g.value(logits).data()),
                mu: g.value(mu).data().to_vec(),
            });
        }
    }
    Ok(out)
}

/// Score of answering `answer` on `record`.
pub fn score_answer(record: &InstanceRecord, answer: usize, annotators: usize, mode: EvalMode) -> f64 {
    match mode {
        EvalMode::VqaAccuracy => (record.votes(answer, annotators) as f64 / 3.0).min(1.0),
        EvalMode::TrainTarget => record.scores[answer],
    }
}

/// Averages per-instance scores overall and per question type.
pub fn accuracy(ds: &Dataset, records: &[InstanceRecord], answers: &[usize], mode: EvalMode) -> AccuracyReport {
    let q = ds.config.num_question_types;
    let mut sums = vec![0.0; q];
    let mut counts = vec![0usize; q];
    let mut total = 0.0;
    for (r, &a) in records.iter().zip(answers) {
        let s = score_answer(r, a, ds.config.annotators, mode);
        total += s;
        sums[r.question_type as usize] += s;
        counts[r.question_type as usize] += 1;
    }
    AccuracyReport {
        overall: if records.is_empty() { 0.0 } else { total / records.len() as f64 },
        per_type: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        count: records.len(),
    }
}

pub fn evaluate(model: &Model, ds: &Dataset, split: Split, mode: EvalMode) -> Result<AccuracyReport> {
    let records = ds.split(split);
    let answers: Vec<usize> = predict(model, records)?.into_iter().map(|p| p.answer).collect();
    Ok(accuracy(ds, records, &answers, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// The type's most frequent train-split answer, ignoring the image.
    PriorOnly,
    /// The answer encoded by the salient region's class (generator diagnostics).
    Oracle,
}

pub fn baseline_predict(kind: BaselineKind, ds: &Dataset, split: Split, mode: EvalMode) -> AccuracyReport {
    let records = ds.split(split);
    let answers: Vec<usize> = match kind {
        BaselineKind::PriorOnly => {
            let table = crate::synth::prior_table(&ds.train, &ds.config);
            let heads: Vec<usize> = table.iter().map(|row| argmax(row)).collect();
            records
                .iter()
                .map(|r| ds.answer_id(r.question_type as usize, heads[r.question_type as usize]))
                .collect()
        }
        BaselineKind::Oracle => records
            .iter()
            .map(|r| {
                let class = r.region_classes[r.salient_region as usize];
                ds.answer_for_class(class).unwrap_or(0)
            })
            .collect(),
    };
    accuracy(ds, records, &answers, mode)
}

/// Probabilities on the inference path for one instance (diagnostics).
pub fn inference_probs(model: &Model, features: &Tensor, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let raw = g.constant(features.clone());
    let m = represent(&mut g, &b, raw, tokens)?;
    let mu = inference_repr(&mut g, &b, m)?;
    let logits = classifier_logits(&mut g, &b, mu)?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).data().to_vec())
}
