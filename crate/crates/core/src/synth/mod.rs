//! Seeded synthetic prior-shift VQA benchmark.
//!
//! Every image holds one salient region whose latent class encodes the
//! (question type, answer) pair, plus distractor regions drawn from classes
//! outside that range. The train split puts mass `train_skew` on each
//! question type's head answer; the test split puts the same mass on the next
//! answer in the type's list, so the answer prior shifts while the visual
//! evidence keeps the same distribution.

mod format;

pub use format::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of latent region classes (G).
    pub num_region_classes: usize,
    /// Number of question types (Q).
    pub num_question_types: usize,
    /// Answers per question type (A).
    pub answers_per_type: usize,
    /// Regions per image (N).
    pub regions_per_image: usize,
    /// Region feature dimension (d_v).
    pub feature_dim: usize,
    /// Question encoding dimension (d_q) models must use for this dataset.
    pub question_dim: usize,
    /// Tokens per question, including the type token.
    pub question_len: usize,
    /// Size of the shared filler-token pool.
    pub filler_tokens: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Probability of the head answer in the train split (κ).
    pub train_skew: f64,
    pub annotators: usize,
    pub annotator_accuracy: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_region_classes: 64,
            num_question_types: 6,
            answers_per_type: 8,
            regions_per_image: 8,
            feature_dim: 32,
            question_dim: 32,
            question_len: 4,
            filler_tokens: 16,
            train_size: 8000,
            test_size: 2000,
            train_skew: 0.8,
            annotators: 10,
            annotator_accuracy: 0.9,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_answers(&self) -> usize {
        self.num_question_types * self.answers_per_type
    }

    /// Token ids: type tokens, then fillers, then one token per answer.
    pub fn answer_token_offset(&self) -> usize {
        self.num_question_types + self.filler_tokens
    }

    pub fn token_vocab(&self) -> usize {
        self.answer_token_offset() + self.num_answers()
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.regions_per_image < 2 {
            return c(format!("regions_per_image must be >= 2, got {}", self.regions_per_image));
        }
        if self.answers_per_type < 2 {
            return c(format!("answers_per_type must be >= 2, got {}", self.answers_per_type));
        }
        if self.num_question_types == 0 || self.train_size == 0 || self.test_size == 0 {
            return c("question types and split sizes must be >= 1".into());
        }
        if self.feature_dim == 0 || self.question_dim == 0 || self.question_len == 0 || self.annotators == 0 {
            return c("dimensions, question_len and annotators must be >= 1".into());
        }
        if self.question_len > 1 && self.filler_tokens == 0 {
            return c("questions longer than one token need filler_tokens >= 1".into());
        }
        if !(self.train_skew >= 1.0 / self.answers_per_type as f64 - 1e-12 && self.train_skew <= 1.0) {
            return c(format!(
                "train_skew {} outside [1/A, 1] = [{}, 1]",
                self.train_skew,
                1.0 / self.answers_per_type as f64
            ));
        }
        if !(0.0..=1.0).contains(&self.annotator_accuracy) {
            return c(format!("annotator_accuracy {} outside [0, 1]", self.annotator_accuracy));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return c(format!("noise_scale {} must be finite and >= 0", self.noise_scale));
        }
        if self.num_answers() >= self.num_region_classes {
            return c(format!(
                "Q*A = {} answer classes leave no distractor class among {} region classes",
                self.num_answers(),
                self.num_region_classes
            ));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.read_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvMap::parse_config(text)?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub(crate) fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_into("num_region_classes", &mut self.num_region_classes)?;
        kv.take_into("num_question_types", &mut self.num_question_types)?;
        kv.take_into("answers_per_type", &mut self.answers_per_type)?;
        kv.take_into("regions_per_image", &mut self.regions_per_image)?;
        kv.take_into("feature_dim", &mut self.feature_dim)?;
        kv.take_into("question_dim", &mut self.question_dim)?;
        kv.take_into("question_len", &mut self.question_len)?;
        kv.take_into("filler_tokens", &mut self.filler_tokens)?;
        kv.take_into("train_size", &mut self.train_size)?;
        kv.take_into("test_size", &mut self.test_size)?;
        kv.take_into("train_skew", &mut self.train_skew)?;
        kv.take_into("annotators", &mut self.annotators)?;
        kv.take_into("annotator_accuracy", &mut self.annotator_accuracy)?;
        kv.take_into("noise_scale", &mut self.noise_scale)?;
        kv.take_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn to_kv_lines(&self) -> String {
        format!(
            "num_region_classes={}\nnum_question_types={}\nanswers_per_type={}\nregions_per_image={}\n\
             feature_dim={}\nquestion_dim={}\nquestion_len={}\nfiller_tokens={}\ntrain_size={}\n\
             test_size={}\ntrain_skew={}\nannotators={}\nannotator_accuracy={}\nnoise_scale={}\nseed={}\n",
            self.num_region_classes,
            self.num_question_types,
            self.answers_per_type,
            self.regions_per_image,
            self.feature_dim,
            self.question_dim,
            self.question_len,
            self.filler_tokens,
            self.train_size,
            self.test_size,
            self.train_skew,
            self.annotators,
            self.annotator_accuracy,
            self.noise_scale,
            self.seed
        )
    }
}

/// One (image, question, answers) triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    /// `d_v x N`; column `n` is region `n`.
    pub features: Tensor,
    pub region_classes: Vec<u32>,
    pub question_type: u32,
    pub tokens: Vec<u32>,
    /// Soft score per answer: votes / annotators.
    pub scores: Vec<f64>,
    /// Generator diagnostics only.
    pub salient_region: u32,
}

impl InstanceRecord {
    /// Answers with the maximum vote count.
    pub fn ground_truth(&self) -> Vec<usize> {
        let best = self.scores.iter().copied().fold(0.0f64, f64::max);
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == best && s > 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Lowest-index answer with the maximum vote count.
    pub fn majority_answer(&self) -> usize {
        self.ground_truth()[0]
    }

    pub fn votes(&self, answer: usize, annotators: usize) -> u32 {
        (self.scores[answer] * annotators as f64).round() as u32
    }

    /// The fields a training loop may read.
    pub fn training_view(&self) -> TrainingInstance<'_> {
        TrainingInstance {
            features: &self.features,
            question_type: self.question_type,
            tokens: &self.tokens,
            scores: &self.scores,
        }
    }
}

/// Training-time view of an instance. It has no access to the generator's
/// region labels or salient index.
#[derive(Debug, Clone, Copy)]
pub struct TrainingInstance<'a> {
    pub features: &'a Tensor,
    pub question_type: u32,
    pub tokens: &'a [u32],
    pub scores: &'a [f64],
}

impl TrainingInstance<'_> {
    pub fn ground_truth(&self) -> Vec<usize> {
        let best = self.scores.iter().copied().fold(0.0f64, f64::max);
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == best && s > 0.0)
            .map(|(k, _)| k)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub answers: Vec<String>,
    pub train: Vec<InstanceRecord>,
    pub test: Vec<InstanceRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[InstanceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Answer id for local answer `a` of question type `q`.
    pub fn answer_id(&self, q: usize, a: usize) -> usize {
        q * self.config.answers_per_type + a
    }

    pub fn answer_token(&self, answer: usize) -> u32 {
        (self.config.answer_token_offset() + answer) as u32
    }

    /// Answer encoded by a salient region class, if the class is an answer class.
    pub fn answer_for_class(&self, class: u32) -> Option<usize> {
        let c = class as usize;
        (c < self.config.num_answers()).then_some(c)
    }
}

pub fn answer_names(cfg: &SynthConfig) -> Vec<String> {
    (0..cfg.num_question_types)
        .flat_map(|q| (0..cfg.answers_per_type).map(move |a| format!("q{q}a{a}")))
        .collect()
}

/// Local index of the head answer for a split.
pub fn head_answer(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::from_seed(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_region_classes)
        .map(|_| (0..cfg.feature_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let train = (0..cfg.train_size)
        .map(|_| draw_instance(cfg, &prototypes, Split::Train, &mut rng))
        .collect();
    let test = (0..cfg.test_size)
        .map(|_| draw_instance(cfg, &prototypes, Split::Test, &mut rng))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        answers: answer_names(cfg),
        train,
        test,
    })
}

fn draw_instance(cfg: &SynthConfig, prototypes: &[Vec<f64>], split: Split, rng: &mut Rng) -> InstanceRecord {
    let a_count = cfg.answers_per_type;
    let n = cfg.regions_per_image;
    let q = rng.random_range(0..cfg.num_question_types);

    let head = head_answer(split);
    let local = if rng.random::<f64>() < cfg.train_skew {
        head
    } else {
        let r = rng.random_range(0..a_count - 1);
        if r >= head {
            r + 1
        } else {
            r
        }
    };
    let answer = q * a_count + local;

    let salient = rng.random_range(0..n);
    let distractors = cfg.num_region_classes - cfg.num_answers();
    let region_classes: Vec<u32> = (0..n)
        .map(|r| {
            if r == salient {
                answer as u32
            } else {
                (cfg.num_answers() + rng.random_range(0..distractors)) as u32
            }
        })
        .collect();

    let mut features = Tensor::zeros(&[cfg.feature_dim, n]);
    for (r, &class) in region_classes.iter().enumerate() {
        let col: Vec<f64> = prototypes[class as usize]
            .iter()
            .map(|&p| {
                let noise: f64 = rng.sample(StandardNormal);
                // stored as f32 on disk; keep the in-memory value representable
                (p + cfg.noise_scale * noise) as f32 as f64
            })
            .collect();
        features.set_column(r, &col);
    }

    let mut tokens = vec![q as u32];
    for _ in 1..cfg.question_len {
        tokens.push((cfg.num_question_types + rng.random_range(0..cfg.filler_tokens)) as u32);
    }

    let mut votes = vec![0u32; cfg.num_answers()];
    for _ in 0..cfg.annotators {
        let given = if rng.random::<f64>() < cfg.annotator_accuracy {
            local
        } else {
            let r = rng.random_range(0..a_count - 1);
            if r >= local {
                r + 1
            } else {
                r
            }
        };
        votes[q * a_count + given] += 1;
    }
    let scores = votes
        .iter()
        .map(|&v| (v as f64 / cfg.annotators as f64) as f32 as f64)
        .collect();

    InstanceRecord {
        features,
        region_classes,
        question_type: q as u32,
        tokens,
        scores,
        salient_region: salient as u32,
    }
}

/// Per question type, the distribution of majority answers over the type's
/// local answer list. Types absent from the split get a uniform row.
pub fn prior_table(records: &[InstanceRecord], cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let a_count = cfg.answers_per_type;
    let mut counts = vec![vec![0usize; a_count]; cfg.num_question_types];
    for r in records {
        let q = r.question_type as usize;
        let local = r.majority_answer() - q * a_count;
        counts[q][local] += 1;
    }
    counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![1.0 / a_count as f64; a_count]
            } else {
                row.into_iter().map(|c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

/// Mean over question types of the total-variation distance between two prior tables.
pub fn mean_total_variation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let per_type: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .collect();
    per_type.iter().sum::<f64>() / per_type.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            train_size: 1200,
            test_size: 300,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(5)).unwrap();
        let b = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(6)).unwrap();
        assert_ne!(a.train[0].features, c.train[0].features);
    }

    #[test]
    fn uniform_skew_gives_uniform_prior() {
        let cfg = SynthConfig {
            train_skew: 1.0 / 8.0,
            annotator_accuracy: 1.0,
            train_size: 8000,
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        for row in prior_table(&ds.train, &cfg) {
            for p in row {
                assert!((p - 0.125).abs() < 0.05, "{p}");
            }
        }
    }

    #[test]
    fn full_skew_noiseless_is_one_hot() {
        let cfg = SynthConfig {
            train_skew: 1.0,
            annotator_accuracy: 1.0,
            ..small(2)
        };
        let ds = generate(&cfg).unwrap();
        for r in &ds.train {
            let q = r.question_type as usize;
            assert_eq!(r.majority_answer(), q * 8);
            assert_eq!(r.scores[q * 8], 1.0);
        }
        for row in prior_table(&ds.train, &cfg) {
            assert_eq!(row[0], 1.0);
        }
    }

    #[test]
    fn salient_region_encodes_the_intended_answer() {
        let ds = generate(&small(3)).unwrap();
        let mut agree = 0;
        for r in &ds.train {
            let class = r.region_classes[r.salient_region as usize];
            assert!((class as usize) < ds.config.num_answers());
            assert_eq!(class as usize / 8, r.question_type as usize);
            for (i, &c) in r.region_classes.iter().enumerate() {
                if i != r.salient_region as usize {
                    assert!(c as usize >= ds.config.num_answers());
                }
            }
            if class as usize == r.majority_answer() {
                agree += 1;
            }
            let total: f64 = r.scores.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(r.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        }
        assert!(agree as f64 / ds.train.len() as f64 > 0.99);
    }

    #[test]
    fn config_errors() {
        let mut c = SynthConfig::default();
        c.num_region_classes = 48;
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let c = SynthConfig {
            train_skew: 0.05,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SynthConfig {
            regions_per_image: 1,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let c = SynthConfig {
            train_skew: 0.65,
            seed: 42,
            ..SynthConfig::default()
        };
        let parsed = SynthConfig::from_kv(KvMap::parse_config(&c.to_kv_lines()).unwrap()).unwrap();
        assert_eq!(parsed, c);
    }
}
