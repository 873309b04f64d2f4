//! Toy VQA base model: region encoder, mean-of-embeddings question encoder,
//! question-guided soft attention with dual-branch fusion, and a softmax
//! answer classifier over the bottleneck output.
//!
//! All learnable tensors, including the bottleneck and answer-map parameters
//! used by [`crate::vib`] and [`crate::discriminators`], live in one
//! [`Model`] indexed by [`ParamId`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Parameter families that share a loss branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Encoders and fusion (Θ_m).
    Base,
    /// Bottleneck (Θ_vib).
    Vib,
    /// Answer classifier (Θ_c).
    Classifier,
    /// Answer-space mapping of the relation discriminator (Θ_a).
    AnswerMap,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Base, Group::Vib, Group::Classifier, Group::AnswerMap];

    pub fn name(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Vib => "vib",
            Group::Classifier => "classifier",
            Group::AnswerMap => "answer_map",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    VisualWeight,
    VisualBias,
    Embedding,
    AttendVisual,
    AttendQuestion,
    AttendVector,
    FuseVisual,
    FuseVisualBias,
    FuseQuestion,
    FuseQuestionBias,
    MuWeight,
    MuBias,
    SigmaWeight,
    SigmaBias,
    ClassifierWeight,
    ClassifierBias,
    AnswerWeight,
    AnswerBias,
}

impl ParamId {
    pub const ALL: [ParamId; 18] = [
        ParamId::VisualWeight,
        ParamId::VisualBias,
        ParamId::Embedding,
        ParamId::AttendVisual,
        ParamId::AttendQuestion,
        ParamId::AttendVector,
        ParamId::FuseVisual,
        ParamId::FuseVisualBias,
        ParamId::FuseQuestion,
        ParamId::FuseQuestionBias,
        ParamId::MuWeight,
        ParamId::MuBias,
        ParamId::SigmaWeight,
        ParamId::SigmaBias,
        ParamId::ClassifierWeight,
        ParamId::ClassifierBias,
        ParamId::AnswerWeight,
        ParamId::AnswerBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::VisualWeight => "encoder.visual.weight",
            ParamId::VisualBias => "encoder.visual.bias",
            ParamId::Embedding => "encoder.embedding",
            ParamId::AttendVisual => "fusion.attend.visual",
            ParamId::AttendQuestion => "fusion.attend.question",
            ParamId::AttendVector => "fusion.attend.vector",
            ParamId::FuseVisual => "fusion.visual.weight",
            ParamId::FuseVisualBias => "fusion.visual.bias",
            ParamId::FuseQuestion => "fusion.question.weight",
            ParamId::FuseQuestionBias => "fusion.question.bias",
            ParamId::MuWeight => "vib.mu.weight",
            ParamId::MuBias => "vib.mu.bias",
            ParamId::SigmaWeight => "vib.sigma.weight",
            ParamId::SigmaBias => "vib.sigma.bias",
            ParamId::ClassifierWeight => "classifier.weight",
            ParamId::ClassifierBias => "classifier.bias",
            ParamId::AnswerWeight => "answer_map.weight",
            ParamId::AnswerBias => "answer_map.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn group(self) -> Group {
        use ParamId::*;
        match self {
            VisualWeight | VisualBias | Embedding | AttendVisual | AttendQuestion | AttendVector | FuseVisual
            | FuseVisualBias | FuseQuestion | FuseQuestionBias => Group::Base,
            MuWeight | MuBias | SigmaWeight | SigmaBias => Group::Vib,
            ClassifierWeight | ClassifierBias => Group::Classifier,
            AnswerWeight | AnswerBias => Group::AnswerMap,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Model dimensions. The full-scale reference setup uses 2048-d region features, a
/// 1280-d question encoding and a 128-d bottleneck; these defaults are desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Region feature dimension.
    pub d_v: usize,
    /// Token embedding / question dimension.
    pub d_q: usize,
    /// Encoded region dimension.
    pub d_h: usize,
    /// Attention hidden dimension.
    pub d_a: usize,
    /// Fused representation dimension.
    pub d_m: usize,
    /// Bottleneck dimension.
    pub d_z: usize,
    /// Token vocabulary size (question and answer tokens).
    pub vocab: usize,
    /// Answer vocabulary size |Ω|.
    pub answers: usize,
    /// Token id of answer 0.
    pub answer_token_offset: usize,
}

impl ModelDims {
    pub fn shape(&self, p: ParamId) -> Vec<usize> {
        use ParamId::*;
        match p {
            VisualWeight => vec![self.d_h, self.d_v],
            VisualBias => vec![self.d_h],
            Embedding => vec![self.d_q, self.vocab],
            AttendVisual => vec![self.d_a, self.d_h],
            AttendQuestion => vec![self.d_a, self.d_q],
            AttendVector => vec![self.d_a],
            FuseVisual => vec![self.d_m, self.d_h],
            FuseVisualBias => vec![self.d_m],
            FuseQuestion => vec![self.d_m, self.d_q],
            FuseQuestionBias => vec![self.d_m],
            MuWeight | SigmaWeight => vec![self.d_z, self.d_m],
            MuBias | SigmaBias => vec![self.d_z],
            ClassifierWeight => vec![self.answers, self.d_z],
            ClassifierBias => vec![self.answers],
            AnswerWeight => vec![self.d_z, self.d_q],
            AnswerBias => vec![self.d_z],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_v, self.d_q, self.d_h, self.d_a, self.d_m, self.d_z, self.vocab, self.answers];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be >= 1: {self:?}")));
        }
        if self.answer_token_offset + self.answers > self.vocab {
            return Err(Error::Config(format!(
                "answer tokens {}..{} exceed vocabulary {}",
                self.answer_token_offset,
                self.answer_token_offset + self.answers,
                self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    params: Vec<Tensor>,
}

impl Model {
    /// Random initialization: weights `N(0, 1/fan_in)`, embeddings `N(0, 1)`,
    /// biases zero.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let params = ParamId::ALL
            .iter()
            .map(|&p| {
                let shape = dims.shape(p);
                let n: usize = shape.iter().product();
                let std = match (p, shape.len()) {
                    (ParamId::Embedding, _) => 1.0,
                    (ParamId::AttendVector, _) => 1.0 / (dims.d_a as f64).sqrt(),
                    (_, 2) => 1.0 / (shape[1] as f64).sqrt(),
                    _ => 0.0,
                };
                let data = (0..n)
                    .map(|_| {
                        if std == 0.0 {
                            0.0
                        } else {
                            std * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("init shape")
            })
            .collect();
        Ok(Self { dims, params })
    }

    /// Builds a model from explicit tensors in [`ParamId::ALL`] order.
    pub fn from_params(dims: ModelDims, params: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        if params.len() != ParamId::ALL.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                ParamId::ALL.len(),
                params.len()
            )));
        }
        for (p, t) in ParamId::ALL.iter().zip(&params) {
            if t.shape() != dims.shape(*p).as_slice() {
                return Err(Error::Config(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    dims.shape(*p)
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("{}: non-finite values", p.name())));
            }
        }
        Ok(Self { dims, params })
    }

    pub fn param(&self, p: ParamId) -> &Tensor {
        &self.params[p.index()]
    }

    pub fn param_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.params[p.index()]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }

    pub fn group_checksum(&self, group: Group) -> u64 {
        ParamId::ALL
            .iter()
            .filter(|p| p.group() == group)
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ self.param(*p).checksum())
    }

    /// Places every parameter in `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for every parameter of a [`Model`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, p: ParamId) -> Var {
        self.vars[p.index()]
    }
}

/// Per-region affine projection followed by relu: `relu(W raw + b 1ᵀ)`.
pub fn encode_image(g: &mut Graph, b: &Bound, raw: Var) -> Result<Var> {
    let proj = g.matmul(b.var(ParamId::VisualWeight), raw)?;
    let shifted = g.add_column(proj, b.var(ParamId::VisualBias))?;
    Ok(g.relu(shifted)?)
}

/// Mean of token embeddings.
pub fn encode_question(g: &mut Graph, b: &Bound, tokens: &[u32]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Vocabulary("empty token list".into()));
    }
    let table = b.var(ParamId::Embedding);
    let vocab = g.value(table).cols();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let cols = g.select_columns(table, &ids)?;
    Ok(g.mean_columns(cols)?)
}

/// Attention weights over regions: `softmax(wᵀ relu(W_v V + W_q q 1ᵀ))`.
pub fn attention(g: &mut Graph, b: &Bound, v: Var, q: Var) -> Result<Var> {
    let av = g.matmul(b.var(ParamId::AttendVisual), v)?;
    let aq = g.matmul(b.var(ParamId::AttendQuestion), q)?;
    let joint = g.add_column(av, aq)?;
    let hidden = g.relu(joint)?;
    let logits = g.matmul(b.var(ParamId::AttendVector), hidden)?;
    Ok(g.softmax(logits)?)
}

/// `m = relu(W₁ V α + b₁) ⊙ relu(W₂ q + b₂)`.
pub fn fuse(g: &mut Graph, b: &Bound, v: Var, q: Var) -> Result<Var> {
    let alpha = attention(g, b, v, q)?;
    let pooled = g.matmul(v, alpha)?;
    let vis = g.matmul(b.var(ParamId::FuseVisual), pooled)?;
    let vis = g.add(vis, b.var(ParamId::FuseVisualBias))?;
    let vis = g.relu(vis)?;
    let que = g.matmul(b.var(ParamId::FuseQuestion), q)?;
    let que = g.add(que, b.var(ParamId::FuseQuestionBias))?;
    let que = g.relu(que)?;
    Ok(g.hadamard(vis, que)?)
}

/// Raw features and question tokens to the fused representation `m`.
pub fn represent(g: &mut Graph, b: &Bound, raw: Var, tokens: &[u32]) -> Result<Var> {
    let v = encode_image(g, b, raw)?;
    let q = encode_question(g, b, tokens)?;
    fuse(g, b, v, q)
}

pub fn classifier_logits(g: &mut Graph, b: &Bound, repr: Var) -> Result<Var> {
    let l = g.matmul(b.var(ParamId::ClassifierWeight), repr)?;
    Ok(g.add(l, b.var(ParamId::ClassifierBias))?)
}

/// Answer distribution `softmax(W r + b)`.
pub fn classify(g: &mut Graph, b: &Bound, repr: Var) -> Result<Var> {
    let logits = classifier_logits(g, b, repr)?;
    Ok(g.softmax(logits)?)
}

/// `-Σ_k y_k log p_k` for one instance; `y` is used exactly as given.
pub fn vqa_term(g: &mut Graph, probs: Var, y: &[f64]) -> Result<Var> {
    let target = g.constant(Tensor::vector(y.to_vec()));
    let logp = g.safe_log(probs)?;
    let weighted = g.hadamard(target, logp)?;
    let s = g.sum(weighted)?;
    Ok(g.scale(s, -1.0)?)
}

/// Batch mean of [`vqa_term`].
pub fn vqa_loss(g: &mut Graph, probs: &[Var], ys: &[&[f64]]) -> Result<Var> {
    if probs.len() != ys.len() || probs.is_empty() {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "vqa_loss",
            left: vec![probs.len()],
            right: vec![ys.len()],
        }));
    }
    let terms = probs
        .iter()
        .zip(ys)
        .map(|(&p, y)| vqa_term(g, p, y))
        .collect::<Result<Vec<_>>>()?;
    mean_of(g, &terms)
}

/// Mean of scalar nodes.
pub fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64)?)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
