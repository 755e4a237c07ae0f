//! The full classifier: image and question encoders, cross-modal global
//! attention, the cross-modal spatial transformer, fusion, and an answer head.

mod file;
mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Tape, Tensor, Var};
use crate::cga::{self, Attended, AttentionMode, NORM_EPS};
use crate::cst::{self, CstOutput, TransformMode};
use crate::encoders::{
    self, he_normal, images_to_tensor, scaled_normal, tokenize, ImageEncoderConfig, QuestionEncoderConfig, Vocabulary,
};
use crate::synthdata::{Dataset, QuestionType, Split, ANSWERS};

pub use file::{load_params, read_params, save_params, write_params, ModelFileError, MAGIC};
pub use metrics::MetricsReport;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("triplet {id}: {source}")]
    Question { id: usize, source: encoders::EmptyQuestion },
    #[error("triplet {id}: answer {answer:?} is not in the model's answer set")]
    UnknownAnswer { id: usize, answer: String },
    #[error("triplet {id}: image {image:?} is not loaded")]
    MissingImage { id: usize, image: String },
    #[error("split {0} has no samples")]
    EmptySplit(&'static str),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fusion {
    Product,
    Sum,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Product => "product",
            Fusion::Sum => "sum",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "product" => Ok(Fusion::Product),
            "sum" => Ok(Fusion::Sum),
            "concat" => Ok(Fusion::Concat),
            _ => Err(format!("unknown fusion {s:?} (expected product, sum, or concat)")),
        }
    }
}

fn attention_str(m: AttentionMode) -> &'static str {
    match m {
        AttentionMode::Cross => "cross",
        AttentionMode::Uniform => "uniform",
    }
}

fn transform_str(m: TransformMode) -> &'static str {
    match m {
        TransformMode::Learned => "learned",
        TransformMode::Identity => "identity",
    }
}

/// Ordered answer classes; the class index is the position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerSet {
    answers: Vec<String>,
}

impl Default for AnswerSet {
    fn default() -> Self {
        AnswerSet { answers: ANSWERS.iter().map(|s| s.to_string()).collect() }
    }
}

impl AnswerSet {
    pub fn new(answers: Vec<String>) -> Self {
        AnswerSet { answers }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn label(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn answer(&self, label: usize) -> Option<&str> {
        self.answers.get(label).map(String::as_str)
    }

    pub fn to_tsv(&self) -> String {
        self.answers.iter().enumerate().map(|(i, a)| format!("{a}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> std::result::Result<Self, String> {
        let mut answers = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (a, i) = line.split_once('\t').ok_or_else(|| format!("answers line {}: missing tab", n + 1))?;
            if i.parse::<usize>().ok() != Some(answers.len()) {
                return Err(format!("answers line {}: index {i:?} out of sequence", n + 1));
            }
            answers.push(a.to_string());
        }
        Ok(AnswerSet { answers })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image: ImageEncoderConfig,
    pub question: QuestionEncoderConfig,
    pub classifier_hidden: usize,
    pub fusion: Fusion,
    pub attention: AttentionMode,
    pub transform: TransformMode,
    pub vocab_size: usize,
    pub num_answers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            image: ImageEncoderConfig::default(),
            question: QuestionEncoderConfig::default(),
            classifier_hidden: 128,
            fusion: Fusion::Product,
            attention: AttentionMode::Cross,
            transform: TransformMode::Learned,
            vocab_size: 2,
            num_answers: ANSWERS.len(),
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.image.out_channels()
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.question.hidden,
            Fusion::Product | Fusion::Sum => self.question.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.image.channels.is_empty() || self.image.channels.len() != self.image.strides.len() {
            return bad("conv channels and strides must be non-empty and of equal length".into());
        }
        if self.image.strides.contains(&0) || self.image.kernel.is_multiple_of(2) {
            return bad("strides must be positive and the kernel odd".into());
        }
        let f = self.image.downsampling();
        if !self.image_size.is_multiple_of(f) {
            return bad(format!("image size {} is not divisible by the downsampling factor {f}", self.image_size));
        }
        if self.image_size / f < 2 {
            return bad(format!("feature map {0}x{0} is smaller than 2x2", self.image_size / f));
        }
        if !self.channels().is_multiple_of(2) {
            return bad(format!("feature channels {} must be even", self.channels()));
        }
        if self.question.hidden == 0 || self.question.embed_dim == 0 || self.question.max_tokens == 0 {
            return bad("question encoder sizes must be positive".into());
        }
        if self.num_answers == 0 || self.vocab_size < 2 || self.classifier_hidden == 0 {
            return bad("answer set, vocabulary, and classifier must be non-empty".into());
        }
        Ok(())
    }

    /// `key=value` pairs describing the architecture.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size.to_string()),
            ("conv_channels", join(&self.image.channels)),
            ("conv_strides", join(&self.image.strides)),
            ("conv_kernel", self.image.kernel.to_string()),
            ("embed_dim", self.question.embed_dim.to_string()),
            ("hidden", self.question.hidden.to_string()),
            ("max_tokens", self.question.max_tokens.to_string()),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("fusion", self.fusion.to_string()),
            ("attention", attention_str(self.attention).to_string()),
            ("transform", transform_str(self.transform).to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_answers", self.num_answers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Inverse of [`ModelConfig::to_pairs`]; missing keys keep their defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        let mut cfg = ModelConfig::default();
        let num = |k: &str, v: &str| v.parse::<usize>().map_err(|_| format!("{k}: invalid integer {v:?}"));
        let list = |k: &str, v: &str| v.split(',').map(|x| num(k, x.trim())).collect::<std::result::Result<Vec<_>, _>>();
        for (k, v) in pairs {
            match k.as_str() {
                "image_size" => cfg.image_size = num(k, v)?,
                "conv_channels" => cfg.image.channels = list(k, v)?,
                "conv_strides" => cfg.image.strides = list(k, v)?,
                "conv_kernel" => cfg.image.kernel = num(k, v)?,
                "embed_dim" => cfg.question.embed_dim = num(k, v)?,
                "hidden" => cfg.question.hidden = num(k, v)?,
                "max_tokens" => cfg.question.max_tokens = num(k, v)?,
                "classifier_hidden" => cfg.classifier_hidden = num(k, v)?,
                "fusion" => cfg.fusion = v.parse()?,
                "attention" => {
                    cfg.attention = match v.as_str() {
                        "cross" => AttentionMode::Cross,
                        "uniform" => AttentionMode::Uniform,
                        _ => return Err(format!("attention: unknown mode {v:?}")),
                    }
                }
                "transform" => {
                    cfg.transform = match v.as_str() {
                        "learned" => TransformMode::Learned,
                        "identity" => TransformMode::Identity,
                        _ => return Err(format!("transform: unknown mode {v:?}")),
                    }
                }
                "vocab_size" => cfg.vocab_size = num(k, v)?,
                "num_answers" => cfg.num_answers = num(k, v)?,
                _ => {}
            }
        }
        Ok(cfg)
    }
}

/// Fresh parameters for `cfg`, drawn from a generator seeded with `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.channels();
    let l = cfg.question.hidden;
    encoders::init_image_encoder(&mut store, &cfg.image, &mut rng);
    encoders::init_question_encoder(&mut store, cfg.vocab_size, &cfg.question, &mut rng);
    cga::init_cga(&mut store, c, l, &mut rng);
    cst::init_cst(&mut store, c);
    store.insert("fuse.vis.w", scaled_normal(&[l, 3 * c], 3 * c, 1.0, &mut rng));
    store.insert("fuse.vis.b", Tensor::zeros(&[l]));
    store.insert("fuse.lang.w", scaled_normal(&[l, l], l, 1.0, &mut rng));
    store.insert("fuse.lang.b", Tensor::zeros(&[l]));
    let d = cfg.fused_dim();
    let hdim = cfg.classifier_hidden;
    store.insert("head.fc1.w", he_normal(&[hdim, d], d, &mut rng));
    store.insert("head.fc1.b", Tensor::zeros(&[hdim]));
    store.insert("head.fc2.w", scaled_normal(&[cfg.num_answers, hdim], hdim, 1.0, &mut rng));
    store.insert("head.fc2.b", Tensor::zeros(&[cfg.num_answers]));
    Ok(store)
}

/// Inputs for one forward pass. Several samples may share an image.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[U, 3, H, W]` distinct images.
    pub images: Tensor,
    /// Row of `images` used by each sample.
    pub image_of: Vec<usize>,
    pub questions: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[N, num_answers]`.
    pub logits: Var,
    pub features: Var,
    pub language: Var,
    pub attention: Attended,
    pub transform: CstOutput,
}

pub fn forward(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, batch: &Batch) -> Result<Forward> {
    let images = tape.constant(batch.images.clone())?;
    let unique = encoders::encode_image(tape, p, images, &cfg.image)?;
    let features = if batch.image_of.iter().enumerate().all(|(i, &j)| i == j) && batch.image_of.len() == batch.images.shape()[0] {
        unique
    } else {
        tape.gather(unique, &batch.image_of)?
    };
    let language = encoders::encode_questions(tape, p, &batch.questions, &cfg.question)?;
    let (proj, attention) = cga::cga_forward(tape, p, features, language, cfg.attention)?;
    let transform = cst::cst_forward(tape, p, &proj, features, cfg.transform)?;

    let h = tape.global_avg_pool(attention.output)?;
    let s1 = tape.global_avg_pool(transform.e1)?;
    let s2 = tape.global_avg_pool(transform.e2)?;
    let pooled = tape.concat(&[h, s1, s2], 1)?;
    // unit direction rescaled to norm sqrt(dim), so the projection input keeps
    // a fixed scale however large the encoder features grow
    let dim = tape.shape(pooled)?[1] as f64;
    let pooled = tape.l2_normalize(pooled, 1, NORM_EPS)?;
    let pooled = tape.scale_shift(pooled, dim.sqrt(), 0.0)?;
    let vis_pre = tape.linear(pooled, p.var("fuse.vis.w")?, Some(p.var("fuse.vis.b")?))?;
    let vis = tape.tanh(vis_pre)?;
    let lang_pre = tape.linear(language, p.var("fuse.lang.w")?, Some(p.var("fuse.lang.b")?))?;
    let lang = tape.tanh(lang_pre)?;
    let fused = match cfg.fusion {
        Fusion::Product => tape.mul(vis, lang)?,
        Fusion::Sum => tape.add(vis, lang)?,
        Fusion::Concat => tape.concat(&[vis, lang], 1)?,
    };
    let hidden_pre = tape.linear(fused, p.var("head.fc1.w")?, Some(p.var("head.fc1.b")?))?;
    let hidden = tape.relu(hidden_pre)?;
    let logits = tape.linear(hidden, p.var("head.fc2.w")?, Some(p.var("head.fc2.b")?))?;
    Ok(Forward { logits, features, language, attention, transform })
}

/// Per-sample cross-entropy `[N]` of `logits` against `labels`.
pub fn sample_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One triplet in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: usize,
    pub scene_id: usize,
    /// Index into [`EncodedSplit::images`].
    pub image: usize,
    pub tokens: Vec<usize>,
    /// Token count before truncation.
    pub length: usize,
    pub label: usize,
    pub qtype: QuestionType,
}

/// Triplets of one split with their images converted to `[3, H, W]` arrays.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub images: Vec<Vec<f64>>,
    pub image_shape: [usize; 3],
    pub samples: Vec<EncodedSample>,
}

impl EncodedSplit {
    pub fn encode(data: &Dataset, split: Split, vocab: &Vocabulary, answers: &AnswerSet, max_tokens: usize) -> Result<Self> {
        let mut image_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut image_shape = [3, 0, 0];
        let mut samples = Vec::new();
        for t in data.triplets_in(split) {
            let image = match image_index.get(t.image.as_str()) {
                Some(&i) => i,
                None => {
                    let img = data.images.get(&t.image).ok_or_else(|| ModelError::MissingImage { id: t.id, image: t.image.clone() })?;
                    let tensor = images_to_tensor(&[img])?;
                    image_shape = [3, img.height(), img.width()];
                    images.push(tensor.into_data());
                    image_index.insert(t.image.as_str(), images.len() - 1);
                    images.len() - 1
                }
            };
            let words = tokenize(&t.question).map_err(|source| ModelError::Question { id: t.id, source })?;
            let label = answers.label(&t.answer).ok_or_else(|| ModelError::UnknownAnswer { id: t.id, answer: t.answer.clone() })?;
            samples.push(EncodedSample {
                id: t.id,
                scene_id: t.scene_id,
                image,
                tokens: vocab.encode(&words, max_tokens),
                length: words.len(),
                label,
                qtype: t.qtype,
            });
        }
        Ok(EncodedSplit { images, image_shape, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Builds the forward-pass inputs for `indices`, encoding each distinct image once.
    pub fn batch(&self, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
        let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order = Vec::new();
        let mut image_of = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.samples[i].image;
            let next = order.len();
            let s = *slot.entry(img).or_insert_with(|| {
                order.push(img);
                next
            });
            image_of.push(s);
        }
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(order.len() * c * h * w);
        for &img in &order {
            data.extend_from_slice(&self.images[img]);
        }
        let images = Tensor::new(vec![order.len(), c, h, w], data)?;
        let questions = indices.iter().map(|&i| self.samples[i].tokens.clone()).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Batch { images, image_of, questions }, labels))
    }
}

/// Builds the question vocabulary from the training split.
pub fn build_vocabulary(data: &Dataset) -> Result<Vocabulary> {
    let mut corpus = Vec::new();
    for t in data.triplets_in(Split::Train) {
        corpus.push(tokenize(&t.question).map_err(|source| ModelError::Question { id: t.id, source })?);
    }
    Ok(Vocabulary::build(corpus.iter().map(Vec::as_slice)))
}

/// Parameters together with everything needed to interpret them.
#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub answers: AnswerSet,
}

impl VqaModel {
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, answers: AnswerSet, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.num_answers = answers.len();
        let params = init_params(&config, seed)?;
        Ok(VqaModel { config, params, vocab, answers })
    }

    /// Logits `[N, num_answers]` for `indices` of `split`, without recording gradients.
    pub fn logits(&self, split: &EncodedSplit, indices: &[usize]) -> Result<Tensor> {
        let (batch, _) = split.batch(indices)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let out = forward(&mut tape, &p, &self.config, &batch)?;
        Ok(tape.value(out.logits)?.clone())
    }

    /// Argmax predictions over the whole split, in sample order.
    pub fn predict(&self, split: &EncodedSplit) -> Result<Vec<usize>> {
        const CHUNK: usize = 128;
        let all: Vec<usize> = (0..split.len()).collect();
        let mut preds = Vec::with_capacity(split.len());
        for chunk in all.chunks(CHUNK) {
            preds.extend(argmax_rows(&self.logits(split, chunk)?));
        }
        Ok(preds)
    }

    pub fn evaluate(&self, split: &EncodedSplit) -> Result<MetricsReport> {
        if split.is_empty() {
            return Err(ModelError::EmptySplit("evaluation"));
        }
        let preds = self.predict(split)?;
        let outcomes = split.samples.iter().zip(&preds).map(|(s, &p)| (s.qtype, p == s.label));
        Ok(MetricsReport::from_outcomes(outcomes))
    }
}
