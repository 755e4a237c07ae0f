//! Convolutional image encoder and gated recurrent question encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Result, Tape, Tensor, Var};
use crate::image::RgbImage;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("empty question")]
pub struct EmptyQuestion;

/// Lowercases, strips punctuation, and splits on whitespace.
pub fn tokenize(question: &str) -> std::result::Result<Vec<String>, EmptyQuestion> {
    let cleaned: String = question
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(EmptyQuestion);
    }
    Ok(tokens)
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Token to index map with `<pad>` at 0 and `<unk>` at 1; corpus tokens follow in
/// lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let sorted: BTreeSet<&str> = corpus.into_iter().flatten().map(String::as_str).collect();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(sorted.into_iter().filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN).map(str::to_string));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Maps tokens to indices, truncating to `max_tokens` with a warning.
    pub fn encode(&self, tokens: &[String], max_tokens: usize) -> Vec<usize> {
        if tokens.len() > max_tokens {
            log::warn!("question has {} tokens; truncating to {max_tokens}", tokens.len());
        }
        tokens.iter().take(max_tokens).map(|t| self.index_of(t)).collect()
    }

    /// `token<TAB>index` lines in index order, which is also sorted order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}").unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> std::result::Result<Self, VocabError> {
        let mut tokens = Vec::new();
        for (line, row) in text.lines().enumerate().filter(|(_, r)| !r.is_empty()) {
            let bad = |reason: String| VocabError::Malformed { line: line + 1, reason };
            let (token, index) = row.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let index: usize = index.parse().map_err(|_| bad(format!("invalid index {index:?}")))?;
            if index != tokens.len() {
                return Err(bad(format!("index {index} out of sequence, expected {}", tokens.len())));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(VocabError::Malformed { line: 1, reason: "reserved tokens <pad> and <unk> must come first".into() });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Stacks images into `[N, 3, H, W]` with channel values scaled to [0, 1].
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(AutodiffError::InvalidArgument("no images to stack".into()));
    };
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(AutodiffError::ShapeMismatch {
                op: "images_to_tensor",
                detail: format!("image {n} is {}x{}, expected {w}x{h}", img.width(), img.height()),
            });
        }
        let base = n * 3 * plane;
        for (p, px) in img.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = px[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig { channels: vec![16, 32, 64, 64], strides: vec![2, 2, 2, 1], kernel: 3 }
    }
}

impl ImageEncoderConfig {
    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    pub fn feature_size(&self, image_size: usize) -> usize {
        image_size / self.downsampling()
    }
}

pub(crate) fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

pub(crate) fn scaled_normal<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, gain * (1.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

pub fn init_image_encoder<R: Rng>(store: &mut ParamStore, cfg: &ImageEncoderConfig, rng: &mut R) {
    let mut cin = 3;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let k = cfg.kernel;
        store.insert(format!("enc.conv{i}.w"), he_normal(&[cout, cin, k, k], cin * k * k, rng));
        store.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[cout]));
        cin = cout;
    }
}

/// Conv + ReLU blocks mapping `[N, 3, H, W]` to `[N, C, H/f, W/f]`.
pub fn encode_image(tape: &mut Tape, p: &BoundParams, images: Var, cfg: &ImageEncoderConfig) -> Result<Var> {
    let shape = tape.shape(images)?.to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(AutodiffError::ShapeMismatch { op: "encode_image", detail: format!("expected [N, 3, H, W], got {shape:?}") });
    }
    let f = cfg.downsampling();
    if shape[2] % f != 0 || shape[3] % f != 0 {
        return Err(AutodiffError::ShapeMismatch {
            op: "encode_image",
            detail: format!("{}x{} is not divisible by the downsampling factor {f}", shape[3], shape[2]),
        });
    }
    let mut x = images;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let w = p.var(&format!("enc.conv{i}.w"))?;
        let b = p.var(&format!("enc.conv{i}.b"))?;
        let y = tape.conv2d(x, w, Some(b), stride, cfg.kernel / 2)?;
        x = tape.relu(y)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_tokens: usize,
}

impl Default for QuestionEncoderConfig {
    fn default() -> Self {
        QuestionEncoderConfig { embed_dim: 32, hidden: 128, max_tokens: 20 }
    }
}

pub fn init_question_encoder<R: Rng>(store: &mut ParamStore, vocab_size: usize, cfg: &QuestionEncoderConfig, rng: &mut R) {
    let (e, l) = (cfg.embed_dim, cfg.hidden);
    let mut embed = scaled_normal(&[vocab_size, e], 1, 1.0, rng);
    embed.data_mut()[PAD * e..(PAD + 1) * e].fill(0.0);
    store.insert("q.embed", embed);
    let bound = 1.0 / (l as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound).expect("valid range");
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| uniform.sample(rng)).collect()).expect("shape matches")
    };
    store.insert("q.gru.w_ih", draw(&[3 * l, e]));
    store.insert("q.gru.w_hh", draw(&[3 * l, l]));
    store.insert("q.gru.b_ih", draw(&[3 * l]));
    store.insert("q.gru.b_hh", draw(&[3 * l]));
}

/// Runs a single-layer GRU over each token sequence and returns the final hidden
/// states `[N, L]`. Sequences may differ in length; finished ones hold their state.
pub fn encode_questions(tape: &mut Tape, p: &BoundParams, questions: &[Vec<usize>], cfg: &QuestionEncoderConfig) -> Result<Var> {
    let n = questions.len();
    if n == 0 || questions.iter().any(Vec::is_empty) {
        return Err(AutodiffError::InvalidArgument("question encoder needs non-empty token lists".into()));
    }
    let l = cfg.hidden;
    let steps = questions.iter().map(Vec::len).max().unwrap_or(0);
    // time-major token table so each step is a contiguous row block
    let mut ids = Vec::with_capacity(steps * n);
    for t in 0..steps {
        ids.extend(questions.iter().map(|q| q.get(t).copied().unwrap_or(PAD)));
    }
    let embed = p.var("q.embed")?;
    let x = tape.gather(embed, &ids)?;
    let gates_in = tape.linear(x, p.var("q.gru.w_ih")?, Some(p.var("q.gru.b_ih")?))?;
    let w_hh = p.var("q.gru.w_hh")?;
    let b_hh = p.var("q.gru.b_hh")?;

    let mut h = tape.constant(Tensor::zeros(&[n, l]))?;
    for t in 0..steps {
        let gi = tape.slice(gates_in, 0, t * n, n)?;
        let gh = tape.linear(h, w_hh, Some(b_hh))?;
        let (ir, iz, inn) = (tape.slice(gi, 1, 0, l)?, tape.slice(gi, 1, l, l)?, tape.slice(gi, 1, 2 * l, l)?);
        let (hr, hz, hn) = (tape.slice(gh, 1, 0, l)?, tape.slice(gh, 1, l, l)?, tape.slice(gh, 1, 2 * l, l)?);
        let r_pre = tape.add(ir, hr)?;
        let r = tape.sigmoid(r_pre)?;
        let z_pre = tape.add(iz, hz)?;
        let z = tape.sigmoid(z_pre)?;
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(inn, gated)?;
        let cand = tape.tanh(n_pre)?;
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        let next = tape.add(cand, keep)?;
        if questions.iter().all(|q| q.len() > t) {
            h = next;
        } else {
            let mut mask = Vec::with_capacity(n * l);
            for q in questions {
                mask.extend(std::iter::repeat_n(if q.len() > t { 1.0 } else { 0.0 }, l));
            }
            let mask = tape.constant(Tensor::new(vec![n, l], mask)?)?;
            let step = tape.sub(next, h)?;
            let masked = tape.mul(mask, step)?;
            h = tape.add(h, masked)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Is a road present?").unwrap(), ["is", "a", "road", "present"]);
        assert_eq!(tokenize("Is it a rural or an urban area?").unwrap().len(), 8);
        assert_eq!(tokenize("   "), Err(EmptyQuestion));
        assert_eq!(tokenize("?!"), Err(EmptyQuestion));
    }

    #[test]
    fn vocabulary_is_sorted_and_round_trips() {
        let q1 = tokenize("Is a road present?").unwrap();
        let q2 = tokenize("How many roads are there?").unwrap();
        let v = Vocabulary::build([q1.as_slice(), q2.as_slice()]);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(1), Some("<unk>"));
        assert_eq!(v.token(2), Some("a"));
        assert_eq!(v.index_of("zebra"), UNK);
        let tokens: Vec<&str> = (2..v.len()).map(|i| v.token(i).unwrap()).collect();
        let mut sorted = tokens.clone();
        sorted.sort();
        assert_eq!(tokens, sorted);
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
    }

    #[test]
    fn encode_truncates_long_questions() {
        let v = Vocabulary::build(std::iter::empty());
        let long: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        assert_eq!(v.encode(&long, 20).len(), 20);
    }
}
