//! Synthetic grid-world scenes, rendered images, and template questions whose
//! answers follow exactly from scene metadata.

mod io;
mod questions;
mod scene;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{ImageError, RgbImage};

pub use io::{read_dataset, write_dataset};
pub use questions::{answer_for, instantiate_questions, Question, Subject, ANSWERS};
pub use scene::{generate_scene, render, Category, Scene, SceneConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{file}:{line}: malformed line: {reason}")]
    MalformedLine { file: String, line: usize, reason: String },
    #[error("triplet {id}: image {path:?} is missing")]
    MissingImage { id: usize, path: String },
    #[error("{path}: {source}")]
    Image { path: String, source: ImageError },
    #[error("{path}: checksum mismatch")]
    ChecksumMismatch { path: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionType {
    RuralUrban,
    Presence,
    Comparison,
    Area,
    Count,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::RuralUrban,
        QuestionType::Presence,
        QuestionType::Comparison,
        QuestionType::Area,
        QuestionType::Count,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::RuralUrban => "rural_urban",
            QuestionType::Presence => "presence",
            QuestionType::Comparison => "comparison",
            QuestionType::Area => "area",
            QuestionType::Count => "count",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        QuestionType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown question type {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// One image-question-answer sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub id: usize,
    /// Image path relative to the dataset root.
    pub image: String,
    pub question: String,
    pub answer: String,
    pub qtype: QuestionType,
    pub scene_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub images: BTreeMap<String, RgbImage>,
    pub triplets: Vec<Triplet>,
    /// Split of each scene, keyed by scene id.
    pub splits: BTreeMap<usize, Split>,
}

impl Dataset {
    pub fn split_of(&self, triplet: &Triplet) -> Option<Split> {
        self.splits.get(&triplet.scene_id).copied()
    }

    pub fn triplets_in(&self, split: Split) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter().filter(move |t| self.split_of(t) == Some(split))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub scenes: usize,
    pub scene: SceneConfig,
    pub image_size: usize,
    /// Uniform pixel noise amplitude, in 0..=255 units.
    pub noise: u8,
    /// Questions per type and scene, indexed by [`QuestionType::index`].
    pub per_type_counts: [usize; 5],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scenes: 600,
            scene: SceneConfig::default(),
            image_size: 64,
            noise: 8,
            per_type_counts: [1, 2, 1, 1, 1],
            seed: 7,
        }
    }
}

pub fn image_path(scene_id: usize) -> String {
    format!("images/{scene_id:05}.ppm")
}

/// Assigns scenes to train/val/test in 80/10/10 proportions by a seeded shuffle.
pub fn assign_splits(scene_ids: &[usize], seed: u64) -> BTreeMap<usize, Split> {
    let mut order = scene_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5B1_175));
    let n = order.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    order
        .into_iter()
        .enumerate()
        .map(|(rank, id)| {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect()
}

/// Runs the full generation pipeline: scenes, images, questions, and splits.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.scenes == 0 {
        return Err(DataError::InvalidConfig("empty dataset: --scenes must be at least 1".into()));
    }
    if cfg.per_type_counts.iter().sum::<usize>() == 0 {
        return Err(DataError::InvalidConfig("no questions requested per scene".into()));
    }
    cfg.scene.validate()?;
    if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(cfg.scene.grid) {
        return Err(DataError::InvalidConfig(format!("image size {} is not divisible by grid {}", cfg.image_size, cfg.scene.grid)));
    }
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut images = BTreeMap::new();
    let mut triplets = Vec::new();
    for index in 0..cfg.scenes {
        let scene = generate_scene(cfg.seed, index, &cfg.scene)?;
        let path = image_path(scene.id);
        images.insert(path.clone(), render(&scene, cfg.image_size, cfg.seed, cfg.noise)?);
        for q in instantiate_questions(&scene, &cfg.per_type_counts, cfg.seed) {
            triplets.push(Triplet {
                id: triplets.len(),
                image: path.clone(),
                question: q.text,
                answer: q.answer.to_string(),
                qtype: q.qtype,
                scene_id: scene.id,
            });
        }
        scenes.push(scene);
    }
    let ids: Vec<usize> = scenes.iter().map(|s| s.id).collect();
    let splits = assign_splits(&ids, cfg.seed);
    Ok(Dataset { scenes, images, triplets, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn splits_are_80_10_10_and_disjoint() {
        let ids: Vec<usize> = (0..600).collect();
        let s = assign_splits(&ids, 7);
        let count = |x| s.values().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (480, 60, 60));
        assert_eq!(s.len(), 600);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = GeneratorConfig { scenes: 0, ..Default::default() };
        assert!(matches!(generate(&cfg), Err(DataError::InvalidConfig(_))));
    }

    #[test]
    fn default_answer_classes_are_not_degenerate() {
        let cfg = GeneratorConfig { scenes: 600, ..Default::default() };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.triplets.len(), 3600);
        let mut by_type: HashMap<QuestionType, HashMap<&str, usize>> = HashMap::new();
        for t in &data.triplets {
            *by_type.entry(t.qtype).or_default().entry(t.answer.as_str()).or_default() += 1;
        }
        for (qtype, hist) in &by_type {
            let total: usize = hist.values().sum();
            let max = *hist.values().max().unwrap();
            assert!((max as f64) / (total as f64) <= 0.9, "{qtype}: {hist:?}");
            assert!(hist.len() >= 2, "{qtype}: {hist:?}");
        }
        // every answer label used by the generator is in the fixed answer set
        let labels: HashSet<&str> = ANSWERS.iter().copied().collect();
        assert!(data.triplets.iter().all(|t| labels.contains(t.answer.as_str())));
    }

    #[test]
    fn each_scene_gets_every_type() {
        let cfg = GeneratorConfig { scenes: 20, ..Default::default() };
        let data = generate(&cfg).unwrap();
        for scene in &data.scenes {
            let types: HashSet<QuestionType> = data.triplets.iter().filter(|t| t.scene_id == scene.id).map(|t| t.qtype).collect();
            assert_eq!(types.len(), 5);
        }
    }
}
