//! Language-guided multi-level visual features for visual question answering,
//! trained with self-paced curriculum learning, on a synthetic scene corpus.
//!
//! The crate is organised bottom-up: [`autodiff`] provides the tensor engine,
//! [`encoders`], [`cga`], and [`cst`] the model components, [`model`] the full
//! classifier, [`spcl`] and [`train`] the training schedule, and [`synthdata`]
//! the data generator.

pub mod autodiff;
pub mod cga;
pub mod checks;
pub mod cst;
pub mod encoders;
pub mod image;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spcl;
pub mod synthdata;
pub mod train;

pub use autodiff::{ParamStore, Tape, Tensor, Var};
pub use cga::AttentionMode;
pub use cst::{AffineParams, TransformMode};
pub use encoders::Vocabulary;
pub use model::{AnswerSet, EncodedSplit, Fusion, MetricsReport, ModelConfig, VqaModel};
pub use optim::OptimizerKind;
pub use spcl::{CurriculumPrior, PaceState, Phase, SpclConfig, Strategy};
pub use synthdata::{Dataset, GeneratorConfig, QuestionType, Split, Triplet};
pub use train::{TrainConfig, TraceRow, TrainOutcome};
