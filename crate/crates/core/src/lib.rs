//! Knowledge-enhanced sentiment training at desk scale: a sentiment lexicon
//! compiled from SentiWordNet, two auxiliary objectives (sentiment word cloze
//! and conditional sentiment prediction) on top of a compact sentence
//! encoder, and a small reverse-mode differentiation engine to train it.

pub mod corpus;
pub mod diffgraph;
pub mod lexicon;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tasks;
pub mod trainer;

pub use corpus::{DatasetSplits, EncodedSample, LabeledSentence, Vocabulary};
pub use lexicon::{Polarity, SentimentLexicon};
pub use model::{Checkpoint, KesaModel, ModelConfig};
pub use tasks::CombinationMode;
pub use trainer::{AuxTask, MetricsRecord, RunSummary, TrainError, TrainOutcome, TrainingConfig};
