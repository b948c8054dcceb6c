//! Training protocol: seeded runs, minibatch Adam, best-on-dev selection.

mod loss;
mod optim;

pub use loss::{
    aux_combined_loss, argmax, batch_objective, main_loss, sample_objective, MainLoss, ObjectiveConfig,
    SampleObjective,
};
pub use optim::{Adam, AdamConfig};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{encode_all, DatasetSplits, EncodedSample, Vocabulary, PAD_ID};
use crate::diffgraph::{Gradients, Tape};
use crate::lexicon::SentimentLexicon;
use crate::model::{KesaModel, ModelConfig, ModelError};
use crate::rng;
use crate::tasks::{build_csp_instance, build_swc_instances, AuxInstances, CombinationMode, TaskError};

/// γ values swept by default.
pub const DEFAULT_GAMMAS: [f64; 4] = [0.01, 0.1, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    #[serde(alias = "SWC")]
    Swc,
    #[serde(alias = "CSP")]
    Csp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub mode: CombinationMode,
    #[serde(alias = "tasks")]
    pub tasks_enabled: Vec<AuxTask>,
    /// Impostor candidates per cloze instance.
    #[serde(alias = "K")]
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    #[serde(alias = "d")]
    pub dim: usize,
    pub max_len: usize,
    pub min_freq: usize,
    pub optimizer: AdamConfig,
    /// Test hook: accept γ = 0.
    #[serde(skip)]
    pub allow_zero_gamma: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            mode: CombinationMode::Joint,
            tasks_enabled: vec![AuxTask::Swc, AuxTask::Csp],
            k: 1,
            batch_size: 32,
            epochs: 3,
            seeds: vec![1, 2, 3, 4],
            dim: 64,
            max_len: 128,
            min_freq: 1,
            optimizer: AdamConfig::default(),
            allow_zero_gamma: false,
        }
    }
}

impl TrainingConfig {
    pub fn has(&self, task: AuxTask) -> bool {
        self.tasks_enabled.contains(&task)
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            gamma: self.gamma,
            mode: self.mode,
            swc: self.has(AuxTask::Swc),
            csp: self.has(AuxTask::Csp),
        }
    }

    /// Checks every field; the error names the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, reason: String| Err(ConfigError { field, reason });
        let gamma_ok = self.gamma.is_finite()
            && self.gamma <= 1.0
            && (self.gamma > 0.0 || (self.gamma == 0.0 && self.allow_zero_gamma));
        if !gamma_ok {
            return bad("gamma", format!("must lie in (0, 1], got {}", self.gamma));
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        if self.dim == 0 {
            return bad("dim", "must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len", "must be positive".into());
        }
        if self.min_freq == 0 {
            return bad("min_freq", "must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate", format!("must be positive, got {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer", "betas must lie in [0, 1)".into());
        }
        if o.epsilon.is_nan() || o.epsilon <= 0.0 {
            return bad("optimizer.epsilon", "must be positive".into());
        }
        let mut tasks = self.tasks_enabled.clone();
        tasks.sort();
        tasks.dedup();
        if tasks.len() != self.tasks_enabled.len() {
            return bad("tasks_enabled", "duplicate task".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{field}: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("seed {seed}, epoch {epoch}: training diverged ({detail})")]
    Divergence { seed: u64, epoch: usize, detail: String },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One line of the metrics log. Wall time is kept out of the serialized
/// form so that repeated runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub main_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aux_loss: Option<f64>,
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub summary: bool,
    pub gamma: f64,
    pub mode: CombinationMode,
    pub tasks_enabled: Vec<AuxTask>,
    pub seeds: Vec<u64>,
    pub test_accuracy: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub test_accuracy: f64,
    pub metrics: Vec<MetricsRecord>,
    pub model: KesaModel,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub vocab: Vocabulary,
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

impl TrainOutcome {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.runs.iter().flat_map(|r| r.metrics.iter())
    }
}

/// Hooks invoked while training runs.
pub trait TrainObserver {
    fn on_record(&mut self, _record: &MetricsRecord) {}
    fn on_instances(&mut self, _seed: u64, _epoch: usize, _sample: usize, _instances: &AuxInstances) {}
}

impl TrainObserver for () {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub main_loss: f64,
}

/// Accuracy of the main head. Auxiliary parameters are never read.
pub fn evaluate(model: &KesaModel, samples: &[EncodedSample]) -> Result<EvalResult, ModelError> {
    if samples.is_empty() {
        return Ok(EvalResult {
            accuracy: 0.0,
            main_loss: 0.0,
        });
    }
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let p = model.predict(&s.ids, s.len)?;
            Ok((argmax(&p) == s.label, main_loss(&p, s.label).value))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let correct = per_sample.iter().filter(|(c, _)| *c).count();
    let loss: f64 = per_sample.iter().map(|(_, l)| l).sum();
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        main_loss: loss / samples.len() as f64,
    })
}

/// Lexicon words usable as auxiliary candidates: those with their own
/// embedding row.
pub fn restrict_lexicon(lexicon: &SentimentLexicon, vocab: &Vocabulary) -> SentimentLexicon {
    lexicon.retain(|w| vocab.known_id(w).is_some())
}

pub struct PreparedData {
    pub vocab: Vocabulary,
    pub lexicon: SentimentLexicon,
    pub classes: usize,
    pub train: Vec<EncodedSample>,
    pub valid: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

impl PreparedData {
    pub fn new(config: &TrainingConfig, splits: &DatasetSplits, lexicon: &SentimentLexicon) -> Self {
        let vocab = Vocabulary::build(&splits.train, config.min_freq);
        let lexicon = restrict_lexicon(lexicon, &vocab);
        Self {
            train: encode_all(&splits.train, &vocab, config.max_len),
            valid: encode_all(&splits.valid, &vocab, config.max_len),
            test: encode_all(&splits.test, &vocab, config.max_len),
            classes: splits.class_count,
            vocab,
            lexicon,
        }
    }

    pub fn model_config(&self, config: &TrainingConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            dim: config.dim,
            classes: self.classes,
        }
    }
}

pub fn train(
    config: &TrainingConfig,
    splits: &DatasetSplits,
    lexicon: &SentimentLexicon,
) -> Result<TrainOutcome, TrainError> {
    train_with_observer(config, splits, lexicon, &mut ())
}

pub fn train_with_observer(
    config: &TrainingConfig,
    splits: &DatasetSplits,
    lexicon: &SentimentLexicon,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    for (name, split) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        if split.is_empty() {
            return Err(TrainError::EmptySplit(name));
        }
    }
    let data = PreparedData::new(config, splits, lexicon);
    log::info!(
        "vocabulary {} tokens, {} usable lexicon words, {} classes",
        data.vocab.len(),
        data.lexicon.len(),
        data.classes
    );
    let runs = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, &data, seed, observer))
        .collect::<Result<Vec<_>, _>>()?;
    let test_accuracy: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, stddev) = mean_std(&test_accuracy);
    Ok(TrainOutcome {
        vocab: data.vocab,
        summary: RunSummary {
            summary: true,
            gamma: config.gamma,
            mode: config.mode,
            tasks_enabled: config.tasks_enabled.clone(),
            seeds: config.seeds.clone(),
            test_accuracy,
            mean,
            stddev,
        },
        runs,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Streams {
    shuffle: ChaCha8Rng,
    swc_positive: ChaCha8Rng,
    swc_negative: ChaCha8Rng,
    csp: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            shuffle: rng::substream(seed, rng::SHUFFLE),
            swc_positive: rng::substream(seed, rng::SWC_POSITIVE),
            swc_negative: rng::substream(seed, rng::SWC_NEGATIVE),
            csp: rng::substream(seed, rng::CSP),
        }
    }
}

fn draw_instances(
    config: &TrainingConfig,
    data: &PreparedData,
    sample: &EncodedSample,
    streams: &mut Streams,
) -> AuxInstances {
    let mut out = AuxInstances::default();
    if config.has(AuxTask::Swc) {
        out.swc = build_swc_instances(
            sample,
            &data.lexicon,
            &data.vocab,
            config.k,
            &mut streams.swc_positive,
            &mut streams.swc_negative,
        );
    }
    if config.has(AuxTask::Csp) {
        out.csp = build_csp_instance(sample, &data.lexicon, &data.vocab, &mut streams.csp);
    }
    out
}

struct StepStats {
    main: f64,
    aux: Option<f64>,
    correct: bool,
}

fn sample_step(
    model: &KesaModel,
    sample: &EncodedSample,
    instances: &AuxInstances,
    objective: &ObjectiveConfig,
) -> Result<(StepStats, Gradients), TaskError> {
    let mut grads = Gradients::for_store(model.params());
    let mut tape = Tape::new(model.params());
    let out = sample_objective(&mut tape, model, sample, instances, objective)?;
    let stats = StepStats {
        main: tape.scalar(out.main),
        aux: out.aux.map(|a| tape.scalar(a)),
        correct: out.predicted == sample.label,
    };
    tape.backward(out.total, &mut grads).map_err(ModelError::from)?;
    Ok((stats, grads))
}

/// Trains one seed and returns its best-on-dev model.
pub fn run_seed(
    config: &TrainingConfig,
    data: &PreparedData,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<SeedRun, TrainError> {
    let started = Instant::now();
    let mut model = KesaModel::init(data.model_config(config), &mut rng::substream(seed, rng::INIT));
    let embedding = model.ids().embedding;
    let mut adam = Adam::new(config.optimizer, model.params()).freeze_row(embedding, PAD_ID);
    let mut streams = Streams::new(seed);
    let objective = config.objective();
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, KesaModel)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut streams.shuffle);
        let (mut main_sum, mut aux_sum, mut aux_count, mut correct) = (0.0, 0.0, 0usize, 0usize);

        for batch in order.chunks(config.batch_size) {
            let instances: Vec<AuxInstances> = batch
                .iter()
                .map(|&i| {
                    let inst = draw_instances(config, data, &data.train[i], &mut streams);
                    observer.on_instances(seed, epoch, i, &inst);
                    inst
                })
                .collect();
            let results = batch
                .par_iter()
                .zip(instances.par_iter())
                .map(|(&i, inst)| sample_step(&model, &data.train[i], inst, &objective))
                .collect::<Result<Vec<_>, _>>()?;

            let mut grads = Gradients::for_store(model.params());
            for (stats, g) in &results {
                if !stats.main.is_finite() || stats.aux.is_some_and(|a| !a.is_finite()) {
                    return Err(TrainError::Divergence {
                        seed,
                        epoch,
                        detail: "non-finite loss".into(),
                    });
                }
                main_sum += stats.main;
                if let Some(a) = stats.aux {
                    aux_sum += a;
                    aux_count += 1;
                }
                correct += stats.correct as usize;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::Divergence {
                    seed,
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(model.params_mut(), &grads);
        }

        let n = data.train.len() as f64;
        let train_record = MetricsRecord {
            seed,
            epoch,
            split: Split::Train,
            accuracy: correct as f64 / n,
            main_loss: main_sum / n,
            aux_loss: (aux_count > 0).then(|| aux_sum / aux_count as f64),
            wall_time: started.elapsed().as_secs_f64(),
        };
        let dev = evaluate(&model, &data.valid)?;
        let valid_record = MetricsRecord {
            seed,
            epoch,
            split: Split::Valid,
            accuracy: dev.accuracy,
            main_loss: dev.main_loss,
            aux_loss: None,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "seed {seed} epoch {epoch}: train acc {:.4} loss {:.4} aux {:?}, dev acc {:.4} ({:.1}s)",
            train_record.accuracy,
            train_record.main_loss,
            train_record.aux_loss,
            dev.accuracy,
            valid_record.wall_time
        );
        for r in [train_record, valid_record] {
            observer.on_record(&r);
            metrics.push(r);
        }
        if best.as_ref().is_none_or(|(_, acc, _)| dev.accuracy > *acc) {
            best = Some((epoch, dev.accuracy, model.clone()));
        }
    }

    let (best_epoch, best_valid_accuracy, best_model) = best.expect("at least one epoch");
    let test = evaluate(&best_model, &data.test)?;
    let test_record = MetricsRecord {
        seed,
        epoch: best_epoch,
        split: Split::Test,
        accuracy: test.accuracy,
        main_loss: test.main_loss,
        aux_loss: None,
        wall_time: started.elapsed().as_secs_f64(),
    };
    observer.on_record(&test_record);
    metrics.push(test_record);
    Ok(SeedRun {
        seed,
        best_epoch,
        best_valid_accuracy,
        test_accuracy: test.accuracy,
        metrics,
        model: best_model,
    })
}
