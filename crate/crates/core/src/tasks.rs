//! Auxiliary training instances and label-combination losses.
//!
//! Both auxiliary heads emit logits over a two-label grid. In `joint` mode
//! the grid is one flat label space; in `conditional` mode the row picked by
//! a known prior label is cut out and normalized on its own.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedSample, Vocabulary};
use crate::diffgraph::{softmax, GraphError, Tape, Var};
use crate::lexicon::{Polarity, SentimentLexicon};
use crate::model::{KesaModel, ModelError, ASCRIPTION_LABELS, POLARITY_LABELS};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("label {value} out of range for extent {extent}")]
    OutOfRange { value: usize, extent: usize },
    #[error("logits have length {got}, grid needs {expected}")]
    GridSize { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CombinationMode {
    #[default]
    Joint,
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SwcInstance {
    pub word: String,
    pub word_id: usize,
    pub word_polarity: Polarity,
    /// Whether the candidate word occurs in the sentence.
    pub ascription: bool,
    pub sentence_label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CspInstance {
    pub word: String,
    pub word_id: usize,
    pub word_polarity: Polarity,
    pub sentence_label: usize,
}

/// Auxiliary instances drawn for one sample in one epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuxInstances {
    /// Ground-truth candidate first, then the sampled impostors.
    pub swc: Vec<SwcInstance>,
    pub csp: Option<CspInstance>,
}

impl AuxInstances {
    pub fn is_empty(&self) -> bool {
        self.swc.is_empty() && self.csp.is_none()
    }
}

/// One in-sentence candidate plus `k` impostors sampled from the lexicon.
/// Impostors never occur anywhere in the sentence and are pairwise distinct.
/// Empty if the sentence has no lexicon word or the lexicon runs out.
pub fn build_swc_instances<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    sample: &EncodedSample,
    lexicon: &SentimentLexicon,
    vocab: &Vocabulary,
    k: usize,
    positive_rng: &mut R1,
    negative_rng: &mut R2,
) -> Vec<SwcInstance> {
    assert!(k >= 1, "need at least one impostor");
    let found = lexicon.recognize(&sample.tokens);
    if found.is_empty() {
        return Vec::new();
    }
    let chosen = &found[positive_rng.gen_range(0..found.len())];
    let mut out = vec![SwcInstance {
        word: chosen.word.clone(),
        word_id: vocab.id(&chosen.word),
        word_polarity: chosen.polarity,
        ascription: true,
        sentence_label: sample.label,
    }];
    let mut excluded: HashSet<&str> = sample.tokens.iter().map(String::as_str).collect();
    for _ in 0..k {
        let Ok((word, polarity)) = lexicon.sample_negative(&excluded, negative_rng) else {
            return Vec::new();
        };
        excluded.insert(word);
        out.push(SwcInstance {
            word: word.to_string(),
            word_id: vocab.id(word),
            word_polarity: polarity,
            ascription: false,
            sentence_label: sample.label,
        });
    }
    out
}

/// A uniformly chosen in-sentence lexicon word with its polarity.
pub fn build_csp_instance<R: Rng + ?Sized>(
    sample: &EncodedSample,
    lexicon: &SentimentLexicon,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Option<CspInstance> {
    let found = lexicon.recognize(&sample.tokens);
    if found.is_empty() {
        return None;
    }
    let chosen = &found[rng.gen_range(0..found.len())];
    Some(CspInstance {
        word: chosen.word.clone(),
        word_id: vocab.id(&chosen.word),
        word_polarity: chosen.polarity,
        sentence_label: sample.label,
    })
}

/// Row-major product of two label alphabets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorAxis {
    Row,
    Column,
}

impl LabelGrid {
    /// Cloze grid: sentence label × ascription.
    pub fn swc(classes: usize) -> Self {
        Self {
            rows: classes,
            cols: ASCRIPTION_LABELS,
        }
    }

    /// Conditional-prediction grid: word polarity × sentence label.
    pub fn csp(classes: usize) -> Self {
        Self {
            rows: POLARITY_LABELS,
            cols: classes,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint_index(&self, row: usize, col: usize) -> Result<usize, TaskError> {
        check(row, self.rows)?;
        check(col, self.cols)?;
        Ok(row * self.cols + col)
    }

    pub fn joint_pair(&self, index: usize) -> Result<(usize, usize), TaskError> {
        check(index, self.len())?;
        Ok((index / self.cols, index % self.cols))
    }

    /// Flat indices whose `axis` coordinate equals `prior`, in order along
    /// the other axis.
    pub fn slice_indices(&self, axis: PriorAxis, prior: usize) -> Result<Vec<usize>, TaskError> {
        Ok(match axis {
            PriorAxis::Row => {
                check(prior, self.rows)?;
                (0..self.cols).map(|c| prior * self.cols + c).collect()
            }
            PriorAxis::Column => {
                check(prior, self.cols)?;
                (0..self.rows).map(|r| r * self.cols + prior).collect()
            }
        })
    }
}

fn check(value: usize, extent: usize) -> Result<(), TaskError> {
    if value < extent {
        Ok(())
    } else {
        Err(TaskError::OutOfRange { value, extent })
    }
}

/// Softmax over the logits selected by `prior` on `axis`.
pub fn conditional_probs(
    logits: &[f64],
    grid: LabelGrid,
    axis: PriorAxis,
    prior: usize,
) -> Result<Vec<f64>, TaskError> {
    if logits.len() != grid.len() {
        return Err(TaskError::GridSize {
            expected: grid.len(),
            got: logits.len(),
        });
    }
    let idx = grid.slice_indices(axis, prior)?;
    Ok(softmax(&idx.iter().map(|&i| logits[i]).collect::<Vec<_>>()))
}

/// Recorded version of [`conditional_probs`].
pub fn conditional_slice(
    tape: &mut Tape<'_>,
    logits: Var,
    grid: LabelGrid,
    axis: PriorAxis,
    prior: usize,
) -> Result<Var, TaskError> {
    let got = tape.value(logits).numel();
    if got != grid.len() {
        return Err(TaskError::GridSize {
            expected: grid.len(),
            got,
        });
    }
    let idx = grid.slice_indices(axis, prior)?;
    let sliced = tape.masked_slice(logits, &idx)?;
    Ok(tape.softmax(sliced)?)
}

/// Cross-entropy of one grid prediction. The target is `(row, col)`; in
/// conditional mode the row is the prior and the column is predicted.
pub fn grid_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    grid: LabelGrid,
    row: usize,
    col: usize,
    mode: CombinationMode,
) -> Result<Var, TaskError> {
    match mode {
        CombinationMode::Joint => {
            let target = grid.joint_index(row, col)?;
            let p = tape.softmax(logits)?;
            Ok(tape.cross_entropy(p, target)?)
        }
        CombinationMode::Conditional => {
            check(col, grid.cols)?;
            let p = conditional_slice(tape, logits, grid, PriorAxis::Row, row)?;
            Ok(tape.cross_entropy(p, col)?)
        }
    }
}

pub fn swc_instance_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    instance: &SwcInstance,
    classes: usize,
    mode: CombinationMode,
) -> Result<Var, TaskError> {
    grid_loss(
        tape,
        logits,
        LabelGrid::swc(classes),
        instance.sentence_label,
        instance.ascription as usize,
        mode,
    )
}

pub fn csp_instance_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    instance: &CspInstance,
    classes: usize,
    mode: CombinationMode,
) -> Result<Var, TaskError> {
    grid_loss(
        tape,
        logits,
        LabelGrid::csp(classes),
        instance.word_polarity.index(),
        instance.sentence_label,
        mode,
    )
}

pub struct SwcOutput {
    /// Mean loss over all candidates.
    pub loss: Var,
    /// Cloze logits of the in-sentence candidate.
    pub positive_logits: Var,
}

pub struct CspOutput {
    pub loss: Var,
    pub logits: Var,
}

/// Runs the cloze head on every candidate and averages their losses.
pub fn swc_task(
    tape: &mut Tape<'_>,
    model: &KesaModel,
    h: Var,
    instances: &[SwcInstance],
    mode: CombinationMode,
) -> Result<Option<SwcOutput>, TaskError> {
    if instances.is_empty() {
        return Ok(None);
    }
    let classes = model.config().classes;
    let mut losses = Vec::with_capacity(instances.len());
    let mut positive_logits = None;
    for inst in instances {
        let logits = model.swc_head(tape, h, inst.word_id, inst.word_polarity)?;
        if inst.ascription && positive_logits.is_none() {
            positive_logits = Some(logits);
        }
        losses.push(swc_instance_loss(tape, logits, inst, classes, mode)?);
    }
    let loss = tape.mean(&losses)?;
    let positive_logits = positive_logits.expect("cloze instances start with the true word");
    Ok(Some(SwcOutput {
        loss,
        positive_logits,
    }))
}

pub fn csp_task(
    tape: &mut Tape<'_>,
    model: &KesaModel,
    h: Var,
    instance: Option<&CspInstance>,
    mode: CombinationMode,
) -> Result<Option<CspOutput>, TaskError> {
    let Some(inst) = instance else { return Ok(None) };
    let logits = model.csp_head(tape, h, inst.word_id, inst.word_polarity)?;
    let loss = csp_instance_loss(tape, logits, inst, model.config().classes, mode)?;
    Ok(Some(CspOutput { loss, logits }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledSentence;
    use crate::diffgraph::{ParamStore, Tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoded(words: &[&str], label: usize, vocab: &Vocabulary) -> EncodedSample {
        let s = LabeledSentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            label,
        };
        EncodedSample::new(&s, vocab, 16)
    }

    fn vocab_of(words: &[&str]) -> Vocabulary {
        Vocabulary::build(
            &[LabeledSentence {
                tokens: words.iter().map(|w| w.to_string()).collect(),
                label: 0,
            }],
            1,
        )
    }

    #[test]
    fn fantastic_and_fear() {
        let lex = SentimentLexicon::from_pairs([("fantastic", Polarity::Positive), ("fear", Polarity::Negative)]);
        let vocab = vocab_of(&["a", "fantastic", "movie", "fear"]);
        let s = encoded(&["a", "fantastic", "movie"], 1, &vocab);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let got = build_swc_instances(&s, &lex, &vocab, 1, &mut r1, &mut r2);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].word.as_str(), got[0].word_polarity, got[0].ascription), ("fantastic", Polarity::Positive, true));
        assert_eq!((got[1].word.as_str(), got[1].word_polarity, got[1].ascription), ("fear", Polarity::Negative, false));
        assert_eq!(got[1].word_id, vocab.id("fear"));

        let csp = build_csp_instance(&s, &lex, &vocab, &mut r1).unwrap();
        assert_eq!((csp.word.as_str(), csp.word_polarity, csp.sentence_label), ("fantastic", Polarity::Positive, 1));

        let plain = encoded(&["a", "movie"], 0, &vocab);
        assert!(build_swc_instances(&plain, &lex, &vocab, 1, &mut r1, &mut r2).is_empty());
        assert!(build_csp_instance(&plain, &lex, &vocab, &mut r1).is_none());
    }

    #[test]
    fn too_few_impostors_gives_nothing() {
        let lex = SentimentLexicon::from_pairs([("good", Polarity::Positive), ("bad", Polarity::Negative)]);
        let vocab = vocab_of(&["good", "bad"]);
        let s = encoded(&["good"], 1, &vocab);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(build_swc_instances(&s, &lex, &vocab, 1, &mut r.clone(), &mut r).len(), 2);
        assert!(build_swc_instances(&s, &lex, &vocab, 2, &mut r.clone(), &mut r).is_empty());
    }

    #[test]
    fn positive_choice_is_uniform() {
        let lex = SentimentLexicon::from_pairs([
            ("good", Polarity::Positive),
            ("bad", Polarity::Negative),
            ("odd", Polarity::Negative),
        ]);
        let vocab = vocab_of(&["good", "bad", "odd", "but"]);
        let s = encoded(&["good", "but", "bad"], 0, &vocab);
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let good = (0..n)
            .filter(|_| build_swc_instances(&s, &lex, &vocab, 1, &mut r1, &mut r2)[0].word == "good")
            .count();
        // Binomial(10⁴, ½): σ = 50.
        assert!((good as f64 - 5000.0).abs() < 250.0, "{good}");
    }

    #[test]
    fn joint_index_examples() {
        let g = LabelGrid::swc(2);
        assert_eq!(g.joint_index(1, 0).unwrap(), 2);
        assert_eq!(g.joint_index(0, 0).unwrap(), 0);
        assert!(g.joint_index(2, 0).is_err());
        assert!(g.joint_index(0, 2).is_err());
        assert!(g.joint_pair(4).is_err());
        let g5 = LabelGrid::swc(5);
        let mut seen = [false; 10];
        for a in 0..5 {
            for b in 0..2 {
                let i = g5.joint_index(a, b).unwrap();
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(g5.joint_pair(i).unwrap(), (a, b));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn conditional_slice_examples() {
        let g = LabelGrid::swc(2);
        assert_eq!(conditional_probs(&[0.0; 4], g, PriorAxis::Row, 1).unwrap(), vec![0.5, 0.5]);
        let p = conditional_probs(&[4.0, 0.0, 0.0, 0.0], g, PriorAxis::Row, 0).unwrap();
        assert_abs_diff_eq!(p[0], 0.982_013_790_037_908_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.017_986_209_962_091_56, epsilon = 1e-12);
        assert!(conditional_probs(&[0.0; 4], g, PriorAxis::Row, 2).is_err());
        assert!(conditional_probs(&[0.0; 3], g, PriorAxis::Row, 0).is_err());
        assert_eq!(g.slice_indices(PriorAxis::Column, 1).unwrap(), vec![1, 3]);
    }

    /// Straight-line reference: softmax, pick, negative log.
    fn reference_loss(logits: &[f64], grid: LabelGrid, row: usize, col: usize, mode: CombinationMode) -> f64 {
        match mode {
            CombinationMode::Joint => {
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                -((logits[row * grid.cols + col] - m).exp() / z).ln()
            }
            CombinationMode::Conditional => {
                let slice = &logits[row * grid.cols..(row + 1) * grid.cols];
                let m = slice.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = slice.iter().map(|x| (x - m).exp()).sum();
                -((slice[col] - m).exp() / z).ln()
            }
        }
    }

    fn loss_value(logits: &[f64], grid: LabelGrid, row: usize, col: usize, mode: CombinationMode) -> f64 {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(Tensor::vector(logits.to_vec())).unwrap();
        let l = grid_loss(&mut tape, z, grid, row, col, mode).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn task_loss_closed_forms() {
        let g = LabelGrid::swc(2);
        assert_abs_diff_eq!(loss_value(&[0.0; 4], g, 1, 0, CombinationMode::Joint), 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(loss_value(&[0.0; 4], g, 1, 0, CombinationMode::Conditional), 2f64.ln(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn task_loss_matches_reference(
            logits in prop::collection::vec(-8f64..8.0, 10),
            row in 0usize..5, col in 0usize..2, cond in any::<bool>(),
        ) {
            let g = LabelGrid::swc(5);
            let mode = if cond { CombinationMode::Conditional } else { CombinationMode::Joint };
            let got = loss_value(&logits, g, row, col, mode);
            prop_assert!((got - reference_loss(&logits, g, row, col, mode)).abs() < 1e-12);
        }

        #[test]
        fn conditional_sums_to_one_and_is_equivariant(
            logits in prop::collection::vec(-50f64..50.0, 10),
            prior in 0usize..2,
            shift in 0usize..5,
        ) {
            let g = LabelGrid::csp(5);
            let p = conditional_probs(&logits, g, PriorAxis::Row, prior).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // Rotating the sliced axis rotates the output.
            let mut rotated = logits.clone();
            for c in 0..5 {
                rotated[prior * 5 + (c + shift) % 5] = logits[prior * 5 + c];
            }
            let q = conditional_probs(&rotated, g, PriorAxis::Row, prior).unwrap();
            for c in 0..5 {
                prop_assert!((q[(c + shift) % 5] - p[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn conditional_loss_ignores_other_slices(
            logits in prop::collection::vec(-5f64..5.0, 4),
            row in 0usize..2, col in 0usize..2, scale in -10f64..10.0,
        ) {
            let g = LabelGrid::swc(2);
            let mut scaled = logits.clone();
            for r in (0..2).filter(|&r| r != row) {
                for c in 0..2 {
                    scaled[r * 2 + c] *= scale;
                }
            }
            let a = loss_value(&logits, g, row, col, CombinationMode::Conditional);
            let b = loss_value(&scaled, g, row, col, CombinationMode::Conditional);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn impostors_never_occur_in_sentence(seed in any::<u64>(), k in 1usize..4) {
            let words = ["good", "bad", "great", "awful", "fine", "poor", "nice", "dull"];
            let lex = SentimentLexicon::from_pairs(words.iter().enumerate().map(|(i, w)| {
                (*w, if i % 2 == 0 { Polarity::Positive } else { Polarity::Negative })
            }));
            let vocab = vocab_of(&words);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sentence: Vec<&str> = words.iter().copied().filter(|_| rand::Rng::gen_bool(&mut rng, 0.4)).collect();
            let s = encoded(if sentence.is_empty() { &["good"] } else { &sentence }, 0, &vocab);
            let got = build_swc_instances(&s, &lex, &vocab, k, &mut rng.clone(), &mut rng);
            for inst in &got {
                prop_assert_eq!(inst.ascription, s.tokens.contains(&inst.word));
                prop_assert_eq!(Some(inst.word_polarity), lex.get(&inst.word));
            }
        }
    }
}
