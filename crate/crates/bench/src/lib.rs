//! Shared inputs for the benchmarks.

use kesa_core::corpus::{encode_all, DatasetSplits, EncodedSample, Vocabulary};
use kesa_core::synth::{self, SynthConfig};
use kesa_core::trainer::restrict_lexicon;
use kesa_core::SentimentLexicon;

pub struct BenchData {
    pub splits: DatasetSplits,
    pub lexicon: SentimentLexicon,
    pub vocab: Vocabulary,
    pub train: Vec<EncodedSample>,
}

/// Synthetic corpus of `train` sentences with the built-in lexicon.
pub fn synthetic(train: usize) -> BenchData {
    let lexicon = synth::default_lexicon();
    let corpus = synth::generate(
        &SynthConfig {
            train,
            valid: train / 4,
            test: train / 4,
            ..SynthConfig::default()
        },
        &lexicon,
    )
    .expect("built-in lexicon has both polarities");
    let splits = DatasetSplits {
        train: corpus.train,
        valid: corpus.valid,
        test: corpus.test,
        class_count: 2,
    };
    let vocab = Vocabulary::build(&splits.train, 1);
    let train = encode_all(&splits.train, &vocab, 128);
    let lexicon = restrict_lexicon(&lexicon, &vocab);
    BenchData {
        splits,
        lexicon,
        vocab,
        train,
    }
}
