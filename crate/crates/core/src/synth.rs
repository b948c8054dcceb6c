//! Planted-lexicon synthetic corpus.
//!
//! Each sentence mixes one to three lexicon words into neutral filler. The
//! clean label is drawn first (balanced), then a strict majority of the
//! planted words is taken from the matching polarity, and finally a `noise`
//! share of each class has its label flipped. Label 1 is positive, 0
//! negative.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{tokenize, LabeledSentence};
use crate::lexicon::{Polarity, SentimentLexicon};
use crate::rng;

/// Neutral filler vocabulary.
pub const FILLER: &[&str] = &[
    "the", "a", "an", "film", "movie", "story", "plot", "actor", "actors", "scene", "scenes", "director",
    "script", "camera", "music", "ending", "character", "characters", "cast", "screen", "of", "and", "with",
    "in", "on", "at", "is", "was", "it", "this", "that", "its", "as", "for", "by", "from", "about", "some",
    "every", "one", "two", "minute", "hour", "audience", "viewer", "studio", "sequel", "role", "dialogue",
    "moment", "night", "city", "house", "family", "friend", "road", "year", "time", "first", "last",
];

/// Built-in lexicon used when no compiled lexicon is supplied.
pub const DEFAULT_POSITIVE: &[&str] = &[
    "good", "great", "excellent", "wonderful", "superb", "brilliant", "delightful", "charming", "moving",
    "touching", "funny", "clever", "beautiful", "engaging", "gripping", "fresh", "solid", "smart", "warm",
    "stunning", "masterful", "enjoyable", "fantastic", "lovely", "memorable", "powerful", "witty", "tender",
    "inventive", "compelling",
];

pub const DEFAULT_NEGATIVE: &[&str] = &[
    "bad", "awful", "terrible", "boring", "dull", "tedious", "clumsy", "bland", "stupid", "ugly", "weak",
    "poor", "lame", "messy", "painful", "pointless", "tiresome", "flat", "shallow", "dreadful", "lifeless",
    "annoying", "forgettable", "horrible", "silly", "sloppy", "stale", "thin", "wooden", "worthless",
];

pub fn default_lexicon() -> SentimentLexicon {
    SentimentLexicon::from_pairs(
        DEFAULT_POSITIVE
            .iter()
            .map(|w| (*w, Polarity::Positive))
            .chain(DEFAULT_NEGATIVE.iter().map(|w| (*w, Polarity::Negative))),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub noise: f64,
    pub seed: u64,
    /// Use at most this many lexicon words per polarity (the first in
    /// lexicon order). Words that would not survive tokenization intact are
    /// skipped.
    pub words_per_polarity: Option<usize>,
    pub min_filler: usize,
    pub max_filler: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 500,
            test: 500,
            noise: 0.1,
            seed: 1,
            words_per_polarity: None,
            min_filler: 4,
            max_filler: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("noise must lie in [0, 1], got {0}")]
    Noise(String),
    #[error("lexicon has no {0} words")]
    MissingPolarity(Polarity),
    #[error("filler range {0}..={1} is empty")]
    Filler(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<LabeledSentence>,
    pub valid: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
}

/// Planted words: `k` in 1..=3, of which a strict majority carry `label`'s
/// polarity.
fn plant<'a>(rng: &mut ChaCha8Rng, label: Polarity, pools: &[Vec<&'a str>; 2]) -> Vec<&'a str> {
    let k = rng.gen_range(1..=3);
    let majority = k / 2 + 1;
    let matching = rng.gen_range(majority..=k);
    let other = match label {
        Polarity::Positive => Polarity::Negative,
        Polarity::Negative => Polarity::Positive,
    };
    let mut words = Vec::with_capacity(k);
    for i in 0..k {
        let pol = if i < matching { label } else { other };
        words.push(*pools[pol.index()].choose(rng).expect("pool checked non-empty"));
    }
    words
}

fn generate_split(
    rng: &mut ChaCha8Rng,
    n: usize,
    cfg: &SynthConfig,
    pools: &[Vec<&str>; 2],
) -> Vec<LabeledSentence> {
    let mut labels: Vec<Polarity> = (0..n)
        .map(|i| if i % 2 == 0 { Polarity::Positive } else { Polarity::Negative })
        .collect();
    labels.shuffle(rng);
    // Flip the same share of each class so noise keeps the split balanced.
    let mut flip = vec![false; n];
    for p in Polarity::ALL {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == p).collect();
        members.shuffle(rng);
        let count = (cfg.noise * members.len() as f64).round() as usize;
        for &i in &members[..count] {
            flip[i] = true;
        }
    }
    labels
        .into_iter()
        .zip(flip)
        .map(|(clean, flip)| {
            let planted = plant(rng, clean, pools);
            let filler = rng.gen_range(cfg.min_filler..=cfg.max_filler);
            let mut tokens: Vec<String> = (0..filler)
                .map(|_| FILLER.choose(rng).expect("filler list").to_string())
                .collect();
            for w in planted {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, w.to_string());
            }
            let label = clean.index() ^ flip as usize;
            LabeledSentence { tokens, label }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig, lexicon: &SentimentLexicon) -> Result<SynthCorpus, SynthError> {
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(SynthError::Noise(cfg.noise.to_string()));
    }
    if cfg.min_filler > cfg.max_filler {
        return Err(SynthError::Filler(cfg.min_filler, cfg.max_filler));
    }
    let limit = cfg.words_per_polarity.unwrap_or(usize::MAX);
    let pools: [Vec<&str>; 2] = Polarity::ALL.map(|p| {
        lexicon
            .iter()
            .filter(|&(w, q)| q == p && tokenize(w) == [w])
            .map(|(w, _)| w)
            .take(limit)
            .collect()
    });
    for p in Polarity::ALL {
        if pools[p.index()].is_empty() {
            return Err(SynthError::MissingPolarity(p));
        }
    }
    let mut rng = rng::substream(cfg.seed, "synth");
    Ok(SynthCorpus {
        train: generate_split(&mut rng, cfg.train, cfg, &pools),
        valid: generate_split(&mut rng, cfg.valid, cfg, &pools),
        test: generate_split(&mut rng, cfg.test, cfg, &pools),
    })
}

/// `label \t text` lines, LF-terminated.
pub fn to_tsv(sentences: &[LabeledSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        writeln!(out, "{}\t{}", s.label, s.tokens.join(" ")).expect("writing to a string");
    }
    out
}
