//! Labeled-sentence datasets: tokenization, vocabulary and id encoding.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const DETACHED: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

/// Lowercases, splits on whitespace and detaches punctuation marks as
/// separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if DETACHED.contains(&c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Vec<LabeledSentence>,
    pub valid: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub class_count: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Line {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{0}: file contains no examples")]
    Empty(PathBuf),
    #[error("labels skip class {missing} (observed classes 0..{count})")]
    LabelGap { missing: usize, count: usize },
}

/// Reads a `label \t text` file. With `class_count`, labels at or above it
/// are rejected.
pub fn load_split(path: &Path, class_count: Option<usize>) -> Result<Vec<LabeledSentence>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_split(&text, path, class_count)
}

pub fn parse_split(text: &str, path: &Path, class_count: Option<usize>) -> Result<Vec<LabeledSentence>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| CorpusError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `label\\ttext`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(format!("non-integer label `{label}`")))?;
        if let Some(n) = class_count {
            if label >= n {
                return Err(err(format!("label out of range: {label} with {n} classes")));
            }
        }
        let tokens = tokenize(body);
        if tokens.is_empty() {
            return Err(err("empty text".into()));
        }
        out.push(LabeledSentence { tokens, label });
    }
    if out.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

/// Loads train/valid/test files. The class count is `max label + 1` unless
/// given; an inferred label set with holes is rejected.
pub fn load_dataset(
    train: &Path,
    valid: &Path,
    test: &Path,
    class_count: Option<usize>,
) -> Result<DatasetSplits, CorpusError> {
    let train = load_split(train, class_count)?;
    let valid = load_split(valid, class_count)?;
    let test = load_split(test, class_count)?;
    let class_count = match class_count {
        Some(n) => n,
        None => {
            let seen: BTreeSet<usize> = train
                .iter()
                .chain(&valid)
                .chain(&test)
                .map(|s| s.label)
                .collect();
            let count = seen.iter().next_back().map_or(0, |m| m + 1);
            if let Some(missing) = (0..count).find(|c| !seen.contains(c)) {
                return Err(CorpusError::LabelGap { missing, count });
            }
            count
        }
    };
    Ok(DatasetSplits {
        train,
        valid,
        test,
        class_count,
    })
}

/// Token ↔ id map with `<pad>` = 0 and `<unk>` = 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens with frequency ≥ `min_freq`, most frequent first, ties in
    /// lexicographic order.
    pub fn build(train: &[LabeledSentence], min_freq: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in train {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(
            [PAD_TOKEN, UNK_TOKEN]
                .into_iter()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .map(str::to_string)
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Id of a real (non-reserved) entry.
    pub fn known_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i > UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ids for `tokens`, right-truncated to `max_len` and right-padded.
    /// Returns the padded ids and the number of real tokens.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> (Vec<usize>, usize) {
        assert!(max_len >= 1, "max_len must be positive");
        let len = tokens.len().min(max_len);
        let mut ids: Vec<usize> = tokens[..len].iter().map(|t| self.id(t.as_ref())).collect();
        ids.resize(max_len, PAD_ID);
        (ids, len)
    }

    pub fn decode(&self, ids: &[usize], len: usize) -> Vec<&str> {
        ids[..len]
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect()
    }
}

/// A sentence truncated to the encoder window, with its ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub len: usize,
    pub label: usize,
}

impl EncodedSample {
    pub fn new(sentence: &LabeledSentence, vocab: &Vocabulary, max_len: usize) -> Self {
        let (ids, len) = vocab.encode(&sentence.tokens, max_len);
        Self {
            tokens: sentence.tokens[..len].to_vec(),
            ids,
            len,
            label: sentence.label,
        }
    }

    /// Ids of the real tokens only.
    pub fn active_ids(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

pub fn encode_all(sentences: &[LabeledSentence], vocab: &Vocabulary, max_len: usize) -> Vec<EncodedSample> {
    sentences
        .iter()
        .map(|s| EncodedSample::new(s, vocab, max_len))
        .collect()
}
