//! SentiWordNet parsing and word-level polarity resolution.
//!
//! A SentiWordNet 3.0 line carries one synset:
//!
//! ```text
//! POS \t ID \t PosScore \t NegScore \t word#rank word#rank ... \t Gloss
//! ```
//!
//! Every `word#rank` item becomes a [`SenseEntry`]. A word's polarity is taken
//! from the sense with the strongest net score `pos - neg`; equal magnitudes
//! go to the more common sense (smaller rank). Words whose senses are all
//! neutral are left out of the lexicon.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Word-level sentiment polarity. The discriminant is the row used in the
/// polarity embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative = 0,
    Positive = 1,
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Negative, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Positive => "positive",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            other => Err(format!("unknown polarity `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosTag {
    Adjective,
    Noun,
    Verb,
    Adverb,
}

impl PosTag {
    pub fn code(self) -> char {
        match self {
            PosTag::Adjective => 'a',
            PosTag::Noun => 'n',
            PosTag::Verb => 'v',
            PosTag::Adverb => 'r',
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "a" => Some(PosTag::Adjective),
            "n" => Some(PosTag::Noun),
            "v" => Some(PosTag::Verb),
            "r" => Some(PosTag::Adverb),
            _ => None,
        }
    }
}

/// One `word#rank` item of a scored synset.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseEntry {
    pub pos_tag: PosTag,
    pub word: String,
    pub sense_rank: u32,
    pub pos_score: f64,
    pub neg_score: f64,
}

impl SenseEntry {
    pub fn net_score(&self) -> f64 {
        self.pos_score - self.neg_score
    }

    /// Renders the entry as a single-term SentiWordNet line.
    pub fn to_line(&self, synset_id: &str) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}#{}\t",
            self.pos_tag.code(),
            synset_id,
            self.pos_score,
            self.neg_score,
            self.word,
            self.sense_rank
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("expected 6 tab-separated fields, found {0}")]
    FieldCount(usize),
    #[error("unknown part-of-speech tag `{0}`")]
    PosTag(String),
    #[error("unparsable score `{0}`")]
    Score(String),
    #[error("scores out of range (pos {pos}, neg {neg})")]
    ScoreRange { pos: String, neg: String },
    #[error("malformed synset term `{0}`")]
    Term(String),
    #[error("sense rank in `{0}` is not a positive integer")]
    Rank(String),
    #[error("line is not valid UTF-8")]
    Encoding,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("usage error: {0}")]
    Usage(&'static str),
    #[error("no lexicon word left to sample after {excluded} exclusions")]
    Exhausted { excluded: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Abort on the first malformed line.
    Strict,
    /// Skip malformed lines and report them.
    #[default]
    Lenient,
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub entries: Vec<SenseEntry>,
    pub skipped: Vec<ParseError>,
}

/// Parses a SentiWordNet 3.0 stream. Blank lines and `#` comments are ignored.
pub fn parse_sentiwordnet<R: BufRead>(reader: R, mode: ParseMode) -> Result<ParseOutcome, LexiconError> {
    let mut outcome = ParseOutcome::default();
    for (i, raw) in reader.split(b'\n').enumerate() {
        let raw = raw?;
        let line_no = i + 1;
        let parsed = match std::str::from_utf8(&raw) {
            Ok(line) => parse_line(line.trim_end_matches('\r')),
            Err(_) => Err(ParseErrorKind::Encoding),
        };
        match parsed {
            Ok(entries) => outcome.entries.extend(entries),
            Err(kind) => {
                let err = ParseError {
                    line: line_no,
                    kind,
                };
                match mode {
                    ParseMode::Strict => return Err(err.into()),
                    ParseMode::Lenient => outcome.skipped.push(err),
                }
            }
        }
    }
    Ok(outcome)
}

/// Parses one line into its sense entries.
pub fn parse_line(line: &str) -> Result<Vec<SenseEntry>, ParseErrorKind> {
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(Vec::new());
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(ParseErrorKind::FieldCount(fields.len()));
    }
    let pos_tag = PosTag::parse(fields[0].trim())
        .ok_or_else(|| ParseErrorKind::PosTag(fields[0].to_string()))?;
    let score = |s: &str| -> Result<f64, ParseErrorKind> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ParseErrorKind::Score(s.to_string()))
    };
    let pos_score = score(fields[2])?;
    let neg_score = score(fields[3])?;
    if !(0.0..=1.0).contains(&pos_score)
        || !(0.0..=1.0).contains(&neg_score)
        || pos_score + neg_score > 1.0 + 1e-9
    {
        return Err(ParseErrorKind::ScoreRange {
            pos: fields[2].to_string(),
            neg: fields[3].to_string(),
        });
    }
    let mut entries = Vec::new();
    for term in fields[4].split_whitespace() {
        let (word, rank) = term
            .rsplit_once('#')
            .filter(|(w, _)| !w.is_empty())
            .ok_or_else(|| ParseErrorKind::Term(term.to_string()))?;
        let sense_rank = rank
            .parse::<u32>()
            .ok()
            .filter(|&r| r >= 1)
            .ok_or_else(|| ParseErrorKind::Rank(term.to_string()))?;
        entries.push(SenseEntry {
            pos_tag,
            word: word.to_lowercase(),
            sense_rank,
            pos_score,
            neg_score,
        });
    }
    if entries.is_empty() {
        return Err(ParseErrorKind::Term(fields[4].to_string()));
    }
    Ok(entries)
}

/// Polarity of one word from all of its senses, or `None` if every sense
/// is neutral.
pub fn resolve_polarity(senses: &[SenseEntry]) -> Result<Option<Polarity>, LexiconError> {
    let Some(first) = senses.first() else {
        return Err(LexiconError::Usage("resolve_polarity needs at least one sense"));
    };
    debug_assert!(senses.iter().all(|s| s.word == first.word));
    // Strongest magnitude, then most common sense, then the positive reading
    // so the result does not depend on input order.
    let winner = senses
        .iter()
        .max_by(|a, b| {
            let (sa, sb) = (a.net_score(), b.net_score());
            sa.abs()
                .total_cmp(&sb.abs())
                .then(b.sense_rank.cmp(&a.sense_rank))
                .then(sa.total_cmp(&sb))
        })
        .expect("nonempty");
    let net = winner.net_score();
    Ok(if net > 0.0 {
        Some(Polarity::Positive)
    } else if net < 0.0 {
        Some(Polarity::Negative)
    } else {
        None
    })
}

/// Immutable word → polarity map, sorted by word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentimentLexicon {
    entries: Vec<(String, Polarity)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub kept: usize,
    pub dropped_neutral: usize,
}

impl SentimentLexicon {
    /// Groups senses by word and keeps every word with a non-neutral polarity.
    pub fn build(entries: &[SenseEntry]) -> (Self, BuildReport) {
        let mut by_word: BTreeMap<&str, Vec<SenseEntry>> = BTreeMap::new();
        for e in entries {
            by_word.entry(e.word.as_str()).or_default().push(e.clone());
        }
        let mut report = BuildReport::default();
        let mut out = Vec::with_capacity(by_word.len());
        for (word, senses) in by_word {
            match resolve_polarity(&senses).expect("groups are nonempty") {
                Some(p) => out.push((word.to_string(), p)),
                None => report.dropped_neutral += 1,
            }
        }
        report.kept = out.len();
        (Self { entries: out }, report)
    }

    /// Builds directly from word/polarity pairs. Later duplicates win.
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Polarity)>,
        S: Into<String>,
    {
        let map: BTreeMap<String, Polarity> = pairs.into_iter().map(|(w, p)| (w.into(), p)).collect();
        Self {
            entries: map.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<Polarity> {
        self.entries
            .binary_search_by(|(w, _)| w.as_str().cmp(word))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.get(word).is_some()
    }

    /// Entries in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Polarity)> {
        self.entries.iter().map(|(w, p)| (w.as_str(), *p))
    }

    pub fn entry(&self, index: usize) -> (&str, Polarity) {
        let (w, p) = &self.entries[index];
        (w.as_str(), *p)
    }

    /// Keeps only the words accepted by `keep`.
    pub fn retain(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|(w, _)| keep(w)).cloned().collect(),
        }
    }

    /// Writes `word \t polarity` lines in lexicographic order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (w, p) in &self.entries {
            writeln!(out, "{w}\t{p}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self, LexiconError> {
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |reason: String| LexiconError::Format { line: i + 1, reason };
            let (word, pol) = line
                .split_once('\t')
                .ok_or_else(|| format_err("expected `word\\tpolarity`".into()))?;
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(format_err(format!("invalid word `{word}`")));
            }
            pairs.push((word.to_string(), pol.trim().parse().map_err(format_err)?));
        }
        Ok(Self::from_pairs(pairs))
    }

    /// Every position whose token is a lexicon word, left to right.
    pub fn recognize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Recognized> {
        tokens
            .iter()
            .enumerate()
            .filter_map(|(position, t)| {
                let t = t.as_ref();
                self.get(t).map(|polarity| Recognized {
                    position,
                    word: t.to_string(),
                    polarity,
                })
            })
            .collect()
    }

    /// Uniform draw over lexicon words not in `excluded`.
    pub fn sample_negative<R: Rng + ?Sized>(
        &self,
        excluded: &HashSet<&str>,
        rng: &mut R,
    ) -> Result<(&str, Polarity), LexiconError> {
        let blocked = excluded.iter().filter(|w| self.contains(w)).count();
        let available = self.len() - blocked;
        if available == 0 {
            return Err(LexiconError::Exhausted {
                excluded: excluded.len(),
            });
        }
        if available * 2 >= self.len() {
            // Rejection sampling: expected draws ≤ 2.
            loop {
                let i = rng.gen_range(0..self.len());
                let (w, p) = self.entry(i);
                if !excluded.contains(w) {
                    return Ok((w, p));
                }
            }
        }
        let pick = rng.gen_range(0..available);
        let (w, p) = self
            .entries
            .iter()
            .filter(|(w, _)| !excluded.contains(w.as_str()))
            .nth(pick)
            .expect("pick < available");
        Ok((w.as_str(), *p))
    }
}

/// A lexicon word found in a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recognized {
    pub position: usize,
    pub word: String,
    pub polarity: Polarity,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sense(word: &str, rank: u32, pos: f64, neg: f64) -> SenseEntry {
        SenseEntry {
            pos_tag: PosTag::Adjective,
            word: word.into(),
            sense_rank: rank,
            pos_score: pos,
            neg_score: neg,
        }
    }

    #[test]
    fn parses_single_term_lines() {
        assert_eq!(
            parse_line("a\t001\t0.25\t0\tthirsty#1\tgloss").unwrap(),
            vec![sense("thirsty", 1, 0.25, 0.0)]
        );
        assert_eq!(
            parse_line("a\t002\t0\t0.375\tthirsty#3\tgloss").unwrap(),
            vec![sense("thirsty", 3, 0.0, 0.375)]
        );
        assert!(parse_line("# SentiWordNet v3.0").unwrap().is_empty());
        assert!(parse_line("").unwrap().is_empty());
    }

    #[test]
    fn parses_multi_term_lines_and_keeps_underscores() {
        let got = parse_line("n\t00001\t0.125\t0.5\tGood_Deal#2 boon#1\tsome gloss; \"quote\"").unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].word, "good_deal");
        assert_eq!(got[0].sense_rank, 2);
        assert_eq!(got[0].pos_tag, PosTag::Noun);
        assert_eq!(got[1].word, "boon");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert_eq!(parse_line("a\t1\t0.1\t0"), Err(ParseErrorKind::FieldCount(4)));
        assert!(matches!(parse_line("x\t1\t0\t0\tw#1\tg"), Err(ParseErrorKind::PosTag(_))));
        assert!(matches!(parse_line("a\t1\tabc\t0\tw#1\tg"), Err(ParseErrorKind::Score(_))));
        assert!(matches!(parse_line("a\t1\t0.75\t0.5\tw#1\tg"), Err(ParseErrorKind::ScoreRange { .. })));
        assert!(matches!(parse_line("a\t1\t0\t0\tw#0\tg"), Err(ParseErrorKind::Rank(_))));
        assert!(matches!(parse_line("a\t1\t0\t0\tw#x\tg"), Err(ParseErrorKind::Rank(_))));
        assert!(matches!(parse_line("a\t1\t0\t0\tw\tg"), Err(ParseErrorKind::Term(_))));
    }

    #[test]
    fn strict_mode_reports_line_number() {
        let text = "# header\na\t1\t0.5\t0\tgood#1\tg\nbroken line\n";
        let err = parse_sentiwordnet(text.as_bytes(), ParseMode::Strict).unwrap_err();
        match err {
            LexiconError::Parse(e) => assert_eq!(e.line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let lenient = parse_sentiwordnet(text.as_bytes(), ParseMode::Lenient).unwrap();
        assert_eq!(lenient.entries.len(), 1);
        assert_eq!(lenient.skipped.len(), 1);
        assert_eq!(lenient.skipped[0].line, 3);
    }

    #[test]
    fn thirsty_resolves_to_negative() {
        let senses = [sense("thirsty", 1, 0.25, 0.0), sense("thirsty", 3, 0.0, 0.375)];
        assert_eq!(resolve_polarity(&senses).unwrap(), Some(Polarity::Negative));
    }

    #[test]
    fn neutral_and_tie_rules() {
        assert_eq!(resolve_polarity(&[sense("the", 1, 0.0, 0.0)]).unwrap(), None);
        let tie = [sense("w", 2, 0.0, 0.5), sense("w", 1, 0.5, 0.0)];
        assert_eq!(resolve_polarity(&tie).unwrap(), Some(Polarity::Positive));
        assert!(matches!(resolve_polarity(&[]), Err(LexiconError::Usage(_))));
    }

    #[test]
    fn build_drops_neutral_words() {
        let entries = vec![
            sense("thirsty", 1, 0.25, 0.0),
            sense("the", 1, 0.0, 0.0),
            sense("thirsty", 3, 0.0, 0.375),
        ];
        let (lex, report) = SentimentLexicon::build(&entries);
        assert_eq!(lex.iter().collect::<Vec<_>>(), vec![("thirsty", Polarity::Negative)]);
        assert_eq!(report, BuildReport { kept: 1, dropped_neutral: 1 });

        let (empty, report) = SentimentLexicon::build(&[]);
        assert!(empty.is_empty());
        assert_eq!(report.kept, 0);

        let (good, _) = SentimentLexicon::build(&[sense("good", 1, 0.75, 0.0)]);
        assert_eq!(good.get("good"), Some(Polarity::Positive));
    }

    #[test]
    fn tsv_export_is_sorted_and_reloads() {
        let lex = SentimentLexicon::from_pairs([
            ("zany", Polarity::Positive),
            ("awful", Polarity::Negative),
            ("good_deal", Polarity::Positive),
        ]);
        let mut buf = Vec::new();
        lex.write_tsv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "awful\tnegative\ngood_deal\tpositive\nzany\tpositive\n"
        );
        assert_eq!(SentimentLexicon::read_tsv(buf.as_slice()).unwrap(), lex);
        assert!(SentimentLexicon::read_tsv("good\tmeh\n".as_bytes()).is_err());
    }

    #[test]
    fn recognize_reports_every_position() {
        let lex = SentimentLexicon::from_pairs([("good", Polarity::Positive)]);
        let got = lex.recognize(&["good", "good"]);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].position, got[1].position), (0, 1));
        assert!(lex.recognize(&["plain", "words"]).is_empty());
        // Multiword terms never match a single token.
        let multi = SentimentLexicon::from_pairs([("good_deal", Polarity::Positive)]);
        assert!(multi.recognize(&["good", "deal"]).is_empty());
    }

    #[test]
    fn sample_negative_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let one = SentimentLexicon::from_pairs([("a", Polarity::Positive)]);
        assert_eq!(one.sample_negative(&HashSet::new(), &mut rng).unwrap(), ("a", Polarity::Positive));
        assert!(matches!(
            one.sample_negative(&HashSet::from(["a"]), &mut rng),
            Err(LexiconError::Exhausted { .. })
        ));
        let two = SentimentLexicon::from_pairs([("a", Polarity::Positive), ("b", Polarity::Negative)]);
        for _ in 0..50 {
            assert_eq!(two.sample_negative(&HashSet::from(["a"]), &mut rng).unwrap().0, "b");
        }
    }

    #[test]
    fn sample_negative_is_uniform() {
        let words: Vec<String> = (0..1000).map(|i| format!("w{i:04}")).collect();
        let lex = SentimentLexicon::from_pairs(words.iter().map(|w| (w.clone(), Polarity::Positive)));
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 1_000_000usize;
        let mut counts = vec![0usize; 1000];
        for _ in 0..draws {
            let (w, _) = lex.sample_negative(&HashSet::new(), &mut rng).unwrap();
            counts[w[1..].parse::<usize>().unwrap()] += 1;
        }
        let expected = draws as f64 / 1000.0;
        let sigma = (draws as f64 * (1.0 / 1000.0) * (1.0 - 1.0 / 1000.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - expected).abs() < 5.0 * sigma, "word {i}: {c}");
        }
        // Pearson statistic for 999 degrees of freedom; mean 999, sd ≈ 44.7.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 999.0 + 5.0 * (2.0f64 * 999.0).sqrt(), "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn resolve_is_order_independent(
            senses in prop::collection::vec((1u32..6, 0u8..9, 0u8..9), 1..8),
            seed in any::<u64>(),
        ) {
            let list: Vec<SenseEntry> = senses
                .iter()
                .map(|&(r, p, n)| {
                    let (p, n) = (p as f64 / 8.0, n as f64 / 8.0);
                    let total = (p + n).max(1.0);
                    sense("w", r, p / total, n / total)
                })
                .collect();
            let mut shuffled = list.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(resolve_polarity(&list).unwrap(), resolve_polarity(&shuffled).unwrap());
        }

        #[test]
        fn line_format_round_trips(
            pos in 0u16..=1000, neg in 0u16..=1000, rank in 1u32..50, word in "[a-z][a-z_]{0,12}",
        ) {
            prop_assume!(pos + neg <= 1000);
            let e = SenseEntry {
                pos_tag: PosTag::Verb,
                word,
                sense_rank: rank,
                pos_score: pos as f64 / 1000.0,
                neg_score: neg as f64 / 1000.0,
            };
            prop_assert_eq!(parse_line(&e.to_line("0042")).unwrap(), vec![e]);
        }

        #[test]
        fn recognize_positions_increase(tokens in prop::collection::vec("[a-d]", 0..20)) {
            let lex = SentimentLexicon::from_pairs([("a", Polarity::Positive), ("c", Polarity::Negative)]);
            let got = lex.recognize(&tokens);
            prop_assert!(got.windows(2).all(|w| w[0].position < w[1].position));
            prop_assert!(got.iter().all(|r| lex.contains(&r.word) && tokens[r.position] == r.word));
        }

        #[test]
        fn sample_never_returns_excluded(mask in prop::collection::vec(any::<bool>(), 12), seed in any::<u64>()) {
            let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
            let lex = SentimentLexicon::from_pairs(words.iter().map(|w| (w.clone(), Polarity::Negative)));
            let excluded: HashSet<&str> = words.iter().zip(&mask).filter(|(_, &m)| m).map(|(w, _)| w.as_str()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                match lex.sample_negative(&excluded, &mut rng) {
                    Ok((w, _)) => prop_assert!(!excluded.contains(w)),
                    Err(_) => prop_assert_eq!(excluded.len(), 12),
                }
            }
        }
    }
}
