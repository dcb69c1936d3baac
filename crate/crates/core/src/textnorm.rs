//! Transcript normalization and word error rate.
//!
//! Normalization is fixed and table-driven so scores are reproducible
//! bit-for-bit: lowercase, expand a closed contraction table, spell out
//! digit runs as English cardinals, strip punctuation, collapse whitespace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag of the contraction and number tables below. Bump whenever
/// either table changes, since it changes every reported score.
pub const NORMALIZER_VERSION: u32 = 1;

const CONTRACTIONS: &[(&str, &str)] = &[
    ("aren't", "are not"),
    ("can't", "can not"),
    ("couldn't", "could not"),
    ("didn't", "did not"),
    ("doesn't", "does not"),
    ("don't", "do not"),
    ("hadn't", "had not"),
    ("hasn't", "has not"),
    ("haven't", "have not"),
    ("he'll", "he will"),
    ("he's", "he is"),
    ("here's", "here is"),
    ("how's", "how is"),
    ("i'd", "i would"),
    ("i'll", "i will"),
    ("i'm", "i am"),
    ("i've", "i have"),
    ("isn't", "is not"),
    ("it'll", "it will"),
    ("it's", "it is"),
    ("let's", "let us"),
    ("she'll", "she will"),
    ("she's", "she is"),
    ("shouldn't", "should not"),
    ("that's", "that is"),
    ("there's", "there is"),
    ("they'd", "they would"),
    ("they'll", "they will"),
    ("they're", "they are"),
    ("they've", "they have"),
    ("wasn't", "was not"),
    ("we'd", "we would"),
    ("we'll", "we will"),
    ("we're", "we are"),
    ("we've", "we have"),
    ("weren't", "were not"),
    ("what's", "what is"),
    ("where's", "where is"),
    ("who's", "who is"),
    ("won't", "will not"),
    ("wouldn't", "would not"),
    ("you'd", "you would"),
    ("you'll", "you will"),
    ("you're", "you are"),
    ("you've", "you have"),
];

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];

const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

const SCALES: [(u64, &str); 3] = [
    (1_000_000_000, "billion"),
    (1_000_000, "million"),
    (1_000, "thousand"),
];

fn push_below_thousand(n: u64, out: &mut Vec<&'static str>) {
    debug_assert!(n < 1000);
    let hundreds = n / 100;
    let rest = n % 100;
    if hundreds > 0 {
        out.push(ONES[hundreds as usize]);
        out.push("hundred");
    }
    if rest >= 20 {
        out.push(TENS[(rest / 10) as usize]);
        if rest % 10 > 0 {
            out.push(ONES[(rest % 10) as usize]);
        }
    } else if rest > 0 || hundreds == 0 {
        out.push(ONES[rest as usize]);
    }
}

/// English cardinal reading of `n` ("305" -> "three hundred five").
pub fn spell_cardinal(n: u64) -> String {
    let mut words = Vec::new();
    if n == 0 {
        return "zero".to_string();
    }
    let mut rest = n;
    for (scale, name) in SCALES {
        if rest >= scale {
            push_below_thousand(rest / scale, &mut words);
            words.push(name);
            rest %= scale;
        }
    }
    if rest > 0 {
        push_below_thousand(rest, &mut words);
    }
    words.join(" ")
}

/// Spell a run of ASCII digits. Runs with a leading zero or longer than
/// twelve digits are read digit by digit ("007" -> "zero zero seven").
fn spell_digits(run: &str) -> String {
    if run.len() > 12 || (run.len() > 1 && run.starts_with('0')) {
        run.bytes()
            .map(|b| ONES[(b - b'0') as usize])
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        spell_cardinal(run.parse().expect("ascii digit run"))
    }
}

fn expand_contraction(word: &str) -> Option<&'static str> {
    CONTRACTIONS
        .binary_search_by(|(k, _)| k.cmp(&word))
        .ok()
        .map(|i| CONTRACTIONS[i].1)
}

/// Normalize a transcript for scoring. Idempotent.
pub fn normalize(text: &str) -> String {
    let lowered: String = text
        .chars()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .flat_map(char::to_lowercase)
        .collect();

    // Pass 1: contractions over maximal runs of letters and apostrophes.
    let mut expanded = String::with_capacity(lowered.len() + 16);
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut String| {
        if !run.is_empty() {
            match expand_contraction(run) {
                Some(exp) => out.push_str(exp),
                None => out.push_str(run),
            }
            run.clear();
        }
    };
    for c in lowered.chars() {
        if c.is_alphabetic() || c == '\'' {
            run.push(c);
        } else {
            flush(&mut run, &mut expanded);
            expanded.push(c);
        }
    }
    flush(&mut run, &mut expanded);

    // Pass 2: digits to words, separators to spaces, drop other punctuation.
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut digits = String::new();
    for c in expanded.chars() {
        if c.is_ascii_digit() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            digits.push(c);
            continue;
        }
        if !digits.is_empty() {
            words.push(spell_digits(&digits));
            digits.clear();
        }
        if c.is_alphabetic() && c.to_lowercase().eq(std::iter::once(c)) {
            current.push(c);
        } else if c.is_whitespace() || c == '-' || c == '/' || c == '_' {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        }
        // anything else is punctuation and is dropped in place
    }
    if !digits.is_empty() {
        words.push(spell_digits(&digits));
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub ref_word: Option<String>,
    pub hyp_word: Option<String>,
}

/// Error counts of one alignment. Summable across utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "N")]
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors over reference length; an empty reference divides by one.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_words.max(1) as f64
    }
}

impl std::ops::Add for WerCounts {
    type Output = WerCounts;
    fn add(self, o: WerCounts) -> WerCounts {
        WerCounts {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_words: self.ref_words + o.ref_words,
        }
    }
}

impl std::ops::AddAssign for WerCounts {
    fn add_assign(&mut self, o: WerCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for WerCounts {
    fn sum<I: Iterator<Item = WerCounts>>(iter: I) -> Self {
        iter.fold(WerCounts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub ops: Vec<EditOp>,
    pub counts: WerCounts,
}

/// Minimal word-level Levenshtein alignment of two word sequences.
pub fn align_words<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditAlignment {
    let n = reference.len();
    let m = hypothesis.len();
    let w = m + 1;
    let mut dist = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dist[i * w] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = dist[(i - 1) * w + j - 1] + usize::from(!same);
            let del = dist[(i - 1) * w + j] + 1;
            let ins = dist[i * w + j - 1] + 1;
            dist[i * w + j] = diag.min(del).min(ins);
        }
    }

    // Backtrace preferring diagonal moves, then deletions.
    let mut ops = Vec::with_capacity(n.max(m));
    let mut counts = WerCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if dist[(i - 1) * w + j - 1] + usize::from(!same) == here {
                let kind = if same {
                    EditKind::Match
                } else {
                    counts.substitutions += 1;
                    EditKind::Substitute
                };
                ops.push(EditOp {
                    kind,
                    ref_word: Some(reference[i - 1].as_ref().to_string()),
                    hyp_word: Some(hypothesis[j - 1].as_ref().to_string()),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            ops.push(EditOp {
                kind: EditKind::Delete,
                ref_word: Some(reference[i - 1].as_ref().to_string()),
                hyp_word: None,
            });
            i -= 1;
        } else {
            counts.insertions += 1;
            ops.push(EditOp {
                kind: EditKind::Insert,
                ref_word: None,
                hyp_word: Some(hypothesis[j - 1].as_ref().to_string()),
            });
            j -= 1;
        }
    }
    ops.reverse();
    EditAlignment { ops, counts }
}

/// Normalize both sides and align them word by word.
pub fn align(reference: &str, hypothesis: &str) -> EditAlignment {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    align_words(&rw, &hw)
}

pub fn wer_counts(reference: &str, hypothesis: &str) -> WerCounts {
    align(reference, hypothesis).counts
}

/// Word error rate `(S + D + I) / N_ref` after normalization.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    wer_counts(reference, hypothesis).rate()
}

/// Pooled (micro-averaged) WER over a corpus of `(reference, hypothesis)`.
pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<f64> {
    Ok(corpus_counts(pairs)?.rate())
}

pub fn corpus_counts<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<WerCounts> {
    if pairs.is_empty() {
        return Err(Error::precondition("corpus_wer needs at least one pair"));
    }
    Ok(pairs
        .iter()
        .map(|(r, h)| wer_counts(r.as_ref(), h.as_ref()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn contraction_table_is_sorted() {
        assert!(CONTRACTIONS.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("I've booked it."), "i have booked it");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("Table for 2!"), "table for two");
        assert_eq!(normalize("  Don\u{2019}t   STOP  "), "do not stop");
        assert_eq!(normalize("at 7:45pm"), "at seven forty five pm");
        assert_eq!(normalize("room 007"), "room zero zero seven");
        assert_eq!(normalize("north-east"), "north east");
    }

    #[test]
    fn cardinals() {
        assert_eq!(spell_cardinal(0), "zero");
        assert_eq!(spell_cardinal(13), "thirteen");
        assert_eq!(spell_cardinal(40), "forty");
        assert_eq!(spell_cardinal(305), "three hundred five");
        assert_eq!(spell_cardinal(1_000_021), "one million twenty one");
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer("book a table for two", "book a table for two"), 0.0);
        assert_eq!(wer("i have a reservation", "i have reservation"), 0.25);
        assert_eq!(wer("a", "b c"), 2.0);
        let c = wer_counts("a", "b c");
        assert_eq!(c.substitutions + c.insertions, 2);
        assert_eq!(c.deletions, 0);
    }

    #[test]
    fn empty_reference_counts_insertions() {
        assert_eq!(wer("", ""), 0.0);
        assert_eq!(wer("", "x y"), 2.0);
        assert_eq!(wer("a b", ""), 1.0);
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let pairs = [("a b c d", "a b c"), ("e f g h i j", "e f g h i j")];
        assert!((corpus_wer(&pairs).unwrap() - 0.1).abs() < 1e-12);
        assert!(corpus_wer::<&str, &str>(&[]).is_err());
        assert_eq!(
            corpus_wer(&[("i have a reservation", "i have reservation")]).unwrap(),
            wer("i have a reservation", "i have reservation")
        );
    }

    #[test]
    fn alignment_reconstructs_both_sides() {
        let a = align("the cat sat on the mat", "the cat sat mat here");
        let r: Vec<_> = a.ops.iter().filter_map(|o| o.ref_word.clone()).collect();
        let h: Vec<_> = a.ops.iter().filter_map(|o| o.hyp_word.clone()).collect();
        assert_eq!(r.join(" "), "the cat sat on the mat");
        assert_eq!(h.join(" "), "the cat sat mat here");
        let matches = a.ops.iter().filter(|o| o.kind == EditKind::Match).count();
        assert_eq!(
            a.counts.substitutions + a.counts.deletions + matches,
            a.counts.ref_words
        );
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ -~\u{e9}\u{c9}\u{2019}]{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
        }

        #[test]
        fn wer_self_is_zero_and_bounded(r in "[a-d ]{1,30}", h in "[a-d ]{0,30}") {
            prop_assert_eq!(wer(&r, &r), 0.0);
            let nr = normalize(&r).split_whitespace().count();
            let nh = normalize(&h).split_whitespace().count();
            if nr > 0 {
                prop_assert!(wer(&r, &h) <= (nr + nh) as f64 / nr as f64);
            }
        }
    }
}
