//! ROUGE-L, classification error rate and size-weighted averages.

use icu_normalizer::ComposingNormalizerBorrowed;
use icu_properties::props::{GeneralCategory, GeneralCategoryGroup};
use icu_properties::CodePointMapData;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and gold lists differ in length ({predictions} vs {golds})")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to score")]
    Empty,
    #[error("ROUGE-L over an empty corpus")]
    EmptyCorpus,
    #[error("weighted average entry has zero examples")]
    ZeroWeight,
}

fn general_category(c: char) -> GeneralCategory {
    CodePointMapData::<GeneralCategory>::new().get(c)
}

pub fn is_punctuation(c: char) -> bool {
    GeneralCategoryGroup::Punctuation.contains(general_category(c))
}

pub fn is_mark(c: char) -> bool {
    GeneralCategoryGroup::Mark.contains(general_category(c))
}

/// Characters that continue a word for whole-word matching: letters, digits,
/// combining marks (Devanagari vowel signs, virama, nukta), `-` and `_`.
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_mark(c) || c == '-' || c == '_'
}

/// Whitespace-separated tokens after NFC normalization and lowercasing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    /// Wrap pre-split tokens. Tokens containing whitespace are split further.
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self {
            tokens: tokens
                .into_iter()
                .flat_map(|t| t.as_ref().split_whitespace().map(str::to_owned).collect::<Vec<_>>())
                .collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// NFC-normalize, lowercase, split on whitespace and strip leading and
/// trailing punctuation from each token. Tokens that were pure punctuation
/// are dropped. No stemming.
pub fn tokenize(text: &str) -> TokenSequence {
    let normalized = ComposingNormalizerBorrowed::new_nfc().normalize(text);
    let lowered = normalized.to_lowercase();
    let tokens = lowered
        .split_whitespace()
        .map(|t| t.trim_matches(is_punctuation))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    TokenSequence { tokens }
}

/// Length of the longest common (not necessarily contiguous) subsequence.
pub fn lcs_length(a: &TokenSequence, b: &TokenSequence) -> usize {
    lcs_len_slices(a.tokens(), b.tokens())
}

fn lcs_len_slices<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Rolling single row over the shorter sequence.
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[short.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Sentence-level ROUGE-L with balanced F-measure.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> RougeScore {
    let lcs = lcs_length(candidate, reference) as f64;
    let ratio = |len: usize| if len == 0 { 0.0 } else { lcs / len as f64 };
    let precision = ratio(candidate.len());
    let recall = ratio(reference.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Convenience: tokenize both strings and score.
pub fn rouge_l_text(candidate: &str, reference: &str) -> RougeScore {
    rouge_l(&tokenize(candidate), &tokenize(reference))
}

/// Unweighted mean of per-pair F1, as a percentage.
pub fn corpus_rouge_l(pairs: &[(TokenSequence, TokenSequence)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let f1s: Vec<f64> = pairs.iter().map(|(c, r)| rouge_l(c, r).f1).collect();
    mean_f1_pct(&f1s)
}

/// Mean of already-computed F1 scores, as a percentage.
pub fn mean_f1_pct(f1s: &[f64]) -> Result<f64, MetricsError> {
    if f1s.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n_total: usize,
    pub n_wrong: usize,
    /// Absent predictions; included in `n_wrong` unless excluded by policy.
    pub n_parse_failures: usize,
    pub error_pct: f64,
}

/// How unparseable predictions enter the error rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailurePolicy {
    /// Count as wrong (the default).
    #[default]
    CountWrong,
    /// Drop from the denominator.
    Exclude,
}

/// Error rate with parse failures counted as wrong.
pub fn error_rate<S: AsRef<str>>(predictions: &[Option<S>], golds: &[S]) -> Result<ErrorStats, MetricsError> {
    error_rate_with(predictions, golds, ParseFailurePolicy::CountWrong)
}

pub fn error_rate_with<S: AsRef<str>>(
    predictions: &[Option<S>],
    golds: &[S],
    policy: ParseFailurePolicy,
) -> Result<ErrorStats, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut n_wrong = 0;
    let mut n_parse_failures = 0;
    for (p, g) in predictions.iter().zip(golds) {
        match p {
            None => n_parse_failures += 1,
            Some(p) if p.as_ref() != g.as_ref() => n_wrong += 1,
            Some(_) => {}
        }
    }
    let n_total = match policy {
        ParseFailurePolicy::CountWrong => {
            n_wrong += n_parse_failures;
            golds.len()
        }
        ParseFailurePolicy::Exclude => golds.len() - n_parse_failures,
    };
    if n_total == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(ErrorStats {
        n_total,
        n_wrong,
        n_parse_failures,
        error_pct: 100.0 * n_wrong as f64 / n_total as f64,
    })
}

/// Σ(error_pct·n) / Σn.
pub fn weighted_average(per_dataset: &[(f64, usize)]) -> Result<f64, MetricsError> {
    if per_dataset.is_empty() {
        return Err(MetricsError::Empty);
    }
    if per_dataset.iter().any(|&(_, n)| n == 0) {
        return Err(MetricsError::ZeroWeight);
    }
    let total: usize = per_dataset.iter().map(|&(_, n)| n).sum();
    let weighted: f64 = per_dataset.iter().map(|&(pct, n)| pct * n as f64).sum();
    Ok(weighted / total as f64)
}

/// Round half-up to two decimals for display. A small epsilon absorbs
/// binary representation error (e.g. 0.125 stored as 0.12499...).
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let bumped = scaled + scaled.abs().max(1.0) * 1e-12;
    (bumped + 0.5).floor() / 100.0
}

pub fn format_pct(x: f64) -> String {
    format!("{:.2}", round2(x))
}
