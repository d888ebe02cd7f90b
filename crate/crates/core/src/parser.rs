//! Extraction of labeled sections from raw model output.
//!
//! A header is recognized at the start of a line (after optional markdown
//! decoration such as `**`, `#`, `-` or `>`), matched case-insensitively and
//! followed by a colon. A section's text runs from its header to the next
//! recognized header line, with surrounding whitespace trimmed.
//!
//! Strict mode requires every expected section, with the first occurrence of
//! each in the expected order. Lenient mode accepts any order and allows
//! translation sections to be missing. Both modes locate headers the same
//! way, so whenever strict parsing succeeds lenient parsing yields identical
//! sections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::metrics::is_word_char;
use crate::prompt::{PromptSpec, Section, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

impl std::str::FromStr for ParseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(ParseMode::Strict),
            "lenient" => Ok(ParseMode::Lenient),
            other => Err(format!("unknown parse mode {other:?} (expected strict or lenient)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    MissingSection,
    AmbiguousLabel,
    UnknownLabel,
    EmptyResponse,
    Refused,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: FailureReason,
    pub offending_text: String,
}

const EXCERPT_CHARS: usize = 200;

impl ParseFailure {
    pub fn new(reason: FailureReason, text: &str) -> Self {
        Self {
            reason,
            offending_text: text.chars().take(EXCERPT_CHARS).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub sections: BTreeMap<Section, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    /// `strict` when the strict rules were satisfied, even in lenient mode.
    pub parse_mode_used: ParseMode,
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    section: Section,
    line: usize,
}

/// If `line` is a header line, the section and the text after the colon.
fn header_of(line: &str) -> Option<(Section, &str)> {
    let body = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '-' | '>' | '_'));
    for section in Section::ALL {
        let header = section.header();
        let Some(prefix) = body.get(..header.len()) else {
            continue;
        };
        if !prefix.eq_ignore_ascii_case(header) {
            continue;
        }
        let rest = body[header.len()..].trim_start_matches(['*', '_', ' ', '\t']);
        if let Some(after) = rest.strip_prefix(':') {
            return Some((section, after.trim_start_matches(['*', '_'])));
        }
    }
    None
}

struct Scan<'a> {
    lines: Vec<&'a str>,
    hits: Vec<Hit>,
}

impl<'a> Scan<'a> {
    fn new(raw: &'a str) -> Self {
        let lines: Vec<&str> = raw.lines().collect();
        let hits = lines
            .iter()
            .enumerate()
            .filter_map(|(i, l)| header_of(l).map(|(section, _)| Hit { section, line: i }))
            .collect();
        Self { lines, hits }
    }

    fn first(&self, section: Section) -> Option<usize> {
        self.hits.iter().position(|h| h.section == section)
    }

    fn text_of(&self, hit_index: usize) -> String {
        let hit = self.hits[hit_index];
        let end = self.hits.get(hit_index + 1).map_or(self.lines.len(), |h| h.line);
        let (_, first) = header_of(self.lines[hit.line]).expect("hit lines are headers");
        let mut parts = vec![first];
        parts.extend(&self.lines[hit.line + 1..end]);
        parts.join("\n").trim().to_owned()
    }
}

/// Extract the sections `spec` demands from `raw`.
pub fn parse_sections(raw: &str, spec: &PromptSpec, mode: ParseMode) -> Result<ParsedOutput, ParseFailure> {
    parse_expected(raw, &spec.expected_sections, mode)
}

pub fn parse_expected(raw: &str, expected: &[Section], mode: ParseMode) -> Result<ParsedOutput, ParseFailure> {
    if raw.trim().is_empty() {
        return Err(ParseFailure::new(FailureReason::EmptyResponse, raw));
    }
    let scan = Scan::new(raw);
    let firsts: Vec<Option<usize>> = expected.iter().map(|s| scan.first(*s)).collect();

    let strict_ok = firsts.iter().all(Option::is_some)
        && firsts.windows(2).all(|w| w[0] < w[1]);
    let collect = |mode_used| ParsedOutput {
        sections: expected
            .iter()
            .zip(&firsts)
            .filter_map(|(s, f)| f.map(|i| (*s, scan.text_of(i))))
            .collect(),
        predicted_label: None,
        parse_mode_used: mode_used,
    };
    if strict_ok {
        return Ok(collect(ParseMode::Strict));
    }
    let missing = expected
        .iter()
        .zip(&firsts)
        .find(|(s, f)| f.is_none() && (mode == ParseMode::Strict || !s.is_translation()));
    match (mode, missing) {
        (ParseMode::Lenient, None) if firsts.iter().any(Option::is_some) => Ok(collect(ParseMode::Lenient)),
        _ => Err(ParseFailure::new(FailureReason::MissingSection, raw)),
    }
}

/// Collapse whitespace and strip surrounding punctuation, quotes and spaces.
fn clean_label_text(s: &str) -> String {
    let words: Vec<&str> = s.split_whitespace().collect();
    words.join(" ").trim_matches(|c: char| !is_word_char(c)).to_lowercase()
}

/// Whole-word occurrences of `needle` in `haystack`, as byte ranges.
fn whole_word_matches(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return Vec::new();
    }
    haystack
        .match_indices(needle)
        .map(|(start, m)| (start, start + m.len()))
        .filter(|&(start, end)| {
            let before = haystack[..start].chars().next_back();
            let after = haystack[end..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
        .collect()
}

/// Map free-form label text to a canonical label.
///
/// After cleanup an exact case-insensitive match wins. Otherwise the text
/// must contain exactly one label as a whole word; a match lying inside a
/// longer label's match does not count.
pub fn normalize_label(raw_label: &str, labels: &LabelSet) -> Result<String, ParseFailure> {
    let cleaned = clean_label_text(raw_label);
    if cleaned.is_empty() {
        return Err(ParseFailure::new(FailureReason::UnknownLabel, raw_label));
    }
    if let Some(exact) = labels.labels().iter().find(|l| clean_label_text(l) == cleaned) {
        return Ok(exact.clone());
    }
    let spans: Vec<(usize, Vec<(usize, usize)>)> = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (i, whole_word_matches(&cleaned, &clean_label_text(l))))
        .collect();
    let matched: Vec<usize> = spans
        .iter()
        .filter(|(i, ms)| {
            ms.iter().any(|&(s, e)| {
                !spans.iter().any(|(j, other)| {
                    j != i && other.iter().any(|&(os, oe)| os <= s && e <= oe && oe - os > e - s)
                })
            })
        })
        .map(|(i, _)| *i)
        .collect();
    match matched.as_slice() {
        [one] => Ok(labels.labels()[*one].clone()),
        [] => Err(ParseFailure::new(FailureReason::UnknownLabel, raw_label)),
        _ => Err(ParseFailure::new(FailureReason::AmbiguousLabel, raw_label)),
    }
}

/// Parse a classification answer and normalize its label.
pub fn parse_classification(
    raw: &str,
    spec: &PromptSpec,
    labels: &LabelSet,
    mode: ParseMode,
) -> Result<ParsedOutput, ParseFailure> {
    let mut parsed = parse_sections(raw, spec, mode)?;
    let label_text = parsed
        .sections
        .get(&Section::Label)
        .ok_or_else(|| ParseFailure::new(FailureReason::MissingSection, raw))?;
    parsed.predicted_label = Some(normalize_label(label_text, labels)?);
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headlines {
    pub english_headline: Option<String>,
    pub marathi_headline: String,
}

pub fn extract_headlines(parsed: &ParsedOutput, strategy: Strategy) -> Result<Headlines, ParseFailure> {
    let non_empty = |s: Section| parsed.sections.get(&s).filter(|t| !t.trim().is_empty()).cloned();
    let missing = |s: Section| ParseFailure::new(FailureReason::MissingSection, &format!("no {} section", s.header()));
    let marathi_headline = non_empty(Section::MarathiHeadline).ok_or_else(|| missing(Section::MarathiHeadline))?;
    let english_headline = match strategy {
        Strategy::Half | Strategy::Full => {
            Some(non_empty(Section::EnglishHeadline).ok_or_else(|| missing(Section::EnglishHeadline))?)
        }
        _ => non_empty(Section::EnglishHeadline),
    };
    Ok(Headlines {
        english_headline,
        marathi_headline,
    })
}
