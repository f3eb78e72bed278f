//! Checks whether quoted observations in a reasoning trace are supported by
//! the source report, and the review taxonomy used to tag extraction errors.
//!
//! Classification is a cascade, cheapest and strictest first: raw substring,
//! surface repair, layout normalization, ordered elision, token overlap.
//! Anything left over is a potential hallucination. A number in the
//! observation that never appears in the report overrides the last two steps.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

/// Error types used when reviewing extraction mistakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Wrong cyst selected.
    ObjectIdentification,
    /// Wrong study date or comparison study.
    TemporalMisalignment,
    Calculation,
    ClinicalReasoning,
    OverExtraction,
    UnderExtraction,
    AmbiguityHandling,
    /// Value outside the allowed set.
    InvalidValue,
    /// The report itself is inconsistent.
    ReportDiscrepancy,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 9] = [
        ErrorCategory::ObjectIdentification,
        ErrorCategory::TemporalMisalignment,
        ErrorCategory::Calculation,
        ErrorCategory::ClinicalReasoning,
        ErrorCategory::OverExtraction,
        ErrorCategory::UnderExtraction,
        ErrorCategory::AmbiguityHandling,
        ErrorCategory::InvalidValue,
        ErrorCategory::ReportDiscrepancy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::ObjectIdentification => "object_identification",
            ErrorCategory::TemporalMisalignment => "temporal_misalignment",
            ErrorCategory::Calculation => "calculation",
            ErrorCategory::ClinicalReasoning => "clinical_reasoning",
            ErrorCategory::OverExtraction => "over_extraction",
            ErrorCategory::UnderExtraction => "under_extraction",
            ErrorCategory::AmbiguityHandling => "ambiguity_handling",
            ErrorCategory::InvalidValue => "invalid_value",
            ErrorCategory::ReportDiscrepancy => "report_discrepancy",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        ErrorCategory::ALL.into_iter().find(|c| c.as_str() == text)
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grounding categories, ordered from best to worst support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingCategory {
    ExactMatch,
    SurfaceLevelCorrection,
    LayoutNormalization,
    ContentPreservingElision,
    SummarizationCompression,
    PotentialHallucination,
}

impl GroundingCategory {
    pub const ALL: [GroundingCategory; 6] = [
        GroundingCategory::ExactMatch,
        GroundingCategory::SurfaceLevelCorrection,
        GroundingCategory::LayoutNormalization,
        GroundingCategory::ContentPreservingElision,
        GroundingCategory::SummarizationCompression,
        GroundingCategory::PotentialHallucination,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroundingCategory::ExactMatch => "exact_match",
            GroundingCategory::SurfaceLevelCorrection => "surface_level_correction",
            GroundingCategory::LayoutNormalization => "layout_normalization",
            GroundingCategory::ContentPreservingElision => "content_preserving_elision",
            GroundingCategory::SummarizationCompression => "summarization_compression",
            GroundingCategory::PotentialHallucination => "potential_hallucination",
        }
    }

    pub fn needs_review(self) -> bool {
        matches!(
            self,
            GroundingCategory::SummarizationCompression | GroundingCategory::PotentialHallucination
        )
    }
}

impl fmt::Display for GroundingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    /// Byte range of the supporting report text.
    Span { start: usize, end: usize, edits: usize },
    /// Share of observation content tokens found in the report.
    Overlap { ratio: f64, unsupported: Vec<String> },
    /// Tokens with no support in the report.
    Unsupported { tokens: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingVerdict {
    pub category: GroundingCategory,
    pub evidence: Evidence,
    pub needs_review: bool,
}

impl GroundingVerdict {
    fn new(category: GroundingCategory, evidence: Evidence) -> Self {
        GroundingVerdict {
            category,
            evidence,
            needs_review: category.needs_review(),
        }
    }
}

/// Tunable thresholds. They are echoed in the grounding summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Minimum share of supported content tokens for a summarization verdict.
    pub overlap_threshold: f64,
    /// Maximum punctuation or duplicate-word edits for a surface correction.
    pub max_surface_edits: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            overlap_threshold: 0.8,
            max_surface_edits: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    /// Lowercased word; a number followed by a unit is fused ("8mm").
    Word,
    Punct,
    Newline,
    /// List marker at the start of a line.
    Bullet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    fn same(&self, other: &Token) -> bool {
        self.kind == other.kind && self.text == other.text
    }

    fn is_word(&self) -> bool {
        self.kind == TokenKind::Word
    }

    fn has_digit(&self) -> bool {
        self.text.chars().any(|c| c.is_ascii_digit())
    }
}

const UNITS: &[&str] = &["mm", "cm", "m", "ml", "cc"];
const BULLETS: &[&str] = &["-", "*", "•", "–"];
const SECTION_HEADERS: &[&str] = &[
    "findings",
    "impression",
    "comparison",
    "technique",
    "history",
    "indication",
    "conclusion",
    "pancreas",
];
const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "the",
    "of",
    "in",
    "on",
    "at",
    "to",
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "with",
    "and",
    "or",
    "for",
    "by",
    "from",
    "this",
    "that",
    "these",
    "there",
    "it",
    "its",
    "as",
    "which",
    "within",
    "into",
    "has",
    "have",
    "also",
    "measuring",
    "measures",
    "seen",
    "noted",
];
const GENERALIZERS: &[&str] = &["multiple", "several", "numerous", "various", "few", "many", "some"];
const CONTEXT_WORDS: &[&str] = &["pancreatic", "pancreas"];

/// Splits text into words, punctuation, line breaks and list markers.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut raw: Vec<Token> = Vec::new();
    let mut line_start = true;
    for (start, piece) in text.split_word_bound_indices() {
        let end = start + piece.len();
        if piece.chars().all(char::is_whitespace) {
            if piece.contains('\n') {
                raw.push(Token {
                    kind: TokenKind::Newline,
                    text: "\n".into(),
                    start,
                    end,
                });
                line_start = true;
            }
            continue;
        }
        let kind = if piece.chars().any(char::is_alphanumeric) {
            TokenKind::Word
        } else if line_start && BULLETS.contains(&piece) {
            TokenKind::Bullet
        } else {
            TokenKind::Punct
        };
        line_start = false;
        raw.push(Token {
            kind,
            text: piece.to_lowercase(),
            start,
            end,
        });
    }

    let mut out: Vec<Token> = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let tok = &raw[i];
        if tok.is_word() && tok.text.chars().last().is_some_and(|c| c.is_ascii_digit()) {
            let unit_at = match raw.get(i + 1) {
                Some(next) if next.kind == TokenKind::Punct && next.text == "-" => i + 2,
                _ => i + 1,
            };
            if let Some(unit) = raw.get(unit_at) {
                if unit.is_word() && UNITS.contains(&unit.text.as_str()) {
                    out.push(Token {
                        kind: TokenKind::Word,
                        text: format!("{}{}", tok.text, unit.text),
                        start: tok.start,
                        end: unit.end,
                    });
                    i = unit_at + 1;
                    continue;
                }
            }
        }
        out.push(tok.clone());
        i += 1;
    }
    out
}

/// A report tokenized once for classifying many observations.
#[derive(Debug, Clone)]
pub struct TokenizedReport<'a> {
    text: &'a str,
    tokens: Vec<Token>,
    words: Vec<usize>,
    layout_words: Vec<usize>,
    word_set: HashSet<String>,
    content_set: HashSet<String>,
}

impl<'a> TokenizedReport<'a> {
    pub fn new(text: &'a str) -> Self {
        let tokens = tokenize(text);
        let words: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].is_word()).collect();
        let layout_words = layout_word_indices(&tokens);
        let word_set = words.iter().map(|&i| tokens[i].text.clone()).collect();
        let content_set = words.iter().filter_map(|&i| content_form(&tokens[i].text)).collect();
        TokenizedReport {
            text,
            tokens,
            words,
            layout_words,
            word_set,
            content_set,
        }
    }

    pub fn text(&self) -> &str {
        self.text
    }
}

// Word indices with section headers ("Findings:") removed.
fn layout_word_indices(tokens: &[Token]) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&i| tokens[i].is_word())
        .filter(|&i| {
            let header =
                SECTION_HEADERS.contains(&tokens[i].text.as_str()) && tokens.get(i + 1).is_some_and(|t| t.text == ":");
            !header
        })
        .collect()
}

fn stem(word: &str) -> String {
    if word.len() > 4 && word.ends_with("ies") {
        format!("{}y", &word[..word.len() - 3])
    } else if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_owned()
    } else {
        word.to_owned()
    }
}

fn content_form(word: &str) -> Option<String> {
    if STOPWORDS.contains(&word) {
        None
    } else {
        Some(stem(word))
    }
}

/// Classifies one observation against a report.
pub fn classify_observation(observation: &str, report: &str) -> GroundingVerdict {
    classify_with(&GroundingConfig::default(), observation, &TokenizedReport::new(report))
}

/// Classifies an observation. When it contains double-quoted segments each
/// quote is classified separately and the worst verdict is returned.
pub fn classify_with(config: &GroundingConfig, observation: &str, report: &TokenizedReport<'_>) -> GroundingVerdict {
    let quotes = quoted_segments(observation);
    if quotes.is_empty() {
        return classify_segment(config, observation, report);
    }
    quotes
        .into_iter()
        .map(|q| classify_segment(config, q, report))
        .max_by_key(|v| v.category)
        .expect("non-empty quote list")
}

/// Text between matching double quotes (straight or curly).
pub fn quoted_segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut open: Option<(usize, char)> = None;
    for (i, c) in text.char_indices() {
        match (open, c) {
            (None, '"') => open = Some((i + 1, '"')),
            (None, '\u{201c}') => open = Some((i + c.len_utf8(), '\u{201d}')),
            (Some((start, close)), c) if c == close => {
                let inner = &text[start..i];
                if !inner.trim().is_empty() {
                    out.push(inner);
                }
                open = None;
            }
            _ => {}
        }
    }
    out
}

fn classify_segment(config: &GroundingConfig, observation: &str, report: &TokenizedReport<'_>) -> GroundingVerdict {
    use GroundingCategory::*;

    if !observation.is_empty() {
        if let Some(start) = report.text.find(observation) {
            return GroundingVerdict::new(
                ExactMatch,
                Evidence::Span {
                    start,
                    end: start + observation.len(),
                    edits: 0,
                },
            );
        }
    }

    let obs = tokenize(observation);
    let obs_words: Vec<&Token> = obs.iter().filter(|t| t.is_word()).collect();
    if obs_words.is_empty() {
        let tokens: Vec<String> = if obs.is_empty() {
            vec![observation.to_owned()]
        } else {
            obs.iter().map(|t| t.text.clone()).collect()
        };
        return GroundingVerdict::new(PotentialHallucination, Evidence::Unsupported { tokens });
    }

    if let Some((start, end, edits)) = surface_alignment(&obs, &report.tokens, config.max_surface_edits) {
        return GroundingVerdict::new(SurfaceLevelCorrection, Evidence::Span { start, end, edits });
    }

    let obs_layout: Vec<&str> = layout_word_indices(&obs)
        .into_iter()
        .map(|i| obs[i].text.as_str())
        .collect();
    if let Some((start, end)) = layout_window(&obs_layout, report) {
        return GroundingVerdict::new(LayoutNormalization, Evidence::Span { start, end, edits: 0 });
    }

    let orphaned: Vec<String> = obs_words
        .iter()
        .filter(|t| t.has_digit() && !report.word_set.contains(&t.text))
        .map(|t| t.text.clone())
        .collect();
    if !orphaned.is_empty() {
        return GroundingVerdict::new(PotentialHallucination, Evidence::Unsupported { tokens: orphaned });
    }

    if let Some((start, end)) = ordered_subsequence(&obs_words, report) {
        return GroundingVerdict::new(ContentPreservingElision, Evidence::Span { start, end, edits: 0 });
    }

    let content: Vec<String> = obs_words.iter().filter_map(|t| content_form(&t.text)).collect();
    let mut counted = 0usize;
    let mut supported = 0usize;
    let mut unsupported = Vec::new();
    for c in &content {
        let discounted = GENERALIZERS.contains(&c.as_str()) || CONTEXT_WORDS.contains(&c.as_str());
        if report.content_set.contains(c) {
            if !discounted {
                counted += 1;
                supported += 1;
            }
        } else if !discounted {
            counted += 1;
            unsupported.push(c.clone());
        }
    }
    let ratio = if counted == 0 {
        1.0
    } else {
        supported as f64 / counted as f64
    };
    if ratio >= config.overlap_threshold {
        GroundingVerdict::new(SummarizationCompression, Evidence::Overlap { ratio, unsupported })
    } else {
        GroundingVerdict::new(PotentialHallucination, Evidence::Unsupported { tokens: unsupported })
    }
}

// Semi-global alignment of the observation against any window of the report.
// Free: nothing. Cost 1: inserting, deleting or substituting punctuation,
// or dropping a word that repeats its neighbour. Words, line breaks and
// bullets otherwise have to match.
fn surface_alignment(obs: &[Token], report: &[Token], max_edits: usize) -> Option<(usize, usize, usize)> {
    const INF: usize = usize::MAX / 4;
    let n = obs.len();
    let m = report.len();
    if n == 0 {
        return None;
    }
    // cost[j] and origin[j] for the current row; origin is the report index
    // where the aligned window starts.
    let mut prev_cost = vec![0usize; m + 1];
    let mut prev_origin: Vec<usize> = (0..=m).collect();
    for i in 1..=n {
        let o = &obs[i - 1];
        let obs_dup = i >= 2 && o.is_word() && obs[i - 2].same(o);
        let mut cost = vec![INF; m + 1];
        let mut origin = vec![0usize; m + 1];
        let insert = if o.kind == TokenKind::Punct || obs_dup { 1 } else { INF };
        cost[0] = prev_cost[0].saturating_add(insert);
        origin[0] = prev_origin[0];
        for j in 1..=m {
            let r = &report[j - 1];
            let mut best = INF;
            let mut best_origin = 0;
            let diag = if o.same(r) {
                0
            } else if o.kind == TokenKind::Punct && r.kind == TokenKind::Punct {
                1
            } else {
                INF
            };
            if diag < INF && prev_cost[j - 1] + diag < best {
                best = prev_cost[j - 1] + diag;
                best_origin = prev_origin[j - 1];
            }
            if insert < INF && prev_cost[j] + insert < best {
                best = prev_cost[j] + insert;
                best_origin = prev_origin[j];
            }
            let report_dup = j >= 2 && r.is_word() && report[j - 2].same(r);
            let delete = if r.kind == TokenKind::Punct || report_dup {
                1
            } else {
                INF
            };
            if delete < INF && cost[j - 1] + delete < best {
                best = cost[j - 1] + delete;
                best_origin = origin[j - 1];
            }
            cost[j] = best;
            origin[j] = best_origin;
        }
        prev_cost = cost;
        prev_origin = origin;
    }
    (1..=m)
        .filter(|&j| prev_cost[j] <= max_edits)
        .min_by_key(|&j| (prev_cost[j], j))
        .map(|j| {
            let first = prev_origin[j].min(m - 1);
            (report[first].start, report[j - 1].end, prev_cost[j])
        })
}

fn layout_window(obs_words: &[&str], report: &TokenizedReport<'_>) -> Option<(usize, usize)> {
    let n = obs_words.len();
    let words = &report.layout_words;
    if n == 0 || n > words.len() {
        return None;
    }
    (0..=words.len() - n)
        .find(|&s| (0..n).all(|k| report.tokens[words[s + k]].text == obs_words[k]))
        .map(|s| (report.tokens[words[s]].start, report.tokens[words[s + n - 1]].end))
}

fn ordered_subsequence(obs_words: &[&Token], report: &TokenizedReport<'_>) -> Option<(usize, usize)> {
    let mut k = 0;
    let mut first = None;
    let mut last = 0;
    for &i in &report.words {
        if k < obs_words.len() && report.tokens[i].text == obs_words[k].text {
            first.get_or_insert(report.tokens[i].start);
            last = report.tokens[i].end;
            k += 1;
        }
    }
    (k == obs_words.len()).then(|| (first.unwrap_or(0), last))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledObservation {
    /// Feature key or section label the observation was quoted under.
    pub feature: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVerdict {
    pub feature: String,
    pub observation: String,
    pub verdict: GroundingVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGrounding {
    pub index: usize,
    pub verdicts: Vec<ObservationVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub config: GroundingConfig,
    pub total: usize,
    pub counts: BTreeMap<GroundingCategory, usize>,
    pub rates: BTreeMap<GroundingCategory, f64>,
    /// `None` when there are no observations.
    pub exact_match_rate: Option<f64>,
    pub needs_review: usize,
    pub reports: Vec<ReportGrounding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{observations} observation lists but {reports} reports")]
pub struct LengthMismatch {
    pub observations: usize,
    pub reports: usize,
}

/// Classifies every observation of every report and summarizes by category.
pub fn grounding_report<S: AsRef<str>>(
    config: &GroundingConfig,
    observations: &[Vec<LabeledObservation>],
    reports: &[S],
) -> Result<GroundingSummary, LengthMismatch> {
    if observations.len() != reports.len() {
        return Err(LengthMismatch {
            observations: observations.len(),
            reports: reports.len(),
        });
    }
    let mut counts: BTreeMap<GroundingCategory, usize> = GroundingCategory::ALL.into_iter().map(|c| (c, 0)).collect();
    let mut per_report = Vec::with_capacity(reports.len());
    for (index, (obs, report)) in observations.iter().zip(reports).enumerate() {
        let tokenized = TokenizedReport::new(report.as_ref());
        let verdicts: Vec<ObservationVerdict> = obs
            .iter()
            .map(|o| {
                let verdict = classify_with(config, &o.text, &tokenized);
                *counts.entry(verdict.category).or_default() += 1;
                ObservationVerdict {
                    feature: o.feature.clone(),
                    observation: o.text.clone(),
                    verdict,
                }
            })
            .collect();
        per_report.push(ReportGrounding { index, verdicts });
    }
    let total: usize = counts.values().sum();
    let rates = counts
        .iter()
        .map(|(&c, &n)| (c, if total == 0 { 0.0 } else { n as f64 / total as f64 }))
        .collect();
    let needs_review = counts.iter().filter(|(c, _)| c.needs_review()).map(|(_, &n)| n).sum();
    Ok(GroundingSummary {
        config: *config,
        total,
        exact_match_rate: (total > 0).then(|| counts[&GroundingCategory::ExactMatch] as f64 / total as f64),
        counts,
        rates,
        needs_review,
        reports: per_report,
    })
}
