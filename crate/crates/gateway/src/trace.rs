use std::collections::HashMap;
use std::ops::Range;
use std::sync::OnceLock;

use cystscribe_core::schema::last_object_span;
use cystscribe_core::FeatureKey;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptMode;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no structured object found in completion")]
pub struct TraceError {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNote {
    pub observation: Option<String>,
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    /// First section per key, in order of appearance.
    pub per_feature: Vec<(FeatureKey, FeatureNote)>,
    pub final_payload: String,
    /// Non-blank text that belongs to no feature section.
    pub remainder: Vec<String>,
}

impl ReasoningTrace {
    pub fn get(&self, key: FeatureKey) -> Option<&FeatureNote> {
        self.per_feature.iter().find(|(k, _)| *k == key).map(|(_, n)| n)
    }

    pub fn observations(&self) -> impl Iterator<Item = (FeatureKey, &str)> {
        self.per_feature
            .iter()
            .filter_map(|(k, n)| n.observation.as_deref().map(|o| (*k, o)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "key", rename_all = "snake_case")]
pub enum SegmentKind {
    Preamble,
    Section(FeatureKey),
    /// A repeated section for a key that already has one.
    Unparsed,
    Payload,
    Trailer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub trace: Option<ReasoningTrace>,
    /// Text handed to record validation.
    pub candidate: String,
    /// Contiguous cover of the input, in order.
    pub segments: Vec<Segment>,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?m)^[ \t]*(?:#{1,6}[ \t]+)?(?:[-*•][ \t]+|\d+[.)][ \t]+)?(?:\*\*|__)?[`']?([A-Za-z][A-Za-z _\-]*?)[`']?[ \t]*(?:\*\*|__)?[ \t]*:(?:\*\*|__)?",
        )
        .unwrap()
    })
}

fn sublabel_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?mi)^[ \t]*(?:[-*•][ \t]+)?(?:\*\*|__)?(observation|reasoning)[ \t]*(?:\*\*|__)?[ \t]*:\**")
            .unwrap()
    })
}

fn normalize_name(name: &str) -> String {
    name.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn header_names() -> &'static HashMap<String, FeatureKey> {
    static NAMES: OnceLock<HashMap<String, FeatureKey>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut map = HashMap::new();
        for key in FeatureKey::ALL {
            map.insert(normalize_name(key.as_str()), key);
            map.insert(normalize_name(key.display_name()), key);
        }
        map
    })
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn split_note(body: &str) -> FeatureNote {
    let labels: Vec<_> = sublabel_re()
        .captures_iter(body)
        .map(|c| {
            let whole = c.get(0).unwrap();
            (c[1].to_lowercase(), whole.start(), whole.end())
        })
        .collect();
    if labels.is_empty() {
        return FeatureNote {
            observation: None,
            reasoning: non_empty(body),
        };
    }
    let mut observation: Option<String> = None;
    let mut reasoning: Option<String> = None;
    // Text ahead of the first label reads as reasoning.
    let mut lead = non_empty(&body[..labels[0].1]);
    for (i, (label, _, end)) in labels.iter().enumerate() {
        let stop = labels.get(i + 1).map_or(body.len(), |l| l.1);
        let Some(text) = non_empty(&body[*end..stop]) else {
            continue;
        };
        let slot = if label == "observation" {
            &mut observation
        } else {
            &mut reasoning
        };
        match slot {
            Some(prev) => {
                prev.push('\n');
                prev.push_str(&text);
            }
            None => *slot = Some(text),
        }
    }
    if let Some(lead) = lead.take() {
        reasoning = Some(match reasoning {
            Some(r) => format!("{lead}\n{r}"),
            None => lead,
        });
    }
    FeatureNote { observation, reasoning }
}

/// Splits a completion into feature sections and the trailing record.
///
/// In standard mode the whole text is the candidate and no trace is built.
/// Both modes fail when the text holds no balanced `{...}` object.
pub fn parse_trace(text: &str, mode: PromptMode) -> Result<ParsedCompletion, TraceError> {
    let (start, end) = last_object_span(text).ok_or_else(|| TraceError { text: text.to_string() })?;
    let mut segments = Vec::new();
    let push = |segments: &mut Vec<Segment>, kind, start, end| {
        if end > start {
            segments.push(Segment { kind, start, end });
        }
    };

    if mode == PromptMode::Standard {
        push(&mut segments, SegmentKind::Preamble, 0, start);
        push(&mut segments, SegmentKind::Payload, start, end);
        push(&mut segments, SegmentKind::Trailer, end, text.len());
        return Ok(ParsedCompletion {
            trace: None,
            candidate: text.to_string(),
            segments,
        });
    }

    let prefix = &text[..start];
    let names = header_names();
    let headers: Vec<(FeatureKey, usize, usize)> = header_re()
        .captures_iter(prefix)
        .filter_map(|c| {
            let key = *names.get(&normalize_name(&c[1]))?;
            let whole = c.get(0).unwrap();
            Some((key, whole.start(), whole.end()))
        })
        .collect();

    let mut per_feature: Vec<(FeatureKey, FeatureNote)> = Vec::new();
    let mut remainder = Vec::new();
    let first = headers.first().map_or(start, |h| h.1);
    push(&mut segments, SegmentKind::Preamble, 0, first);
    remainder.extend(non_empty(&text[..first]));
    for (i, &(key, hstart, hend)) in headers.iter().enumerate() {
        let stop = headers.get(i + 1).map_or(start, |h| h.1);
        if per_feature.iter().any(|(k, _)| *k == key) {
            push(&mut segments, SegmentKind::Unparsed, hstart, stop);
            remainder.extend(non_empty(&text[hstart..stop]));
        } else {
            push(&mut segments, SegmentKind::Section(key), hstart, stop);
            per_feature.push((key, split_note(&text[hend..stop])));
        }
    }
    push(&mut segments, SegmentKind::Payload, start, end);
    push(&mut segments, SegmentKind::Trailer, end, text.len());
    remainder.extend(non_empty(&text[end..]));

    let payload = text[start..end].to_string();
    Ok(ParsedCompletion {
        trace: Some(ReasoningTrace {
            per_feature,
            final_payload: payload.clone(),
            remainder,
        }),
        candidate: payload,
        segments,
    })
}
