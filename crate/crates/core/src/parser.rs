//! Turns raw model responses into validated [`RationaleRecord`]s, or into a
//! confidence score for the free-text baselines.
//!
//! Structured responses are read in two passes. Strict JSON is tried first;
//! if the extracted block is not valid JSON, a relaxed reader looks for the
//! ten known dictionary keys anchored at entry boundaries and takes the text
//! up to the next known key as the value. The relaxed pass covers
//! Python-dict quoting (`'key': 'value'`) and unquoted, typeset-style
//! listings. Whatever the reader, validation is identical.

use std::collections::HashMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{
    BinLabel, FeatureAnalysis, FeatureKey, FinalScore, RationaleRecord, TriLabel, FINAL_SCORE_KEY,
    OUTPUT_KEY,
};

/// Scores at or above this value threshold to YES.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseFailureKind {
    NoJsonObject,
    InvalidJson,
    MissingKey(String),
    ExtraStructure,
    NoIntermediateLabel(FeatureKey),
    BadFinalScore,
    BadOutputLabel,
    /// Free-text baseline response without any usable score literal.
    NoScoreFound,
}

impl fmt::Display for ParseFailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseFailureKind::NoJsonObject => f.write_str("NoJsonObject"),
            ParseFailureKind::InvalidJson => f.write_str("InvalidJson"),
            ParseFailureKind::MissingKey(k) => write!(f, "MissingKey({k})"),
            ParseFailureKind::ExtraStructure => f.write_str("ExtraStructure"),
            ParseFailureKind::NoIntermediateLabel(k) => write!(f, "NoIntermediateLabel({k})"),
            ParseFailureKind::BadFinalScore => f.write_str("BadFinalScore"),
            ParseFailureKind::BadOutputLabel => f.write_str("BadOutputLabel"),
            ParseFailureKind::NoScoreFound => f.write_str("NoScoreFound"),
        }
    }
}

/// First failure in canonical key order; `detail` lists every failure found.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub detail: String,
}

impl ParseFailure {
    fn new(kind: ParseFailureKind, detail: impl Into<String>) -> Self {
        ParseFailure {
            kind,
            detail: detail.into(),
        }
    }
}

/// Returns the first balanced `{...}` block after dropping code-fence lines.
pub fn extract_json_block(raw: &str) -> Result<String, ParseFailure> {
    let unfenced: String = raw
        .lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let start = unfenced
        .find('{')
        .ok_or_else(|| ParseFailure::new(ParseFailureKind::NoJsonObject, "no '{' in response"))?;
    let tail = &unfenced[start..];
    balanced_end(tail, true)
        .or_else(|| balanced_end(tail, false))
        .map(|end| tail[..end].to_string())
        .ok_or_else(|| {
            ParseFailure::new(
                ParseFailureKind::NoJsonObject,
                "opening '{' is never balanced",
            )
        })
}

/// Byte offset just past the brace closing the one at `s[0]`. With
/// `string_aware`, braces inside double-quoted strings are ignored.
fn balanced_end(s: &str, string_aware: bool) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' if string_aware => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

static LABEL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").expect("valid regex"));

/// The last standalone YES/NO/MAYBE (any case) in `feature_text`.
pub fn extract_intermediate_label(feature_text: &str) -> Option<TriLabel> {
    let last = LABEL_RE.find_iter(feature_text).last()?;
    match last.as_str().to_ascii_uppercase().as_str() {
        "YES" => Some(TriLabel::Yes),
        "NO" => Some(TriLabel::No),
        _ => Some(TriLabel::Maybe),
    }
}

static NUMBER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[0-9]*\.?[0-9]+").expect("valid regex"));

/// Confidence score of a free-text response: the last decimal literal in
/// [0, 1] (`0.7`, `.25`, `1.0`). A bare `0` or `1` is only used when the
/// text has no such decimal literal, so list numbering and "Text 1" do not
/// shadow a stated score.
pub fn extract_confidence_score(raw: &str) -> Result<f64, ParseFailure> {
    let mut last_decimal = None;
    let mut last_integer = None;
    for m in NUMBER_RE.find_iter(raw) {
        let before = raw[..m.start()].chars().next_back();
        let after = raw[m.end()..].chars().next();
        if before.is_some_and(|c| c.is_alphanumeric() || c == '.')
            || after.is_some_and(|c| c.is_alphanumeric() || c == '%')
        {
            continue;
        }
        let token = m.as_str();
        let Ok(value) = token.parse::<f64>() else {
            continue;
        };
        if !(0.0..=1.0).contains(&value) {
            continue;
        }
        if token.contains('.') {
            last_decimal = Some(value);
        } else if token == "0" || token == "1" {
            last_integer = Some(value);
        }
    }
    last_decimal.or(last_integer).ok_or_else(|| {
        ParseFailure::new(
            ParseFailureKind::NoScoreFound,
            "no decimal number in [0, 1] found",
        )
    })
}

/// Maps a baseline confidence score to a label; 0.5 itself maps to YES.
pub fn label_from_confidence(score: f64) -> BinLabel {
    if score >= CONFIDENCE_THRESHOLD {
        BinLabel::Yes
    } else {
        BinLabel::No
    }
}

/// Top-level object entries in document order, duplicates included.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = Entries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Feature(FeatureKey),
    FinalScore,
    Output,
}

impl Slot {
    fn canonical() -> impl Iterator<Item = Slot> {
        FeatureKey::ALL
            .into_iter()
            .map(Slot::Feature)
            .chain([Slot::FinalScore, Slot::Output])
    }

    fn key_str(self) -> &'static str {
        match self {
            Slot::Feature(k) => k.as_str(),
            Slot::FinalScore => FINAL_SCORE_KEY,
            Slot::Output => OUTPUT_KEY,
        }
    }

    fn exact(key: &str) -> Option<Slot> {
        Slot::canonical().find(|s| s.key_str() == key)
    }

    fn loose(key: &str) -> Option<Slot> {
        let wanted = crate::model::normalize_key(key);
        Slot::canonical().find(|s| crate::model::normalize_key(s.key_str()) == wanted)
    }
}

static RELAXED_KEY_RE: LazyLock<Regex> = LazyLock::new(|| {
    let alternatives: Vec<String> = Slot::canonical()
        .map(|s| {
            s.key_str()
                .split_whitespace()
                .map(regex::escape)
                .collect::<Vec<_>>()
                .join(r"\s+")
        })
        .collect();
    let pattern = format!(
        r#"(?i)(?:\A|[{{,\n])[ \t\r\n]*["']?({})["']?[ \t]*:"#,
        alternatives.join("|")
    );
    Regex::new(&pattern).expect("valid regex")
});

/// Key-anchored reading of a block that is not valid JSON.
fn relaxed_entries(block: &str) -> Option<Vec<(String, Value)>> {
    let inner = block
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .unwrap_or(block);
    let matches: Vec<_> = RELAXED_KEY_RE.captures_iter(inner).collect();
    if matches.is_empty() {
        return None;
    }
    let mut entries = Vec::with_capacity(matches.len());
    for (i, caps) in matches.iter().enumerate() {
        let key = caps.get(1).expect("group 1 always participates").as_str();
        let value_start = caps.get(0).expect("whole match").end();
        let value_end = matches
            .get(i + 1)
            .map(|next| next.get(0).expect("whole match").start())
            .unwrap_or(inner.len());
        let value = clean_relaxed_value(&inner[value_start..value_end]);
        entries.push((key.to_string(), Value::String(value)));
    }
    Some(entries)
}

fn clean_relaxed_value(raw: &str) -> String {
    let mut v = raw.trim();
    v = v.strip_suffix(',').unwrap_or(v).trim();
    for quote in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(quote) && v.ends_with(quote) {
            v = &v[1..v.len() - 1];
            break;
        }
    }
    v.replace("\\'", "'")
        .replace("\\\"", "\"")
        .replace("\\n", "\n")
}

fn read_entries(block: &str) -> Result<Vec<(String, Value)>, ParseFailure> {
    match serde_json::from_str::<Entries>(block) {
        Ok(entries) => Ok(entries.0),
        Err(strict_err) => relaxed_entries(block).ok_or_else(|| {
            ParseFailure::new(ParseFailureKind::InvalidJson, strict_err.to_string())
        }),
    }
}

/// Validates a raw response against the ten-key rationale format.
pub fn parse_rationale(raw: &str, pair_id: &str) -> Result<RationaleRecord, ParseFailure> {
    let block = extract_json_block(raw)?;
    let entries = read_entries(&block)?;

    // Exact spellings outrank loose matches; within a tier the last wins.
    let mut slots: HashMap<Slot, (bool, Value)> = HashMap::new();
    let mut nested_hint = None;
    for (key, value) in entries {
        let (slot, exact) = match Slot::exact(&key) {
            Some(s) => (s, true),
            None => match Slot::loose(&key) {
                Some(s) => (s, false),
                None => {
                    if let Value::Object(inner) = &value {
                        if inner.keys().any(|k| Slot::loose(k).is_some()) {
                            nested_hint = Some(key.clone());
                        }
                    }
                    log::debug!("pair {pair_id}: ignoring unknown key {key:?}");
                    continue;
                }
            },
        };
        match slots.get(&slot) {
            Some((prev_exact, _)) if *prev_exact && !exact => continue,
            Some(_) => log::warn!("pair {pair_id}: duplicate key {key:?}, keeping last value"),
            None => {}
        }
        slots.insert(slot, (exact, value));
    }

    if slots.is_empty() {
        if let Some(outer) = nested_hint {
            return Err(ParseFailure::new(
                ParseFailureKind::ExtraStructure,
                format!("required keys are nested under {outer:?}"),
            ));
        }
    }

    let mut failures: Vec<ParseFailure> = Vec::new();
    let mut features = Vec::with_capacity(FeatureKey::ALL.len());
    let mut final_score = None;
    let mut output = None;

    for slot in Slot::canonical() {
        let Some((_, value)) = slots.get(&slot) else {
            failures.push(ParseFailure::new(
                ParseFailureKind::MissingKey(slot.key_str().to_string()),
                format!("missing key {:?}", slot.key_str()),
            ));
            continue;
        };
        match slot {
            Slot::Feature(key) => match value {
                Value::String(text) => match FeatureAnalysis::new(key, text.as_str()) {
                    Ok(analysis) => features.push(analysis),
                    Err(e) => failures.push(ParseFailure::new(
                        ParseFailureKind::NoIntermediateLabel(key),
                        e.to_string(),
                    )),
                },
                other => failures.push(ParseFailure::new(
                    ParseFailureKind::ExtraStructure,
                    format!(
                        "{:?} must hold text, found {}",
                        key.as_str(),
                        kind_of(other)
                    ),
                )),
            },
            Slot::FinalScore => {
                let literal = match value {
                    Value::Number(n) => Some(n.to_string()),
                    Value::String(s) => Some(s.clone()),
                    _ => None,
                };
                match literal.map(|l| FinalScore::parse(&l)) {
                    Some(Ok(score)) => final_score = Some(score),
                    Some(Err(e)) => failures.push(ParseFailure::new(
                        ParseFailureKind::BadFinalScore,
                        e.to_string(),
                    )),
                    None => failures.push(ParseFailure::new(
                        ParseFailureKind::BadFinalScore,
                        format!("final score is {}", kind_of(value)),
                    )),
                }
            }
            Slot::Output => {
                let parsed = match value {
                    Value::String(s) => s
                        .trim()
                        .trim_end_matches('.')
                        .parse::<BinLabel>()
                        .map_err(|e| e.to_string()),
                    other => Err(format!("output is {}", kind_of(other))),
                };
                match parsed {
                    Ok(label) => output = Some(label),
                    Err(detail) => {
                        failures.push(ParseFailure::new(ParseFailureKind::BadOutputLabel, detail))
                    }
                }
            }
        }
    }

    if let Some(first) = failures.first() {
        let detail = failures
            .iter()
            .map(|f| f.detail.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ParseFailure::new(first.kind.clone(), detail));
    }

    let record = RationaleRecord::new(
        pair_id,
        features,
        final_score.expect("checked above"),
        output.expect("checked above"),
    )
    .map_err(|e| ParseFailure::new(ParseFailureKind::ExtraStructure, e.to_string()))?;
    Ok(record.with_raw_text(raw))
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}
