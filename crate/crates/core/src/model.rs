//! Shared domain types for document pairs, structured rationales and their
//! verdicts. Nothing in here performs I/O.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::parser::extract_intermediate_label;

/// Gold or predicted authorship label. `Yes` means same author.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinLabel {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl BinLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinLabel::Yes => "YES",
            BinLabel::No => "NO",
        }
    }
}

impl fmt::Display for BinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinLabel {
    type Err = ModelError;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "YES" => Ok(BinLabel::Yes),
            "NO" => Ok(BinLabel::No),
            _ => Err(ModelError::BadLabel(s.to_string())),
        }
    }
}

/// Per-feature intermediate verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriLabel {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
    #[serde(rename = "MAYBE")]
    Maybe,
}

impl TriLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TriLabel::Yes => "YES",
            TriLabel::No => "NO",
            TriLabel::Maybe => "MAYBE",
        }
    }
}

impl fmt::Display for TriLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The eight linguistic features a rationale must cover, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKey {
    PunctuationStyle,
    SpecialCharactersCapitalization,
    AcronymsAbbreviations,
    WritingStyle,
    ExpressionsIdioms,
    ToneMood,
    SentenceStructure,
    OtherAspect,
}

/// Dictionary key holding the confidence score.
pub const FINAL_SCORE_KEY: &str = "final score";
/// Dictionary key holding the YES/NO answer.
pub const OUTPUT_KEY: &str = "output";

impl FeatureKey {
    pub const ALL: [FeatureKey; 8] = [
        FeatureKey::PunctuationStyle,
        FeatureKey::SpecialCharactersCapitalization,
        FeatureKey::AcronymsAbbreviations,
        FeatureKey::WritingStyle,
        FeatureKey::ExpressionsIdioms,
        FeatureKey::ToneMood,
        FeatureKey::SentenceStructure,
        FeatureKey::OtherAspect,
    ];

    /// Dictionary key, spelled exactly as the prompt asks for it.
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKey::PunctuationStyle => "punctuation style",
            FeatureKey::SpecialCharactersCapitalization => {
                "special characters style, capitalization style"
            }
            FeatureKey::AcronymsAbbreviations => "acronyms and abbreviations",
            FeatureKey::WritingStyle => "writing style",
            FeatureKey::ExpressionsIdioms => "expressions and Idioms",
            FeatureKey::ToneMood => "tone and mood",
            FeatureKey::SentenceStructure => "sentence structure",
            FeatureKey::OtherAspect => "any other relevant aspect",
        }
    }

    /// Text following the key name on the numbered variable list of the
    /// prompt. Spacing is reproduced as published, including the missing
    /// space before the acronyms example.
    pub(crate) fn prompt_hint(self) -> &'static str {
        match self {
            FeatureKey::PunctuationStyle => {
                " (e.g. hyphen, brackets, colon, comma, parenthesis, quotation mark)"
            }
            FeatureKey::SpecialCharactersCapitalization => {
                " (e.g. Continuous capitalization, capitalizing certain words)"
            }
            FeatureKey::AcronymsAbbreviations => {
                "(e.g. Usage of acronyms such as OMG, Abbreviations without punctuation marks such as Mr Rochester vs. Mr. Rochester,Unusual abbreviations such as def vs. definitely)"
            }
            _ => "",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Exact match on the canonical spelling.
    pub fn from_exact(key: &str) -> Option<FeatureKey> {
        FeatureKey::ALL.into_iter().find(|k| k.as_str() == key)
    }

    /// Match after lowercasing, trimming and collapsing inner whitespace.
    pub fn from_loose(key: &str) -> Option<FeatureKey> {
        let wanted = normalize_key(key);
        FeatureKey::ALL
            .into_iter()
            .find(|k| normalize_key(k.as_str()) == wanted)
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for FeatureKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for FeatureKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        FeatureKey::from_exact(&s)
            .or_else(|| FeatureKey::from_loose(&s))
            .ok_or_else(|| serde::de::Error::custom(format!("unknown feature key {s:?}")))
    }
}

pub(crate) fn normalize_key(key: &str) -> String {
    key.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("label {0:?} is neither YES nor NO")]
    BadLabel(String),
    #[error("final score {0:?} is not a decimal number")]
    ScoreNotNumeric(String),
    #[error("final score {0} outside [0, 1]")]
    ScoreOutOfRange(String),
    #[error("document pair {0}: {1} is empty")]
    EmptyText(String, &'static str),
    #[error("feature {0}: analysis text is empty")]
    EmptyAnalysis(FeatureKey),
    #[error("feature {0}: no concluding YES/NO/MAYBE in analysis text")]
    MissingIntermediate(FeatureKey),
    #[error("expected features in canonical order, found {found} at position {position}")]
    FeatureOrder { position: usize, found: FeatureKey },
    #[error("expected 8 feature analyses, got {0}")]
    FeatureCount(usize),
}

/// Two texts and the gold same/different-author label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentPair {
    pub pair_id: String,
    pub text1: String,
    pub text2: String,
    pub gold: BinLabel,
    #[serde(default)]
    pub dataset_tag: String,
}

impl DocumentPair {
    pub fn new(
        pair_id: impl Into<String>,
        text1: impl Into<String>,
        text2: impl Into<String>,
        gold: BinLabel,
        dataset_tag: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let pair = DocumentPair {
            pair_id: pair_id.into(),
            text1: text1.into(),
            text2: text2.into(),
            gold,
            dataset_tag: dataset_tag.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text1.trim().is_empty() {
            return Err(ModelError::EmptyText(self.pair_id.clone(), "text1"));
        }
        if self.text2.trim().is_empty() {
            return Err(ModelError::EmptyText(self.pair_id.clone(), "text2"));
        }
        Ok(())
    }
}

/// A confidence score in [0, 1] together with the literal it was read from.
///
/// Keeping the literal means `"0.375"` is written back as `0.375` and never
/// as a re-rendered float.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalScore {
    value: f64,
    literal: String,
}

impl FinalScore {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn literal(&self) -> &str {
        &self.literal
    }

    /// Build from a finite value using its shortest round-trip decimal form.
    pub fn from_f64(value: f64) -> Result<Self, ModelError> {
        let literal = format!("{value}");
        Self::parse(&literal)
    }
}

impl FromStr for FinalScore {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl FinalScore {
    /// Accepts plain decimal literals (optionally with exponent). Rejects
    /// `nan`, `inf`, hex and anything with trailing junk.
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let literal = s.trim();
        if !is_decimal_literal(literal) {
            return Err(ModelError::ScoreNotNumeric(s.to_string()));
        }
        let value: f64 = literal
            .parse()
            .map_err(|_| ModelError::ScoreNotNumeric(s.to_string()))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(ModelError::ScoreOutOfRange(literal.to_string()));
        }
        Ok(FinalScore {
            value,
            literal: literal.to_string(),
        })
    }
}

fn is_decimal_literal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let mut parts = mantissa.splitn(2, '.');
    let int_part = parts.next().unwrap_or("");
    let frac_part = parts.next();
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    let mantissa_ok = match frac_part {
        Some(frac) => digits(int_part) && digits(frac) && !(int_part.is_empty() && frac.is_empty()),
        None => !int_part.is_empty() && digits(int_part),
    };
    let exponent_ok = match exponent {
        None => true,
        Some(e) => {
            let e = e.strip_prefix(['+', '-']).unwrap_or(e);
            !e.is_empty() && digits(e)
        }
    };
    mantissa_ok && exponent_ok
}

/// One feature's analysis. The intermediate label is always the one
/// extracted from `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeatureAnalysis {
    pub key: FeatureKey,
    pub text: String,
    pub intermediate: TriLabel,
}

impl FeatureAnalysis {
    pub fn new(key: FeatureKey, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyAnalysis(key));
        }
        let intermediate =
            extract_intermediate_label(&text).ok_or(ModelError::MissingIntermediate(key))?;
        Ok(FeatureAnalysis {
            key,
            text,
            intermediate,
        })
    }
}

/// Counts of intermediate labels over the eight features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub yes: usize,
    pub no: usize,
    pub maybe: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.yes + self.no + self.maybe
    }
}

/// A fully validated structured rationale.
///
/// Equality ignores `raw_text`.
#[derive(Debug, Clone)]
pub struct RationaleRecord {
    pair_id: String,
    features: Vec<FeatureAnalysis>,
    final_score: FinalScore,
    output: BinLabel,
    raw_text: String,
}

impl PartialEq for RationaleRecord {
    fn eq(&self, other: &Self) -> bool {
        self.pair_id == other.pair_id
            && self.features == other.features
            && self.final_score == other.final_score
            && self.output == other.output
    }
}

impl RationaleRecord {
    pub fn new(
        pair_id: impl Into<String>,
        features: Vec<FeatureAnalysis>,
        final_score: FinalScore,
        output: BinLabel,
    ) -> Result<Self, ModelError> {
        if features.len() != FeatureKey::ALL.len() {
            return Err(ModelError::FeatureCount(features.len()));
        }
        for (position, (analysis, expected)) in features.iter().zip(FeatureKey::ALL).enumerate() {
            if analysis.key != expected {
                return Err(ModelError::FeatureOrder {
                    position,
                    found: analysis.key,
                });
            }
        }
        Ok(RationaleRecord {
            pair_id: pair_id.into(),
            features,
            final_score,
            output,
            raw_text: String::new(),
        })
    }

    pub fn with_raw_text(mut self, raw: impl Into<String>) -> Self {
        self.raw_text = raw.into();
        self
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    pub fn features(&self) -> &[FeatureAnalysis] {
        &self.features
    }

    pub fn feature(&self, key: FeatureKey) -> &FeatureAnalysis {
        &self.features[key.index()]
    }

    pub fn final_score(&self) -> &FinalScore {
        &self.final_score
    }

    pub fn output(&self) -> BinLabel {
        self.output
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn intermediates(&self) -> Vec<TriLabel> {
        self.features.iter().map(|f| f.intermediate).collect()
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for f in &self.features {
            match f.intermediate {
                TriLabel::Yes => counts.yes += 1,
                TriLabel::No => counts.no += 1,
                TriLabel::Maybe => counts.maybe += 1,
            }
        }
        counts
    }

    /// Canonical JSON rendering: the ten keys in prompt order, one per line,
    /// the score written as its original literal.
    pub fn to_canonical_json(&self) -> String {
        let mut out = String::from("{\n");
        for f in &self.features {
            out.push_str("  ");
            out.push_str(&json_string(f.key.as_str()));
            out.push_str(": ");
            out.push_str(&json_string(&f.text));
            out.push_str(",\n");
        }
        out.push_str(&format!(
            "  {}: {},\n  {}: {}\n}}",
            json_string(FINAL_SCORE_KEY),
            self.final_score.literal(),
            json_string(OUTPUT_KEY),
            json_string(self.output.as_str())
        ));
        out
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

impl Serialize for RationaleRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("RationaleRecord", 5)?;
        st.serialize_field("pair_id", &self.pair_id)?;
        st.serialize_field("features", &self.features)?;
        st.serialize_field("final_score", self.final_score.literal())?;
        st.serialize_field("output", &self.output)?;
        st.serialize_field("raw_text", &self.raw_text)?;
        st.end()
    }
}

#[derive(Deserialize)]
struct StoredFeature {
    key: FeatureKey,
    text: String,
}

#[derive(Deserialize)]
struct StoredRecord {
    pair_id: String,
    features: Vec<StoredFeature>,
    final_score: String,
    output: BinLabel,
    #[serde(default)]
    raw_text: String,
}

/// Re-validates on the way in; intermediate labels are re-derived from the
/// feature texts.
impl<'de> Deserialize<'de> for RationaleRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let stored = StoredRecord::deserialize(deserializer)?;
        let features = stored
            .features
            .into_iter()
            .map(|f| FeatureAnalysis::new(f.key, f.text))
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        let score = FinalScore::parse(&stored.final_score).map_err(D::Error::custom)?;
        RationaleRecord::new(stored.pair_id, features, score, stored.output)
            .map(|r| r.with_raw_text(stored.raw_text))
            .map_err(D::Error::custom)
    }
}

/// CS-1, CS-2 and their mean for one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub cs1: u8,
    pub cs2: u8,
    pub consistency: f64,
    pub label_counts: LabelCounts,
}

impl ConsistencyVerdict {
    pub fn is_consistent(&self) -> bool {
        self.cs1 == 1 && self.cs2 == 1
    }
}

/// A filtered prompt/response pair ready for fine-tuning export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub pair_id: String,
    pub prompt_text: String,
    pub response_text: String,
    pub gold: BinLabel,
}

/// Per-pair line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    pub pair_id: String,
    pub gold: BinLabel,
    pub predicted: Option<BinLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub verdict: Option<ConsistencyVerdict>,
    pub parse_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_error: Option<String>,
}

/// Dataset-level evaluation summary.
///
/// Unparseable responses and failed requests stay in the denominator and
/// score zero on both metrics. `mean_consistency` is `None` for
/// score-thresholding baselines, which have no checkable rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub n_total: usize,
    pub n_parse_failures: usize,
    #[serde(default)]
    pub n_request_failures: usize,
    pub accuracy: f64,
    pub mean_consistency: Option<f64>,
    pub per_pair: Vec<PairDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_spec: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_keys_match_prompt_spelling() {
        let keys: Vec<_> = FeatureKey::ALL.iter().map(|k| k.as_str()).collect();
        assert_eq!(
            keys,
            [
                "punctuation style",
                "special characters style, capitalization style",
                "acronyms and abbreviations",
                "writing style",
                "expressions and Idioms",
                "tone and mood",
                "sentence structure",
                "any other relevant aspect",
            ]
        );
        for (i, k) in FeatureKey::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
        }
    }

    #[test]
    fn loose_key_matching() {
        assert_eq!(
            FeatureKey::from_loose("  Expressions and   idioms "),
            Some(FeatureKey::ExpressionsIdioms)
        );
        assert_eq!(FeatureKey::from_exact("expressions and idioms"), None);
        assert_eq!(FeatureKey::from_loose("idioms"), None);
    }

    #[test]
    fn final_score_keeps_literal() {
        let s = FinalScore::parse(" 0.375 ").unwrap();
        assert_eq!(s.literal(), "0.375");
        assert_eq!(s.value(), 0.375);
        assert_eq!(FinalScore::parse("1").unwrap().value(), 1.0);
        assert_eq!(FinalScore::parse(".5").unwrap().value(), 0.5);
        assert_eq!(FinalScore::parse("5e-1").unwrap().value(), 0.5);
        assert!(matches!(
            FinalScore::parse("1.2"),
            Err(ModelError::ScoreOutOfRange(_))
        ));
        for bad in ["", "nan", "inf", "0x1", "0.5.1", ".", "1e", "high"] {
            assert!(
                matches!(FinalScore::parse(bad), Err(ModelError::ScoreNotNumeric(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn feature_analysis_requires_label() {
        let f = FeatureAnalysis::new(FeatureKey::WritingStyle, "Both formal. YES").unwrap();
        assert_eq!(f.intermediate, TriLabel::Yes);
        assert_eq!(
            FeatureAnalysis::new(FeatureKey::WritingStyle, "Both formal."),
            Err(ModelError::MissingIntermediate(FeatureKey::WritingStyle))
        );
        assert_eq!(
            FeatureAnalysis::new(FeatureKey::WritingStyle, "  "),
            Err(ModelError::EmptyAnalysis(FeatureKey::WritingStyle))
        );
    }

    #[test]
    fn record_rejects_wrong_order() {
        let mut features: Vec<_> = FeatureKey::ALL
            .iter()
            .map(|&k| FeatureAnalysis::new(k, "MAYBE").unwrap())
            .collect();
        features.swap(0, 1);
        let err = RationaleRecord::new(
            "p",
            features,
            FinalScore::parse("0.5").unwrap(),
            BinLabel::Yes,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::FeatureOrder { position: 0, .. }));
    }

    #[test]
    fn equality_ignores_raw_text() {
        let features: Vec<_> = FeatureKey::ALL
            .iter()
            .map(|&k| FeatureAnalysis::new(k, "NO").unwrap())
            .collect();
        let a = RationaleRecord::new("p", features, FinalScore::parse("0").unwrap(), BinLabel::No)
            .unwrap();
        let b = a.clone().with_raw_text("something else");
        assert_eq!(a, b);
        assert_eq!(
            a.label_counts(),
            LabelCounts {
                yes: 0,
                no: 8,
                maybe: 0
            }
        );
    }

    #[test]
    fn document_pair_rejects_empty_text() {
        assert!(DocumentPair::new("p", "a", " ", BinLabel::Yes, "t").is_err());
        assert!(DocumentPair::new("p", "a", "b", BinLabel::Yes, "t").is_ok());
    }
}
