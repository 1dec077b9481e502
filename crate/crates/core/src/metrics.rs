//! Rationale consistency (CS-1, CS-2 and their mean) and task accuracy.
//!
//! Dataset aggregates are computed as exact count ratios, so the same code
//! yields an `f64` for reports or an exact [`ExactScore`](crate::ExactScore)
//! for checks that must not depend on float summation order.

use num_rational::Ratio;
use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BinLabel, ConsistencyVerdict, EvalReport, PairDetail, RationaleRecord};
use crate::parser::{label_from_confidence, ParseFailure};

/// Scalar a metric can be expressed in.
pub trait Score: Num + Clone + PartialOrd + std::fmt::Debug {
    fn from_count(n: usize) -> Self;

    fn to_f64(&self) -> f64;

    fn ratio(numer: usize, denom: usize) -> Self {
        Self::from_count(numer) / Self::from_count(denom)
    }
}

impl Score for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Score for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }

    fn to_f64(&self) -> f64 {
        *self as f64
    }
}

impl Score for Ratio<u64> {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as u64)
    }

    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no outcomes to aggregate")]
    EmptyInput,
    #[error("outcomes mix structured-rationale and score-threshold runs")]
    MixedModes,
}

/// 1 iff the final score sides with the output label. Both bounds are
/// inclusive, so a score of exactly 0.5 agrees with either label.
pub fn cs1(record: &RationaleRecord) -> u8 {
    let score = record.final_score().value();
    let ok = match record.output() {
        BinLabel::Yes => score >= 0.5,
        BinLabel::No => score <= 0.5,
    };
    ok as u8
}

/// 1 iff the intermediate labels, with MAYBE counted toward the predicted
/// side, strictly outnumber the opposing side.
pub fn cs2(record: &RationaleRecord) -> u8 {
    let c = record.label_counts();
    let ok = match record.output() {
        BinLabel::Yes => c.yes + c.maybe > c.no,
        BinLabel::No => c.no + c.maybe > c.yes,
    };
    ok as u8
}

/// (CS-1 + CS-2) / 2, one of 0, 0.5 or 1.
pub fn consistency(record: &RationaleRecord) -> f64 {
    consistency_as::<f64>(record)
}

pub fn consistency_as<S: Score>(record: &RationaleRecord) -> S {
    S::ratio((cs1(record) + cs2(record)) as usize, 2)
}

pub fn verdict(record: &RationaleRecord) -> ConsistencyVerdict {
    ConsistencyVerdict {
        cs1: cs1(record),
        cs2: cs2(record),
        consistency: consistency(record),
        label_counts: record.label_counts(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeMode {
    /// Structured rationale; accuracy and consistency both apply.
    Rationale,
    /// Free-text response scored by thresholding a confidence value.
    ScoreThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeError {
    Parse(ParseFailure),
    Request(String),
}

/// Result of scoring one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pair_id: String,
    pub gold: BinLabel,
    pub mode: OutcomeMode,
    pub predicted: Option<BinLabel>,
    pub score: Option<f64>,
    pub verdict: Option<ConsistencyVerdict>,
    pub error: Option<OutcomeError>,
}

impl PairOutcome {
    pub fn from_rationale(
        pair_id: impl Into<String>,
        gold: BinLabel,
        parsed: Result<&RationaleRecord, ParseFailure>,
    ) -> Self {
        let pair_id = pair_id.into();
        match parsed {
            Ok(record) => PairOutcome {
                pair_id,
                gold,
                mode: OutcomeMode::Rationale,
                predicted: Some(record.output()),
                score: Some(record.final_score().value()),
                verdict: Some(verdict(record)),
                error: None,
            },
            Err(e) => Self::failed(
                pair_id,
                gold,
                OutcomeMode::Rationale,
                OutcomeError::Parse(e),
            ),
        }
    }

    pub fn from_confidence(
        pair_id: impl Into<String>,
        gold: BinLabel,
        score: Result<f64, ParseFailure>,
    ) -> Self {
        let pair_id = pair_id.into();
        match score {
            Ok(s) => PairOutcome {
                pair_id,
                gold,
                mode: OutcomeMode::ScoreThreshold,
                predicted: Some(label_from_confidence(s)),
                score: Some(s),
                verdict: None,
                error: None,
            },
            Err(e) => Self::failed(
                pair_id,
                gold,
                OutcomeMode::ScoreThreshold,
                OutcomeError::Parse(e),
            ),
        }
    }

    pub fn failed(
        pair_id: impl Into<String>,
        gold: BinLabel,
        mode: OutcomeMode,
        error: OutcomeError,
    ) -> Self {
        PairOutcome {
            pair_id: pair_id.into(),
            gold,
            mode,
            predicted: None,
            score: None,
            verdict: None,
            error: Some(error),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == Some(self.gold)
    }

    /// Consistency in half-units (0, 1 or 2); failures contribute 0.
    fn consistency_halves(&self) -> usize {
        self.verdict.map(|v| (v.cs1 + v.cs2) as usize).unwrap_or(0)
    }
}

/// Fraction of outcomes whose prediction equals the gold label. Failed
/// outcomes count as wrong and stay in the denominator.
pub fn accuracy(outcomes: &[PairOutcome]) -> Result<f64, MetricsError> {
    accuracy_as(outcomes)
}

pub fn accuracy_as<S: Score>(outcomes: &[PairOutcome]) -> Result<S, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = outcomes.iter().filter(|o| o.is_correct()).count();
    Ok(S::ratio(correct, outcomes.len()))
}

/// Mean per-record consistency; failures contribute 0.
pub fn mean_consistency_as<S: Score>(outcomes: &[PairOutcome]) -> Result<S, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let halves: usize = outcomes.iter().map(PairOutcome::consistency_halves).sum();
    Ok(S::ratio(halves, 2 * outcomes.len()))
}

/// Aggregates outcomes into a report. Consistency is reported only when
/// every outcome comes from a structured-rationale run.
pub fn dataset_report(outcomes: &[PairOutcome], tag: &str) -> Result<EvalReport, MetricsError> {
    let first = outcomes.first().ok_or(MetricsError::EmptyInput)?;
    if outcomes.iter().any(|o| o.mode != first.mode) {
        return Err(MetricsError::MixedModes);
    }
    let mean_consistency = match first.mode {
        OutcomeMode::Rationale => Some(mean_consistency_as::<f64>(outcomes)?),
        OutcomeMode::ScoreThreshold => None,
    };
    let n_parse_failures = outcomes
        .iter()
        .filter(|o| matches!(o.error, Some(OutcomeError::Parse(_))))
        .count();
    let n_request_failures = outcomes
        .iter()
        .filter(|o| matches!(o.error, Some(OutcomeError::Request(_))))
        .count();
    let per_pair = outcomes
        .iter()
        .map(|o| PairDetail {
            pair_id: o.pair_id.clone(),
            gold: o.gold,
            predicted: o.predicted,
            score: o.score,
            verdict: o.verdict,
            parse_error: match &o.error {
                Some(OutcomeError::Parse(p)) => Some(p.to_string()),
                _ => None,
            },
            request_error: match &o.error {
                Some(OutcomeError::Request(r)) => Some(r.clone()),
                _ => None,
            },
        })
        .collect();
    Ok(EvalReport {
        dataset_tag: tag.to_string(),
        n_total: outcomes.len(),
        n_parse_failures,
        n_request_failures,
        accuracy: accuracy(outcomes)?,
        mean_consistency,
        per_pair,
        run_spec: None,
    })
}
